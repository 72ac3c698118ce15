//! Multi-head scaled dot-product attention over gathered token sets.

use rand::Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Running instrumentation for attention cost and optional map capture.
#[derive(Debug, Default, Clone)]
pub struct AttnStats {
    /// Total stored softmax entries (rows x cols summed over heads and calls).
    pub score_entries: u64,
    pub capture: bool,
    pub captured: Vec<AttnMap>,
}

/// One captured attention map: mean over heads of the weights that the
/// window's center query places on each key slot.
#[derive(Debug, Clone)]
pub struct AttnMap {
    pub layer: usize,
    pub window: usize,
    /// (row, col) grid cell per key, for painting back into the window rect.
    pub key_cells: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
}

pub struct MultiHead {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
    pub channels: usize,
}

impl MultiHead {
    pub fn register(
        store: &mut ParamStore,
        channels: usize,
        heads: usize,
        rng: &mut impl Rng,
        prefix: &str,
    ) -> Result<Self> {
        if channels % heads != 0 {
            return Err(Error::Contract(format!(
                "channels {channels} not divisible by heads {heads}"
            )));
        }
        let mut proj = |store: &mut ParamStore, name: &str| -> Result<(ParamId, ParamId)> {
            let w = store.register(
                &format!("{prefix}.{name}.weight"),
                init::linear_normal(rng, &[channels, channels], channels),
            )?;
            let b = store.register(&format!("{prefix}.{name}.bias"), Tensor::zeros(&[channels]))?;
            Ok((w, b))
        };
        let (wq, bq) = proj(store, "q")?;
        let (wk, bk) = proj(store, "k")?;
        let (wv, bv) = proj(store, "v")?;
        let (wo, bo) = proj(store, "out")?;
        Ok(MultiHead {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            heads,
            channels,
        })
    }

    /// Attention of `q_in: [nq,c]` over `k_in/v_in: [nk,c]`. Returns the
    /// projected output and the fused attention node, whose softmax weights
    /// can be read back with [`Graph::attention_probs`].
    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        stats: &mut AttnStats,
    ) -> Result<(Var, Var)> {
        let nq = g.value(q_in).dim(0);
        let nk = g.value(k_in).dim(0);

        let wq = g.param(store, self.wq)?;
        let bq = g.param(store, self.bq)?;
        let wk = g.param(store, self.wk)?;
        let bk = g.param(store, self.bk)?;
        let wv = g.param(store, self.wv)?;
        let bv = g.param(store, self.bv)?;

        let q = g.matmul(q_in, wq)?;
        let q = g.bias_add(q, bq)?;
        let k = g.matmul(k_in, wk)?;
        let k = g.bias_add(k, bk)?;
        let v = g.matmul(v_in, wv)?;
        let v = g.bias_add(v, bv)?;

        let attn = g.multi_head_attn(q, k, v, self.heads)?;
        stats.score_entries += (self.heads * nq * nk) as u64;

        let wo = g.param(store, self.wo)?;
        let bo = g.param(store, self.bo)?;
        let out = g.matmul(attn, wo)?;
        let out = g.bias_add(out, bo)?;
        Ok((out, attn))
    }
}

/// Mean over heads of the attention weights that the middle query places on
/// each key, read from a fused attention node.
pub fn center_row_mean(g: &Graph, attn: Var) -> Vec<f64> {
    let Some(probs) = g.attention_probs(attn) else {
        return Vec::new();
    };
    let (heads, nq, nk) = (probs.dim(0), probs.dim(1), probs.dim(2));
    let row = nq / 2;
    let mut out = vec![0.0; nk];
    for h in 0..heads {
        let base = (h * nq + row) * nk;
        for (o, v) in out.iter_mut().zip(&probs.data()[base..base + nk]) {
            *o += v / heads as f64;
        }
    }
    out
}
