//! Transformer encoder with progressive rectangle-window self-attention.

use rand::Rng;

use super::mha::{center_row_mean, AttnMap, AttnStats, MultiHead};
use super::partition::WindowPartition;
use crate::config::WindowConfig;
use crate::error::Result;
use crate::init;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub(crate) struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn register(
        store: &mut ParamStore,
        channels: usize,
        rng: &mut impl Rng,
        prefix: &str,
    ) -> Result<Self> {
        let hidden = 2 * channels;
        Ok(FeedForward {
            w1: store.register(
                &format!("{prefix}.w1"),
                init::he_normal(rng, &[channels, hidden], channels),
            )?,
            b1: store.register(&format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?,
            w2: store.register(
                &format!("{prefix}.w2"),
                init::linear_normal(rng, &[hidden, channels], hidden),
            )?,
            b2: store.register(&format!("{prefix}.b2"), Tensor::zeros(&[channels]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w1 = g.param(store, self.w1)?;
        let b1 = g.param(store, self.b1)?;
        let w2 = g.param(store, self.w2)?;
        let b2 = g.param(store, self.b2)?;
        let h = g.matmul(x, w1)?;
        let h = g.bias_add(h, b1)?;
        let h = g.relu(h)?;
        let out = g.matmul(h, w2)?;
        g.bias_add(out, b2)
    }
}

pub(crate) struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn register(store: &mut ParamStore, channels: usize, prefix: &str) -> Result<Self> {
        Ok(LayerNormParams {
            gain: store.register(&format!("{prefix}.gain"), Tensor::full(&[channels], 1.0))?,
            bias: store.register(&format!("{prefix}.bias"), Tensor::zeros(&[channels]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain)?;
        let bias = g.param(store, self.bias)?;
        g.layernorm(x, gain, bias, 1e-5)
    }
}

struct EncoderLayer {
    attn: MultiHead,
    ln1: LayerNormParams,
    ffn: FeedForward,
    ln2: LayerNormParams,
}

pub struct Encoder {
    layers: Vec<EncoderLayer>,
    windows: WindowConfig,
}

impl Encoder {
    pub fn register(
        store: &mut ParamStore,
        channels: usize,
        heads: usize,
        windows: WindowConfig,
        rng: &mut impl Rng,
        prefix: &str,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for l in 0..windows.encoder_layers {
            let p = format!("{prefix}.layer{l}");
            layers.push(EncoderLayer {
                attn: MultiHead::register(store, channels, heads, rng, &format!("{p}.attn"))?,
                ln1: LayerNormParams::register(store, channels, &format!("{p}.ln1"))?,
                ffn: FeedForward::register(store, channels, rng, &format!("{p}.ffn"))?,
                ln2: LayerNormParams::register(store, channels, &format!("{p}.ln2"))?,
            });
        }
        Ok(Encoder { layers, windows })
    }

    /// Encode an `[h,w,c]` feature grid with the positional grid `pos`
    /// (shape `[h*w, c]`) re-added to queries and keys at every layer.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feat: Var,
        pos: &Tensor,
        stats: &mut AttnStats,
    ) -> Result<Var> {
        let shape = g.value(feat).shape().to_vec();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let mut x = g.reshape(feat, &[h * w, c])?;
        let pos_var = g.constant(pos.clone())?;

        for (li, layer) in self.layers.iter().enumerate() {
            let (wh, ww) = self.windows.encoder_window(li);
            let part = WindowPartition::build(h, w, wh, ww)?;

            let mut outs = Vec::with_capacity(part.n_windows());
            for win in 0..part.n_windows() {
                let rows = part.real_rows(win);
                let xw = g.gather_rows(x, &rows)?;
                let pw = g.gather_rows(pos_var, &rows)?;
                let qk = g.add(xw, pw)?;
                let (sa, attn) = layer.attn.attend(g, store, qk, qk, xw, stats)?;
                if stats.capture {
                    let key_cells = rows
                        .iter()
                        .map(|slot| {
                            let t = slot.unwrap();
                            (t / w, t % w)
                        })
                        .collect();
                    let weights = center_row_mean(g, attn);
                    stats.captured.push(AttnMap {
                        layer: li,
                        window: win,
                        key_cells,
                        weights,
                    });
                }
                outs.push(sa);
            }
            let stacked = g.concat_rows(&outs)?;
            let sa_full = g.gather_rows(stacked, &part.inverse_index())?;

            let res = g.add(x, sa_full)?;
            let xhat = layer.ln1.forward(g, store, res)?;
            let ffn = layer.ffn.forward(g, store, xhat)?;
            let res2 = g.add(xhat, ffn)?;
            x = layer.ln2.forward(g, store, res2)?;
        }
        g.reshape(x, &[h, w, c])
    }
}
