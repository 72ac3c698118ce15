//! Transformer decoder: window self-attention among point queries and
//! window cross-attention from queries to encoder tokens.

use std::collections::BTreeMap;

use rand::Rng;

use super::encoder::{FeedForward, LayerNormParams};
use super::mha::{AttnStats, MultiHead};
use super::partition::WindowPartition;
use crate::config::WindowConfig;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Var};
use crate::quadtree::QueryBatch;

struct DecoderLayer {
    self_attn: MultiHead,
    ln_sa: LayerNormParams,
    cross_attn: MultiHead,
    ln_ca: LayerNormParams,
    ffn: FeedForward,
    ln_ffn: LayerNormParams,
}

/// Decoder shared by all quadtree levels. Queries are binned into rectangle
/// windows by their feature-grid cell; sparse and dense queries use different
/// window sizes and therefore never share a window.
pub struct Decoder {
    layers: Vec<DecoderLayer>,
    windows: WindowConfig,
    n_layers: usize,
}

/// Group point queries by (quadtree level, window index). Queries of the same
/// level and window attend to each other; the window index comes from the
/// token-grid partition at that level's window size.
pub fn bin_queries(
    points: &[(f64, f64)],
    levels: &[usize],
    grid_h: usize,
    grid_w: usize,
    stride: usize,
    windows: &WindowConfig,
) -> Result<BTreeMap<(usize, usize), Vec<usize>>> {
    let mut parts: BTreeMap<usize, WindowPartition> = BTreeMap::new();
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, (&(x, y), &level)) in points.iter().zip(levels).enumerate() {
        let part = match parts.get(&level) {
            Some(p) => p,
            None => {
                let (wh, ww) = windows.decoder_window(level);
                parts.insert(level, WindowPartition::build(grid_h, grid_w, wh, ww)?);
                parts.get(&level).unwrap()
            }
        };
        let cell_c = ((x / stride as f64) as usize).min(grid_w - 1);
        let cell_r = ((y / stride as f64) as usize).min(grid_h - 1);
        groups
            .entry((level, part.window_of_cell(cell_r, cell_c)))
            .or_default()
            .push(i);
    }
    Ok(groups)
}

impl Decoder {
    pub fn register(
        store: &mut ParamStore,
        channels: usize,
        heads: usize,
        n_layers: usize,
        windows: WindowConfig,
        rng: &mut impl Rng,
        prefix: &str,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for l in 0..n_layers {
            let p = format!("{prefix}.layer{l}");
            layers.push(DecoderLayer {
                self_attn: MultiHead::register(store, channels, heads, rng, &format!("{p}.self"))?,
                ln_sa: LayerNormParams::register(store, channels, &format!("{p}.ln_sa"))?,
                cross_attn: MultiHead::register(
                    store,
                    channels,
                    heads,
                    rng,
                    &format!("{p}.cross"),
                )?,
                ln_ca: LayerNormParams::register(store, channels, &format!("{p}.ln_ca"))?,
                ffn: FeedForward::register(store, channels, rng, &format!("{p}.ffn"))?,
                ln_ffn: LayerNormParams::register(store, channels, &format!("{p}.ln_ffn"))?,
            });
        }
        Ok(Decoder {
            layers,
            windows,
            n_layers,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    /// Decode `queries` against the encoded grid `enc: [h*w, c]` with token
    /// positional embeddings `enc_pos` (a constant graph node).
    ///
    /// Returns `[N, c]` decoded representations in input query order.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: &QueryBatch,
        enc: Var,
        enc_pos: Var,
        grid_h: usize,
        grid_w: usize,
        stride: usize,
        stats: &mut AttnStats,
    ) -> Result<Var> {
        if queries.is_empty() {
            return Err(Error::Contract("decoder received an empty query batch".into()));
        }
        let (img_w, img_h) = ((grid_w * stride) as f64, (grid_h * stride) as f64);
        for &(x, y) in &queries.points {
            if !(0.0..=img_w).contains(&x) || !(0.0..=img_h).contains(&y) {
                return Err(Error::Contract(format!(
                    "query ({x}, {y}) outside the {img_w}x{img_h} image"
                )));
            }
        }

        let groups = bin_queries(
            &queries.points,
            &queries.levels,
            grid_h,
            grid_w,
            stride,
            &self.windows,
        )?;
        // flat row of each query in the concatenated group outputs
        let mut inverse = vec![None; queries.len()];
        let mut flat = 0usize;
        for members in groups.values() {
            for &qi in members {
                inverse[qi] = Some(flat);
                flat += 1;
            }
        }

        // per-level token partitions for cross-attention key sets
        let mut parts: BTreeMap<usize, WindowPartition> = BTreeMap::new();
        for &(level, _) in groups.keys() {
            if let std::collections::btree_map::Entry::Vacant(e) = parts.entry(level) {
                let (wh, ww) = self.windows.decoder_window(level);
                e.insert(WindowPartition::build(grid_h, grid_w, wh, ww)?);
            }
        }

        let qpos = g.constant(queries.pos.clone())?;
        let mut z = queries.reps;
        for layer in &self.layers {
            // self-attention among queries of the same window
            let mut outs = Vec::with_capacity(groups.len());
            for members in groups.values() {
                let rows: Vec<Option<usize>> = members.iter().map(|&i| Some(i)).collect();
                let zw = g.gather_rows(z, &rows)?;
                let pw = g.gather_rows(qpos, &rows)?;
                let qk = g.add(zw, pw)?;
                let (sa, _) = layer.self_attn.attend(g, store, qk, qk, zw, stats)?;
                outs.push(sa);
            }
            let stacked = g.concat_rows(&outs)?;
            let sa_full = g.gather_rows(stacked, &inverse)?;
            let res = g.add(z, sa_full)?;
            let zhat = layer.ln_sa.forward(g, store, res)?;

            // cross-attention to the encoder tokens of the query's window
            let mut outs = Vec::with_capacity(groups.len());
            for (&(level, win), members) in &groups {
                let rows: Vec<Option<usize>> = members.iter().map(|&i| Some(i)).collect();
                let token_rows = parts[&level].real_rows(win);
                let zq = g.gather_rows(zhat, &rows)?;
                let pq = g.gather_rows(qpos, &rows)?;
                let q = g.add(zq, pq)?;
                let kw = g.gather_rows(enc, &token_rows)?;
                let kp = g.gather_rows(enc_pos, &token_rows)?;
                let k = g.add(kw, kp)?;
                let (ca, _) = layer.cross_attn.attend(g, store, q, k, kw, stats)?;
                outs.push(ca);
            }
            let stacked = g.concat_rows(&outs)?;
            let ca_full = g.gather_rows(stacked, &inverse)?;
            let res = g.add(zhat, ca_full)?;
            let zhat2 = layer.ln_ca.forward(g, store, res)?;

            let ffn = layer.ffn.forward(g, store, zhat2)?;
            let res = g.add(zhat2, ffn)?;
            z = layer.ln_ffn.forward(g, store, res)?;
        }
        Ok(z)
    }
}
