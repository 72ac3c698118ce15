//! Non-overlapping rectangle-window partition of a token grid.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Assignment of every grid token to exactly one rectangle window.
///
/// The grid is conceptually zero-padded up to multiples of the window extents;
/// padding slots carry `None` and are excluded from attention. The inverse map
/// restores original token order bit-exactly.
#[derive(Debug, Clone)]
pub struct WindowPartition {
    pub grid_h: usize,
    pub grid_w: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    /// Per window: slot -> token index (row-major slots; `None` = padding).
    windows: Vec<Vec<Option<usize>>>,
    /// Per token: (window index, rank among that window's real slots).
    token_window: Vec<(usize, usize)>,
    /// Cumulative count of real slots before each window.
    real_offsets: Vec<usize>,
}

impl WindowPartition {
    pub fn build(grid_h: usize, grid_w: usize, win_h: usize, win_w: usize) -> Result<Self> {
        if win_h == 0 || win_w == 0 {
            return Err(Error::Contract("window extents must be >= 1".into()));
        }
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::Contract("empty grid".into()));
        }
        let nwr = grid_h.div_ceil(win_h);
        let nwc = grid_w.div_ceil(win_w);
        let padded_h = nwr * win_h;
        let padded_w = nwc * win_w;

        let mut windows = Vec::with_capacity(nwr * nwc);
        let mut token_window = vec![(0usize, 0usize); grid_h * grid_w];
        let mut real_offsets = Vec::with_capacity(nwr * nwc);
        let mut running = 0usize;
        for wr in 0..nwr {
            for wc in 0..nwc {
                let mut slots = Vec::with_capacity(win_h * win_w);
                let mut rank = 0usize;
                for sy in 0..win_h {
                    for sx in 0..win_w {
                        let r = wr * win_h + sy;
                        let c = wc * win_w + sx;
                        if r < grid_h && c < grid_w {
                            let tok = r * grid_w + c;
                            token_window[tok] = (windows.len(), rank);
                            slots.push(Some(tok));
                            rank += 1;
                        } else {
                            slots.push(None);
                        }
                    }
                }
                real_offsets.push(running);
                running += rank;
                windows.push(slots);
            }
        }
        Ok(WindowPartition {
            grid_h,
            grid_w,
            win_h,
            win_w,
            padded_h,
            padded_w,
            windows,
            token_window,
            real_offsets,
        })
    }

    /// Window index of the window containing grid cell (r, c).
    pub fn window_of_cell(&self, r: usize, c: usize) -> usize {
        let nwc = self.grid_w.div_ceil(self.win_w);
        (r / self.win_h) * nwc + c / self.win_w
    }

    pub fn n_windows(&self) -> usize {
        self.windows.len()
    }

    /// All slots of a window including padding (`None`).
    pub fn window_slots(&self, w: usize) -> &[Option<usize>] {
        &self.windows[w]
    }

    /// Token indices of the real slots, in slot order.
    pub fn real_rows(&self, w: usize) -> Vec<Option<usize>> {
        self.windows[w].iter().filter(|s| s.is_some()).copied().collect()
    }

    pub fn real_count(&self, w: usize) -> usize {
        self.windows[w].iter().filter(|s| s.is_some()).count()
    }

    pub fn total_real(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// For each original token, its row in the concatenation of all windows'
    /// real rows. Used to restore original order after windowed processing.
    pub fn inverse_index(&self) -> Vec<Option<usize>> {
        self.token_window
            .iter()
            .map(|&(w, rank)| Some(self.real_offsets[w] + rank))
            .collect()
    }

    /// Split a `[grid_h*grid_w, c]` tensor into per-window `[win_h*win_w, c]`
    /// tensors with zero rows at padding slots.
    pub fn apply(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        if x.ndim() != 2 || x.dim(0) != self.grid_h * self.grid_w {
            return Err(Error::Dim(format!(
                "partition expects [{}, c], got {:?}",
                self.grid_h * self.grid_w,
                x.shape()
            )));
        }
        let c = x.dim(1);
        let mut out = Vec::with_capacity(self.windows.len());
        for slots in &self.windows {
            let mut data = vec![0.0; slots.len() * c];
            for (i, slot) in slots.iter().enumerate() {
                if let Some(tok) = slot {
                    data[i * c..(i + 1) * c].copy_from_slice(&x.data()[tok * c..(tok + 1) * c]);
                }
            }
            out.push(Tensor::new(vec![slots.len(), c], data)?);
        }
        Ok(out)
    }

    /// Inverse of [`WindowPartition::apply`]; bit-exact for real tokens.
    pub fn restore(&self, windows: &[Tensor]) -> Result<Tensor> {
        if windows.len() != self.windows.len() {
            return Err(Error::Dim("window count mismatch".into()));
        }
        let c = windows.first().map(|t| t.dim(1)).unwrap_or(0);
        let mut data = vec![0.0; self.grid_h * self.grid_w * c];
        for (slots, win) in self.windows.iter().zip(windows) {
            if win.dim(0) != slots.len() || win.dim(1) != c {
                return Err(Error::Dim("window tensor shape mismatch".into()));
            }
            for (i, slot) in slots.iter().enumerate() {
                if let Some(tok) = slot {
                    data[tok * c..(tok + 1) * c].copy_from_slice(&win.data()[i * c..(i + 1) * c]);
                }
            }
        }
        Tensor::new(vec![self.grid_h * self.grid_w, c], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_tiling_needs_no_padding() {
        let p = WindowPartition::build(16, 32, 16, 32).unwrap();
        assert_eq!(p.n_windows(), 1);
        assert_eq!(p.real_count(0), 16 * 32);
        assert_eq!((p.padded_h, p.padded_w), (16, 32));
    }

    #[test]
    fn four_windows_on_double_grid() {
        let p = WindowPartition::build(32, 64, 16, 32).unwrap();
        assert_eq!(p.n_windows(), 4);
        for w in 0..4 {
            assert_eq!(p.real_count(w), 512);
        }
    }

    #[test]
    fn ragged_grid_pads_and_masks() {
        let p = WindowPartition::build(17, 33, 16, 32).unwrap();
        assert_eq!((p.padded_h, p.padded_w), (32, 64));
        assert_eq!(p.n_windows(), 4);
        let real: usize = (0..4).map(|w| p.real_count(w)).sum();
        assert_eq!(real, 17 * 33);
        let slots: usize = (0..4).map(|w| p.window_slots(w).len()).sum();
        assert_eq!(slots, 32 * 64);
        // enumerate cells: every token appears exactly once
        let mut seen = vec![false; 17 * 33];
        for w in 0..4 {
            for slot in p.window_slots(w) {
                if let Some(t) = slot {
                    assert!(!seen[*t], "token {t} appears twice");
                    seen[*t] = true;
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (h, w, c) = (7, 11, 3);
        let x = Tensor::new(
            vec![h * w, c],
            (0..h * w * c).map(|v| (v as f64).sin() * 1e3).collect(),
        )
        .unwrap();
        let p = WindowPartition::build(h, w, 4, 8).unwrap();
        let windows = p.apply(&x).unwrap();
        let back = p.restore(&windows).unwrap();
        assert_eq!(back.data(), x.data()); // exact
    }
}
