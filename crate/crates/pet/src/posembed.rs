//! Fixed 2-D sinusoidal positional embeddings.
//!
//! Coordinates are normalized by the image extent to [0, 2*pi]; half the
//! channels encode y, half encode x, with sin/cos interleaved per frequency.
//! Encoder tokens and point queries share this embedding space, so a query
//! at a token's center gets exactly that token's embedding.

use std::f64::consts::PI;

use crate::numerics::Tensor;

pub const TEMPERATURE: f64 = 10000.0;

/// Embedding of one image-space point `(x, y)` into `channels` values.
/// `channels` must be divisible by 4 (sin/cos per axis).
pub fn embed_point(x: f64, y: f64, img_w: f64, img_h: f64, channels: usize) -> Vec<f64> {
    debug_assert_eq!(channels % 4, 0);
    let half = channels / 2;
    let mut out = vec![0.0; channels];
    let vy = y / img_h * 2.0 * PI;
    let vx = x / img_w * 2.0 * PI;
    fill_axis(&mut out[..half], vy);
    fill_axis(&mut out[half..], vx);
    out
}

fn fill_axis(out: &mut [f64], v: f64) {
    let d = out.len();
    for (i, slot) in out.iter_mut().enumerate() {
        let freq = TEMPERATURE.powf(2.0 * ((i / 2) as f64) / d as f64);
        let t = v / freq;
        *slot = if i % 2 == 0 { t.sin() } else { t.cos() };
    }
}

/// Embeddings for every token of an `h x w` feature grid with the given
/// pixel stride, evaluated at cell centers. Returns `[h*w, channels]`.
pub fn grid_embedding(h: usize, w: usize, stride: usize, channels: usize) -> Tensor {
    let (img_w, img_h) = ((w * stride) as f64, (h * stride) as f64);
    let mut data = Vec::with_capacity(h * w * channels);
    for r in 0..h {
        for c in 0..w {
            let x = (c as f64 + 0.5) * stride as f64;
            let y = (r as f64 + 0.5) * stride as f64;
            data.extend(embed_point(x, y, img_w, img_h, channels));
        }
    }
    Tensor::new(vec![h * w, channels], data).expect("embedding shape")
}

/// Embeddings for a list of image-space points. Returns `[n, channels]`.
pub fn points_embedding(points: &[(f64, f64)], img_w: f64, img_h: f64, channels: usize) -> Tensor {
    let mut data = Vec::with_capacity(points.len() * channels);
    for &(x, y) in points {
        data.extend(embed_point(x, y, img_w, img_h, channels));
    }
    Tensor::new(vec![points.len(), channels], data).expect("embedding shape")
}
