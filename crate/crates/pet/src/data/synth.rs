//! Seeded synthetic crowd scenes: disc "heads" over textured backgrounds,
//! denser and smaller toward the top of the image.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Rect, Scene};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    pub count_min: usize,
    pub count_max: usize,
    pub head_radius_min: f64,
    pub head_radius_max: f64,
    /// Density gradient strength: 0 = uniform, larger = more heads near the
    /// top row (where they also render smaller).
    pub perspective: f64,
    /// Allowed center-distance shrink factor: 0 keeps discs disjoint,
    /// 0.5 lets centers approach half the sum of radii.
    pub overlap_cap: f64,
    /// Background distractor shapes per scene (never head-colored).
    pub clutter: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 256,
            height: 256,
            count_min: 5,
            count_max: 150,
            head_radius_min: 2.0,
            head_radius_max: 6.0,
            perspective: 4.0,
            overlap_cap: 0.25,
            clutter: 6,
            seed: 0,
        }
    }
}

fn scene_rng(cfg: &SynthConfig, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    rng
}

/// Inverse-CDF sample of the vertical position under density
/// pdf(t) ~ 1 + g*(1-t), t in [0,1].
fn sample_top_heavy(rng: &mut ChaCha8Rng, g: f64) -> f64 {
    let u: f64 = rng.random();
    if g < 1e-9 {
        return u;
    }
    let a = 1.0 + g;
    // solve (g/2) t^2 - a t + u (1 + g/2) = 0 for the root in [0,1]
    let t = (a - (a * a - 2.0 * g * u * (1.0 + g / 2.0)).sqrt()) / g;
    t.clamp(0.0, 1.0)
}

fn head_radius(cfg: &SynthConfig, y: f64) -> f64 {
    let t = y / cfg.height as f64;
    cfg.head_radius_min + (cfg.head_radius_max - cfg.head_radius_min) * t
}

/// Greedy placement with a minimum center distance; fails when the scene
/// cannot hold the requested count.
fn place_heads(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    count: usize,
    area: Option<Rect>,
) -> Result<Vec<(f64, f64, f64)>> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let bounds = area.unwrap_or(Rect {
        x0: 0.0,
        y0: 0.0,
        x1: w,
        y1: h,
    });
    let mut heads: Vec<(f64, f64, f64)> = Vec::with_capacity(count);
    for placed in 0..count {
        let mut ok = false;
        for _attempt in 0..400 {
            let ty = sample_top_heavy(rng, cfg.perspective);
            let y = bounds.y0 + ty * (bounds.y1 - bounds.y0);
            let r = head_radius(cfg, y);
            let (lo_x, hi_x) = (bounds.x0.max(r + 1.0), bounds.x1.min(w - r - 1.0));
            let (lo_y, hi_y) = (bounds.y0.max(r + 1.0), bounds.y1.min(h - r - 1.0));
            if lo_x >= hi_x || lo_y >= hi_y {
                continue;
            }
            let x = lo_x + rng.random::<f64>() * (hi_x - lo_x);
            let y = y.clamp(lo_y, hi_y - 1e-9);
            let min_gap = |r1: f64, r2: f64| (r1 + r2 + 1.0) * (1.0 - cfg.overlap_cap);
            if heads
                .iter()
                .all(|&(hx, hy, hr)| ((hx - x).powi(2) + (hy - y).powi(2)).sqrt() >= min_gap(hr, r))
            {
                heads.push((x, y, r));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Data(format!(
                "cannot place head {placed} of {count} in {}x{} scene (packing infeasible)",
                cfg.width, cfg.height
            )));
        }
    }
    Ok(heads)
}

/// Smooth value-noise background in muted blue/green tones, plus clutter
/// shapes. Head discs are the only strongly red pixels in a scene.
fn paint_background(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> RgbImage {
    let (w, h) = (cfg.width as usize, cfg.height as usize);
    let cell = 16usize;
    let (gw, gh) = (w / cell + 2, h / cell + 2);
    let grid: Vec<[f64; 3]> = (0..gw * gh)
        .map(|_| {
            [
                20.0 + rng.random::<f64>() * 60.0,  // R stays low
                60.0 + rng.random::<f64>() * 80.0,  // G
                60.0 + rng.random::<f64>() * 90.0,  // B
            ]
        })
        .collect();
    let mut img = RgbImage::new(cfg.width, cfg.height);
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let fy = y as f64 / cell as f64;
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let mut px = [0.0; 3];
            for c in 0..3 {
                let v00 = grid[iy * gw + ix][c];
                let v01 = grid[iy * gw + ix + 1][c];
                let v10 = grid[(iy + 1) * gw + ix][c];
                let v11 = grid[(iy + 1) * gw + ix + 1][c];
                px[c] = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01)
                    + ty * ((1.0 - tx) * v10 + tx * v11);
            }
            img.put_pixel(x as u32, y as u32, Rgb([px[0] as u8, px[1] as u8, px[2] as u8]));
        }
    }
    // clutter: soft ellipses in non-red tones
    for _ in 0..cfg.clutter {
        let cx = rng.random::<f64>() * w as f64;
        let cy = rng.random::<f64>() * h as f64;
        let rx = 3.0 + rng.random::<f64>() * 12.0;
        let ry = 3.0 + rng.random::<f64>() * 12.0;
        let tone = [
            (15.0 + rng.random::<f64>() * 60.0) as u8,
            (40.0 + rng.random::<f64>() * 140.0) as u8,
            (40.0 + rng.random::<f64>() * 150.0) as u8,
        ];
        stamp_ellipse(&mut img, cx, cy, rx, ry, tone);
    }
    img
}

fn stamp_ellipse(img: &mut RgbImage, cx: f64, cy: f64, rx: f64, ry: f64, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = ((cx - rx).floor() as i64).max(0);
    let x1 = ((cx + rx).ceil() as i64).min(w - 1);
    let y0 = ((cy - ry).floor() as i64).max(0);
    let y1 = ((cy + ry).ceil() as i64).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                img.put_pixel(x as u32, y as u32, Rgb(color));
            }
        }
    }
}

fn paint_head(img: &mut RgbImage, x: f64, y: f64, r: f64, rng: &mut ChaCha8Rng) {
    // reddish disc with a darker rim; the red dominance makes heads
    // recoverable by color thresholding in tests
    let base_r = 170.0 + rng.random::<f64>() * 60.0;
    let base_g = 40.0 + rng.random::<f64>() * 50.0;
    let base_b = 30.0 + rng.random::<f64>() * 50.0;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = ((x - r).floor() as i64).max(0);
    let x1 = ((x + r).ceil() as i64).min(w - 1);
    let y0 = ((y - r).floor() as i64).max(0);
    let y1 = ((y + r).ceil() as i64).min(h - 1);
    for py in y0..=y1 {
        for px in x0..=x1 {
            let dx = px as f64 + 0.5 - x;
            let dy = py as f64 + 0.5 - y;
            let d = (dx * dx + dy * dy).sqrt();
            if d <= r {
                let shade = 1.0 - 0.35 * (d / r);
                img.put_pixel(
                    px as u32,
                    py as u32,
                    Rgb([
                        (base_r * shade) as u8,
                        (base_g * shade) as u8,
                        (base_b * shade) as u8,
                    ]),
                );
            }
        }
    }
}

fn render(cfg: &SynthConfig, rng: &mut ChaCha8Rng, heads: &[(f64, f64, f64)]) -> RgbImage {
    let mut img = paint_background(cfg, rng);
    for &(x, y, r) in heads {
        paint_head(&mut img, x, y, r, rng);
    }
    img
}

/// Generate `n` seeded scenes. The exact head-center list is the label.
pub fn generate(cfg: &SynthConfig, n: usize) -> Result<Vec<Scene>> {
    if n == 0 {
        return Err(Error::Contract("generate needs n >= 1".into()));
    }
    if cfg.count_min > cfg.count_max {
        return Err(Error::Contract("count_min exceeds count_max".into()));
    }
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = scene_rng(cfg, i as u64);
        let count = rng.random_range(cfg.count_min..=cfg.count_max);
        let heads = place_heads(cfg, &mut rng, count, None)?;
        let image = render(cfg, &mut rng, &heads);
        scenes.push(Scene {
            id: format!("scene_{i:05}"),
            image,
            points: heads.iter().map(|&(x, y, _)| (x, y)).collect(),
            region: None,
        });
    }
    Ok(scenes)
}

/// A scene whose crowd concentrates in one half of the image; the other half
/// holds at most a few people. `dense_rect` is the crowded half.
pub struct HalfDenseScene {
    pub scene: Scene,
    pub dense_rect: Rect,
}

/// Generate scenes for split-map experiments: one half packed, one half
/// nearly empty.
pub fn generate_half_dense(cfg: &SynthConfig, n: usize) -> Result<Vec<HalfDenseScene>> {
    if n == 0 {
        return Err(Error::Contract("generate needs n >= 1".into()));
    }
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = scene_rng(cfg, i as u64);
        let dense_rect = match rng.random_range(0..4u8) {
            0 => Rect { x0: 0.0, y0: 0.0, x1: w / 2.0, y1: h },
            1 => Rect { x0: w / 2.0, y0: 0.0, x1: w, y1: h },
            2 => Rect { x0: 0.0, y0: 0.0, x1: w, y1: h / 2.0 },
            _ => Rect { x0: 0.0, y0: h / 2.0, x1: w, y1: h },
        };
        let sparse_rect = Rect {
            x0: if dense_rect.x0 > 0.0 { 0.0 } else if dense_rect.x1 < w { dense_rect.x1 } else { 0.0 },
            y0: if dense_rect.y0 > 0.0 { 0.0 } else if dense_rect.y1 < h { dense_rect.y1 } else { 0.0 },
            x1: if dense_rect.x0 > 0.0 { dense_rect.x0 } else { w },
            y1: if dense_rect.y0 > 0.0 { dense_rect.y0 } else { h },
        };
        let dense_count = rng.random_range(cfg.count_max / 2..=cfg.count_max);
        let sparse_count = rng.random_range(0..=3usize);
        let mut heads = place_heads(cfg, &mut rng, dense_count, Some(dense_rect))?;
        let mut sparse = place_in_area(cfg, &mut rng, sparse_count, sparse_rect, &heads)?;
        heads.append(&mut sparse);
        let image = render(cfg, &mut rng, &heads);
        out.push(HalfDenseScene {
            scene: Scene {
                id: format!("half_{i:05}"),
                image,
                points: heads.iter().map(|&(x, y, _)| (x, y)).collect(),
                region: None,
            },
            dense_rect,
        });
    }
    Ok(out)
}

/// Place extra heads inside `area` away from the already-placed ones.
fn place_in_area(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    count: usize,
    area: Rect,
    existing: &[(f64, f64, f64)],
) -> Result<Vec<(f64, f64, f64)>> {
    let mut all = existing.to_vec();
    let before = all.len();
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    for _ in 0..count {
        let mut ok = false;
        for _attempt in 0..400 {
            let y = area.y0 + rng.random::<f64>() * (area.y1 - area.y0);
            let r = head_radius(cfg, y);
            let (lo_x, hi_x) = (area.x0.max(r + 1.0), area.x1.min(w - r - 1.0));
            let (lo_y, hi_y) = (area.y0.max(r + 1.0), area.y1.min(h - r - 1.0));
            if lo_x >= hi_x || lo_y >= hi_y {
                continue;
            }
            let x = lo_x + rng.random::<f64>() * (hi_x - lo_x);
            let y = y.clamp(lo_y, hi_y - 1e-9);
            let min_gap = |r1: f64, r2: f64| (r1 + r2 + 1.0) * (1.0 - cfg.overlap_cap);
            if all
                .iter()
                .all(|&(hx, hy, hr)| ((hx - x).powi(2) + (hy - y).powi(2)).sqrt() >= min_gap(hr, r))
            {
                all.push((x, y, r));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Data("sparse-half packing infeasible".into()));
        }
    }
    Ok(all[before..].to_vec())
}

/// Head-pixel test used by the detectability oracle in tests: strongly red.
pub fn looks_like_head_pixel(p: &Rgb<u8>) -> bool {
    let [r, g, b] = p.0;
    r >= 100 && r as i32 - g as i32 >= 40 && r as i32 - b as i32 >= 40
}
