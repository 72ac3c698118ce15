//! Training augmentation: random scaling, square cropping, horizontal flips.
//! Points transform consistently with the image; points leaving the crop are
//! dropped.

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;

use super::{Rect, Scene};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AugmentParams {
    pub scale: f64,
    pub crop_x: u32,
    pub crop_y: u32,
    pub flip: bool,
}

/// Draw augmentation parameters for a scene; the crop offset is uniform over
/// valid positions after scaling.
pub fn sample_augment(
    scene_w: u32,
    scene_h: u32,
    crop: u32,
    scale_range: (f64, f64),
    flip_prob: f64,
    rng: &mut impl Rng,
) -> Result<AugmentParams> {
    let scale = if scale_range.0 == scale_range.1 {
        scale_range.0
    } else {
        rng.random_range(scale_range.0..scale_range.1)
    };
    let nw = (scene_w as f64 * scale).round() as u32;
    let nh = (scene_h as f64 * scale).round() as u32;
    if nw < crop || nh < crop {
        return Err(Error::Contract(format!(
            "scaled image {nw}x{nh} smaller than the {crop} crop"
        )));
    }
    Ok(AugmentParams {
        scale,
        crop_x: rng.random_range(0..=nw - crop),
        crop_y: rng.random_range(0..=nh - crop),
        flip: rng.random::<f64>() < flip_prob,
    })
}

/// Apply explicit augmentation parameters.
pub fn augment(scene: &Scene, crop: u32, params: &AugmentParams) -> Result<Scene> {
    let (w, h) = (scene.image.width(), scene.image.height());
    let nw = (w as f64 * params.scale).round() as u32;
    let nh = (h as f64 * params.scale).round() as u32;
    if nw < crop || nh < crop {
        return Err(Error::Contract(format!(
            "scaled image {nw}x{nh} smaller than the {crop} crop"
        )));
    }
    if params.crop_x + crop > nw || params.crop_y + crop > nh {
        return Err(Error::Contract("crop offset outside the scaled image".into()));
    }

    let scaled: RgbImage = if nw == w && nh == h {
        scene.image.clone()
    } else {
        imageops::resize(&scene.image, nw, nh, FilterType::Triangle)
    };
    let mut img = imageops::crop_imm(&scaled, params.crop_x, params.crop_y, crop, crop).to_image();
    if params.flip {
        img = imageops::flip_horizontal(&img);
    }

    // exact factors implied by the rounded extents
    let sx = nw as f64 / w as f64;
    let sy = nh as f64 / h as f64;
    let map_point = |x: f64, y: f64| -> (f64, f64) {
        let mut px = x * sx - params.crop_x as f64;
        let py = y * sy - params.crop_y as f64;
        if params.flip {
            px = crop as f64 - px;
        }
        (px, py)
    };
    let points: Vec<(f64, f64)> = scene
        .points
        .iter()
        .map(|&(x, y)| map_point(x, y))
        .filter(|&(x, y)| (0.0..crop as f64).contains(&x) && (0.0..crop as f64).contains(&y))
        .collect();

    let region = scene.region.map(|r| {
        let (ax, ay) = map_point(r.x0, r.y0);
        let (bx, by) = map_point(r.x1, r.y1);
        let (x0, x1) = if ax <= bx { (ax, bx) } else { (bx, ax) };
        let (y0, y1) = if ay <= by { (ay, by) } else { (by, ay) };
        Rect { x0, y0, x1, y1 }.clamp_to(crop as f64, crop as f64)
    });

    Ok(Scene {
        id: scene.id.clone(),
        image: img,
        points,
        region,
    })
}
