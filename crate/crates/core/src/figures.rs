//! Figure emission: keypoint overlays, source/target/reconstruction strips,
//! and style-geometry swap grids, all as tiled PNGs.

use crate::bottleneck::KeypointSet;
use crate::error::Result;
use crate::imgio::{draw_circle, tile_grid};
use crate::nets::LandmarkModel;
use crate::scalar::Scalar;
use crate::tensor::{Point, Tensor};

/// Distinct color for keypoint `i` (golden-ratio hue walk).
pub fn keypoint_color(i: usize) -> [f64; 3] {
    let h = (i as f64 * 0.618_033_988_749_895).fract();
    let s = 0.9;
    let v = 1.0;
    let f = h * 6.0 - (h * 6.0).floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (h * 6.0).floor() as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Predictions as solid circles, optional ground truth as hollow ones.
pub fn keypoint_overlay<T: Scalar>(
    img: &Tensor<T>,
    pred: &[Point<T>],
    gt: Option<&[Point<T>]>,
) -> Tensor<T> {
    let mut out = img.clone();
    let r = (img.height() as f64 / 40.0).max(1.5);
    if let Some(gt) = gt {
        for (i, p) in gt.iter().enumerate() {
            draw_circle(&mut out, *p, r + 1.5, keypoint_color(i), true);
        }
    }
    for (i, p) in pred.iter().enumerate() {
        draw_circle(&mut out, *p, r, keypoint_color(i), false);
    }
    out
}

/// Rows of `[source, target, reconstruction, target + keypoints]`.
pub fn quadruplet_strip<T: Scalar>(
    model: &LandmarkModel<T>,
    pairs: &[(Tensor<T>, Tensor<T>)],
) -> Result<Tensor<T>> {
    let mut rows = Vec::with_capacity(pairs.len());
    for (src, tgt) in pairs {
        let (recon, kps) = model.reconstruct(src, tgt)?;
        let overlay = keypoint_overlay(tgt, kps.points(), None);
        rows.push(vec![
            Some(src.clone()),
            Some(tgt.clone()),
            Some(recon.map(|v| v.max(T::zero()).min(T::one()))),
            Some(overlay),
        ]);
    }
    tile_grid(&rows)
}

/// Renders detected keypoints over an image.
pub fn detection_overlay<T: Scalar>(
    model: &LandmarkModel<T>,
    img: &Tensor<T>,
) -> Result<(Tensor<T>, KeypointSet<T>)> {
    let kps = model.detect(img)?;
    Ok((keypoint_overlay(img, kps.points(), None), kps))
}
