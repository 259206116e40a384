//! PNG load/save and the few raster helpers the figure outputs need.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{cell_coord, Point, Tensor};
use std::path::Path;

/// Loads a PNG as an RGB tensor scaled to [0, 1]; grayscale is replicated.
pub fn load_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                *t.at_mut(c, y, x) = T::from_f64_c(p.0[c] as f64 / 255.0);
            }
        }
    }
    Ok(t)
}

/// Saves an RGB (or single-channel) tensor as PNG, clamping to [0, 1].
pub fn save_png<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let (c, h, w) = t.shape();
    if c != 3 && c != 1 {
        return Err(Error::invalid_input(format!(
            "can only save 1- or 3-channel tensors, got {c}"
        )));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| {
                let v = t.at(ch.min(c - 1), y, x).to_f64_c().clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            };
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)?;
    Ok(())
}

/// Aspect-preserving center crop to a square followed by bilinear resize.
pub fn center_crop_resize<T: Scalar>(img: &Tensor<T>, size: usize) -> Tensor<T> {
    let (c, h, w) = img.shape();
    let side = h.min(w);
    let y0 = (h - side) / 2;
    let x0 = (w - side) / 2;
    let mut out = Tensor::zeros(c, size, size);
    let scale = side as f64 / size as f64;
    for ci in 0..c {
        for oy in 0..size {
            let sy = ((oy as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
            let iy0 = sy.floor() as usize;
            let iy1 = (iy0 + 1).min(side - 1);
            let fy = T::from_f64_c(sy - iy0 as f64);
            for ox in 0..size {
                let sx = ((ox as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
                let ix0 = sx.floor() as usize;
                let ix1 = (ix0 + 1).min(side - 1);
                let fx = T::from_f64_c(sx - ix0 as f64);
                let v00 = img.at(ci, y0 + iy0, x0 + ix0);
                let v01 = img.at(ci, y0 + iy0, x0 + ix1);
                let v10 = img.at(ci, y0 + iy1, x0 + ix0);
                let v11 = img.at(ci, y0 + iy1, x0 + ix1);
                let top = v00 * (T::one() - fx) + v01 * fx;
                let bot = v10 * (T::one() - fx) + v11 * fx;
                *out.at_mut(ci, oy, ox) = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

/// Maps original-image pixel coordinates through the center crop + resize of
/// [`center_crop_resize`] into normalized coordinates of the output.
pub fn crop_coords_to_normalized(
    px: f64,
    py: f64,
    orig_h: usize,
    orig_w: usize,
    size: usize,
) -> (f64, f64) {
    let side = orig_h.min(orig_w);
    let y0 = (orig_h - side) as f64 / 2.0;
    let x0 = (orig_w - side) as f64 / 2.0;
    let scale = size as f64 / side as f64;
    // half-pixel-center resize mapping, then align-corner normalization
    let ox = (px - x0 + 0.5) * scale - 0.5;
    let oy = (py - y0 + 0.5) * scale - 0.5;
    (
        ox / (size - 1) as f64 * 2.0 - 1.0,
        oy / (size - 1) as f64 * 2.0 - 1.0,
    )
}

/// Draws a solid or hollow circle at a normalized coordinate.
pub fn draw_circle<T: Scalar>(
    img: &mut Tensor<T>,
    center: Point<T>,
    radius_px: f64,
    color: [f64; 3],
    hollow: bool,
) {
    let (c, h, w) = img.shape();
    let cx = cell_coord(center.x, w).to_f64_c();
    let cy = cell_coord(center.y, h).to_f64_c();
    let r = radius_px.max(1.0);
    let y_lo = (cy - r - 1.0).floor().max(0.0) as usize;
    let y_hi = ((cy + r + 1.0).ceil() as usize).min(h.saturating_sub(1));
    let x_lo = (cx - r - 1.0).floor().max(0.0) as usize;
    let x_hi = ((cx + r + 1.0).ceil() as usize).min(w.saturating_sub(1));
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let inside = if hollow {
                (d - r).abs() <= 0.75
            } else {
                d <= r
            };
            if inside {
                for ch in 0..c.min(3) {
                    *img.at_mut(ch, y, x) = T::from_f64_c(color[ch]);
                }
            }
        }
    }
}

/// Lays out same-sized tiles into one image with 2px separators.
pub fn tile_grid<T: Scalar>(tiles: &[Vec<Option<Tensor<T>>>]) -> Result<Tensor<T>> {
    let rows = tiles.len();
    let cols = tiles.iter().map(|r| r.len()).max().unwrap_or(0);
    let first = tiles
        .iter()
        .flatten()
        .flatten()
        .next()
        .ok_or_else(|| Error::invalid_input("tile grid is empty"))?;
    let (c, th, tw) = first.shape();
    let sep = 2usize;
    let out_h = rows * th + (rows + 1) * sep;
    let out_w = cols * tw + (cols + 1) * sep;
    let mut out = Tensor::from_fn(c, out_h, out_w, |_, _, _| T::from_f64_c(1.0));
    for (ri, row) in tiles.iter().enumerate() {
        for (ci, tile) in row.iter().enumerate() {
            let Some(tile) = tile else { continue };
            if tile.shape() != (c, th, tw) {
                return Err(Error::invalid_input("tiles differ in shape"));
            }
            let oy = sep + ri * (th + sep);
            let ox = sep + ci * (tw + sep);
            for ch in 0..c {
                for y in 0..th {
                    for x in 0..tw {
                        *out.at_mut(ch, oy + y, ox + x) = tile.at(ch, y, x);
                    }
                }
            }
        }
    }
    Ok(out)
}
