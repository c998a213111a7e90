//! Pixel-array helpers: RGB/HSV conversion and PNG round-trips.
//!
//! Images are `Array3<u8>` in `(H, W, 3)` layout; masks are `Array2<u8>`
//! holding labels 0/1 in memory and 0/255 on disk.

use crate::error::{Error, Result};
use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use std::path::Path;

/// RGB (each in [0,1]) to HSV with hue in degrees [0,360).
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h.rem_euclid(360.0), s, max)
}

/// HSV (h in degrees, s/v in [0,1]) back to RGB in [0,1].
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0).rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h {
        h if h < 60.0 => (c, x, 0.0),
        h if h < 120.0 => (x, c, 0.0),
        h if h < 180.0 => (0.0, c, x),
        h if h < 240.0 => (0.0, x, c),
        h if h < 300.0 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

pub fn save_rgb_png(path: &Path, img: &Array3<u8>) -> Result<()> {
    let (h, w, c) = img.dim();
    assert_eq!(c, 3, "expected (H, W, 3) image");
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]]),
            );
        }
    }
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_rgb_png(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut arr = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                arr[[y, x, c]] = p.0[c];
            }
        }
    }
    Ok(arr)
}

/// Masks are written 8-bit with 0 = non-tumor and 255 = tumor.
pub fn save_mask_png(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x as u32, y as u32, image::Luma([mask[[y, x]] * 255]));
        }
    }
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_mask_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut arr = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let v = img.get_pixel(x as u32, y as u32).0[0];
            arr[[y, x]] = match v {
                0 => 0,
                255 => 1,
                other => {
                    return Err(Error::invalid(format!(
                        "mask {} has pixel value {other}; expected 0 or 255",
                        path.display()
                    )))
                }
            };
        }
    }
    Ok(arr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[
            (0.0, 0.0, 0.0),
            (1.0, 1.0, 1.0),
            (0.9, 0.2, 0.4),
            (0.1, 0.8, 0.3),
            (0.25, 0.25, 0.75),
        ] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn hue_shift_rotates_primaries() {
        let (h, _, _) = rgb_to_hsv(1.0, 0.0, 0.0);
        assert_eq!(h, 0.0);
        let (r, g, b) = hsv_to_rgb(120.0, 1.0, 1.0);
        assert!((r, g, b) == (0.0, 1.0, 0.0));
    }
}
