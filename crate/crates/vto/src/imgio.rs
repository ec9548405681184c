//! Image value conventions and file I/O: tensors hold [h, w, c] floats in
//! [-1, 1]; on disk everything is 8-bit PNG. Plus the box/bilinear resamplers
//! used by progressive training and the super-resolution ablation.

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, Array4, Axis};

use crate::error::{Result, VtoError};
use crate::scalar::Scalar;

pub fn to_u8(v: f64) -> u8 {
    (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 255.0 * 2.0 - 1.0
}

pub fn save_png_rgb<F: Scalar>(path: &Path, img: &Array3<F>) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(VtoError::RejectedInput(format!("expected 3 channels, got {c}")));
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([
                to_u8(img[[y, x, 0]].as_f64()),
                to_u8(img[[y, x, 1]].as_f64()),
                to_u8(img[[y, x, 2]].as_f64()),
            ]);
            out.put_pixel(x as u32, y as u32, px);
        }
    }
    out.save(path).map_err(|e| {
        VtoError::io(path, std::io::Error::new(std::io::ErrorKind::Other, e))
    })
}

pub fn load_png_rgb<F: Scalar>(path: &Path) -> Result<Array3<F>> {
    let img = image::open(path)
        .map_err(|e| VtoError::io(path, std::io::Error::new(std::io::ErrorKind::Other, e)))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<F>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[y, x, c]] = F::cast(from_u8(px[c]));
            }
        }
    }
    Ok(out)
}

/// Segmentation maps are stored as raw label ids in a grayscale PNG.
pub fn save_png_labels(path: &Path, seg: &Array2<u8>) -> Result<()> {
    let (h, w) = seg.dim();
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x as u32, y as u32, image::Luma([seg[[y, x]]]));
        }
    }
    out.save(path).map_err(|e| {
        VtoError::io(path, std::io::Error::new(std::io::ErrorKind::Other, e))
    })
}

pub fn load_png_labels(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| VtoError::io(path, std::io::Error::new(std::io::ErrorKind::Other, e)))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = img.get_pixel(x as u32, y as u32)[0];
        }
    }
    Ok(out)
}

/// Box-filter downsampling by an integer factor (exact mean per block).
pub fn box_downsample<F: Scalar>(img: &Array3<F>, factor: usize) -> Result<Array3<F>> {
    let (h, w, c) = img.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(VtoError::RejectedInput(format!(
            "{h}x{w} not divisible by downsample factor {factor}"
        )));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = F::cast(1.0 / (factor * factor) as f64);
    let mut out = Array3::<F>::zeros((oh, ow, c));
    for y in 0..oh {
        for x in 0..ow {
            for ci in 0..c {
                let mut acc = F::zero();
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc = acc + img[[y * factor + dy, x * factor + dx, ci]];
                    }
                }
                out[[y, x, ci]] = acc * norm;
            }
        }
    }
    Ok(out)
}

/// Majority label per block, for downsampling segmentation maps.
pub fn label_downsample(seg: &Array2<u8>, factor: usize) -> Result<Array2<u8>> {
    let (h, w) = seg.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(VtoError::RejectedInput(format!(
            "{h}x{w} not divisible by downsample factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Array2::<u8>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut counts = [0usize; 256];
            for dy in 0..factor {
                for dx in 0..factor {
                    counts[seg[[y * factor + dy, x * factor + dx]] as usize] += 1;
                }
            }
            out[[y, x]] = counts
                .iter()
                .enumerate()
                .max_by_key(|(_, &n)| n)
                .map(|(l, _)| l as u8)
                .unwrap();
        }
    }
    Ok(out)
}

/// Bilinear 2x upsampling with half-pixel centers (for the cascaded SR
/// ablation's low-resolution conditioning channel).
pub fn bilinear_upsample2x<F: Scalar>(img: &Array3<F>) -> Array3<F> {
    let (h, w, c) = img.dim();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Array3::<F>::zeros((oh, ow, c));
    for oy in 0..oh {
        for ox in 0..ow {
            let sy = ((oy as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (h - 1) as f64);
            let sx = ((ox as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ci in 0..c {
                let a = img[[y0, x0, ci]].as_f64();
                let b = img[[y0, x1, ci]].as_f64();
                let d = img[[y1, x0, ci]].as_f64();
                let e = img[[y1, x1, ci]].as_f64();
                let top = a * (1.0 - fx) + b * fx;
                let bot = d * (1.0 - fx) + e * fx;
                out[[oy, ox, ci]] = F::cast(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Tiles a batch [n, h, w, 3] into one grid image, row-major, `cols` wide.
pub fn tile_grid<F: Scalar>(batch: &Array4<F>, cols: usize) -> Array3<F> {
    let (n, h, w, c) = batch.dim();
    let cols = cols.max(1).min(n.max(1));
    let rows = n.div_ceil(cols);
    let mut out = Array3::<F>::from_elem((rows * h, cols * w, c), F::cast(-1.0));
    for i in 0..n {
        let (r, col) = (i / cols, i % cols);
        let src = batch.index_axis(Axis(0), i);
        for y in 0..h {
            for x in 0..w {
                for ci in 0..c {
                    out[[r * h + y, col * w + x, ci]] = src[[y, x, ci]];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn png_round_trip_is_value_exact_on_quantized_values() {
        let mut img = Array3::<f64>::zeros((4, 6, 3));
        for (i, v) in img.iter_mut().enumerate() {
            *v = from_u8((i * 7 % 256) as u8);
        }
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.png");
        save_png_rgb(&path, &img).unwrap();
        let back = load_png_rgb::<f64>(&path).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn label_png_round_trip() {
        let mut seg = Array2::<u8>::zeros((3, 5));
        seg[[1, 2]] = 5;
        seg[[2, 4]] = 3;
        let dir = tempdir().unwrap();
        let path = dir.path().join("seg.png");
        save_png_labels(&path, &seg).unwrap();
        assert_eq!(load_png_labels(&path).unwrap(), seg);
    }

    #[test]
    fn box_downsample_averages_blocks() {
        let mut img = Array3::<f64>::zeros((4, 4, 1));
        img[[0, 0, 0]] = 1.0;
        img[[0, 1, 0]] = 0.0;
        img[[1, 0, 0]] = 0.5;
        img[[1, 1, 0]] = 0.5;
        let out = box_downsample(&img, 2).unwrap();
        assert_eq!(out.dim(), (2, 2, 1));
        assert!((out[[0, 0, 0]] - 0.5).abs() < 1e-12);
        assert_eq!(out[[1, 1, 0]], 0.0);
        assert!(box_downsample(&img, 3).is_err());
    }

    #[test]
    fn bilinear_upsample_preserves_constants_and_shape() {
        let img = Array3::<f64>::from_elem((3, 2, 3), 0.25);
        let out = bilinear_upsample2x(&img);
        assert_eq!(out.dim(), (6, 4, 3));
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn grid_tiles_in_row_major_order() {
        let mut batch = Array4::<f64>::zeros((3, 2, 2, 3));
        batch.index_axis_mut(Axis(0), 2).fill(1.0);
        let grid = tile_grid(&batch, 2);
        assert_eq!(grid.dim(), (4, 4, 3));
        assert_eq!(grid[[2, 0, 0]], 1.0); // third tile: row 1, col 0
        assert_eq!(grid[[0, 0, 0]], 0.0);
    }
}
