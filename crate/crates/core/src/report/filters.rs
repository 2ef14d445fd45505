use std::io::Write;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}

/// A `g x g` mosaic of embedding filters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterGrid {
    pub image: GrayImage,
    pub grid: usize,
    pub tiles: usize,
    pub tile_height: usize,
    pub tile_width: usize,
}

/// One embedding row as an `h x w` tile: channel-wise max per pixel, then
/// min-max scaled to `[0, 255]`. A constant row maps to 128 everywhere.
pub fn filter_tile<T: Scalar>(row: &[T], h: usize, w: usize, c: usize) -> Vec<u8> {
    let maxed: Vec<f64> = row
        .chunks_exact(c)
        .map(|px| px.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    debug_assert_eq!(maxed.len(), h * w);
    let lo = maxed.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = maxed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; h * w];
    }
    maxed
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Lays out the first `g^2` rows of an `m x (h*w*c)` embedding matrix as a
/// `g x g` grid of tiles. Requests for more tiles than rows are clamped to
/// `m`; the unused cells stay black.
pub fn filter_grid<T: Scalar>(weight: &Tensor<T>, h: usize, w: usize, c: usize, grid: usize) -> Result<FilterGrid> {
    if weight.shape().len() != 2 || weight.cols() != h * w * c {
        return Err(Error::ShapeMismatch {
            left: weight.shape().to_vec(),
            right: vec![weight.rows(), h * w * c],
        });
    }
    if grid == 0 || c == 0 {
        return Err(Error::invalid("filter grid needs at least one tile and one channel"));
    }
    let m = weight.rows();
    let mut tiles = grid * grid;
    if tiles > m {
        warn!("requested {tiles} filters but the embedding has only {m}; showing {m}");
        tiles = m;
    }
    let (gw, gh) = (grid * w, grid * h);
    let mut pixels = vec![0u8; gw * gh];
    let d = h * w * c;
    for t in 0..tiles {
        let tile = filter_tile(&weight.data()[t * d..(t + 1) * d], h, w, c);
        let (ty, tx) = (t / grid, t % grid);
        for i in 0..h {
            let dst = (ty * h + i) * gw + tx * w;
            pixels[dst..dst + w].copy_from_slice(&tile[i * w..(i + 1) * w]);
        }
    }
    Ok(FilterGrid {
        image: GrayImage {
            width: gw,
            height: gh,
            pixels,
        },
        grid,
        tiles,
        tile_height: h,
        tile_width: w,
    })
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

/// Binary (P5) PGM with maximum value 255.
pub fn export_pgm(image: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_pgm(image))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header() {
        let img = GrayImage {
            width: 1,
            height: 1,
            pixels: vec![0],
        };
        assert_eq!(encode_pgm(&img), b"P5\n1 1\n255\n\x00".to_vec());
    }

    #[test]
    fn constant_row_is_mid_gray() {
        assert_eq!(filter_tile(&[0.3f64; 12], 2, 2, 3), vec![128; 4]);
    }

    #[test]
    fn peak_localizes() {
        let (h, w, c) = (4, 5, 3);
        let mut row = vec![0.0f64; h * w * c];
        row[(2 * w + 3) * c + 1] = 9.0;
        let tile = filter_tile(&row, h, w, c);
        assert_eq!(tile[2 * w + 3], 255);
        assert_eq!(tile.iter().filter(|&&v| v == 255).count(), 1);
    }

    #[test]
    fn clamps_to_available_rows() {
        let wt = Tensor::<f64>::zeros(&[3, 12]);
        let g = filter_grid(&wt, 2, 2, 3, 2).unwrap();
        assert_eq!(g.tiles, 3);
        assert_eq!((g.image.width, g.image.height), (4, 4));
    }
}
