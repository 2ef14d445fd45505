//! Preprocessing and augmentation: channel normalization, bilinear resize,
//! random flip and crop, MixUp and label smoothing.

use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::dataset::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, SeededRng};

/// Per-channel statistics of `pixel / 255`, computed once on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Population mean and standard deviation per channel.
    pub fn compute(ds: &Dataset) -> Result<Self> {
        let c = ds.channels;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for px in ds.images.chunks_exact(c) {
            for ch in 0..c {
                let v = px[ch] as f64 / 255.0;
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
        let n = (ds.images.len() / c) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        // Second pass for the variance to avoid cancellation.
        let mut var = vec![0.0f64; c];
        for px in ds.images.chunks_exact(c) {
            for ch in 0..c {
                let d = px[ch] as f64 / 255.0 - mean[ch];
                var[ch] += d * d;
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
        let stats = Self { mean, std };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(ch) = self.std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::ZeroStd(ch));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// `(pixel/255 - mean_c) / std_c` for a run of interleaved `h x w x c` bytes.
pub fn normalize_into<T: Scalar>(pixels: &[u8], stats: &ChannelStats, out: &mut [T]) -> Result<()> {
    stats.validate()?;
    let c = stats.channels();
    if pixels.len() != out.len() || !pixels.len().is_multiple_of(c) {
        return Err(Error::BadLength {
            shape: vec![pixels.len()],
            len: out.len(),
        });
    }
    let scale: Vec<f64> = stats.std.iter().map(|s| 1.0 / (255.0 * s)).collect();
    let shift: Vec<f64> = stats.mean.iter().zip(&stats.std).map(|(m, s)| m / s).collect();
    for (px, o) in pixels.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        for ch in 0..c {
            o[ch] = T::lit(px[ch] as f64 * scale[ch] - shift[ch]);
        }
    }
    Ok(())
}

pub fn normalize<T: Scalar>(pixels: &[u8], stats: &ChannelStats) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); pixels.len()];
    normalize_into(pixels, stats, &mut out)?;
    Ok(out)
}

/// Inverse of [`normalize`], returning raw `[0, 255]` pixel values.
pub fn denormalize<T: Scalar>(values: &[T], stats: &ChannelStats) -> Vec<f64> {
    let c = stats.channels();
    values
        .chunks_exact(c)
        .flat_map(|px| (0..c).map(move |ch| (px[ch].as_f64() * stats.std[ch] + stats.mean[ch]) * 255.0))
        .collect()
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let x = if dst == 1 {
                (src as f64 - 1.0) / 2.0
            } else {
                i as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
            };
            let lo = (x.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

/// Separable bilinear resize of an `h x w x c` image to `out_h x out_w`, with
/// the corner pixels of source and target aligned.
pub fn resize_bilinear(image: &[f64], (h, w, c): (usize, usize, usize), out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    if image.len() != h * w * c || h == 0 || w == 0 {
        return Err(Error::BadLength {
            shape: vec![h, w, c],
            len: image.len(),
        });
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    let ys = sample_positions(h, out_h);
    let xs = sample_positions(w, out_w);
    // Rows first, then columns.
    let mut tmp = vec![0.0; out_h * w * c];
    for (oi, &(y0, y1, fy)) in ys.iter().enumerate() {
        for j in 0..w {
            for ch in 0..c {
                let a = image[(y0 * w + j) * c + ch];
                let b = image[(y1 * w + j) * c + ch];
                tmp[(oi * w + j) * c + ch] = a + (b - a) * fy;
            }
        }
    }
    let mut out = vec![0.0; out_h * out_w * c];
    for oi in 0..out_h {
        for (oj, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let a = tmp[(oi * w + x0) * c + ch];
                let b = tmp[(oi * w + x1) * c + ch];
                out[(oi * out_w + oj) * c + ch] = a + (b - a) * fx;
            }
        }
    }
    Ok(out)
}

/// Resizes every image of `ds` to `height x width`, rounding back to bytes.
pub fn resize_dataset(ds: &Dataset, height: usize, width: usize) -> Result<Dataset> {
    if ds.height == height && ds.width == width {
        return Ok(ds.clone());
    }
    let dims = (ds.height, ds.width, ds.channels);
    let mut images = Vec::with_capacity(ds.len() * height * width * ds.channels);
    for i in 0..ds.len() {
        let src: Vec<f64> = ds.image(i).iter().map(|&v| v as f64).collect();
        let out = resize_bilinear(&src, dims, height, width)?;
        images.extend(out.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    }
    Dataset::new(images, ds.labels.clone(), (height, width, ds.channels), ds.num_classes, ds.split)
}

/// One draw of the flip/crop augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlipCrop {
    pub flip: bool,
    /// Crop window offset into the padded image, each in `0..=2*pad`.
    pub dy: usize,
    pub dx: usize,
    pub pad: usize,
}

impl FlipCrop {
    /// Flips with probability 1/2 when `flip` is set; offsets are uniform.
    pub fn draw(flip: bool, pad: usize, rng: &mut SeededRng) -> Self {
        let flip = flip && rng.next_below(2) == 1;
        let span = 2 * pad as u64 + 1;
        let dy = rng.next_below(span) as usize;
        let dx = rng.next_below(span) as usize;
        Self { flip, dy, dx, pad }
    }

    /// Mirrors horizontally (if drawn), zero-pads by `pad`, then crops the
    /// original extent at `(dy, dx)`.
    pub fn apply<T: Scalar>(&self, image: &[T], (h, w, c): (usize, usize, usize), out: &mut [T]) {
        debug_assert_eq!(image.len(), h * w * c);
        for i in 0..h {
            let sy = (i + self.dy) as isize - self.pad as isize;
            for j in 0..w {
                let sx = (j + self.dx) as isize - self.pad as isize;
                let dst = &mut out[(i * w + j) * c..(i * w + j + 1) * c];
                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                    dst.fill(T::zero());
                    continue;
                }
                let col = if self.flip { w - 1 - sx as usize } else { sx as usize };
                let src = (sy as usize * w + col) * c;
                dst.copy_from_slice(&image[src..src + c]);
            }
        }
    }
}

pub fn random_flip_crop<T: Scalar>(image: &[T], dims: (usize, usize, usize), pad: usize, rng: &mut SeededRng) -> Vec<T> {
    let draw = FlipCrop::draw(true, pad, rng);
    let mut out = vec![T::zero(); image.len()];
    draw.apply(image, dims, &mut out);
    out
}

/// `(1 - alpha) onehot + alpha / K`, one row per label.
pub fn smooth_labels<T: Scalar>(labels: &[u32], alpha: f64, num_classes: usize) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(format!("label smoothing must lie in [0, 1), got {alpha}")));
    }
    let off = T::lit(alpha / num_classes as f64);
    let on = T::lit(1.0 - alpha + alpha / num_classes as f64);
    let mut out = vec![off; labels.len() * num_classes];
    for (row, &l) in out.chunks_exact_mut(num_classes).zip(labels) {
        if l as usize >= num_classes {
            return Err(Error::invalid(format!("label {l} >= {num_classes}")));
        }
        row[l as usize] = on;
    }
    Ok(out)
}

/// The MixUp draw applied to a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupDraw {
    pub lambda: f64,
    pub partner: Vec<usize>,
}

impl MixupDraw {
    pub fn draw(batch: usize, alpha: f64, rng: &mut SeededRng) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::invalid(format!("mixup strength must be positive, got {alpha}")));
        }
        if batch < 2 {
            return Err(Error::invalid("mixup needs a batch of at least 2"));
        }
        let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid(e.to_string()))?;
        let lambda = beta.sample(rng);
        let partner = rng.permutation(batch);
        Ok(Self { lambda, partner })
    }

    /// `row_i <- lambda row_i + (1 - lambda) row_partner(i)` for images and targets.
    pub fn apply<T: Scalar>(&self, images: &mut [T], targets: &mut [T]) -> Result<()> {
        let b = self.partner.len();
        if b == 0 || !images.len().is_multiple_of(b) || !targets.len().is_multiple_of(b) {
            return Err(Error::invalid("mixup batch shape mismatch"));
        }
        let lam = T::lit(self.lambda);
        let rest = T::lit(1.0 - self.lambda);
        for buf in [images, targets] {
            let d = buf.len() / b;
            let orig = buf.to_vec();
            for (i, row) in buf.chunks_exact_mut(d).enumerate() {
                let other = &orig[self.partner[i] * d..(self.partner[i] + 1) * d];
                for (v, &o) in row.iter_mut().zip(other) {
                    *v = lam * *v + rest * o;
                }
            }
        }
        Ok(())
    }
}

/// Draws and applies MixUp to a batch in place.
pub fn mixup<T: Scalar>(images: &mut [T], targets: &mut [T], batch: usize, alpha: f64, rng: &mut SeededRng) -> Result<MixupDraw> {
    let draw = MixupDraw::draw(batch, alpha, rng)?;
    draw.apply(images, targets)?;
    Ok(draw)
}

/// Augmentation policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    pub crop_pad: usize,
    /// Beta(alpha, alpha) strength; 0 disables MixUp.
    pub mixup_alpha: f64,
    pub label_smoothing: f64,
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip: false,
            crop_pad: 0,
            mixup_alpha: 0.0,
            label_smoothing: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mixup_alpha >= 0.0) {
            return Err(Error::invalid("mixup_alpha must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid("label_smoothing must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn spatial(&self) -> bool {
        self.flip || self.crop_pad > 0
    }
}
