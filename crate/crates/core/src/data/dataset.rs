use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images stored as `N x h x w x c` bytes with integer labels in `[0, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<u32>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub split: Split,
}

pub const CIFAR10_SIDE: usize = 32;
pub const CIFAR10_RECORD: usize = 1 + 3 * CIFAR10_SIDE * CIFAR10_SIDE;

const MLDS_MAGIC: &[u8; 4] = b"MLDS";
const MLDS_VERSION: u32 = 1;
const MLDS_HEADER: usize = 4 + 4 * 6;

impl Dataset {
    pub fn new(
        images: Vec<u8>,
        labels: Vec<u32>,
        (height, width, channels): (usize, usize, usize),
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let ds = Self {
            images,
            labels,
            height,
            width,
            channels,
            num_classes,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if self.images.len() != self.labels.len() * self.image_len() {
            return Err(Error::BadLength {
                shape: vec![self.labels.len(), self.height, self.width, self.channels],
                len: self.images.len(),
            });
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(Error::invalid(format!("label {bad} >= num_classes {}", self.num_classes)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let d = self.image_len();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Dataset restricted to `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let d = self.image_len();
        let mut images = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            images,
            labels,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
            height: self.height,
            width: self.width,
            channels: self.channels,
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Keeps `round(fraction * count_k)` examples of every class `k` (at least
    /// one for non-empty classes), chosen uniformly; original order is kept.
    pub fn subsample_proportional(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!("subsample fraction must lie in (0, 1], got {fraction}")));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        let mut keep = Vec::new();
        for (k, members) in by_class.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let take = ((members.len() as f64 * fraction).round() as usize).clamp(1, members.len());
            let mut rng = SeededRng::derived(seed, &[k as u64]);
            let perm = rng.permutation(members.len());
            keep.extend(perm[..take].iter().map(|&p| members[p]));
        }
        keep.sort_unstable();
        Ok(self.select(&keep))
    }

    pub fn save_mlds(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::with_capacity(MLDS_HEADER + self.images.len() + 4 * self.len());
        out.extend_from_slice(MLDS_MAGIC);
        for v in [
            MLDS_VERSION,
            self.len() as u32,
            self.height as u32,
            self.width as u32,
            self.channels as u32,
            self.num_classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.images);
        for &l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn load_mlds(path: impl AsRef<Path>, split: Split) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::decode_mlds(&bytes, split)
    }

    /// Header: `MLDS`, then version, N, h, w, c, K as little-endian u32;
    /// followed by the image bytes and one little-endian u32 label per image.
    pub fn decode_mlds(bytes: &[u8], split: Split) -> Result<Self> {
        if bytes.len() < MLDS_HEADER {
            return Err(Error::format(bytes.len() as u64, "truncated MLDS header"));
        }
        if &bytes[..4] != MLDS_MAGIC {
            return Err(Error::format(0, "bad magic, expected MLDS"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        if word(0) != MLDS_VERSION as usize {
            return Err(Error::format(4, format!("unsupported MLDS version {}", word(0))));
        }
        let (n, h, w, c, k) = (word(1), word(2), word(3), word(4), word(5));
        let img_bytes = n * h * w * c;
        let need = MLDS_HEADER + img_bytes + 4 * n;
        if bytes.len() < need {
            return Err(Error::format(bytes.len() as u64, format!("truncated MLDS body, need {need} bytes")));
        }
        let images = bytes[MLDS_HEADER..MLDS_HEADER + img_bytes].to_vec();
        let label_start = MLDS_HEADER + img_bytes;
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let off = label_start + 4 * i;
            let l = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if l as usize >= k {
                return Err(Error::format(off as u64, format!("label {l} >= {k}")));
            }
            labels.push(l);
        }
        Dataset::new(images, labels, (h, w, c), k, split)
    }
}

/// Decodes CIFAR-10 binary records (1 label byte + 3072 channel-major pixel
/// bytes) into `h x w x c` images.
pub fn decode_cifar10(bytes: &[u8], split: Split) -> Result<Dataset> {
    let plane = CIFAR10_SIDE * CIFAR10_SIDE;
    if bytes.is_empty() {
        return Err(Error::format(0, "empty CIFAR-10 file"));
    }
    let whole = bytes.len() / CIFAR10_RECORD;
    if !bytes.len().is_multiple_of(CIFAR10_RECORD) {
        return Err(Error::format(
            (whole * CIFAR10_RECORD) as u64,
            format!("truncated record ({} trailing bytes)", bytes.len() % CIFAR10_RECORD),
        ));
    }
    let mut images = vec![0u8; whole * 3 * plane];
    let mut labels = Vec::with_capacity(whole);
    for (r, rec) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        let label = rec[0];
        if label >= 10 {
            return Err(Error::format((r * CIFAR10_RECORD) as u64, format!("label {label} >= 10")));
        }
        labels.push(label as u32);
        let img = &mut images[r * 3 * plane..(r + 1) * 3 * plane];
        for ch in 0..3 {
            for p in 0..plane {
                img[p * 3 + ch] = rec[1 + ch * plane + p];
            }
        }
    }
    Dataset::new(images, labels, (CIFAR10_SIDE, CIFAR10_SIDE, 3), 10, split)
}

pub fn load_cifar10_binary(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    decode_cifar10(&fs::read(path)?, split)
}

/// Loads `data_batch_{1..5}.bin` or `test_batch.bin` from a CIFAR-10 binary
/// directory.
pub fn load_cifar10_dir(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let mut bytes = Vec::new();
    for f in files {
        bytes.extend(fs::read(dir.join(f))?);
    }
    decode_cifar10(&bytes, split)
}

/// Class-conditional pattern used by [`synth_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthPattern {
    /// Background noise in `[0, noise]` plus one saturated pixel at a
    /// class-specific location; linearly separable whenever `noise < 255`.
    BrightPixel { noise: u8 },
    /// A fixed random prototype per class blended with per-example noise:
    /// `pixel = (1 - mix) * prototype + mix * noise`. Difficulty grows with `mix`.
    Prototype { mix: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub pattern: SynthPattern,
    /// Exactly `n / K` per class (remainder spread over the first classes).
    #[serde(default = "default_true")]
    pub balanced: bool,
}

fn default_true() -> bool {
    true
}

pub fn synth_dataset(spec: &SynthSpec, seed: u64, split: Split) -> Result<Dataset> {
    let SynthSpec {
        n,
        height,
        width,
        channels,
        num_classes,
        ..
    } = *spec;
    if num_classes > n {
        return Err(Error::invalid(format!("num_classes {num_classes} exceeds n {n}")));
    }
    if num_classes < 2 || height * width * channels == 0 {
        return Err(Error::invalid("synthetic spec needs K >= 2 and non-empty images"));
    }
    let split_tag = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut rng = SeededRng::derived(seed, &[split_tag]);
    let mut labels: Vec<u32> = if spec.balanced {
        (0..n).map(|i| (i % num_classes) as u32).collect()
    } else {
        (0..n).map(|_| (rng.next_below(num_classes as u64)) as u32).collect()
    };
    let perm = rng.permutation(n);
    labels = perm.iter().map(|&p| labels[p]).collect();

    let d = height * width * channels;
    let pixels = height * width;
    let mut images = vec![0u8; n * d];
    match spec.pattern {
        SynthPattern::BrightPixel { noise } => {
            for (i, &l) in labels.iter().enumerate() {
                let img = &mut images[i * d..(i + 1) * d];
                for v in img.iter_mut() {
                    *v = rng.next_below(noise as u64 + 1) as u8;
                }
                let loc = (l as usize * pixels) / num_classes;
                for ch in 0..channels {
                    img[loc * channels + ch] = 255;
                }
            }
        }
        SynthPattern::Prototype { mix } => {
            if !(0.0..=1.0).contains(&mix) {
                return Err(Error::invalid(format!("prototype mix must lie in [0, 1], got {mix}")));
            }
            // Prototypes depend on the seed only, so train and test share them.
            let mut proto_rng = SeededRng::derived(seed, &[u64::MAX]);
            let protos: Vec<f64> = (0..num_classes * d).map(|_| proto_rng.uniform() * 255.0).collect();
            for (i, &l) in labels.iter().enumerate() {
                let proto = &protos[l as usize * d..(l as usize + 1) * d];
                for (v, &p) in images[i * d..(i + 1) * d].iter_mut().zip(proto) {
                    let noise = rng.uniform() * 255.0;
                    *v = ((1.0 - mix) * p + mix * noise).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    Dataset::new(images, labels, (height, width, channels), num_classes, split)
}
