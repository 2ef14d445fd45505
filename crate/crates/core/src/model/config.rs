use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// `sigma(W LN(z))`, no skip connection.
    Standard,
    /// `z + W_c sigma(W_e LN(z))` with `W_e` of shape `km x m`.
    InvertedBottleneck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Exact form `x * Phi(x)` with the Gaussian CDF.
    Gelu,
}

/// Image extent fed to the embedding layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn square(side: usize) -> Self {
        Self::new(side, side, 3)
    }

    /// Length of the flattened image.
    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub expansion: usize,
    pub input: InputShape,
    pub num_classes: usize,
    pub block: BlockKind,
    pub activation: Activation,
    pub dropout: f64,
}

impl ModelConfig {
    pub const DEFAULT_EXPANSION: usize = 4;

    /// Inverted-bottleneck config with `k = 4`, ReLU and no dropout.
    pub fn bottleneck(depth: usize, width: usize, input: InputShape, num_classes: usize) -> Self {
        Self {
            depth,
            width,
            expansion: Self::DEFAULT_EXPANSION,
            input,
            num_classes,
            block: BlockKind::InvertedBottleneck,
            activation: Activation::Relu,
            dropout: 0.0,
        }
    }

    pub fn standard(depth: usize, width: usize, input: InputShape, num_classes: usize) -> Self {
        Self {
            block: BlockKind::Standard,
            ..Self::bottleneck(depth, width, input, num_classes)
        }
    }

    /// Parses `B-{L}/Wi-{m}` into an inverted-bottleneck config.
    pub fn from_notation(notation: &str, input: InputShape, num_classes: usize) -> Result<Self> {
        let (depth, width) = parse_notation(notation)?;
        Ok(Self::bottleneck(depth, width, input, num_classes))
    }

    pub fn notation(&self) -> String {
        format_notation(self.depth, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.depth < 1 {
            return fail("depth must be at least 1");
        }
        if self.width < 1 {
            return fail("width must be at least 1");
        }
        if self.expansion < 1 {
            return fail("expansion must be at least 1");
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2");
        }
        if self.input.dim() == 0 {
            return fail("input extents must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Width of the hidden layer inside a block.
    pub fn hidden_width(&self) -> usize {
        match self.block {
            BlockKind::Standard => self.width,
            BlockKind::InvertedBottleneck => self.expansion * self.width,
        }
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.notation())
    }
}

pub fn parse_notation(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::BadNotation(s.to_string());
    let (b, w) = s.split_once('/').ok_or_else(bad)?;
    let depth = b.strip_prefix("B-").ok_or_else(bad)?;
    let width = w.strip_prefix("Wi-").ok_or_else(bad)?;
    let digits = |t: &str| !t.is_empty() && t.bytes().all(|c| c.is_ascii_digit());
    if !digits(depth) || !digits(width) {
        return Err(bad());
    }
    let depth: usize = depth.parse().map_err(|_| bad())?;
    let width: usize = width.parse().map_err(|_| bad())?;
    if depth == 0 || width == 0 {
        return Err(bad());
    }
    Ok((depth, width))
}

pub fn format_notation(depth: usize, width: usize) -> String {
    format!("B-{depth}/Wi-{width}")
}

/// Scalar parameter count, including biases and LayerNorm affines.
///
/// Bottleneck: `m*d + 2kLm^2 + Km + (m + (k+3)Lm + K)`;
/// standard: `m*d + Lm^2 + Km + (m + 3Lm + K)`, with `d = h*w*c`.
pub fn count_params(config: &ModelConfig) -> u64 {
    let m = config.width as u64;
    let l = config.depth as u64;
    let k = config.expansion as u64;
    let d = config.input.dim() as u64;
    let classes = config.num_classes as u64;
    let embed = m * d + m;
    let block = match config.block {
        BlockKind::Standard => m * m + m + 2 * m,
        BlockKind::InvertedBottleneck => 2 * k * m * m + k * m + m + 2 * m,
    };
    let head = classes * m + classes;
    embed + l * block + head
}

/// Forward-pass FLOPs per example, one per weight-matrix multiply-accumulate.
/// Biases, normalization and activations are not counted.
pub fn count_forward_flops(config: &ModelConfig) -> u64 {
    let m = config.width as u64;
    let l = config.depth as u64;
    let k = config.expansion as u64;
    let d = config.input.dim() as u64;
    let classes = config.num_classes as u64;
    let block = match config.block {
        BlockKind::Standard => m * m,
        BlockKind::InvertedBottleneck => 2 * k * m * m,
    };
    m * d + l * block + classes * m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn in64() -> InputShape {
        InputShape::square(64)
    }

    #[test]
    fn notation_roundtrip() {
        assert_eq!(parse_notation("B-12/Wi-768").unwrap(), (12, 768));
        assert_eq!(format_notation(12, 768), "B-12/Wi-768");
        for bad in ["B-12", "B-/Wi-3", "b-1/Wi-3", "B-1/Wi--1", "B-0/Wi-4", "B-1/Wi-4x", "B-+1/Wi-4"] {
            assert!(parse_notation(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn table6_counts() {
        let c = ModelConfig::from_notation("B-12/Wi-768", in64(), 1000).unwrap();
        assert_eq!(count_params(&c), 66_894_568);
        assert_eq!(count_forward_flops(&c), 66_828_288);
    }

    #[test]
    fn b6_1024_counts() {
        let c = ModelConfig::from_notation("B-6/Wi-1024", in64(), 10450).unwrap();
        assert_eq!(count_params(&c), 73_669_842);
        assert_eq!(count_forward_flops(&c), 73_615_360);
    }

    #[test]
    fn tiny_hand_counts() {
        let c = ModelConfig {
            expansion: 1,
            ..ModelConfig::standard(1, 1, InputShape::new(1, 1, 1), 2)
        };
        assert_eq!(count_params(&c), 10);
        let c1 = ModelConfig { num_classes: 1, ..c };
        assert_eq!(count_forward_flops(&c1), 3);
    }

    #[test]
    fn width_doubling_quadruples_block_term() {
        let a = ModelConfig::from_notation("B-3/Wi-16", InputShape::new(1, 1, 1), 2).unwrap();
        let b = ModelConfig { width: 32, ..a.clone() };
        let block = |c: &ModelConfig| {
            count_forward_flops(c) - (c.width * c.input.dim() + c.num_classes * c.width) as u64
        };
        assert_eq!(block(&b), 4 * block(&a));
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::bottleneck(2, 8, InputShape::square(4), 10);
        assert!(c.validate().is_ok());
        c.num_classes = 1;
        assert!(c.validate().is_err());
        c.num_classes = 2;
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }
}
