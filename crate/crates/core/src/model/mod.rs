//! Standard and inverted-bottleneck MLPs, with parameter and FLOP accounting.

pub mod config;
pub mod conv;
pub mod layers;
pub mod mlp;

pub use config::{
    count_forward_flops, count_params, format_notation, parse_notation, Activation, BlockKind, InputShape, ModelConfig,
};
pub use conv::{conv_matrix, conv_reference};
pub use layers::{dropout_mask, normalize_rows, LayerNorm, Linear, NormStats, LN_EPS};
pub use mlp::{BlockParams, ForwardCache, MlpModel, MlpParams};
