//! Dataset ingestion, preprocessing and the augmentation/label pipeline.

pub mod dataset;
pub mod transform;

pub use dataset::{
    decode_cifar10, load_cifar10_binary, load_cifar10_dir, synth_dataset, Dataset, Split, SynthPattern, SynthSpec,
};
pub use transform::{
    denormalize, mixup, normalize, normalize_into, random_flip_crop, resize_bilinear, resize_dataset, smooth_labels,
    AugmentConfig, ChannelStats, FlipCrop, MixupDraw,
};
