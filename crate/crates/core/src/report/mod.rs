//! Embedding-filter visualization and scaling plots.

pub mod filters;
pub mod plot;

pub use filters::{encode_pgm, export_pgm, filter_grid, filter_tile, FilterGrid, GrayImage};
pub use plot::{scaling_plot_svg, PlotSpec, FIT_SAMPLES};
