//! Mixed-precision, sensitivity-weighted k-means quantization of linear
//! layer weights.
//!
//! The pipeline works per output channel (row) of a weight matrix:
//!
//! 1. [`calibration`] turns calibration samples into a sensitivity matrix
//!    `G` (squared weight gradients) and a Hessian proxy `H = E[X Xᵀ]`.
//! 2. [`allocation`] records, for every row and every candidate bit
//!    width, the layer-wise error of clustering that row, then hands out
//!    bits greedily under a fractional average-bit budget.
//! 3. [`kmeans1d`] clusters each row with `G` as weights.
//! 4. [`scaling`] trains a per-column scaling vector with the cluster
//!    labels held fixed.
//! 5. [`packing`] writes the result as a bit-packed `SKQ1` blob.
//!
//! [`pipeline`] wires these together and [`cli`] exposes them as the
//! `skim` command.

pub mod allocation;
pub mod calibration;
pub mod cli;
pub mod error;
pub mod kmeans1d;
pub mod matrix;
pub mod oracle;
pub mod packing;
pub mod pipeline;
pub mod scaling;
pub mod store;
mod util;

pub use allocation::{AllocInit, BitAllocation, ErrorMatrix};
pub use calibration::{CalibSample, HessianProxy, RowFisherFull, Sensitivity};
pub use error::{Error, Result};
pub use kmeans1d::{ClusterResult, KmeansConfig};
pub use matrix::Matrix;
pub use packing::{PackedBlob, QuantizedLayer, SizeReport};
pub use pipeline::{PipelineConfig, QuantReport};
pub use scaling::{AdamConfig, Codebooks, LabelMatrix, ScalingVector};
pub use store::Bundle;
