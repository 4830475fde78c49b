//! Non-local, non-convex p-Laplacian reactive flows for automatic saliency
//! detection in 2D images and 3D volumes.
//!
//! Three interchangeable schemes share one model:
//! * [`yosida`] — semi-implicit time stepping with Yosida penalty terms and
//!   an inner r-loop; the mathematically faithful solver.
//! * [`explicit`] — explicit per-pixel non-local sums with hard truncation
//!   to [0,1]; the correctness reference.
//! * [`quantized`] — intensity-quantized per-level convolutions (optionally
//!   through zero-padded FFTs); the throughput path.
//!
//! On top of the solvers: automatic delta estimation, the segmentation
//! pipeline, metrics, scheme-comparison and timing-sweep harnesses, and a
//! deterministic phantom generator for verification.

pub mod bench;
pub mod conv;
pub mod error;
pub mod explicit;
pub mod grid;
pub mod kernels;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod quantized;
pub mod yosida;

pub use conv::ConvMode;
pub use error::{Error, Result};
pub use grid::{
    clamp01, make_partition, normalize_input, relative_difference, round_to_partition, Dims,
    GridField, QuantizationPartition, SegmentationMask,
};
pub use kernels::{FlowParams, ReactionField, WeightKernel};

use serde::Serialize;

/// Options shared by the solver run loops.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RunOptions {
    /// Stop early once ||u^{n+1} - u^n||_inf < tol.
    pub early_exit: bool,
    /// Record the non-local energy after every step (costs one extra
    /// window sweep per step).
    pub record_energy: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            early_exit: true,
            record_energy: false,
        }
    }
}

/// Per-run statistics collected by the solvers.
#[derive(Clone, Debug, Default, Serialize)]
pub struct RunTrace {
    /// Time steps actually executed.
    pub steps: usize,
    /// ||u^{n+1} - u^n||_inf per executed step.
    pub sup_diffs: Vec<f64>,
    /// Non-local energy per step when requested, else empty.
    pub energies: Vec<f64>,
    /// Wall time of the run.
    pub seconds: f64,
}
