//! Sparse-view fan-beam CT with learned proximal priors, and an instance-level
//! uncertainty indicator built from reconstructions of independently resampled
//! measurement subsets.
//!
//! The pipeline is:
//!
//! 1. [`geometry`] describes the scanner and materializes the projector `A`.
//! 2. [`fbp`] is the analytic baseline.
//! 3. [`prior`] holds the input-convex potential whose gradient is the learned
//!    proximal operator, plus its proximal-matching trainer.
//! 4. [`solver`] runs proximal gradient descent with any [`solver::Proximal`].
//! 5. [`uq`] repeats acquisition + reconstruction over seeds and reduces the
//!    results to a pixel-wise mean / standard deviation and a scalar score.
//! 6. [`metrics`] and [`mnist`] are supporting plumbing.

pub mod error;
pub mod fbp;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod mnist;
pub mod prior;
pub mod solver;
pub mod uq;

pub use error::{Error, Result};
pub use fbp::{fbp_reconstruct, FbpConfig};
pub use geometry::{build_operator, AngleSet, ScanGeometry, SparseOperator};
pub use image::Image;
pub use metrics::{clamp01, psnr, ssim, MetricConfig};
pub use prior::{PriorModel, ProxMatchConfig};
pub use solver::{reconstruct, Identity, InitMode, Proximal, SolveConfig, SolveTrace};
pub use uq::{ood_flag, run_uq, ResampleMode, UncertaintyReport, UqProtocol};
