//! Numerical core for recovering metric hand trajectories from monocular video
//! reconstructions and generating cost-guided interaction trajectories with a
//! diffusion sampler over a TSDF scene.
//!
//! Module map:
//! - [`geom`]: pinhole cameras, rigid transforms, SE(3) exp/log
//! - [`ingest`]: scene bundles on disk and the synthetic scene generator
//! - [`metric`]: global scale recovery and pose/scale refinement
//! - [`afford`]: trajectory/contact/goal extraction, heatmaps, coarse losses
//! - [`tsdf`]: volumetric fusion and trilinear queries
//! - [`costs`]: guidance costs with analytic gradients
//! - [`diffusion`]: schedules, forward/reverse process, guided sampling, ranking
//! - [`denoiser`]: analytic GMM denoiser and a trainable MLP denoiser
//! - [`gradcheck`]: analytic vs finite-difference gradient harness
//! - [`ply`]: ASCII PLY export for inspection

pub mod afford;
pub mod costs;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod geom;
pub mod gradcheck;
pub mod ingest;
pub mod io;
pub mod metric;
pub mod par;
pub mod ply;
pub mod stats;
pub mod tsdf;

pub use error::{Error, Result};
pub use geom::{Intrinsics, Pose, Twist};
pub use par::Parallelism;

/// A 3-vector in meters (or scale-unaware SfM units where stated).
pub type Vec3 = nalgebra::Vector3<f64>;
