//! Differentiable 3D Gaussian splatting on the CPU, built around a hybrid
//! scene representation: ordinary free-floating Gaussian primitives plus
//! ray-bound primitives whose position is a single distance along a fixed
//! camera ray. Pixel correspondences between views drive two reprojection
//! losses (on primitive positions and on rendered depth) next to the usual
//! photometric objective, which makes sparse-view training converge to a
//! multi-view-consistent structure.
//!
//! The crate is organized as:
//! - [`geometry`]: pinhole cameras, rays, triangulation
//! - [`model`]: Gaussian primitives, covariance math, spherical harmonics
//! - [`rasterizer`]: forward rendering and analytic gradients
//! - [`matching`]: correspondence files, synthetic match generation, filtering
//! - [`losses`]: photometric, position and rendering-geometry losses
//! - [`trainer`]: the optimization loop (Adam, caching, densification)
//! - [`metrics`]: PSNR / SSIM / AVG
//! - [`scene`]: synthetic ray-cast scenes with analytic ground truth
//! - [`img`]: image buffers and PNG/PPM input-output

pub mod geometry;
pub mod img;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod rasterizer;
pub mod scene;
pub mod trainer;

pub use geometry::{Camera, Ray};
pub use img::{Image, ScalarImage};
pub use matching::{MatchPair, MatchSet};
pub use model::{GaussianPrimitive, HybridModel, PrimitiveKind};
pub use rasterizer::{GradientBuffer, RenderOptions, RenderOutput};
pub use trainer::TrainConfig;
