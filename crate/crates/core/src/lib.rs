//! Spherical-Gaussian lighting toolkit.
//!
//! The crate covers the analytic side of SG-based inverse rendering:
//!
//! - [`sg`]: lobes, mixtures with per-pixel visibility, closed-form sphere integrals.
//! - [`envmap`]: equirectangular environment maps, PFM I/O, the `ln(1+x)` HDR transform.
//! - [`vsg`]: voxel grids of (opacity, SG) records and ray compositing in both operation orders.
//! - [`brdf`]: Lambert + GGX rendering under SG lighting, specular input encoding, Monte-Carlo oracle.
//! - [`multiview`]: pinhole cameras, depth projection error, occlusion weights/masks, volume splatting.
//! - [`aggregation`]: token construction and masked / weighted attention with injected weights.
//! - [`sgfit`]: Levenberg-Marquardt fitting of SG mixtures to environment maps.
//! - [`metrics`]: masked angular / MSE / log-MSE losses and their scale-invariant variants.
//! - [`scene`]: the plain-text scene file consumed by the CLI.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod aggregation;
pub mod brdf;
pub mod envmap;
pub mod error;
pub mod metrics;
pub mod multiview;
pub mod scene;
pub mod sg;
pub mod sgfit;
pub mod vsg;

pub use error::{Error, Result};

/// World-space 3-vector.
pub type Vec3 = nalgebra::Vector3<f64>;
/// Linear HDR radiance triple.
pub type Rgb = nalgebra::Vector3<f64>;
