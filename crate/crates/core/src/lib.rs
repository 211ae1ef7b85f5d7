//! Neural implicit surface reconstruction on analytic desk-scale scenes.
//!
//! The crate trains a signed-distance-function network jointly with a
//! view-dependent radiance network through differentiable volume rendering,
//! and lets the directional input of the radiance network be switched between
//! the viewing direction, the reflection direction, and a distance-weighted
//! hybrid of the two. Everything runs in double precision on a scalar
//! reverse-mode tape so that gradients can be checked against finite
//! differences.
//!
//! Module map:
//! - [`tape`]: scalar reverse-mode autodiff with a forward spatial-tangent
//!   channel (gradients of the SDF with respect to its input stay
//!   differentiable with respect to the parameters).
//! - [`nets`]: positional encoding, MLPs, geometric initialization, and the
//!   field bundle (SDF net, radiance net, sharpness, blend parameter).
//! - [`dirparam`]: the directional parameterizations and blend-weight
//!   machinery.
//! - [`render`]: ray sampling, SDF-to-opacity conversion, compositing.
//! - [`scenes`]: analytic CSG ground-truth scenes, cameras, and synthetic
//!   dataset generation.
//! - [`train`]: losses, Adam, learning-rate schedule, and the fit loop.
//! - [`eval`]: contour/mesh extraction, Chamfer distance, normal error, and
//!   the reflection-dispersion diagnostic.

pub mod dirparam;
pub mod error;
pub mod eval;
pub mod geom;
pub mod io;
pub mod nets;
pub mod render;
pub mod rng;
pub mod scenes;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
