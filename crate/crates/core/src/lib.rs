//! Visual-tactile depth supervision.
//!
//! Tactile contacts are turned into a Gaussian Process Implicit Surface
//! ([`gpis`]), which is sphere-traced into per-view depth and variance images
//! ([`sdfrender`]). Monocular depth maps are aligned to metric scale and to the
//! touched object ([`align`]) and fused with the touch depth by inverse-variance
//! weighting ([`fuse`]). The fused images supervise a small differentiable
//! point-blend renderer ([`splat`]) through an uncertainty-weighted depth loss.
//! [`touchsim`] produces synthetic scenes and [`metrics`] scores the results.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod align;
pub mod camera;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fuse;
pub mod geom;
pub mod gpis;
pub mod image;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod sdfrender;
pub mod splat;
pub mod touchsim;
pub mod workflow;

pub use camera::{CameraModel, Ray};
pub use error::{Error, Result};
pub use geom::{Pose, Vec3};
pub use gpis::{ConditioningSet, GpisModel, KernelParams, TouchReading};
pub use image::{DepthVarImage, Grid, Image, RgbImage, MISS_VAR};
