//! Keypoint radial voting toolkit for 6DoF object pose estimation.
//!
//! The crate is `no_std` and only needs `alloc`. It covers the whole numeric
//! path of a keypoint-voting pose estimator trained with a synthetic-to-real
//! kernel adapter:
//!
//! - [`geometry`]: rigid transforms, the pinhole camera and triangle meshes.
//! - [`synth`]: z-buffered depth rendering and labeled scene generation.
//! - [`voting`]: radial-map accumulator voting, peak extraction and
//!   instance grouping.
//! - [`pnp`]: ePnP, Horn absolute orientation and ICP refinement.
//! - [`rkhs`]: trainable kernels, MMD estimators and their weight gradients.
//! - [`metrics`]: ADD, ADD-S, AUC, MSSD, MSPD, VSD and average recall.
//! - [`selfsup`]: losses, the training schedule, pose augmentation and the
//!   pseudo-label pipeline.
//!
//! File formats, the command line and anything touching the filesystem live
//! in the companion `posevote` crate.
#![no_std]
// `!(x > 0.0)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod error;
pub mod geometry;
pub mod metrics;
pub mod pnp;
pub mod rkhs;
pub mod selfsup;
pub mod synth;
pub mod voting;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, MeshModel, Pose};
pub use nalgebra;

pub(crate) mod prelude {
    pub use alloc::vec;
    pub use alloc::vec::Vec;
    pub use num_traits::Float;
}
