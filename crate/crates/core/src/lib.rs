//! Camera intrinsic calibration from the imaged horizon of a known ellipsoid.
//!
//! The horizon of an ellipsoid seen from a known position is a cone; its
//! image is a conic related to the cone by the camera matrix `K`. Given the
//! cone and a fitted image conic, [`calibrate::calibrate_single`] recovers
//! `K` in closed form. [`batch`] combines several images and [`synth`]
//! produces synthetic observations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod calibrate;
pub mod conics;
pub mod error;
pub mod geometry;
pub mod synth;

pub use batch::{batch_focal, batch_principal, BatchInput, ImageTerms};
pub use calibrate::{calibrate_single, CalibrationEstimate, CalibrationResult, CameraIntrinsics};
pub use conics::{fit_conic, Conic, EllipseParams, FitMethod};
pub use error::{Error, ErrorKind, Result};
pub use geometry::{EllipsoidShape, Pose};
