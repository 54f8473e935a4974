//! Ring detection and 3D localization of out-of-focus particles.
//!
//! The detector finds the outer diffraction ring of each particle with a
//! directed-ridge circle Hough transform:
//!
//! 1. [`imaging`]: Gaussian scale selection and the least principal
//!    curvature of the intensity Hessian.
//! 2. [`ridges`]: directed ridge pixels (negative curvature, minimal along
//!    the principal direction).
//! 3. [`hough`]: votes along each ridge direction, fully sorted and streamed
//!    through a fixed three-level accumulator slab with radius-dependent
//!    smoothing and `1/r` normalization.
//! 4. [`refine`]: annulus classification of ridge pixels and algebraic
//!    circle fits for sub-pixel parameters.
//!
//! [`pipeline`] ties these together per frame. Downstream, [`calib`] maps
//! ring radius to axial position, [`track`] links positions into
//! trajectories and [`spline`] smooths them. [`synth`] renders ground-truth
//! scenes and scores detections; [`batch`] runs a producer/consumer worker
//! pool over image sequences.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod calib;
pub mod cli;
pub mod error;
pub mod hough;
pub mod imaging;
pub mod pipeline;
pub mod refine;
pub mod ridges;
pub mod spline;
pub mod synth;
pub mod track;

pub use error::{Error, Result};
pub use hough::{AccumulatorSlab, HoughConfig, PeakCandidate};
pub use imaging::GrayImage;
pub use pipeline::{detect_rings, detect_rings_oracle, Detector, DetectorConfig};
pub use refine::{AnnulusWidth, RingDetection};
pub use ridges::DirectedRidge;
