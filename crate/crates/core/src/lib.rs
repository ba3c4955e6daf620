//! Facial landmark detection with a pose-weighted loss.
//!
//! The crate bundles everything needed to train and evaluate a compact
//! landmark regressor on 112×112 face crops:
//!
//! * [`geometry`]: the canonical 3D reference face, weak-perspective pose
//!   fitting and Euler-angle conversions used to annotate head pose.
//! * [`loss`]: the pose- and imbalance-weighted landmark loss together with
//!   the plain ℓ2/ℓ1 baselines and their analytic gradients.
//! * [`network`]: a small from-scratch CNN engine (convolution, depthwise
//!   convolution, batch norm, inverted residual bottlenecks, linear layers)
//!   and the backbone/auxiliary networks built from it.
//! * [`data`]: manifests, cropping, augmentation, attribute statistics,
//!   angle annotation and a synthetic face generator.
//! * [`training`]: single-stage Adam training of both branches.
//! * [`evaluation`]: NME, CED curves, split reports and timing.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iteration otherwise.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod landmarks;
pub mod loss;
pub mod network;
pub mod par;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{EulerAngles, PoseEstimate, ReferenceFace, RotationMatrix};
pub use landmarks::{LandmarkSet, Point2, Point3, Scheme};
