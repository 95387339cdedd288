//! Desk-scale structured-light reconstruction: synthetic multi-view image
//! pairs from analytic scenes lit by a camera-rigged pattern projector, a
//! jointly trained radiance field / BRDF field / projector pattern, depth
//! extraction, TSDF fusion and point-cloud evaluation.

pub mod autodiff;
pub mod geometry;

pub use autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
pub use geometry::{PinholeIntrinsics, Ray, RigidPose, SampleGrid};
