//! Dual-stream conditional diffusion for the 3D facial motion of two
//! conversation participants, with the synthetic data pipeline, two-stage
//! training, evaluation metrics and text-to-layout control around it.
//!
//! Numeric modules are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common 64-bit instantiations.

pub mod conditioning;
pub mod datagen;
pub mod diffusion;
pub mod dualnet;
pub mod facemodel;
pub mod layout;
pub mod metrics;
pub mod numerics;
pub mod scalar;
pub mod training;

pub use scalar::Scalar;

pub type TensorF64 = numerics::Tensor<f64>;
pub type TensorF32 = numerics::Tensor<f32>;
pub type GraphF64 = numerics::Graph<f64>;
pub type MotionFrameF64 = facemodel::MotionFrame<f64>;
pub type MotionSequenceF64 = facemodel::MotionSequence<f64>;
pub type MotionSequenceF32 = facemodel::MotionSequence<f32>;
pub type FaceBasisF64 = facemodel::FaceBasis<f64>;
pub type RigF64 = facemodel::Rig<f64>;
pub type DualNetF64 = dualnet::DualNet<f64>;
pub type DualNetF32 = dualnet::DualNet<f32>;
