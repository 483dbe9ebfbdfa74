//! Implicit rendering refinement for dense segmentation.
//!
//! The pipeline couples a small encoder-decoder backbone with a stochastic
//! mixture-of-experts fusion of decoder features and a point-wise rendering
//! head that re-predicts class logits at uncertain pixels. A kernel
//! verification suite checks the positional-encoding kernel identity, random
//! Fourier feature approximation, and empirical NTK behavior that motivate
//! the design.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod iar;
pub mod kernel_lab;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scene;
pub mod segnet;
pub mod smoe;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
