//! Kernel discrepancy metrics between conditional distributions.
//!
//! The crate provides:
//!
//! - [`kernels`]: Gaussian, linear, tensor-product and feature-aware deep kernels,
//!   Gram matrices and the median bandwidth heuristic.
//! - [`estimators`]: unbiased Monte-Carlo estimators of the joint (JMMD) and
//!   averaged (AMMD) conditional discrepancies, the classical unbiased MMD², the
//!   ridge-regularized CMMD baseline, and the model-free constants C₀ / C₁.
//! - [`oracle`]: exact enumeration on finite discrete instances, closed-form
//!   estimator variances and a finite-feature CMMD reference.
//! - [`nn`]: a small ReLU MLP with hand-written backpropagation and Adam.
//! - [`training`]: A-CGM / J-CGM / CMMD training loops.
//! - [`data`]: synthetic tasks with known conditionals, CSV ingestion, normalization.
//! - [`evalreport`]: metric reports, Gaussian Fréchet distance and conditional summaries.

pub mod data;
pub mod error;
pub mod estimators;
pub mod evalreport;
pub mod kernels;
pub mod linalg;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
