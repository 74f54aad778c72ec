//! Counterfactual explanations for image classifiers by reflecting latent
//! features across pairwise decision boundaries.

pub mod camprior;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod lbfgs;
pub mod losses;
pub mod mirror;
pub mod optim;
pub mod params;
pub mod pgm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
