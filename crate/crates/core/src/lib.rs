//! Source-free model adaptation through a prototypical Gaussian mixture.
//!
//! A per-pixel segmentation network is trained on a labeled source domain.
//! Its confident source embeddings are summarized by one Gaussian per
//! class; afterwards the source data is no longer needed. Adaptation to an
//! unlabeled target domain samples labeled pseudo-embeddings from the
//! mixture, keeps the classifier consistent on them, and pulls the target
//! embedding distribution onto the mixture with the sliced Wasserstein
//! distance.

pub mod adam;
pub mod adaptation;
pub mod assignment;
pub mod autodiff;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod gmm;
pub mod kv;
pub mod linalg;
pub mod nn;
pub mod real;
pub mod rng;
pub mod swd;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;
