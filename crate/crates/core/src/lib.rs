//! Fisher encodings for bags of semantic descriptors.
//!
//! The crate covers the whole encoding stack: special functions, descriptor
//! embeddings and PCA, EM-trained background mixtures (diagonal GMM,
//! Dirichlet mixture, mixture of factor analyzers), Fisher scores and
//! vectors for each of them, the MFA-FS network layer with its analytic
//! gradients, a one-vs-rest squared-hinge linear classifier, and the slow
//! reference implementations used to verify all of the above.
//!
//! Everything is computed in `f64`. Descriptors are stored on disk as `f32`
//! (see [`io::bagfile`]).

pub mod classifier;
pub mod descriptors;
pub mod encoders;
pub mod error;
pub mod io;
pub mod mfafsnet;
pub mod mixtures;
pub mod numerics;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
