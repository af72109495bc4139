//! Hypergraph spatio-temporal sequence classifier.
//!
//! The pipeline classifies fixed-length facial landmark/patch clips into
//! normal / talking / yawning:
//!
//! 1. sparse-sample `T` frames from the raw clip ([`sampling`]);
//! 2. remove rigid head pose by similarity Procrustes alignment ([`alignment`]);
//! 3. project geometry and encode texture patches into a shared latent space
//!    ([`encoders`]);
//! 4. fuse both node families through one heterogeneous hypergraph
//!    convolution ([`hypergraph`]) and pool nodes per frame with adaptive
//!    attention ([`pooling`]);
//! 5. run a bidirectional input-selective state-space scan over the frame
//!    sequence ([`ssm`]) and max-pool over time;
//! 6. train with focal + center loss ([`losses`]) under the built-in
//!    reverse-mode tape ([`autodiff`], certified by [`gradcheck`]).
//!
//! [`datagen`] supplies reproducible synthetic corpora, [`model`] assembles
//! and trains the network, and [`bench`] measures the linear-versus-quadratic
//! temporal scaling of the scan against a plain attention baseline.

pub mod alignment;
pub mod autodiff;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod hypergraph;
pub mod losses;
pub mod pooling;
pub mod sampling;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Negative slope of every LeakyReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.01;
