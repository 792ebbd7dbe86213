//! Local and global disentangled graph convolutional networks.
//!
//! Node features are projected into `M` channels, locally disentangled by
//! neighborhood routing, pulled towards per-channel Gaussian components of a
//! shared latent space, pushed apart by a determinant-based diversity term and
//! finally re-aggregated along kNN / CkNN graphs built inside each channel.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: a small reverse-mode engine over dense `f64` matrices.
//! * [`graph`]: CSR graphs, latent-structure construction and sparse products.
//! * [`datagen`]: synthetic factor graphs, the text bundle format and splits.
//! * [`model`]: the disentangled layer stack and a plain GCN baseline.
//! * [`objectives`]: classification, space and diversity losses.
//! * [`train`]: Adam, running channel statistics, early stopping and metrics.
//! * [`analysis`]: feature correlations and embedding exports.

pub mod analysis;
pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod train;

pub use error::{Error, Result};

/// Dense row-major matrix used throughout the crate.
pub type Matrix = ndarray::Array2<f64>;
