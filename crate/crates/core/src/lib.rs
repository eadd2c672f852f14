//! Regression onto hyperbolic space.
//!
//! The crate covers the full pipeline used to place new concepts inside an
//! embedded taxonomy:
//!
//! * [`manifold`]: Lorentz and Poincaré models (distances, exp/log maps,
//!   Riemannian gradients, the isometry between the two models).
//! * [`embedding`]: taxonomy embeddings trained with a ranking loss and
//!   Riemannian SGD.
//! * [`regression`]: the kernel structured-prediction estimator and the
//!   kernel least-squares baseline.
//! * [`neural`]: fully connected regressors with a geodesic or Euclidean loss.
//! * [`data`]: synthetic trees, adjacency-PCA features and split protocols.
//! * [`eval`]: mean average precision, mean rank, nearest-label
//!   classification and F1 scores.
//! * [`io`]: TSV, JSON and CSV readers and writers for the above.
//! * [`experiment`]: end-to-end taxonomy-expansion and hierarchical
//!   classification drivers.

pub mod error;
pub mod data;
pub mod embedding;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod manifold;
pub mod neural;
pub mod regression;

pub use error::{Error, Result};
