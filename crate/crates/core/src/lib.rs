//! Set-to-set matching of face appearance manifolds.
//!
//! Every input is a *set* of frames rather than a single image. The crate
//! offers several families of set similarity:
//!
//! * density methods ([`gmm`], [`divergence`], [`kernel`]), which fit a
//!   density per set and compare densities;
//! * subspace methods ([`subspace`]), which compare linear subspaces through
//!   their principal angles;
//! * illumination-aware methods ([`illum`], [`gsim`]), which model the
//!   lighting change between two sets explicitly.
//!
//! [`fusion`] learns how to weight two filtered-image similarities.
//! [`manifold_space`] clusters whole sequences into people.
//! [`inc_gmm`] grows a mixture model online.
//!
//! Everything stochastic takes an explicit [`rng::Rng`] so that a fixed seed
//! reproduces outputs bit for bit.

pub mod dataset;
pub mod divergence;
pub mod error;
pub mod eval;
pub mod filters;
pub mod fusion;
pub mod gmm;
pub mod gsim;
pub mod illum;
pub mod inc_gmm;
pub mod kernel;
pub mod linalg;
pub mod manifold_space;
pub mod rng;
pub mod subspace;
pub mod synth;

pub use error::{Error, Result};
pub use rng::Rng;
