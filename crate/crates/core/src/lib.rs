//! Negative correlation learning (NCL) ensembles over fixed basis functions.
//!
//! The crate fits NCL regression ensembles in closed form, computes their
//! effective degrees of freedom exactly, and tunes the diversity parameter
//! with Stein's unbiased risk estimate instead of cross-validation.
//!
//! Typical flow: [`data::standardize`] a dataset, sample a
//! [`basis::BasisEnsemble`], [`basis::evaluate`] it, build the
//! [`gram::GramBundle`] and its [`gram::WhitenedGram`], then [`ncl::fit`] at
//! any lambda or let [`tuning::tune_sure`] choose one.

pub mod basis;
pub mod data;
pub mod dof;
pub mod error;
pub mod gram;
pub mod linalg;
pub mod mcdof;
pub mod model;
pub mod ncl;
pub mod theorem6;
pub mod tikhonov;
pub mod tuning;
pub mod verify;

pub use error::{NclError, Result};
