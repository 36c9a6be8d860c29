//! Horizontal-mirror ("flop") equivariant layers and models, an equivariance
//! checker, and FLOP/parameter accounting.

pub mod accounting;
pub mod autodiff;
pub mod counter;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod symmetry;
pub mod tensor;

pub use error::{Error, Result};
