//! Bi-level loss learning: a transformer that merges task losses into one
//! auxiliary loss, trained by hypergradients of a primary objective.

pub mod autodiff;
pub mod bilevel;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod loss;
pub mod meltr_net;
pub mod params;
pub mod tasks;

pub use error::{Error, Result};
