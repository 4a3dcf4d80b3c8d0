// Parameter checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod error;
pub mod flows;
pub mod io;
pub mod labelprop;
pub mod measures;
pub mod ot;
pub mod rng;
pub mod srot;

pub use error::{Error, Result};
