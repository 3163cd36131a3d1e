//! Implicit neural stylization of 2D image fields, radiance fields and
//! signed-distance surfaces.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod fields;
pub mod losses;
pub mod pipelines;
pub mod rendering;
pub mod sampling;

pub use error::{InsError, Result};
