//! Isotopic areal and volumetric density reconstruction from hyperspectral
//! time-of-flight neutron transmission counts.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values, and index loops
// over several parallel spectra read better than zipped iterators.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod decompose;
pub mod error;
pub mod estimate;
pub mod fluxbg;
pub mod forward;
pub mod grids;
pub mod library;
pub mod linalg;
pub mod optim;
pub mod resolution;
pub mod simulate;
pub mod tomo;
pub mod xsdict;

pub use error::{Error, Result};
