//! Two-way quantum time transfer simulation and analysis.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clock;
pub mod correlation;
pub mod io;
pub mod orbit;
pub mod simulate;
pub mod source;
pub mod stability;
pub mod sync;
pub mod tracking;
pub mod units;
