// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Tape variables expose fallible arithmetic, so std operator traits do not fit.
#![allow(clippy::should_implement_trait)]

pub mod detection;
pub mod error;
pub mod federation;
pub mod models;
pub mod numerics;
pub mod sag;
pub mod smd;
pub mod workbench;

pub use error::{Error, Result};
