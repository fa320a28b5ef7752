//! Desk-scale lab for flow matching, continuous-time consistency distillation
//! and distribution-matching distillation, with the unified target + reference
//! sequence packing used for multi-image conditioning.

// `!(x > 0.0)` is deliberate: it also rejects NaN. Fallible `Var::add` etc.
// cannot implement the operator traits.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::should_implement_trait,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod distill_cm;
pub mod dmd;
pub mod error;
pub mod eval;
pub mod exec;
pub mod networks;
pub mod optim;
pub mod packing;
pub mod params;
pub mod plot;
pub mod run;
pub mod samplers;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
