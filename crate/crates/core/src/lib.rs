// `!(x > y)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod belief;
pub mod dataset;
pub mod engine;
pub mod harness;
pub mod service;
pub mod surrogate;
