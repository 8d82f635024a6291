// Guards like `!(x > 0.0)` are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chain;
pub mod estimators;
pub mod experiment;
pub mod numkit;
pub mod regen;
pub mod samplers;
pub mod stopping;
