// Negated comparisons are how config checks reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contrastive;
pub mod data;
pub mod detector;
pub mod error;
pub mod fairlora;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod theory;
