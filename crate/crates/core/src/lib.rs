// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod draws;
pub mod energy;
pub mod experiments;
pub mod fixture;
pub mod forwarding;
pub mod link_estimation;
pub mod metrics;
pub mod simulator;
pub mod time;
pub mod topology;
