//! Simulation, invasion rates and extinction classification for stochastic
//! functional Kolmogorov systems.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod audit;
pub mod classify;
pub mod invasion;
pub mod measures;
pub mod model;
pub mod sdde;
