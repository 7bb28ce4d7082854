//! Partial-Moreau-envelope decomposition for two-stage stochastic programs
//! whose recourse couples first- and second-stage decisions bilinearly.

pub mod diagnostics;
pub mod instances;
pub mod model;
pub mod parallel;
pub mod qp;
pub mod sampling;
pub mod solver;
