//! Robustness verification for ReLU networks with symbolic bounds and
//! LP-guided branch and bound.

pub mod model;
pub mod subproblem;
pub mod symbolic;
pub mod lp;
pub mod search;
pub mod oracle;
pub mod report;
