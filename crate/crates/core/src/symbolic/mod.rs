//! Decoupled symbolic bound propagation.

mod expr;
mod maxpool;
mod propagate;
mod relax;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::subproblem::NodeId;

pub use expr::{concretize, Interval, LinearExpression};
pub use maxpool::{maxpool_bounds, prune_dominated, PoolRows};
pub use propagate::{
    back_substitute, back_substitute_node, compute_layer_bounds, compute_layer_bounds_with, BoundConfig,
    NodeBounds, PoolBounds, ReluBounds, Side, StageBounds,
};
pub use relax::{
    classify_node, relax_coupled, relax_lower_independent, relax_lower_zero_bounding, relax_upper_independent,
    NodeClass, Relaxation, DEGENERATE_WIDTH,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymbolicError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("interval [{lo}, {hi}] is too narrow to relax")]
    DegenerateInterval { lo: f64, hi: f64 },
    #[error("no relaxation available for stage {stage}")]
    MissingRelaxation { stage: usize },
    #[error("max-pool window is empty")]
    EmptyWindow,
    #[error("split on node {0} contradicts its bounds")]
    InfeasibleSplit(NodeId),
}

/// How overestimated ReLU nodes are relaxed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RelaxationMode {
    /// One scale shared by both bound expressions.
    Coupled,
    /// Each side relaxed over its own range.
    Independent,
    /// Independent upper side; the lower side is either kept or dropped to zero.
    #[default]
    ZeroBounding,
}

impl RelaxationMode {
    pub const ALL: [RelaxationMode; 3] =
        [RelaxationMode::Coupled, RelaxationMode::Independent, RelaxationMode::ZeroBounding];

    pub fn name(&self) -> &'static str {
        match self {
            RelaxationMode::Coupled => "coupled",
            RelaxationMode::Independent => "independent",
            RelaxationMode::ZeroBounding => "zero-bounding",
        }
    }
}

impl fmt::Display for RelaxationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelaxationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown relaxation mode `{s}`"))
    }
}
