//! Split constraints that define one branch of the search tree.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// A ReLU node, addressed by stage (dense-layer ordinal) and row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    pub layer: usize,
    pub node: usize,
}

impl NodeId {
    pub fn new(layer: usize, node: usize) -> Self {
        Self { layer, node }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.node)
    }
}

/// Phase a split node is fixed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// Pre-activation `x ≥ 0`, so the ReLU is the identity.
    NonNeg,
    /// Pre-activation `x ≤ 0`, so the ReLU outputs zero.
    NonPos,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SplitError {
    #[error("node {0} is already split in this subproblem")]
    AlreadySplit(NodeId),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Subproblem {
    splits: BTreeMap<NodeId, Phase>,
    pub depth: usize,
    pub priority: f64,
}

impl Subproblem {
    pub fn root() -> Self {
        Self::default()
    }

    pub fn phase(&self, node: NodeId) -> Option<Phase> {
        self.splits.get(&node).copied()
    }

    pub fn splits(&self) -> impl Iterator<Item = (NodeId, Phase)> + '_ {
        self.splits.iter().map(|(n, p)| (*n, *p))
    }

    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    /// Adds one constraint, without touching depth or priority.
    pub fn with_split(mut self, node: NodeId, phase: Phase) -> Result<Self, SplitError> {
        if self.splits.insert(node, phase).is_some() {
            return Err(SplitError::AlreadySplit(node));
        }
        Ok(self)
    }

    /// The two children obtained by fixing `node` to each phase.
    pub fn split(&self, node: NodeId) -> Result<(Subproblem, Subproblem), SplitError> {
        if self.splits.contains_key(&node) {
            return Err(SplitError::AlreadySplit(node));
        }
        let child = |phase| {
            let mut c = self.clone();
            c.splits.insert(node, phase);
            c.depth += 1;
            c
        };
        Ok((child(Phase::NonNeg), child(Phase::NonPos)))
    }

    /// Whether concrete pre-activations satisfy every split constraint.
    pub fn admits(&self, preacts: &[Vec<f64>]) -> bool {
        self.splits.iter().all(|(n, p)| {
            let v = preacts[n.layer][n.node];
            match p {
                Phase::NonNeg => v >= 0.0,
                Phase::NonPos => v <= 0.0,
            }
        })
    }
}
