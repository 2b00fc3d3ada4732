//! JSON reports for verification runs and bound dumps.

use serde::{Deserialize, Serialize};

use crate::search::{Outcome, UndeterminedReason, Verdict};
use crate::symbolic::{classify_node, NodeBounds, RelaxationMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    /// Every dequeued subproblem, the root of each target included.
    pub subproblems: u64,
    pub lp_calls: u64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub verdict: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub stats: StatsReport,
    pub mode: String,
    pub epsilon: f64,
    pub label: usize,
}

fn reason_name(reason: UndeterminedReason) -> &'static str {
    match reason {
        UndeterminedReason::GlobalTimeout => "global_timeout",
        UndeterminedReason::ExhaustedBudget => "exhausted_budget",
        UndeterminedReason::Unresolved => "unresolved",
    }
}

impl VerificationReport {
    pub fn new(verdict: &Verdict, mode: RelaxationMode, epsilon: f64, label: usize) -> Self {
        let (witness, reason) = match &verdict.outcome {
            Outcome::Safe => (None, None),
            Outcome::Unsafe { witness } => (Some(witness.clone()), None),
            Outcome::Undetermined { reason } => (None, Some(reason_name(*reason).to_string())),
        };
        Self {
            verdict: verdict.outcome.name().to_string(),
            witness,
            reason,
            stats: StatsReport {
                subproblems: verdict.stats.subproblems,
                lp_calls: verdict.stats.lp_calls,
                wall_time_s: verdict.stats.wall_time.as_secs_f64(),
            },
            mode: mode.name().to_string(),
            epsilon,
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub lo: f64,
    pub hi: f64,
    /// `pos`, `neg` or `over`.
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub nodes: Vec<NodeReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pool: Vec<IntervalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub mode: String,
    pub epsilon: f64,
    pub layers: Vec<LayerReport>,
    pub mean_output_width: f64,
}

impl BoundsReport {
    pub fn new(nb: &NodeBounds, epsilon: f64) -> Self {
        let layers = nb
            .stages
            .iter()
            .enumerate()
            .map(|(layer, sb)| LayerReport {
                layer,
                nodes: sb
                    .preact
                    .iter()
                    .map(|iv| NodeReport { lo: iv.lo, hi: iv.hi, class: classify_node(*iv).short_name().to_string() })
                    .collect(),
                pool: sb.pool.iter().map(|p| IntervalReport { lo: p.interval.lo, hi: p.interval.hi }).collect(),
            })
            .collect();
        Self { mode: nb.mode.name().to_string(), epsilon, layers, mean_output_width: nb.mean_output_width() }
    }
}
