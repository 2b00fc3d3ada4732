//! Branch-and-bound verification over ReLU phase splits.

mod encoding;
mod priority;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering as AtomicOrdering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::lp::{solve, LpOutcome};
use crate::model::{InputBox, ModelError, Network, Property};
use crate::subproblem::{NodeId, SplitError, Subproblem};
use crate::symbolic::{back_substitute, compute_layer_bounds_with, BoundConfig, NodeBounds, RelaxationMode, Side, SymbolicError};

pub use encoding::{build_relaxation_lp, LpLayout, RelaxationLp};
pub use priority::split_priority;

/// A symbolic bound below `−SAFE_MARGIN` proves a subproblem safe.
pub const SAFE_MARGIN: f64 = 1e-9;
/// An LP optimum below `−LP_SAFE_MARGIN` proves a subproblem safe.
pub const LP_SAFE_MARGIN: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("input box has {found} dimensions, network expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("at least one worker is required")]
    NoWorkers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UndeterminedReason {
    GlobalTimeout,
    ExhaustedBudget,
    /// A subproblem had no node left to split but was not decided, e.g. when
    /// only max-pool relaxations remain or the LP optimum sits within
    /// tolerance of zero.
    Unresolved,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Safe,
    Unsafe { witness: Vec<f64> },
    Undetermined { reason: UndeterminedReason },
}

impl Outcome {
    pub fn name(&self) -> &'static str {
        match self {
            Outcome::Safe => "safe",
            Outcome::Unsafe { .. } => "unsafe",
            Outcome::Undetermined { .. } => "undetermined",
        }
    }

    pub fn is_safe(&self) -> bool {
        matches!(self, Outcome::Safe)
    }

    pub fn is_unsafe(&self) -> bool {
        matches!(self, Outcome::Unsafe { .. })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Stats {
    /// Dequeued subproblems, roots included.
    pub subproblems: u64,
    pub lp_calls: u64,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub outcome: Outcome,
    pub stats: Stats,
    /// Split decisions `(target, node)` in the order they were made.
    pub split_log: Vec<(usize, NodeId)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub mode: RelaxationMode,
    /// `None` disables the global timeout.
    pub global_timeout: Option<Duration>,
    pub lp_budget: Duration,
    pub workers: usize,
    pub max_subproblems: Option<u64>,
    pub prune_pools: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            mode: RelaxationMode::ZeroBounding,
            global_timeout: Some(Duration::from_secs(3600)),
            lp_budget: Duration::from_secs(30),
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            max_subproblems: None,
            prune_pools: true,
        }
    }
}

impl SearchConfig {
    /// Single worker, no time limits.
    pub fn unlimited(mode: RelaxationMode) -> Self {
        Self { mode, global_timeout: None, lp_budget: Duration::MAX, workers: 1, ..Self::default() }
    }
}

/// Whether `candidate`, clamped into the box, concretely violates `prop`.
pub fn check_candidate(net: &Network, candidate: &[f64], input: &InputBox, prop: &Property) -> bool {
    net.evaluate(&input.clamp(candidate)).is_ok_and(|out| prop.is_violated_by(&out))
}

/// The two children of `sub` with `node` fixed to each phase.
pub fn split(sub: &Subproblem, node: NodeId) -> Result<(Subproblem, Subproblem), SplitError> {
    sub.split(node)
}

struct Task {
    sub: Subproblem,
    target: usize,
    seq: u64,
}

impl Ord for Task {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sub
            .priority
            .total_cmp(&other.sub.priority)
            .then(self.sub.depth.cmp(&other.sub.depth))
            .then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Task {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Task {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Task {}

enum Resolution {
    Safe,
    Unsafe(Vec<f64>),
    Split { node: NodeId, children: (Subproblem, Subproblem) },
    Unresolved,
}

struct Queue {
    heap: BinaryHeap<Task>,
    in_flight: usize,
    seq: u64,
    dequeued: u64,
    stop: Option<Outcome>,
    unresolved: bool,
    split_log: Vec<(usize, NodeId)>,
}

struct Search<'a> {
    net: &'a Network,
    input: &'a InputBox,
    prop: &'a Property,
    cfg: &'a SearchConfig,
    deadline: Option<Instant>,
    queue: Mutex<Queue>,
    ready: Condvar,
    cancel: AtomicBool,
    lp_calls: AtomicU64,
}

/// Decides whether every input in the box satisfies `prop`.
pub fn verify(net: &Network, input: &InputBox, prop: &Property, cfg: &SearchConfig) -> Result<Verdict, SearchError> {
    let start = Instant::now();
    prop.check(net)?;
    if input.dim() != net.input_size() {
        return Err(SearchError::DimensionMismatch { expected: net.input_size(), found: input.dim() });
    }
    if cfg.workers == 0 {
        return Err(SearchError::NoWorkers);
    }
    let deadline = cfg.global_timeout.and_then(|t| start.checked_add(t));
    let mut heap = BinaryHeap::new();
    let targets = prop.targets(net.output_size());
    for (seq, &target) in targets.iter().enumerate() {
        let mut sub = Subproblem::root();
        sub.priority = f64::INFINITY;
        heap.push(Task { sub, target, seq: seq as u64 });
    }
    let search = Search {
        net,
        input,
        prop,
        cfg,
        deadline,
        queue: Mutex::new(Queue {
            heap,
            in_flight: 0,
            seq: targets.len() as u64,
            dequeued: 0,
            stop: None,
            unresolved: false,
            split_log: Vec::new(),
        }),
        ready: Condvar::new(),
        cancel: AtomicBool::new(false),
        lp_calls: AtomicU64::new(0),
    };
    if cfg.workers == 1 {
        search.work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..cfg.workers {
                s.spawn(|| search.work());
            }
        });
    }
    let q = search.queue.into_inner().unwrap_or_else(|e| e.into_inner());
    let outcome = match q.stop {
        Some(o) => o,
        None if q.unresolved => Outcome::Undetermined { reason: UndeterminedReason::Unresolved },
        None => Outcome::Safe,
    };
    Ok(Verdict {
        outcome,
        stats: Stats {
            subproblems: q.dequeued,
            lp_calls: search.lp_calls.into_inner(),
            wall_time: start.elapsed(),
        },
        split_log: q.split_log,
    })
}

impl Search<'_> {
    fn timed_out(&self) -> bool {
        self.deadline.is_some_and(|d| Instant::now() >= d)
    }

    fn work(&self) {
        let mut q = self.queue.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            if q.stop.is_some() {
                break;
            }
            if self.timed_out() {
                self.halt(&mut q, Outcome::Undetermined { reason: UndeterminedReason::GlobalTimeout });
                break;
            }
            let Some(task) = q.heap.pop() else {
                if q.in_flight == 0 {
                    self.ready.notify_all();
                    break;
                }
                let wait = self
                    .deadline
                    .map_or(Duration::from_millis(100), |d| d.saturating_duration_since(Instant::now()));
                q = self.ready.wait_timeout(q, wait).unwrap_or_else(|e| e.into_inner()).0;
                continue;
            };
            if self.cfg.max_subproblems.is_some_and(|cap| q.dequeued >= cap) {
                self.halt(&mut q, Outcome::Undetermined { reason: UndeterminedReason::ExhaustedBudget });
                break;
            }
            q.dequeued += 1;
            q.in_flight += 1;
            drop(q);
            let resolution = self.resolve(&task);
            q = self.queue.lock().unwrap_or_else(|e| e.into_inner());
            q.in_flight -= 1;
            match resolution {
                Resolution::Safe => {}
                Resolution::Unsafe(witness) => self.halt(&mut q, Outcome::Unsafe { witness }),
                Resolution::Unresolved => q.unresolved = true,
                Resolution::Split { node, children } if q.stop.is_none() => {
                    q.split_log.push((task.target, node));
                    for sub in [children.0, children.1] {
                        let seq = q.seq;
                        q.seq += 1;
                        q.heap.push(Task { sub, target: task.target, seq });
                    }
                }
                Resolution::Split { .. } => {}
            }
            self.ready.notify_all();
        }
    }

    fn halt(&self, q: &mut Queue, outcome: Outcome) {
        if q.stop.is_none() {
            q.stop = Some(outcome);
        }
        self.cancel.store(true, AtomicOrdering::SeqCst);
        self.ready.notify_all();
    }

    fn resolve(&self, task: &Task) -> Resolution {
        let (net, input) = (self.net, self.input);
        let label = self.prop.true_label();
        let config = BoundConfig { mode: self.cfg.mode, prune_pools: self.cfg.prune_pools };
        let nb = match compute_layer_bounds_with(net, input, config, &task.sub) {
            Ok(nb) => nb,
            Err(SymbolicError::InfeasibleSplit(_)) => return Resolution::Safe,
            Err(_) => return Resolution::Unresolved,
        };
        let last = net.stages().len() - 1;
        let mut objective = vec![0.0; net.output_size()];
        objective[task.target] += 1.0;
        objective[label] -= 1.0;
        let bound = back_substitute(net, last, &objective, Side::Up, &nb.stages[..last], &task.sub)
            .and_then(|e| e.concretize(input));
        match bound {
            Ok(b) if b.hi < -SAFE_MARGIN => return Resolution::Safe,
            Ok(_) => {}
            Err(_) => return Resolution::Unresolved,
        }
        if self.cancel.load(AtomicOrdering::SeqCst) {
            return Resolution::Unresolved;
        }

        if let Some(resolution) = self.solve_relaxation(&nb, task, label) {
            return resolution;
        }
        match split_priority(net, &nb, &objective).first() {
            Some(&(node, score)) => match task.sub.split(node) {
                Ok((mut pos, mut neg)) => {
                    pos.priority = score;
                    neg.priority = score;
                    Resolution::Split { node, children: (pos, neg) }
                }
                Err(_) => Resolution::Unresolved,
            },
            None => Resolution::Unresolved,
        }
    }

    /// `Some` when the LP decides the subproblem, `None` when it must be split.
    fn solve_relaxation(&self, nb: &NodeBounds, task: &Task, label: usize) -> Option<Resolution> {
        let lp = build_relaxation_lp(self.net, nb, &task.sub, self.input, task.target, label).ok()?;
        let budget = match self.deadline {
            Some(d) => self.cfg.lp_budget.min(d.saturating_duration_since(Instant::now())),
            None => self.cfg.lp_budget,
        };
        self.lp_calls.fetch_add(1, AtomicOrdering::Relaxed);
        match solve(&lp.problem, budget) {
            Ok(LpOutcome::Infeasible) => Some(Resolution::Safe),
            Ok(LpOutcome::Optimal { point, value }) => {
                if value + lp.objective_offset < -LP_SAFE_MARGIN {
                    return Some(Resolution::Safe);
                }
                let candidate = self.input.clamp(&lp.layout.input_point(&point));
                check_candidate(self.net, &candidate, self.input, self.prop).then_some(Resolution::Unsafe(candidate))
            }
            Ok(LpOutcome::Unbounded | LpOutcome::TimedOut) | Err(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dense, Layer};

    fn relu_vs_constant(out_bias: f64) -> Network {
        Network::new(
            1,
            vec![
                Layer::Dense(Dense::new(vec![vec![1.0]], Some(vec![0.0])).unwrap()),
                Layer::Relu,
                Layer::Dense(Dense::new(vec![vec![1.0], vec![0.0]], Some(vec![out_bias, 0.5])).unwrap()),
            ],
        )
        .unwrap()
    }

    fn unit_box() -> InputBox {
        InputBox::new(vec![0.0], 1.0, None).unwrap()
    }

    #[test]
    fn relu_exceeding_constant_is_unsafe() {
        let net = relu_vs_constant(0.0);
        let prop = Property::robustness(1);
        let v = verify(&net, &unit_box(), &prop, &SearchConfig::unlimited(RelaxationMode::ZeroBounding)).unwrap();
        let Outcome::Unsafe { witness } = v.outcome else { panic!("{v:?}") };
        assert!(unit_box().contains(&witness));
        assert!(prop.is_violated_by(&net.evaluate(&witness).unwrap()));
        assert!(witness[0] > 0.5);
    }

    #[test]
    fn shifted_relu_is_safe_at_the_root() {
        let net = relu_vs_constant(-2.0);
        let v = verify(&net, &unit_box(), &Property::robustness(1), &SearchConfig::unlimited(RelaxationMode::ZeroBounding))
            .unwrap();
        assert_eq!(v.outcome, Outcome::Safe);
        assert_eq!(v.stats.subproblems, 1);
        assert_eq!(v.stats.lp_calls, 0);
        assert!(v.split_log.is_empty());
    }

    #[test]
    fn degenerate_box_needs_no_split() {
        let net = relu_vs_constant(0.0);
        let cfg = SearchConfig::unlimited(RelaxationMode::Coupled);
        for (x, safe) in [(0.2, true), (0.9, false)] {
            let point = InputBox::new(vec![x], 0.0, None).unwrap();
            let v = verify(&net, &point, &Property::robustness(1), &cfg).unwrap();
            assert_eq!(v.outcome.is_safe(), safe);
            assert_eq!(v.stats.subproblems, 1);
        }
    }

    #[test]
    fn candidate_checks() {
        let identity =
            Network::new(2, vec![Layer::Dense(Dense::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], None).unwrap())]).unwrap();
        let input = InputBox::new(vec![0.5, 0.5], 1.0, None).unwrap();
        let prop = Property::robustness(0);
        assert!(check_candidate(&identity, &[0.2, 0.5], &input, &prop));
        assert!(!check_candidate(&identity, &[1.0, 0.5], &input, &prop));
        // Ties count as violations.
        assert!(check_candidate(&identity, &[0.5, 0.5], &input, &prop));
    }

    #[test]
    fn subproblem_cap_leaves_the_verdict_open() {
        // Four ReLUs whose relaxation is loose, with a narrow safe margin.
        let net = Network::new(
            2,
            vec![
                Layer::Dense(
                    Dense::new(
                        vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]],
                        Some(vec![0.0; 4]),
                    )
                    .unwrap(),
                ),
                Layer::Relu,
                Layer::Dense(
                    Dense::new(vec![vec![1.0, 1.0, 1.0, 1.0], vec![0.0; 4]], Some(vec![-2.1, 0.0])).unwrap(),
                ),
            ],
        )
        .unwrap();
        let input = InputBox::new(vec![0.0, 0.0], 1.0, None).unwrap();
        let cfg = SearchConfig { max_subproblems: Some(1), ..SearchConfig::unlimited(RelaxationMode::ZeroBounding) };
        let v = verify(&net, &input, &Property::robustness(1), &cfg).unwrap();
        assert_eq!(v.outcome, Outcome::Undetermined { reason: UndeterminedReason::ExhaustedBudget });
        let full = verify(&net, &input, &Property::robustness(1), &SearchConfig::unlimited(RelaxationMode::ZeroBounding))
            .unwrap();
        assert_eq!(full.outcome, Outcome::Safe);
        assert!(full.stats.subproblems > 1);
    }

    #[test]
    fn zero_timeout_is_undetermined() {
        let net = relu_vs_constant(0.0);
        let cfg = SearchConfig { global_timeout: Some(Duration::ZERO), ..SearchConfig::unlimited(RelaxationMode::Coupled) };
        let v = verify(&net, &unit_box(), &Property::robustness(1), &cfg).unwrap();
        assert_eq!(v.outcome, Outcome::Undetermined { reason: UndeterminedReason::GlobalTimeout });
    }

    #[test]
    fn parallel_workers_agree() {
        let net = relu_vs_constant(0.0);
        let cfg = SearchConfig { workers: 3, ..SearchConfig::unlimited(RelaxationMode::ZeroBounding) };
        assert!(verify(&net, &unit_box(), &Property::robustness(1), &cfg).unwrap().outcome.is_unsafe());
    }
}
