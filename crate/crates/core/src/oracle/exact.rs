//! Exact verification by enumerating activation regions.
//!
//! Inside one region (a fixed phase for every ReLU and a fixed argmax for
//! every pool window) the network is affine in the inputs, so each node is
//! tracked as an exact affine form. Phases the region already decides are not
//! branched on; the rest are branched with LP feasibility checks.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::lp::{solve, LpOutcome, LpProblem, Relation};
use crate::model::{Activation, InputBox, ModelError, Network, Property};
use crate::search::{Outcome, Stats, UndeterminedReason, Verdict};

/// Default cap on enumerated regions.
pub const MAX_REGIONS: u64 = 1 << 20;
/// LP optima this close to a phase boundary count as lying on it.
const BOUNDARY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("more than {0} activation regions")]
    TooManyNodes(u64),
    #[error("LP failure inside the exact oracle")]
    Numerical,
}

#[derive(Debug, Clone, PartialEq)]
struct Affine {
    a: Vec<f64>,
    c: f64,
}

impl Affine {
    fn zero(n: usize) -> Self {
        Self { a: vec![0.0; n], c: 0.0 }
    }

    fn diff(&self, other: &Affine) -> Affine {
        Affine { a: self.a.iter().zip(&other.a).map(|(x, y)| x - y).collect(), c: self.c - other.c }
    }

    fn neg(&self) -> Affine {
        Affine { a: self.a.iter().map(|v| -v).collect(), c: -self.c }
    }

    fn range(&self, input: &InputBox) -> (f64, f64) {
        let (mut lo, mut hi) = (self.c, self.c);
        for ((&a, &l), &h) in self.a.iter().zip(input.lo()).zip(input.hi()) {
            let (x, y) = (a * l, a * h);
            lo += x.min(y);
            hi += x.max(y);
        }
        (lo, hi)
    }
}

enum Phases {
    Active,
    Inactive,
    Both,
    Empty,
}

enum Flow {
    Continue,
    Unsafe(Vec<f64>),
}

struct Explorer<'a> {
    net: &'a Network,
    input: &'a InputBox,
    prop: &'a Property,
    worker: u64,
    workers: u64,
    /// Branch points at this depth are dealt out round-robin between workers.
    split_depth: usize,
    dealt: u64,
    regions: u64,
    max_regions: u64,
    lp_calls: u64,
    near_tie: bool,
    cancel: &'a AtomicBool,
}

/// Exact verdict for `prop` over the box, exploring regions on `workers` threads.
pub fn exact_verify(net: &Network, input: &InputBox, prop: &Property, workers: usize) -> Result<Verdict, OracleError> {
    exact_verify_capped(net, input, prop, workers, MAX_REGIONS)
}

pub fn exact_verify_capped(
    net: &Network,
    input: &InputBox,
    prop: &Property,
    workers: usize,
    max_regions: u64,
) -> Result<Verdict, OracleError> {
    let start = Instant::now();
    prop.check(net)?;
    if input.dim() != net.input_size() {
        return Err(ModelError::DimensionMismatch { expected: net.input_size(), found: input.dim() }.into());
    }
    let workers = workers.max(1) as u64;
    let split_depth = if workers == 1 { usize::MAX } else { (64 - (workers - 1).leading_zeros()) as usize + 2 };
    let cancel = AtomicBool::new(false);
    let run = |worker: u64| {
        let mut ex = Explorer {
            net,
            input,
            prop,
            worker,
            workers,
            split_depth,
            dealt: 0,
            regions: 0,
            max_regions,
            lp_calls: 0,
            near_tie: false,
            cancel: &cancel,
        };
        let flow = ex.start();
        if matches!(flow, Ok(Flow::Unsafe(_)) | Err(_)) {
            cancel.store(true, Ordering::SeqCst);
        }
        (flow, ex.regions, ex.lp_calls, ex.near_tie)
    };
    let results: Vec<_> = if workers == 1 {
        vec![run(0)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers).map(|w| s.spawn(move || run(w))).collect();
            handles.into_iter().map(|h| h.join().expect("oracle worker panicked")).collect()
        })
    };

    let mut stats = Stats::default();
    let mut witness = None;
    let mut near_tie = false;
    let mut failure = None;
    for (flow, regions, lp_calls, tie) in results {
        stats.subproblems += regions;
        stats.lp_calls += lp_calls;
        near_tie |= tie;
        match flow {
            Ok(Flow::Unsafe(w)) if witness.is_none() => witness = Some(w),
            Err(e) if failure.is_none() => failure = Some(e),
            _ => {}
        }
    }
    stats.wall_time = start.elapsed();
    let outcome = match (witness, failure) {
        (Some(witness), _) => Outcome::Unsafe { witness },
        (None, Some(e)) => return Err(e),
        (None, None) if near_tie => Outcome::Undetermined { reason: UndeterminedReason::Unresolved },
        (None, None) => Outcome::Safe,
    };
    Ok(Verdict { outcome, stats, split_log: Vec::new() })
}

impl Explorer<'_> {
    fn dim(&self) -> usize {
        self.input.dim()
    }

    fn start(&mut self) -> Result<Flow, OracleError> {
        let n = self.dim();
        let inputs: Vec<Affine> = (0..n)
            .map(|i| {
                let mut a = vec![0.0; n];
                a[i] = 1.0;
                Affine { a, c: 0.0 }
            })
            .collect();
        self.enter(0, &inputs, &mut Vec::new(), 0)
    }

    /// Whether this worker owns the branch about to be taken.
    fn owns_branch(&mut self, depth: usize) -> bool {
        if depth != self.split_depth {
            return true;
        }
        let id = self.dealt;
        self.dealt += 1;
        id % self.workers == self.worker
    }

    /// Maximum of `f` over the box intersected with `region`, or `None` if empty.
    fn maximize(&mut self, f: &Affine, region: &[Affine]) -> Result<Option<(f64, Vec<f64>)>, OracleError> {
        let mut p = LpProblem::new();
        for i in 0..self.dim() {
            p.add_variable(self.input.lo()[i], self.input.hi()[i]).map_err(|_| OracleError::Numerical)?;
        }
        for h in region {
            p.add_constraint(&h.a, Relation::Ge, -h.c).map_err(|_| OracleError::Numerical)?;
        }
        p.set_objective(&f.a).map_err(|_| OracleError::Numerical)?;
        self.lp_calls += 1;
        match solve(&p, Duration::MAX) {
            Ok(LpOutcome::Optimal { point, value }) => Ok(Some((value + f.c, point))),
            Ok(LpOutcome::Infeasible) => Ok(None),
            _ => Err(OracleError::Numerical),
        }
    }

    fn phases(&mut self, p: &Affine, region: &[Affine]) -> Result<Phases, OracleError> {
        let (lo, hi) = p.range(self.input);
        if lo >= 0.0 {
            return Ok(Phases::Active);
        }
        if hi <= 0.0 {
            return Ok(Phases::Inactive);
        }
        if region.is_empty() {
            return Ok(Phases::Both);
        }
        let Some((max, _)) = self.maximize(p, region)? else {
            return Ok(Phases::Empty);
        };
        if max <= BOUNDARY_TOL {
            return Ok(Phases::Inactive);
        }
        let Some((neg_max, _)) = self.maximize(&p.neg(), region)? else {
            return Ok(Phases::Empty);
        };
        Ok(if neg_max <= BOUNDARY_TOL { Phases::Active } else { Phases::Both })
    }

    fn enter(&mut self, k: usize, values: &[Affine], region: &mut Vec<Affine>, depth: usize) -> Result<Flow, OracleError> {
        let dense = self.net.stage_dense(k);
        let pre: Vec<Affine> = (0..dense.rows())
            .map(|r| {
                let mut f = Affine { a: vec![0.0; self.dim()], c: dense.bias()[r] };
                for (v, &w) in values.iter().zip(dense.row(r)) {
                    if w != 0.0 {
                        f.c += w * v.c;
                        f.a.iter_mut().zip(&v.a).for_each(|(x, y)| *x += w * y);
                    }
                }
                f
            })
            .collect();
        if k + 1 == self.net.stages().len() {
            return self.leaf(&pre, region);
        }
        match self.net.stages()[k].activation {
            Activation::Linear => self.enter(k + 1, &pre, region, depth),
            _ => self.relu(k, &pre, &mut Vec::with_capacity(pre.len()), region, depth),
        }
    }

    fn relu(
        &mut self,
        k: usize,
        pre: &[Affine],
        post: &mut Vec<Affine>,
        region: &mut Vec<Affine>,
        depth: usize,
    ) -> Result<Flow, OracleError> {
        if post.len() == pre.len() {
            return match self.net.stage_pool(k) {
                Some(_) => self.pool(k, post, &mut Vec::new(), region, depth),
                None => self.enter(k + 1, post, region, depth),
            };
        }
        let p = pre[post.len()].clone();
        let zero = Affine::zero(self.dim());
        let single = match self.phases(&p, region)? {
            Phases::Empty => return Ok(Flow::Continue),
            Phases::Active => Some(p.clone()),
            Phases::Inactive => Some(zero.clone()),
            Phases::Both => None,
        };
        if let Some(out) = single {
            post.push(out);
            let flow = self.relu(k, pre, post, region, depth);
            post.pop();
            return flow;
        }
        for (cut, out) in [(p.clone(), p.clone()), (p.neg(), zero)] {
            if self.cancel.load(Ordering::Relaxed) {
                break;
            }
            if !self.owns_branch(depth) {
                continue;
            }
            region.push(cut);
            post.push(out);
            let flow = self.relu(k, pre, post, region, depth + 1);
            post.pop();
            region.pop();
            if let Flow::Unsafe(w) = flow? {
                return Ok(Flow::Unsafe(w));
            }
        }
        Ok(Flow::Continue)
    }

    /// Fixes the argmax of pool window `pooled.len()` of stage `k`.
    fn pool(
        &mut self,
        k: usize,
        post: &[Affine],
        pooled: &mut Vec<Affine>,
        region: &mut Vec<Affine>,
        depth: usize,
    ) -> Result<Flow, OracleError> {
        let groups = &self.net.stage_pool(k).expect("pool stage").groups;
        if pooled.len() == groups.len() {
            return self.enter(k + 1, pooled, region, depth);
        }
        let group = groups[pooled.len()].clone();
        let mut options: Vec<(usize, Vec<Affine>)> = Vec::new();
        for (pos, &r) in group.iter().enumerate() {
            if group[..pos].iter().any(|&s| post[s] == post[r]) {
                continue;
            }
            let cuts: Vec<Affine> =
                group.iter().filter(|&&s| post[s] != post[r]).map(|&s| post[r].diff(&post[s])).collect();
            let feasible = cuts.is_empty() || {
                let n = region.len();
                region.extend(cuts.iter().cloned());
                let f = self.maximize(&Affine::zero(self.dim()), region);
                region.truncate(n);
                f?.is_some()
            };
            if feasible {
                options.push((r, cuts));
            }
        }
        let branching = options.len() > 1;
        for (r, cuts) in options {
            if self.cancel.load(Ordering::Relaxed) {
                break;
            }
            if branching && !self.owns_branch(depth) {
                continue;
            }
            let n = region.len();
            region.extend(cuts);
            pooled.push(post[r].clone());
            let flow = self.pool(k, post, pooled, region, depth + usize::from(branching));
            pooled.pop();
            region.truncate(n);
            if let Flow::Unsafe(w) = flow? {
                return Ok(Flow::Unsafe(w));
            }
        }
        Ok(Flow::Continue)
    }

    fn leaf(&mut self, out: &[Affine], region: &[Affine]) -> Result<Flow, OracleError> {
        self.regions += 1;
        if self.regions > self.max_regions {
            return Err(OracleError::TooManyNodes(self.max_regions));
        }
        let label = self.prop.true_label();
        for target in self.prop.targets(out.len()) {
            let margin = out[target].diff(&out[label]);
            if margin.range(self.input).1 < 0.0 {
                continue;
            }
            let Some((value, point)) = self.maximize(&margin, region)? else {
                return Ok(Flow::Continue);
            };
            if value < 0.0 {
                continue;
            }
            let witness = self.input.clamp(&point);
            let outputs = self.net.evaluate(&witness)?;
            if self.prop.is_violated_by(&outputs) {
                return Ok(Flow::Unsafe(witness));
            }
            self.near_tie = true;
        }
        Ok(Flow::Continue)
    }
}
