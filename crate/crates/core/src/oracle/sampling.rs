//! Randomized attacks and bound-soundness checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{InputBox, Network, Property};
use crate::subproblem::{NodeId, Subproblem};
use crate::symbolic::{Interval, NodeBounds};

/// Allowed escape of a concrete value beyond its bound.
pub const SOUNDNESS_SLACK: f64 = 1e-6;

pub fn uniform_point(rng: &mut impl Rng, input: &InputBox) -> Vec<f64> {
    input
        .lo()
        .iter()
        .zip(input.hi())
        .map(|(&l, &h)| if l < h { rng.random_range(l..=h) } else { l })
        .collect()
}

/// Uniform sampling followed by coordinate hill climbing on the margin from
/// the best sample. Returns the first concrete violator found.
pub fn sample_attack(net: &Network, input: &InputBox, prop: &Property, n: usize, seed: u64) -> Option<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = |x: &[f64]| net.evaluate(x).map_or(f64::NEG_INFINITY, |out| prop.margin(&out));
    let mut best = input.center.clone();
    let mut best_margin = margin(&input.clamp(&best));
    best = input.clamp(&best);
    for _ in 0..n.max(1) {
        let x = uniform_point(&mut rng, input);
        let m = margin(&x);
        if m >= 0.0 {
            return Some(x);
        }
        if m > best_margin {
            best = x;
            best_margin = m;
        }
    }
    if best_margin >= 0.0 {
        return Some(best);
    }

    let widths: Vec<f64> = input.lo().iter().zip(input.hi()).map(|(l, h)| h - l).collect();
    let mut step = 0.25;
    while step > 1e-6 {
        let mut improved = false;
        for i in 0..best.len() {
            if widths[i] == 0.0 {
                continue;
            }
            for dir in [1.0, -1.0] {
                let mut x = best.clone();
                x[i] = (x[i] + dir * step * widths[i]).clamp(input.lo()[i], input.hi()[i]);
                let m = margin(&x);
                if m > best_margin {
                    best = x;
                    best_margin = m;
                    improved = true;
                    if m >= 0.0 {
                        return Some(best);
                    }
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    /// The pre-activation left its concrete interval.
    Interval,
    /// The pre-activation exceeded its upper bound expression.
    UpperExpression,
    /// The pre-activation fell below its lower bound expression.
    LowerExpression,
    /// A pooled output left its interval; `node.node` is the window index.
    Pool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Escape {
    pub node: NodeId,
    pub kind: BoundKind,
    pub input: Vec<f64>,
    pub value: f64,
    pub bound: Interval,
}

/// Samples the box and reports every concrete value that escapes its bound in
/// `nb` by more than [`SOUNDNESS_SLACK`]. Samples outside the subproblem's
/// split constraints are skipped.
pub fn sample_soundness(
    net: &Network,
    input: &InputBox,
    nb: &NodeBounds,
    sub: &Subproblem,
    n: usize,
    seed: u64,
) -> Vec<Escape> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut escapes = Vec::new();
    for _ in 0..n {
        let z = uniform_point(&mut rng, input);
        let Ok(trace) = net.trace(&z) else { continue };
        if !sub.admits(&trace.pre) {
            continue;
        }
        for (k, sb) in nb.stages.iter().enumerate() {
            for (i, &v) in trace.pre[k].iter().enumerate() {
                let node = NodeId::new(k, i);
                let mut report = |kind, bound: Interval| {
                    escapes.push(Escape { node, kind, input: z.clone(), value: v, bound })
                };
                if !sb.preact[i].contains(v, SOUNDNESS_SLACK) {
                    report(BoundKind::Interval, sb.preact[i]);
                }
                let up = sb.upper_exprs[i].eval(&z);
                if v > up + SOUNDNESS_SLACK {
                    report(BoundKind::UpperExpression, Interval::point(up));
                }
                let low = sb.lower_exprs[i].eval(&z);
                if v < low - SOUNDNESS_SLACK {
                    report(BoundKind::LowerExpression, Interval::point(low));
                }
            }
            if !sb.pool.is_empty() {
                for (g, pb) in sb.pool.iter().enumerate() {
                    let v = trace.post[k][g];
                    if !pb.interval.contains(v, SOUNDNESS_SLACK) {
                        escapes.push(Escape {
                            node: NodeId::new(k, g),
                            kind: BoundKind::Pool,
                            input: z.clone(),
                            value: v,
                            bound: pb.interval,
                        });
                    }
                }
            }
        }
    }
    escapes
}
