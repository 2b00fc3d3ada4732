//! Linear relaxation of one subproblem as an LP.

use crate::lp::{LpError, LpProblem, Relation};
use crate::model::{Activation, InputBox, Network};
use crate::subproblem::{NodeId, Phase, Subproblem};
use crate::symbolic::{NodeBounds, NodeClass};

/// Variable indices of an encoded network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LpLayout {
    pub inputs: Vec<usize>,
    /// Pre-activation variables of every hidden stage.
    pub pre: Vec<Vec<usize>>,
    /// ReLU outputs of every hidden stage (the pre-activation itself for linear stages).
    pub post: Vec<Vec<usize>>,
    /// Pooled outputs, empty for stages without pooling.
    pub pool: Vec<Vec<usize>>,
}

impl LpLayout {
    /// Variables that feed the dense layer of `stage`.
    pub fn stage_inputs(&self, stage: usize) -> &[usize] {
        match stage {
            0 => &self.inputs,
            k if !self.pool[k - 1].is_empty() => &self.pool[k - 1],
            k => &self.post[k - 1],
        }
    }

    pub fn input_point(&self, point: &[f64]) -> Vec<f64> {
        self.inputs.iter().map(|&j| point[j]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationLp {
    pub problem: LpProblem,
    pub layout: LpLayout,
    /// Constant term of `out_target − out_label` not carried by the LP objective.
    pub objective_offset: f64,
}

/// Slack added to bounds taken from the symbolic analysis.
fn widen(v: f64) -> f64 {
    1e-9 * (1.0 + v.abs())
}

/// Triangle relaxation of `net` under the bounds `nb` of `sub`, maximizing
/// `out_target − out_label` over `input`.
pub fn build_relaxation_lp(
    net: &Network,
    nb: &NodeBounds,
    sub: &Subproblem,
    input: &InputBox,
    target: usize,
    label: usize,
) -> Result<RelaxationLp, LpError> {
    let mut p = LpProblem::new();
    let mut layout = LpLayout::default();
    for i in 0..input.dim() {
        layout.inputs.push(p.add_variable(input.lo()[i], input.hi()[i])?);
    }
    let last = net.stages().len() - 1;
    for k in 0..last {
        let dense = net.stage_dense(k);
        let sb = &nb.stages[k];
        let feeds = layout.stage_inputs(k).to_vec();
        let mut pre = Vec::with_capacity(dense.rows());
        for r in 0..dense.rows() {
            let lo = sb.preact[r].lo;
            let x = p.add_variable(lo - widen(lo), f64::INFINITY)?;
            let mut terms = vec![(x, 1.0)];
            terms.extend(feeds.iter().zip(dense.row(r)).filter(|(_, &w)| w != 0.0).map(|(&v, &w)| (v, -w)));
            p.add_sparse_constraint(terms, Relation::Eq, dense.bias()[r])?;
            pre.push(x);
        }
        let activation = net.stages()[k].activation;
        let post = if activation == Activation::Linear {
            pre.clone()
        } else {
            let mut post = Vec::with_capacity(dense.rows());
            for (r, &x) in pre.iter().enumerate() {
                let node = NodeId::new(k, r);
                let class = match sub.phase(node) {
                    Some(Phase::NonNeg) => {
                        p.add_sparse_constraint(vec![(x, 1.0)], Relation::Ge, 0.0)?;
                        NodeClass::Positive
                    }
                    Some(Phase::NonPos) => {
                        p.add_sparse_constraint(vec![(x, 1.0)], Relation::Le, 0.0)?;
                        NodeClass::Negative
                    }
                    None => sb.relu[r].class,
                };
                let y = match class {
                    NodeClass::Negative => p.add_variable(0.0, 0.0)?,
                    NodeClass::Positive => {
                        let y = p.add_variable(0.0, f64::INFINITY)?;
                        p.add_sparse_constraint(vec![(y, 1.0), (x, -1.0)], Relation::Eq, 0.0)?;
                        y
                    }
                    NodeClass::Overestimated => {
                        let y = p.add_variable(0.0, f64::INFINITY)?;
                        let (l, u) = (sb.preact[r].lo, sb.preact[r].hi);
                        let s = u / (u - l);
                        p.add_sparse_constraint(vec![(y, 1.0), (x, -1.0)], Relation::Ge, 0.0)?;
                        p.add_sparse_constraint(vec![(y, 1.0), (x, -s)], Relation::Le, -s * l + widen(s * l))?;
                        y
                    }
                };
                post.push(y);
            }
            post
        };
        let mut pooled = Vec::new();
        if let Some(pool) = net.stage_pool(k) {
            for (g, group) in pool.groups.iter().enumerate() {
                let pb = &sb.pool[g];
                if pb.members.is_empty() {
                    pooled.push(p.add_variable(0.0, 0.0)?);
                    continue;
                }
                let (lo, hi) = (pb.interval.lo, pb.interval.hi);
                let y = p.add_variable((lo - widen(lo)).max(0.0), hi + widen(hi))?;
                for &m in &pb.members {
                    p.add_sparse_constraint(vec![(y, 1.0), (post[group[m]], -1.0)], Relation::Ge, 0.0)?;
                }
                pooled.push(y);
            }
        }
        layout.pre.push(pre);
        layout.post.push(post);
        layout.pool.push(pooled);
    }

    let out = net.stage_dense(last);
    let feeds = layout.stage_inputs(last);
    let mut objective = vec![0.0; p.num_variables()];
    for (&v, (wt, wl)) in feeds.iter().zip(out.row(target).iter().zip(out.row(label))) {
        objective[v] += wt - wl;
    }
    p.set_objective(&objective)?;
    Ok(RelaxationLp { problem: p, layout, objective_offset: out.bias()[target] - out.bias()[label] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp::{solve, Constraint, LpOutcome};
    use crate::model::{Dense, Layer};
    use crate::symbolic::{compute_layer_bounds, RelaxationMode};
    use std::time::Duration;

    fn net_1x1(w_out: Vec<Vec<f64>>, b_out: Vec<f64>) -> Network {
        Network::new(
            1,
            vec![
                Layer::Dense(Dense::new(vec![vec![1.0]], Some(vec![0.0])).unwrap()),
                Layer::Relu,
                Layer::Dense(Dense::new(w_out, Some(b_out)).unwrap()),
            ],
        )
        .unwrap()
    }

    fn encode(net: &Network, input: &InputBox, sub: &Subproblem) -> RelaxationLp {
        let nb = compute_layer_bounds(net, input, RelaxationMode::ZeroBounding, sub).unwrap();
        build_relaxation_lp(net, &nb, sub, input, 0, 1).unwrap()
    }

    fn has(lp: &RelaxationLp, terms: &[(usize, f64)], relation: Relation, rhs: f64) -> bool {
        lp.problem.constraints().iter().any(|c: &Constraint| {
            c.relation == relation
                && (c.rhs - rhs).abs() < 1e-8
                && c.terms.len() == terms.len()
                && c.terms.iter().zip(terms).all(|(a, b)| a.0 == b.0 && (a.1 - b.1).abs() < 1e-12)
        })
    }

    #[test]
    fn positive_node_is_an_equality() {
        let net = net_1x1(vec![vec![1.0], vec![0.0]], vec![0.0, 0.5]);
        let input = InputBox::from_bounds(vec![0.5], vec![1.0]).unwrap();
        let lp = encode(&net, &input, &Subproblem::root());
        let (x, y) = (lp.layout.pre[0][0], lp.layout.post[0][0]);
        assert!(has(&lp, &[(y, 1.0), (x, -1.0)], Relation::Eq, 0.0));
        assert!(!lp.problem.constraints().iter().any(|c| c.relation == Relation::Ge && c.terms.len() == 2));
    }

    #[test]
    fn triangle_over_asymmetric_interval() {
        let net = net_1x1(vec![vec![1.0], vec![0.0]], vec![0.0, 0.5]);
        let input = InputBox::from_bounds(vec![-1.0], vec![5.4]).unwrap();
        let lp = encode(&net, &input, &Subproblem::root());
        let (x, y) = (lp.layout.pre[0][0], lp.layout.post[0][0]);
        // ŷ ≤ 0.84375(x + 1)
        assert!(has(&lp, &[(y, 1.0), (x, -0.84375)], Relation::Le, 0.84375));
        assert!(has(&lp, &[(y, 1.0), (x, -1.0)], Relation::Ge, 0.0));
        let LpOutcome::Optimal { value, .. } = solve(&lp.problem, Duration::MAX).unwrap() else { panic!() };
        assert!((value + lp.objective_offset - 4.9).abs() < 1e-6);
    }

    #[test]
    fn nonpositive_split_fixes_the_output() {
        let net = net_1x1(vec![vec![1.0], vec![0.0]], vec![0.0, 0.5]);
        let input = InputBox::from_bounds(vec![-1.0], vec![1.0]).unwrap();
        let (_, neg) = Subproblem::root().split(NodeId::new(0, 0)).unwrap();
        let lp = encode(&net, &input, &neg);
        let (x, y) = (lp.layout.pre[0][0], lp.layout.post[0][0]);
        assert!(has(&lp, &[(x, 1.0)], Relation::Le, 0.0));
        assert_eq!(lp.problem.bounds(y), (0.0, 0.0));
    }
}
