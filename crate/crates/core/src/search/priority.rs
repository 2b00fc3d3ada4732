//! Split ranking by interval gradients of the search objective.

use crate::model::{Activation, Network};
use crate::subproblem::NodeId;
use crate::symbolic::{Interval, NodeBounds, NodeClass};

fn scale(g: Interval, w: f64) -> Interval {
    if w >= 0.0 {
        Interval { lo: w * g.lo, hi: w * g.hi }
    } else {
        Interval { lo: w * g.hi, hi: w * g.lo }
    }
}

fn add(a: Interval, b: Interval) -> Interval {
    Interval { lo: a.lo + b.lo, hi: a.hi + b.hi }
}

/// Product with the derivative range `[0, 1]`.
fn gate(g: Interval) -> Interval {
    Interval { lo: g.lo.min(0.0), hi: g.hi.max(0.0) }
}

/// Overestimated nodes ranked by `ĝ · min(|l|, u)`, where `ĝ` bounds the
/// magnitude of the objective's gradient with respect to the node's output.
/// Ties go to the smaller `(layer, node)`.
pub fn split_priority(net: &Network, nb: &NodeBounds, objective: &[f64]) -> Vec<(NodeId, f64)> {
    let last = net.stages().len() - 1;
    let zero = Interval::point(0.0);
    // Gradient with respect to the pre-activations of the current stage.
    let mut grad: Vec<Interval> = objective.iter().map(|&c| Interval::point(c)).collect();
    let mut ranked = Vec::new();
    for k in (0..last).rev() {
        let dense = net.stage_dense(k + 1);
        // Gradient with respect to the values stage k hands on.
        let mut out = vec![zero; dense.cols()];
        for (r, g) in grad.iter().enumerate() {
            if g.lo == 0.0 && g.hi == 0.0 {
                continue;
            }
            for (i, &w) in dense.row(r).iter().enumerate() {
                if w != 0.0 {
                    out[i] = add(out[i], scale(*g, w));
                }
            }
        }
        let sb = &nb.stages[k];
        let post = match net.stages()[k].activation {
            Activation::Linear => {
                grad = out;
                continue;
            }
            Activation::Relu => out,
            Activation::ReluPool { .. } => {
                let pool = net.stage_pool(k).expect("pool stage");
                let mut post = vec![zero; net.stage_dense(k).rows()];
                for (g, group) in pool.groups.iter().enumerate() {
                    for &m in &sb.pool[g].members {
                        post[group[m]] = gate(out[g]);
                    }
                }
                post
            }
        };
        grad = post
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let relu = &sb.relu[i];
                match relu.class {
                    NodeClass::Positive => g,
                    NodeClass::Negative => zero,
                    NodeClass::Overestimated => {
                        let iv = sb.preact[i];
                        let magnitude = g.lo.abs().max(g.hi.abs());
                        ranked.push((NodeId::new(k, i), magnitude * iv.lo.abs().min(iv.hi)));
                        gate(g)
                    }
                }
            })
            .collect();
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}
