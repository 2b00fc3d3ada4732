//! Backward substitution of bound expressions and the per-layer bound table.
//!
//! A bound on a linear combination of stage-`k` pre-activations is obtained by
//! walking toward the inputs while keeping two coefficient vectors: `up`
//! multiplies upper-bound expressions (entries `≥ 0`) and `low` multiplies
//! lower-bound expressions (entries `≤ 0`). Dense layers are expanded with the
//! per-weight sign split; activations are replaced by their same-side
//! relaxation. At the input layer both expressions are the input variables
//! themselves, so the two vectors merge into one signed coefficient per input.
//!
//! Expanding one node costs one pass over every earlier layer, i.e. the whole
//! table costs `O(n² · max sᵢ)` row operations for `n` stages.

use super::maxpool::{maxpool_bounds, prune_dominated};
use super::relax::{
    classify_node, relax_coupled, relax_lower_independent, relax_lower_zero_bounding,
    relax_upper_independent, NodeClass, Relaxation, DEGENERATE_WIDTH,
};
use super::{concretize, Interval, LinearExpression, RelaxationMode, SymbolicError};
use crate::model::{Activation, InputBox, Network};
use crate::subproblem::{NodeId, Phase, Subproblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Up,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReluBounds {
    pub class: NodeClass,
    pub upper: Relaxation,
    pub lower: Relaxation,
}

/// Bound rows of one max-pool output over the stage's input values.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolBounds {
    /// Window positions (indices into the pool group) that can still be the maximum.
    pub members: Vec<usize>,
    pub upper_row: Vec<f64>,
    pub lower_row: Vec<f64>,
    pub upper_const: f64,
    pub lower_const: f64,
    pub interval: Interval,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageBounds {
    /// `[min Eq_low, max Eq_up]` per dense row, clamped by split constraints.
    pub preact: Vec<Interval>,
    /// Range of each row's upper bound expression.
    pub upper_range: Vec<Interval>,
    /// Range of each row's lower bound expression.
    pub lower_range: Vec<Interval>,
    pub upper_exprs: Vec<LinearExpression>,
    pub lower_exprs: Vec<LinearExpression>,
    /// One entry per row for ReLU stages, empty otherwise.
    pub relu: Vec<ReluBounds>,
    /// One entry per pool group for pooling stages, empty otherwise.
    pub pool: Vec<PoolBounds>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeBounds {
    pub mode: RelaxationMode,
    pub stages: Vec<StageBounds>,
}

impl NodeBounds {
    pub fn output(&self) -> &[Interval] {
        &self.stages.last().expect("at least one stage").preact
    }

    pub fn mean_output_width(&self) -> f64 {
        let out = self.output();
        out.iter().map(Interval::width).sum::<f64>() / out.len() as f64
    }

    pub fn relu(&self, node: NodeId) -> Option<&ReluBounds> {
        self.stages.get(node.layer)?.relu.get(node.node)
    }

    pub fn preact(&self, node: NodeId) -> Option<Interval> {
        self.stages.get(node.layer)?.preact.get(node.node).copied()
    }

    /// Every ReLU node that still needs a relaxation.
    pub fn overestimated(&self) -> Vec<NodeId> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(k, s)| {
                s.relu
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.class == NodeClass::Overestimated)
                    .map(move |(i, _)| NodeId::new(k, i))
            })
            .collect()
    }
}

/// Options beyond the relaxation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundConfig {
    pub mode: RelaxationMode,
    /// Drop max-pool members that can never be the maximum.
    pub prune_pools: bool,
}

impl BoundConfig {
    pub fn new(mode: RelaxationMode) -> Self {
        Self { mode, prune_pools: true }
    }
}

#[derive(Debug, Clone, Copy)]
enum Level {
    /// Coefficients refer to the pre-activations of a stage.
    Pre(usize),
    /// Coefficients refer to the values a stage hands to the next one.
    Post(usize),
    Input,
}

/// Sound bound (upper for `Side::Up`, lower for `Side::Low`) on
/// `Σ_j coeffs[j] · x_j` over the pre-activations `x` of `stage`, as a linear
/// expression of the inputs. `earlier` must hold the bounds of every stage
/// below `stage`.
pub fn back_substitute(
    net: &Network,
    stage: usize,
    coeffs: &[f64],
    side: Side,
    earlier: &[StageBounds],
    splits: &Subproblem,
) -> Result<LinearExpression, SymbolicError> {
    let rows = net.stage_dense(stage).rows();
    if coeffs.len() != rows {
        return Err(SymbolicError::DimensionMismatch { expected: rows, found: coeffs.len() });
    }
    if earlier.len() < stage {
        return Err(SymbolicError::MissingRelaxation { stage: earlier.len() });
    }
    bound_from(net, Level::Pre(stage), coeffs, side, earlier, splits)
}

/// [`back_substitute`] for a single node.
pub fn back_substitute_node(
    net: &Network,
    node: NodeId,
    side: Side,
    earlier: &[StageBounds],
    splits: &Subproblem,
) -> Result<LinearExpression, SymbolicError> {
    let mut coeffs = vec![0.0; net.stage_dense(node.layer).rows()];
    coeffs[node.node] = 1.0;
    back_substitute(net, node.layer, &coeffs, side, earlier, splits)
}

fn bound_from(
    net: &Network,
    level: Level,
    coeffs: &[f64],
    side: Side,
    earlier: &[StageBounds],
    splits: &Subproblem,
) -> Result<LinearExpression, SymbolicError> {
    // A lower bound on f is the negated upper bound on −f.
    let sign = match side {
        Side::Up => 1.0,
        Side::Low => -1.0,
    };
    let up = coeffs.iter().map(|&c| (sign * c).max(0.0)).collect();
    let low = coeffs.iter().map(|&c| (sign * c).min(0.0)).collect();
    let mut e = upper_bound(net, level, up, low, earlier, splits)?;
    if side == Side::Low {
        e.coeffs.iter_mut().for_each(|c| *c = -*c);
        e.offset = -e.offset;
    }
    Ok(e)
}

fn relaxations(sb: &StageBounds, node: NodeId, splits: &Subproblem) -> Option<(Relaxation, Relaxation)> {
    match splits.phase(node) {
        Some(Phase::NonNeg) => Some((Relaxation::Identity, Relaxation::Identity)),
        Some(Phase::NonPos) => Some((Relaxation::Zero, Relaxation::Zero)),
        None => sb.relu.get(node.node).map(|r| (r.upper, r.lower)),
    }
}

/// Upper bound of `up · Eq_up(level) + low · Eq_low(level)`.
fn upper_bound(
    net: &Network,
    mut level: Level,
    mut up: Vec<f64>,
    mut low: Vec<f64>,
    earlier: &[StageBounds],
    splits: &Subproblem,
) -> Result<LinearExpression, SymbolicError> {
    let mut constant = 0.0;
    loop {
        debug_assert!(up.iter().all(|&c| c >= 0.0), "upper coefficient map lost its sign");
        debug_assert!(low.iter().all(|&c| c <= 0.0), "lower coefficient map lost its sign");
        match level {
            Level::Pre(k) => {
                let dense = net.stage_dense(k);
                let mut next_up = vec![0.0; dense.cols()];
                let mut next_low = vec![0.0; dense.cols()];
                for j in 0..dense.rows() {
                    let (a, b) = (up[j], low[j]);
                    if a == 0.0 && b == 0.0 {
                        continue;
                    }
                    constant += (a + b) * dense.bias()[j];
                    for (i, &w) in dense.row(j).iter().enumerate() {
                        if w > 0.0 {
                            next_up[i] += a * w;
                            next_low[i] += b * w;
                        } else if w < 0.0 {
                            next_up[i] += b * w;
                            next_low[i] += a * w;
                        }
                    }
                }
                up = next_up;
                low = next_low;
                level = if k == 0 { Level::Input } else { Level::Post(k - 1) };
            }
            Level::Post(k) => {
                let sb = earlier.get(k).ok_or(SymbolicError::MissingRelaxation { stage: k })?;
                match net.stages()[k].activation {
                    Activation::Linear => level = Level::Pre(k),
                    Activation::Relu => {
                        for i in 0..up.len() {
                            let (ru, rl) = relaxations(sb, NodeId::new(k, i), splits)
                                .ok_or(SymbolicError::MissingRelaxation { stage: k })?;
                            constant += up[i] * ru.offset() + low[i] * rl.offset();
                            up[i] *= ru.slope();
                            low[i] *= rl.slope();
                        }
                        level = Level::Pre(k);
                    }
                    Activation::ReluPool { .. } => {
                        if sb.pool.len() != up.len() {
                            return Err(SymbolicError::MissingRelaxation { stage: k });
                        }
                        let width = net.stage_dense(k).cols();
                        let mut next_up = vec![0.0; width];
                        for (g, pool) in sb.pool.iter().enumerate() {
                            let (a, b) = (up[g], low[g]);
                            if a == 0.0 && b == 0.0 {
                                continue;
                            }
                            constant += a * pool.upper_const + b * pool.lower_const;
                            for i in 0..width {
                                // b ≤ 0 and lower_row ≤ 0: the product bounds v_i from above.
                                next_up[i] += a * pool.upper_row[i] + b * pool.lower_row[i];
                            }
                        }
                        up = next_up;
                        low = vec![0.0; width];
                        level = if k == 0 { Level::Input } else { Level::Post(k - 1) };
                    }
                }
            }
            Level::Input => {
                let coeffs = up.iter().zip(&low).map(|(a, b)| a + b).collect();
                return Ok(LinearExpression::new(coeffs, constant));
            }
        }
    }
}

/// Bound table for every node under the given split constraints.
pub fn compute_layer_bounds(
    net: &Network,
    input: &InputBox,
    mode: RelaxationMode,
    splits: &Subproblem,
) -> Result<NodeBounds, SymbolicError> {
    compute_layer_bounds_with(net, input, BoundConfig::new(mode), splits)
}

pub fn compute_layer_bounds_with(
    net: &Network,
    input: &InputBox,
    config: BoundConfig,
    splits: &Subproblem,
) -> Result<NodeBounds, SymbolicError> {
    if input.dim() != net.input_size() {
        return Err(SymbolicError::DimensionMismatch { expected: net.input_size(), found: input.dim() });
    }
    let mut stages: Vec<StageBounds> = Vec::with_capacity(net.stages().len());
    for k in 0..net.stages().len() {
        let rows = net.stage_dense(k).rows();
        let mut sb = StageBounds::default();
        for j in 0..rows {
            let node = NodeId::new(k, j);
            let ue = back_substitute_node(net, node, Side::Up, &stages, splits)?;
            let le = back_substitute_node(net, node, Side::Low, &stages, splits)?;
            let ur = concretize(&ue, input)?;
            let lr = concretize(&le, input)?;
            let mut iv = Interval { lo: lr.lo, hi: ur.hi };
            match splits.phase(node) {
                Some(Phase::NonNeg) => iv.lo = iv.lo.max(0.0),
                Some(Phase::NonPos) => iv.hi = iv.hi.min(0.0),
                None => {}
            }
            if iv.lo > iv.hi {
                return Err(SymbolicError::InfeasibleSplit(node));
            }
            sb.preact.push(iv);
            sb.upper_range.push(ur);
            sb.lower_range.push(lr);
            sb.upper_exprs.push(ue);
            sb.lower_exprs.push(le);
        }
        if net.stages()[k].activation != Activation::Linear {
            sb.relu = (0..rows)
                .map(|j| {
                    relu_bounds(
                        config.mode,
                        sb.preact[j],
                        sb.upper_range[j],
                        sb.lower_range[j],
                        splits.phase(NodeId::new(k, j)),
                    )
                })
                .collect();
        }
        let pooled = net.stage_pool(k).is_some();
        if pooled {
            sb.pool = pool_rows(net, input, k, &sb, stages.last(), config.prune_pools)?;
        }
        stages.push(sb);
        if pooled {
            for g in 0..stages[k].pool.len() {
                let mut e = vec![0.0; stages[k].pool.len()];
                e[g] = 1.0;
                let hi = concretize(&bound_from(net, Level::Post(k), &e, Side::Up, &stages, splits)?, input)?.hi;
                let lo = concretize(&bound_from(net, Level::Post(k), &e, Side::Low, &stages, splits)?, input)?.lo;
                // Pool outputs are maxima of ReLU outputs.
                let lo = lo.max(0.0);
                stages[k].pool[g].interval = Interval { lo, hi: hi.max(lo) };
            }
        }
    }
    Ok(NodeBounds { mode: config.mode, stages })
}

fn side_or_degenerate(r: Result<Relaxation, SymbolicError>, hi: f64) -> Relaxation {
    match r {
        Ok(r) => r,
        Err(_) if hi.abs() < DEGENERATE_WIDTH => Relaxation::Zero,
        Err(_) => Relaxation::Identity,
    }
}

fn relu_bounds(
    mode: RelaxationMode,
    preact: Interval,
    upper_range: Interval,
    lower_range: Interval,
    phase: Option<Phase>,
) -> ReluBounds {
    let stable = |class| match class {
        NodeClass::Positive => ReluBounds { class, upper: Relaxation::Identity, lower: Relaxation::Identity },
        _ => ReluBounds { class, upper: Relaxation::Zero, lower: Relaxation::Zero },
    };
    match phase {
        Some(Phase::NonNeg) => return stable(NodeClass::Positive),
        Some(Phase::NonPos) => return stable(NodeClass::Negative),
        None => {}
    }
    let class = classify_node(preact);
    if class != NodeClass::Overestimated {
        return stable(class);
    }
    let upper_indep = || {
        side_or_degenerate(relax_upper_independent(upper_range.lo, upper_range.hi), upper_range.hi)
    };
    let (upper, lower) = match mode {
        RelaxationMode::Coupled => match relax_coupled(lower_range.lo, upper_range.hi) {
            Ok(pair) => pair,
            Err(_) if upper_range.hi.abs() < DEGENERATE_WIDTH => (Relaxation::Zero, Relaxation::Zero),
            Err(_) => (Relaxation::Identity, Relaxation::Identity),
        },
        RelaxationMode::Independent => (
            upper_indep(),
            side_or_degenerate(relax_lower_independent(lower_range.lo, lower_range.hi), lower_range.hi),
        ),
        RelaxationMode::ZeroBounding => (
            upper_indep(),
            side_or_degenerate(relax_lower_zero_bounding(lower_range.lo, lower_range.hi), lower_range.hi),
        ),
    };
    ReluBounds { class, upper, lower }
}

/// Pool rows for stage `k`. The window rows act on the stage inputs `v`,
/// which are shifted by a concrete lower bound `ℓ` so that `v − ℓ ≥ 0`:
/// ReLU and pool outputs need no shift, raw inputs shift by the box corner.
/// The pooled value is `max{0, max_r x_r}` (ReLU commutes with max), so the
/// upper constant is clamped at zero.
fn pool_rows(
    net: &Network,
    input: &InputBox,
    k: usize,
    sb: &StageBounds,
    prev: Option<&StageBounds>,
    prune: bool,
) -> Result<Vec<PoolBounds>, SymbolicError> {
    let dense = net.stage_dense(k);
    let pool = net.stage_pool(k).expect("pool stage");
    let shift: Vec<f64> = match (k, prev) {
        (0, _) => input.lo().to_vec(),
        (_, Some(p)) if net.stages()[k - 1].activation == Activation::Linear => {
            p.preact.iter().map(|iv| iv.lo).collect()
        }
        _ => vec![0.0; dense.cols()],
    };
    let shifted_bias: Vec<f64> = (0..dense.rows())
        .map(|r| dense.bias()[r] + dense.row(r).iter().zip(&shift).map(|(w, s)| w * s).sum::<f64>())
        .collect();

    pool.groups
        .iter()
        .map(|group| {
            let window: Vec<Interval> = group.iter().map(|&r| sb.preact[r]).collect();
            let candidates = if prune { prune_dominated(&window) } else { (0..group.len()).collect() };
            let members: Vec<usize> = candidates.into_iter().filter(|&m| window[m].hi > 0.0).collect();
            if members.is_empty() {
                let width = dense.cols();
                return Ok(PoolBounds {
                    members,
                    upper_row: vec![0.0; width],
                    lower_row: vec![0.0; width],
                    upper_const: 0.0,
                    lower_const: 0.0,
                    interval: Interval::point(0.0),
                });
            }
            let rows: Vec<&[f64]> = members.iter().map(|&m| dense.row(group[m])).collect();
            let biases: Vec<f64> = members.iter().map(|&m| shifted_bias[group[m]]).collect();
            let pr = maxpool_bounds(&rows, &biases)?;
            let dot = |row: &[f64]| row.iter().zip(&shift).map(|(c, s)| c * s).sum::<f64>();
            Ok(PoolBounds {
                members,
                upper_const: pr.upper_const.max(0.0) - dot(&pr.upper_row),
                lower_const: pr.lower_const - dot(&pr.lower_row),
                upper_row: pr.upper_row,
                lower_row: pr.lower_row,
                interval: Interval::point(0.0),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dense, Layer};

    fn dense(w: Vec<Vec<f64>>, b: Vec<f64>) -> Layer {
        Layer::Dense(Dense::new(w, Some(b)).unwrap())
    }

    fn unit(lo: f64, hi: f64) -> InputBox {
        InputBox::from_bounds(vec![lo], vec![hi]).unwrap()
    }

    const MODES: [RelaxationMode; 3] =
        [RelaxationMode::Coupled, RelaxationMode::Independent, RelaxationMode::ZeroBounding];

    #[test]
    fn paths_cancel_at_the_input() {
        let net = Network::new(
            1,
            vec![dense(vec![vec![1.0], vec![-0.5]], vec![0.0, 0.0]), dense(vec![vec![1.0, 1.0]], vec![0.0])],
        )
        .unwrap();
        let input = unit(0.0, 1.0);
        for mode in MODES {
            let nb = compute_layer_bounds(&net, &input, mode, &Subproblem::root()).unwrap();
            assert_eq!(nb.output(), &[Interval::new(0.0, 0.5)]);
        }
    }

    #[test]
    fn stable_single_layer_is_exact() {
        let net = Network::new(2, vec![dense(vec![vec![2.0, -3.0], vec![1.0, 1.0]], vec![0.5, -1.0])]).unwrap();
        let input = InputBox::from_bounds(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        let e = back_substitute_node(&net, NodeId::new(0, 0), Side::Up, &[], &Subproblem::root()).unwrap();
        assert_eq!(e, LinearExpression::new(vec![2.0, -3.0], 0.5));
        let nb = compute_layer_bounds(&net, &input, RelaxationMode::ZeroBounding, &Subproblem::root()).unwrap();
        assert_eq!(nb.output()[1], Interval::new(-2.0, 2.0));
    }

    #[test]
    fn relaxed_upper_composes_with_identity_rows() {
        // x ∈ [-1, 5.4] → ReLU → identity output.
        let net = Network::new(
            1,
            vec![dense(vec![vec![1.0]], vec![0.0]), Layer::Relu, dense(vec![vec![1.0]], vec![0.0])],
        )
        .unwrap();
        let input = unit(-1.0, 5.4);
        for mode in MODES {
            let nb = compute_layer_bounds(&net, &input, mode, &Subproblem::root()).unwrap();
            let up = &nb.stages[1].upper_exprs[0];
            assert!((up.coeffs[0] - 0.84375).abs() < 1e-12 && (up.offset - 0.84375).abs() < 1e-12);
            assert!((nb.output()[0].hi - 5.4).abs() < 1e-12);
            for i in 0..=1000 {
                let x = -1.0 + 6.4 * i as f64 / 1000.0;
                let y = net.evaluate(&[x]).unwrap()[0];
                assert!(up.eval(&[x]) >= y - 1e-12);
                assert!(nb.stages[1].lower_exprs[0].eval(&[x]) <= y + 1e-12);
            }
        }
    }

    #[test]
    fn splits_remove_overestimation() {
        let net = Network::new(
            1,
            vec![dense(vec![vec![1.0]], vec![0.0]), Layer::Relu, dense(vec![vec![1.0]], vec![0.0])],
        )
        .unwrap();
        let input = unit(-1.0, 2.0);
        let node = NodeId::new(0, 0);
        let root = compute_layer_bounds(&net, &input, RelaxationMode::ZeroBounding, &Subproblem::root()).unwrap();
        assert_eq!(root.overestimated(), vec![node]);
        let (pos, neg) = Subproblem::root().split(node).unwrap();
        let p = compute_layer_bounds(&net, &input, RelaxationMode::ZeroBounding, &pos).unwrap();
        let n = compute_layer_bounds(&net, &input, RelaxationMode::ZeroBounding, &neg).unwrap();
        assert_eq!(p.relu(node).unwrap().class, NodeClass::Positive);
        assert_eq!(n.relu(node).unwrap().class, NodeClass::Negative);
        assert_eq!(p.output()[0], Interval::new(-1.0, 2.0));
        assert_eq!(n.output()[0], Interval::point(0.0));
        assert_eq!(p.preact(node), Some(Interval::new(0.0, 2.0)));
    }

    #[test]
    fn missing_relaxations_are_reported() {
        let net = Network::new(
            1,
            vec![dense(vec![vec![1.0]], vec![0.0]), Layer::Relu, dense(vec![vec![1.0]], vec![0.0])],
        )
        .unwrap();
        let r = back_substitute_node(&net, NodeId::new(1, 0), Side::Up, &[], &Subproblem::root());
        assert!(matches!(r, Err(SymbolicError::MissingRelaxation { .. })));
    }

    #[test]
    fn zero_bounding_lower_differs_from_coupled() {
        // Lower range [-4.5, 1.5]: zero bounding drops it to 0.
        let net = Network::new(
            1,
            vec![dense(vec![vec![1.0]], vec![-1.5]), Layer::Relu, dense(vec![vec![1.0]], vec![0.0])],
        )
        .unwrap();
        let input = unit(-3.0, 3.0);
        let zb = compute_layer_bounds(&net, &input, RelaxationMode::ZeroBounding, &Subproblem::root()).unwrap();
        assert_eq!(zb.relu(NodeId::new(0, 0)).unwrap().lower, Relaxation::Zero);
        assert_eq!(zb.output()[0].lo, 0.0);
        let cp = compute_layer_bounds(&net, &input, RelaxationMode::Coupled, &Subproblem::root()).unwrap();
        assert!(cp.output()[0].lo < 0.0);
    }
}
