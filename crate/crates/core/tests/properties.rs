use std::time::Duration;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use boundsplit::lp::{solve, LpOutcome, LpProblem, Relation};
use boundsplit::model::{Activation, InputBox, Network};
use boundsplit::oracle::{exact_verify, random_instance, sample_soundness, Instance, NetworkShape};
use boundsplit::search::{verify, Outcome, SearchConfig};
use boundsplit::subproblem::{NodeId, Subproblem};
use boundsplit::symbolic::{
    classify_node, compute_layer_bounds, concretize, relax_coupled, relax_lower_independent,
    relax_lower_zero_bounding, relax_upper_independent, Interval, LinearExpression, NodeBounds, NodeClass,
    RelaxationMode,
};

fn small_shape() -> NetworkShape {
    NetworkShape { inputs: 2..=6, hidden: 2..=8, outputs: 2..=3, depth: 2..=4 }
}

fn instance(seed: u64, eps: f64) -> Instance {
    random_instance(&mut ChaCha8Rng::seed_from_u64(seed), &small_shape(), eps)
}

fn mode_strategy() -> impl Strategy<Value = RelaxationMode> {
    prop::sample::select(RelaxationMode::ALL.to_vec())
}

/// Pushes bound expressions forward layer by layer, reusing the relaxations
/// that `nb` chose for each node.
fn forward_expressions(net: &Network, nb: &NodeBounds, dim: usize) -> Vec<(Vec<LinearExpression>, Vec<LinearExpression>)> {
    let identity: Vec<LinearExpression> = (0..dim)
        .map(|i| {
            let mut c = vec![0.0; dim];
            c[i] = 1.0;
            LinearExpression::new(c, 0.0)
        })
        .collect();
    let (mut post_up, mut post_low) = (identity.clone(), identity);
    let mut out = Vec::new();
    for (k, stage) in net.stages().iter().enumerate() {
        let d = net.stage_dense(k);
        let mut up = Vec::new();
        let mut low = Vec::new();
        for i in 0..d.rows() {
            let mut u = LinearExpression::constant(dim, d.bias()[i]);
            let mut l = LinearExpression::constant(dim, d.bias()[i]);
            for j in 0..d.cols() {
                let w = d.weight(i, j);
                let (for_up, for_low) = if w >= 0.0 { (&post_up[j], &post_low[j]) } else { (&post_low[j], &post_up[j]) };
                for t in 0..dim {
                    u.coeffs[t] += w * for_up.coeffs[t];
                    l.coeffs[t] += w * for_low.coeffs[t];
                }
                u.offset += w * for_up.offset;
                l.offset += w * for_low.offset;
            }
            up.push(u);
            low.push(l);
        }
        match stage.activation {
            Activation::Relu => {
                let relu = &nb.stages[k].relu;
                post_up = up.iter().zip(relu).map(|(e, r)| r.upper.apply_expr(e)).collect();
                post_low = low.iter().zip(relu).map(|(e, r)| r.lower.apply_expr(e)).collect();
            }
            _ => {
                post_up = up.clone();
                post_low = low.clone();
            }
        }
        out.push((up, low));
    }
    out
}

fn close(a: &LinearExpression, b: &LinearExpression) -> bool {
    let scale = 1.0 + a.coeffs.iter().chain([&a.offset]).fold(0.0f64, |m, v| m.max(v.abs()));
    a.coeffs.iter().zip(&b.coeffs).all(|(x, y)| (x - y).abs() <= 1e-9 * scale) && (a.offset - b.offset).abs() <= 1e-9 * scale
}

fn corners(input: &InputBox) -> Vec<Vec<f64>> {
    let n = input.dim();
    (0..1usize << n)
        .map(|mask| (0..n).map(|i| if mask >> i & 1 == 1 { input.hi()[i] } else { input.lo()[i] }).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn back_substitution_matches_forward_composition(seed in any::<u64>(), eps in 0.01f64..0.5, mode in mode_strategy()) {
        let inst = instance(seed, eps);
        let nb = compute_layer_bounds(&inst.net, &inst.input, mode, &Subproblem::root()).unwrap();
        let fwd = forward_expressions(&inst.net, &nb, inst.input.dim());
        for (k, (up, low)) in fwd.iter().enumerate() {
            for i in 0..up.len() {
                prop_assert!(close(&up[i], &nb.stages[k].upper_exprs[i]), "upper mismatch at ({k}, {i})");
                prop_assert!(close(&low[i], &nb.stages[k].lower_exprs[i]), "lower mismatch at ({k}, {i})");
            }
        }
    }

    #[test]
    fn concretization_matches_corner_enumeration(seed in any::<u64>(), dim in 1usize..=8, eps in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let input = InputBox::new(center, eps, None).unwrap();
        let e = LinearExpression::new((0..dim).map(|_| rng.random_range(-3.0..3.0)).collect(), rng.random_range(-1.0..1.0));
        let iv = concretize(&e, &input).unwrap();
        let values: Vec<f64> = corners(&input).iter().map(|z| e.eval(z)).collect();
        let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        prop_assert!((iv.lo - lo).abs() <= 1e-12 && (iv.hi - hi).abs() <= 1e-12);
    }

    #[test]
    fn relaxations_sandwich_relu(l in -10.0f64..-1e-3, u in 1e-3f64..10.0, l_low_gap in 0.0f64..5.0, t_frac in 0.0f64..=1.0) {
        let t = l + t_frac * (u - l);
        let relu = t.max(0.0);
        prop_assert!(relax_upper_independent(l, u).unwrap().apply(t) >= relu - 1e-12);
        prop_assert!(relax_lower_independent(l, u).unwrap().apply(t) <= relu + 1e-12);
        prop_assert!(relax_lower_zero_bounding(l, u).unwrap().apply(t) <= relu + 1e-12);
        let (cu, cl) = relax_coupled(l - l_low_gap, u).unwrap();
        prop_assert!(cu.apply(t) >= relu - 1e-12);
        prop_assert!(cl.apply(t) <= relu + 1e-12);
    }

    #[test]
    fn bounds_contain_sampled_values(seed in any::<u64>(), eps in 0.01f64..0.5, mode in mode_strategy()) {
        let inst = instance(seed, eps);
        let nb = compute_layer_bounds(&inst.net, &inst.input, mode, &Subproblem::root()).unwrap();
        let escapes = sample_soundness(&inst.net, &inst.input, &nb, &Subproblem::root(), 200, seed);
        prop_assert!(escapes.is_empty(), "{:?}", escapes.first());
    }

    #[test]
    fn splitting_resolves_exactly_one_node_at_its_layer(seed in any::<u64>(), eps in 0.05f64..0.5, mode in mode_strategy(), pick in any::<prop::sample::Index>()) {
        let inst = instance(seed, eps);
        let root = Subproblem::root();
        let nb = compute_layer_bounds(&inst.net, &inst.input, mode, &root).unwrap();
        let over = nb.overestimated();
        prop_assume!(!over.is_empty());
        let node = *pick.get(&over);
        let count_at = |b: &NodeBounds| b.overestimated().iter().filter(|n| n.layer == node.layer).count();
        let (a, b) = root.split(node).unwrap();
        for child in [a, b] {
            // An infeasible branch is simply pruned.
            let Ok(cb) = compute_layer_bounds(&inst.net, &inst.input, mode, &child) else { continue };
            prop_assert_eq!(count_at(&cb), count_at(&nb) - 1);
            prop_assert_ne!(classify_node(cb.preact(node).unwrap()), NodeClass::Overestimated);
            for k in 0..node.layer {
                prop_assert_eq!(&cb.stages[k].preact, &nb.stages[k].preact);
            }
            let escapes = sample_soundness(&inst.net, &inst.input, &cb, &child, 200, seed);
            prop_assert!(escapes.is_empty(), "{:?}", escapes.first());
        }
    }

    #[test]
    fn simplex_optimum_dominates_feasible_points(seed in any::<u64>(), n in 1usize..=6, m in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchor: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut p = LpProblem::new();
        for a in &anchor {
            p.add_variable(a - rng.random_range(0.1..2.0), a + rng.random_range(0.1..2.0)).unwrap();
        }
        for _ in 0..m {
            let row: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let at: f64 = row.iter().zip(&anchor).map(|(c, v)| c * v).sum();
            p.add_constraint(&row, Relation::Le, at + rng.random_range(0.0..1.0)).unwrap();
        }
        p.set_objective(&(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
        let first = solve(&p, Duration::from_secs(5)).unwrap();
        prop_assert_eq!(&first, &solve(&p, Duration::from_secs(5)).unwrap());
        let LpOutcome::Optimal { point, value } = first else {
            return Err(TestCaseError::fail(format!("feasible LP reported {first:?}")));
        };
        prop_assert!(p.max_violation(&point) <= 1e-7);
        prop_assert!((p.objective_value(&point) - value).abs() <= 1e-9);
        // Every point on the segment from the anchor to the optimum is feasible.
        for s in [0.0, 0.25, 0.5, 0.75] {
            let x: Vec<f64> = anchor.iter().zip(&point).map(|(a, o)| a + s * (o - a)).collect();
            prop_assert!(p.objective_value(&x) <= value + 1e-7);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn search_agrees_with_exact_oracle(seed in any::<u64>(), eps in 0.02f64..0.3, workers in 1usize..=3) {
        let inst = instance(seed, eps);
        let nb = compute_layer_bounds(&inst.net, &inst.input, RelaxationMode::ZeroBounding, &Subproblem::root()).unwrap();
        prop_assume!(nb.overestimated().len() <= 10);
        let cfg = SearchConfig { workers, ..SearchConfig::unlimited(RelaxationMode::ZeroBounding) };
        let got = verify(&inst.net, &inst.input, &inst.prop, &cfg).unwrap();
        let exact = exact_verify(&inst.net, &inst.input, &inst.prop, workers).unwrap();
        prop_assert_eq!(got.outcome.name(), exact.outcome.name());
        if let Outcome::Unsafe { witness } = &got.outcome {
            prop_assert!(inst.input.contains(witness));
            prop_assert!(inst.prop.is_violated_by(&inst.net.evaluate(witness).unwrap()));
        }
    }

    #[test]
    fn single_worker_search_is_deterministic(seed in any::<u64>(), eps in 0.05f64..0.4, mode in mode_strategy()) {
        let inst = instance(seed, eps);
        let cfg = SearchConfig { max_subproblems: Some(500), ..SearchConfig::unlimited(mode) };
        let a = verify(&inst.net, &inst.input, &inst.prop, &cfg).unwrap();
        let b = verify(&inst.net, &inst.input, &inst.prop, &cfg).unwrap();
        prop_assert_eq!(&a.outcome, &b.outcome);
        prop_assert_eq!(a.stats.subproblems, b.stats.subproblems);
        prop_assert_eq!(a.stats.lp_calls, b.stats.lp_calls);
        prop_assert_eq!(&a.split_log, &b.split_log);
    }
}

#[test]
fn shrunken_bounds_are_caught_by_sampling() {
    let inst = instance(11, 0.3);
    let mut nb = compute_layer_bounds(&inst.net, &inst.input, RelaxationMode::ZeroBounding, &Subproblem::root()).unwrap();
    let last = nb.stages.len() - 1;
    for iv in &mut nb.stages[last].preact {
        *iv = Interval::new(iv.lo, iv.lo + iv.width() / 2.0);
    }
    let escapes = sample_soundness(&inst.net, &inst.input, &nb, &Subproblem::root(), 1000, 0);
    assert!(escapes.iter().any(|e| e.node.layer == last));
}

#[test]
fn lowered_upper_expression_is_caught_by_sampling() {
    let inst = instance(12, 0.3);
    let mut nb = compute_layer_bounds(&inst.net, &inst.input, RelaxationMode::Coupled, &Subproblem::root()).unwrap();
    let target = NodeId::new(0, 0);
    let width = nb.preact(target).unwrap().width();
    nb.stages[0].upper_exprs[0].offset -= width;
    let escapes = sample_soundness(&inst.net, &inst.input, &nb, &Subproblem::root(), 1000, 0);
    assert!(escapes.iter().any(|e| e.node == target));
}
