//! Dense two-phase primal simplex for small linear programs.
//!
//! Problems are maximized. Variable bounds are removed by substitution
//! (shift, reflection or a split into positive and negative parts) before the
//! tableau is built, and finite upper bounds become explicit rows.

use std::time::{Duration, Instant};

use thiserror::Error;

pub const FEASIBILITY_TOL: f64 = 1e-7;
pub const PIVOT_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-9;
/// Consecutive degenerate pivots tolerated before switching to Bland's rule.
const STALL_LIMIT: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("coefficient vector has {found} entries, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("variable {index} out of range for {count} variables")]
    VariableOutOfRange { index: usize, count: usize },
    #[error("invalid bounds [{lo}, {hi}] for variable {index}")]
    InvalidBounds { index: usize, lo: f64, hi: f64 },
    #[error("simplex stalled: no usable pivot")]
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

impl Relation {
    fn flipped(self) -> Self {
        match self {
            Relation::Le => Relation::Ge,
            Relation::Eq => Relation::Eq,
            Relation::Ge => Relation::Le,
        }
    }

    fn holds(self, lhs: f64, rhs: f64, tol: f64) -> bool {
        match self {
            Relation::Le => lhs <= rhs + tol,
            Relation::Eq => (lhs - rhs).abs() <= tol,
            Relation::Ge => lhs >= rhs - tol,
        }
    }
}

/// Sparse linear constraint `Σ coeff·x rel rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub terms: Vec<(usize, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

impl Constraint {
    pub fn lhs(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(j, c)| c * x[j]).sum()
    }

    pub fn violation(&self, x: &[f64]) -> f64 {
        let lhs = self.lhs(x);
        match self.relation {
            Relation::Le => (lhs - self.rhs).max(0.0),
            Relation::Eq => (lhs - self.rhs).abs(),
            Relation::Ge => (self.rhs - lhs).max(0.0),
        }
    }
}

/// `maximize c·x` subject to linear constraints and per-variable bounds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LpProblem {
    lo: Vec<f64>,
    hi: Vec<f64>,
    constraints: Vec<Constraint>,
    objective: Vec<(usize, f64)>,
}

impl LpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, lo: f64, hi: f64) -> Result<usize, LpError> {
        let index = self.lo.len();
        if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
            return Err(LpError::InvalidBounds { index, lo, hi });
        }
        self.lo.push(lo);
        self.hi.push(hi);
        Ok(index)
    }

    pub fn num_variables(&self) -> usize {
        self.lo.len()
    }

    pub fn bounds(&self, j: usize) -> (f64, f64) {
        (self.lo[j], self.hi[j])
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    fn check_terms(&self, terms: &[(usize, f64)]) -> Result<(), LpError> {
        let count = self.num_variables();
        match terms.iter().find(|&&(j, _)| j >= count) {
            Some(&(index, _)) => Err(LpError::VariableOutOfRange { index, count }),
            None => Ok(()),
        }
    }

    /// Adds a constraint given one coefficient per declared variable.
    pub fn add_constraint(&mut self, coeffs: &[f64], relation: Relation, rhs: f64) -> Result<(), LpError> {
        if coeffs.len() != self.num_variables() {
            return Err(LpError::DimensionMismatch { expected: self.num_variables(), found: coeffs.len() });
        }
        let terms = coeffs.iter().enumerate().filter(|(_, &c)| c != 0.0).map(|(j, &c)| (j, c)).collect();
        self.constraints.push(Constraint { terms, relation, rhs });
        Ok(())
    }

    pub fn add_sparse_constraint(
        &mut self,
        terms: Vec<(usize, f64)>,
        relation: Relation,
        rhs: f64,
    ) -> Result<(), LpError> {
        self.check_terms(&terms)?;
        self.constraints.push(Constraint { terms, relation, rhs });
        Ok(())
    }

    pub fn set_objective(&mut self, coeffs: &[f64]) -> Result<(), LpError> {
        if coeffs.len() != self.num_variables() {
            return Err(LpError::DimensionMismatch { expected: self.num_variables(), found: coeffs.len() });
        }
        self.objective = coeffs.iter().enumerate().filter(|(_, &c)| c != 0.0).map(|(j, &c)| (j, c)).collect();
        Ok(())
    }

    pub fn set_sparse_objective(&mut self, terms: Vec<(usize, f64)>) -> Result<(), LpError> {
        self.check_terms(&terms)?;
        self.objective = terms;
        Ok(())
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().map(|&(j, c)| c * x[j]).sum()
    }

    /// Largest bound or constraint violation at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let bounds = (0..self.num_variables())
            .map(|j| (self.lo[j] - x[j]).max(x[j] - self.hi[j]).max(0.0))
            .fold(0.0, f64::max);
        self.constraints.iter().map(|c| c.violation(x)).fold(bounds, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { point: Vec<f64>, value: f64 },
    Infeasible,
    Unbounded,
    TimedOut,
}

/// Solves `p`, giving up with [`LpOutcome::TimedOut`] once `budget` has elapsed.
pub fn solve(p: &LpProblem, budget: Duration) -> Result<LpOutcome, LpError> {
    let deadline = Instant::now().checked_add(budget);
    let Some(mut sx) = Standardized::build(p) else {
        return Ok(LpOutcome::Infeasible);
    };
    sx.run(p, deadline)
}

#[derive(Debug, Clone, Copy)]
enum VarMap {
    Fixed(f64),
    /// `x = lo + col`
    Shift { col: usize, lo: f64 },
    /// `x = hi − col`
    Reflect { col: usize, hi: f64 },
    /// `x = pos − neg`
    Free { pos: usize, neg: usize },
}

struct Standardized {
    map: Vec<VarMap>,
    /// Row-major `m × (n + 1)` tableau; the last column is the right-hand side.
    tab: Vec<f64>,
    m: usize,
    n: usize,
    /// Columns at or beyond this index are artificial.
    first_art: usize,
    basis: Vec<usize>,
    /// Structural objective over tableau columns.
    cost: Vec<f64>,
    cost_row: Vec<f64>,
    bland: bool,
    stall: usize,
    iterations: usize,
}

enum Phase {
    Optimal,
    Unbounded,
    TimedOut,
}

impl Standardized {
    /// Returns `None` when a constraint with no remaining variables is violated.
    fn build(p: &LpProblem) -> Option<Self> {
        let mut ns = 0;
        let mut map = Vec::with_capacity(p.num_variables());
        let mut upper_rows = Vec::new();
        for j in 0..p.num_variables() {
            let (lo, hi) = (p.lo[j], p.hi[j]);
            let m = if lo == hi {
                VarMap::Fixed(lo)
            } else if lo.is_finite() {
                if hi.is_finite() {
                    upper_rows.push((ns, hi - lo));
                }
                VarMap::Shift { col: post_inc(&mut ns), lo }
            } else if hi.is_finite() {
                VarMap::Reflect { col: post_inc(&mut ns), hi }
            } else {
                let pos = post_inc(&mut ns);
                VarMap::Free { pos, neg: post_inc(&mut ns) }
            };
            map.push(m);
        }

        let mut rows: Vec<(Vec<f64>, Relation, f64)> = Vec::new();
        for c in &p.constraints {
            let mut coeffs = vec![0.0; ns];
            let mut rhs = c.rhs;
            for &(j, a) in &c.terms {
                match map[j] {
                    VarMap::Fixed(v) => rhs -= a * v,
                    VarMap::Shift { col, lo } => {
                        coeffs[col] += a;
                        rhs -= a * lo;
                    }
                    VarMap::Reflect { col, hi } => {
                        coeffs[col] -= a;
                        rhs -= a * hi;
                    }
                    VarMap::Free { pos, neg } => {
                        coeffs[pos] += a;
                        coeffs[neg] -= a;
                    }
                }
            }
            rows.push((coeffs, c.relation, rhs));
        }
        for (col, ub) in upper_rows {
            let mut coeffs = vec![0.0; ns];
            coeffs[col] = 1.0;
            rows.push((coeffs, Relation::Le, ub));
        }

        let mut kept = Vec::with_capacity(rows.len());
        for (mut coeffs, mut rel, mut rhs) in rows {
            let scale = coeffs.iter().fold(0.0f64, |s, c| s.max(c.abs()));
            if scale == 0.0 {
                if !rel.holds(0.0, rhs, FEASIBILITY_TOL) {
                    return None;
                }
                continue;
            }
            coeffs.iter_mut().for_each(|c| *c /= scale);
            rhs /= scale;
            if rhs < 0.0 {
                coeffs.iter_mut().for_each(|c| *c = -*c);
                rhs = -rhs;
                rel = rel.flipped();
            }
            kept.push((coeffs, rel, rhs));
        }

        let m = kept.len();
        let n_slack = kept.iter().filter(|r| r.1 != Relation::Eq).count();
        let n_art = kept.iter().filter(|r| r.1 != Relation::Le).count();
        let first_art = ns + n_slack;
        let n = first_art + n_art;
        let w = n + 1;
        let mut tab = vec![0.0; m * w];
        let mut basis = vec![0; m];
        let (mut slack, mut art) = (ns, first_art);
        for (i, (coeffs, rel, rhs)) in kept.iter().enumerate() {
            let row = &mut tab[i * w..(i + 1) * w];
            row[..ns].copy_from_slice(coeffs);
            row[n] = *rhs;
            match rel {
                Relation::Le => {
                    row[slack] = 1.0;
                    basis[i] = post_inc(&mut slack);
                }
                Relation::Ge => {
                    row[post_inc(&mut slack)] = -1.0;
                    row[art] = 1.0;
                    basis[i] = post_inc(&mut art);
                }
                Relation::Eq => {
                    row[art] = 1.0;
                    basis[i] = post_inc(&mut art);
                }
            }
        }

        let mut cost = vec![0.0; ns];
        for &(j, c) in &p.objective {
            match map[j] {
                VarMap::Fixed(_) => {}
                VarMap::Shift { col, .. } => cost[col] += c,
                VarMap::Reflect { col, .. } => cost[col] -= c,
                VarMap::Free { pos, neg } => {
                    cost[pos] += c;
                    cost[neg] -= c;
                }
            }
        }

        Some(Self {
            map,
            tab,
            m,
            n,
            first_art,
            basis,
            cost,
            cost_row: vec![0.0; w],
            bland: false,
            stall: 0,
            iterations: 0,
        })
    }

    fn run(&mut self, p: &LpProblem, deadline: Option<Instant>) -> Result<LpOutcome, LpError> {
        let w = self.n + 1;
        // Phase one: maximize −Σ artificials.
        self.cost_row.iter_mut().for_each(|c| *c = 0.0);
        for j in self.first_art..self.n {
            self.cost_row[j] = 1.0;
        }
        self.canonicalize();
        match self.optimize(self.n, 1.0, deadline)? {
            Phase::TimedOut => return Ok(LpOutcome::TimedOut),
            Phase::Unbounded => return Err(LpError::NumericalFailure),
            Phase::Optimal => {}
        }
        if self.cost_row[self.n] < -FEASIBILITY_TOL {
            return Ok(LpOutcome::Infeasible);
        }
        self.drive_out_artificials();

        // Phase two on the original objective.
        self.cost_row.iter_mut().for_each(|c| *c = 0.0);
        for (j, &c) in self.cost.iter().enumerate() {
            self.cost_row[j] = -c;
        }
        self.canonicalize();
        self.bland = false;
        self.stall = 0;
        let scale = self.cost.iter().fold(1.0f64, |s, c| s.max(c.abs()));
        match self.optimize(self.first_art, scale, deadline)? {
            Phase::TimedOut => return Ok(LpOutcome::TimedOut),
            Phase::Unbounded => return Ok(LpOutcome::Unbounded),
            Phase::Optimal => {}
        }

        let mut xs = vec![0.0; self.n];
        for (i, &b) in self.basis.iter().enumerate() {
            xs[b] = self.tab[i * w + self.n].max(0.0);
        }
        let point: Vec<f64> = self
            .map
            .iter()
            .enumerate()
            .map(|(j, m)| {
                let v = match *m {
                    VarMap::Fixed(v) => v,
                    VarMap::Shift { col, lo } => lo + xs[col],
                    VarMap::Reflect { col, hi } => hi - xs[col],
                    VarMap::Free { pos, neg } => xs[pos] - xs[neg],
                };
                v.clamp(p.lo[j], p.hi[j])
            })
            .collect();
        let value = p.objective_value(&point);
        Ok(LpOutcome::Optimal { point, value })
    }

    fn canonicalize(&mut self) {
        let w = self.n + 1;
        for i in 0..self.m {
            let f = self.cost_row[self.basis[i]];
            if f != 0.0 {
                let row = &self.tab[i * w..(i + 1) * w];
                for (c, r) in self.cost_row.iter_mut().zip(row) {
                    *c -= f * r;
                }
            }
        }
    }

    fn iteration_cap(&self) -> usize {
        50_000 + 50 * (self.m + self.n)
    }

    /// Maximizes the current cost row letting only columns `< allow` enter.
    fn optimize(&mut self, allow: usize, scale: f64, deadline: Option<Instant>) -> Result<Phase, LpError> {
        let w = self.n + 1;
        let tol = COST_TOL * scale;
        loop {
            if deadline.is_some_and(|d| Instant::now() >= d) {
                return Ok(Phase::TimedOut);
            }
            self.iterations += 1;
            if self.iterations > self.iteration_cap() {
                return Err(LpError::NumericalFailure);
            }
            let candidates = self.cost_row[..allow].iter().enumerate().filter(|(_, &c)| c < -tol);
            let entering = if self.bland {
                candidates.map(|(j, _)| j).next()
            } else {
                candidates.min_by(|a, b| a.1.total_cmp(b.1)).map(|(j, _)| j)
            };
            let Some(col) = entering else {
                return Ok(Phase::Optimal);
            };

            let mut best: Option<(usize, f64, f64)> = None;
            for i in 0..self.m {
                let a = self.tab[i * w + col];
                if a <= PIVOT_TOL {
                    continue;
                }
                let ratio = self.tab[i * w + self.n].max(0.0) / a;
                best = match best {
                    None => Some((i, ratio, a)),
                    Some((bi, br, ba)) => {
                        let tie = (ratio - br).abs() <= 1e-12 * (1.0 + br.abs());
                        let better = if tie {
                            if self.bland {
                                self.basis[i] < self.basis[bi]
                            } else {
                                a > ba
                            }
                        } else {
                            ratio < br
                        };
                        if better {
                            Some((i, ratio, a))
                        } else {
                            Some((bi, br, ba))
                        }
                    }
                };
            }
            let Some((row, ratio, _)) = best else {
                return Ok(Phase::Unbounded);
            };
            if ratio <= 1e-12 {
                self.stall += 1;
                if self.stall > STALL_LIMIT {
                    self.bland = true;
                }
            } else {
                self.stall = 0;
            }
            self.pivot(row, col);
        }
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let w = self.n + 1;
        let inv = 1.0 / self.tab[r * w + c];
        for v in &mut self.tab[r * w..(r + 1) * w] {
            *v *= inv;
        }
        self.tab[r * w + c] = 1.0;
        let prow: Vec<f64> = self.tab[r * w..(r + 1) * w].to_vec();
        let nz: Vec<usize> = (0..w).filter(|&j| prow[j] != 0.0).collect();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.tab[i * w + c];
            if f == 0.0 {
                continue;
            }
            let row = &mut self.tab[i * w..(i + 1) * w];
            for &j in &nz {
                row[j] -= f * prow[j];
            }
            row[c] = 0.0;
        }
        let f = self.cost_row[c];
        if f != 0.0 {
            for &j in &nz {
                self.cost_row[j] -= f * prow[j];
            }
            self.cost_row[c] = 0.0;
        }
        self.basis[r] = c;
    }

    /// Pivots basic artificials (all at zero after a feasible phase one) out
    /// of the basis where possible. Rows with no structural entry are
    /// redundant and keep their artificial, which can never re-enter.
    fn drive_out_artificials(&mut self) {
        let w = self.n + 1;
        for i in 0..self.m {
            if self.basis[i] < self.first_art {
                continue;
            }
            let row = &self.tab[i * w..i * w + self.first_art];
            let best = row
                .iter()
                .enumerate()
                .filter(|(_, a)| a.abs() > 1e-9)
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(j, _)| j);
            if let Some(j) = best {
                self.pivot(i, j);
            }
        }
    }
}

fn post_inc(x: &mut usize) -> usize {
    *x += 1;
    *x - 1
}
