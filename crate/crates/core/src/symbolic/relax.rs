//! Linear relaxations of `max{0, t}` for one side of a node's bounds.

use serde::{Deserialize, Serialize};

use super::{Interval, LinearExpression, SymbolicError};

/// Below this width a straddling interval is treated as a stable node.
pub const DEGENERATE_WIDTH: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeClass {
    /// `lo ≥ 0`: the ReLU is the identity.
    Positive,
    /// `hi ≤ 0`: the ReLU outputs zero.
    Negative,
    /// The interval straddles zero and the ReLU must be relaxed.
    Overestimated,
}

impl NodeClass {
    pub fn short_name(&self) -> &'static str {
        match self {
            NodeClass::Positive => "pos",
            NodeClass::Negative => "neg",
            NodeClass::Overestimated => "over",
        }
    }
}

pub fn classify_node(iv: Interval) -> NodeClass {
    if iv.lo >= 0.0 {
        NodeClass::Positive
    } else if iv.hi <= 0.0 {
        NodeClass::Negative
    } else {
        NodeClass::Overestimated
    }
}

/// Affine map `t ↦ α·t + β` substituted for a ReLU output on one bound side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Relaxation {
    Identity,
    Zero,
    Affine { alpha: f64, beta: f64 },
}

impl Relaxation {
    pub fn slope(&self) -> f64 {
        match self {
            Relaxation::Identity => 1.0,
            Relaxation::Zero => 0.0,
            Relaxation::Affine { alpha, .. } => *alpha,
        }
    }

    pub fn offset(&self) -> f64 {
        match self {
            Relaxation::Affine { beta, .. } => *beta,
            _ => 0.0,
        }
    }

    pub fn apply(&self, t: f64) -> f64 {
        self.slope() * t + self.offset()
    }

    pub fn apply_expr(&self, e: &LinearExpression) -> LinearExpression {
        let (a, b) = (self.slope(), self.offset());
        LinearExpression::new(e.coeffs.iter().map(|c| a * c).collect(), a * e.offset + b)
    }
}

fn stable(l: f64, u: f64) -> Option<Relaxation> {
    match classify_node(Interval { lo: l, hi: u }) {
        NodeClass::Positive => Some(Relaxation::Identity),
        NodeClass::Negative => Some(Relaxation::Zero),
        NodeClass::Overestimated => None,
    }
}

fn check_width(l: f64, u: f64) -> Result<(), SymbolicError> {
    if u - l < DEGENERATE_WIDTH {
        Err(SymbolicError::DegenerateInterval { lo: l, hi: u })
    } else {
        Ok(())
    }
}

/// Upper line through `(l, 0)` and `(u, u)`, where `[l, u]` is the range of
/// the upper bound expression.
pub fn relax_upper_independent(l: f64, u: f64) -> Result<Relaxation, SymbolicError> {
    if let Some(r) = stable(l, u) {
        return Ok(r);
    }
    check_width(l, u)?;
    let alpha = u / (u - l);
    Ok(Relaxation::Affine { alpha, beta: -alpha * l })
}

/// Lower line through the origin with the same slope as the upper chord,
/// computed from the lower bound expression's own range.
pub fn relax_lower_independent(l: f64, u: f64) -> Result<Relaxation, SymbolicError> {
    if let Some(r) = stable(l, u) {
        return Ok(r);
    }
    check_width(l, u)?;
    Ok(Relaxation::Affine { alpha: u / (u - l), beta: 0.0 })
}

/// Zero bounding: among lower lines `m·t` with `0 ≤ m ≤ 1`, the sum of the
/// line's minimum and maximum over `[l, u]` is `m·(l + u)`, so the optimum is
/// `m = 1` when `l + u ≥ 0` and `m = 0` otherwise. Ties keep the expression.
pub fn relax_lower_zero_bounding(l: f64, u: f64) -> Result<Relaxation, SymbolicError> {
    if let Some(r) = stable(l, u) {
        return Ok(r);
    }
    check_width(l, u)?;
    Ok(if l + u >= 0.0 { Relaxation::Identity } else { Relaxation::Zero })
}

/// Shared-scale relaxation of both sides, using the lower expression's
/// minimum and the upper expression's maximum.
pub fn relax_coupled(l_low: f64, u_up: f64) -> Result<(Relaxation, Relaxation), SymbolicError> {
    if let Some(r) = stable(l_low, u_up) {
        return Ok((r, r));
    }
    check_width(l_low, u_up)?;
    let scale = u_up / (u_up - l_low);
    Ok((
        Relaxation::Affine { alpha: scale, beta: -scale * l_low },
        Relaxation::Affine { alpha: scale, beta: 0.0 },
    ))
}
