use serde::{Deserialize, Serialize};

use super::SymbolicError;
use crate::model::InputBox;

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "empty interval [{lo}, {hi}]");
        Self { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64, slack: f64) -> bool {
        self.lo - slack <= v && v <= self.hi + slack
    }

    pub fn straddles_zero(&self) -> bool {
        self.lo < 0.0 && 0.0 < self.hi
    }
}

/// Affine function `coeffs · z + offset` of the network inputs `z`.
///
/// There is exactly one coefficient per input variable, so contributions that
/// reach the same input along different paths are always merged.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearExpression {
    pub coeffs: Vec<f64>,
    pub offset: f64,
}

impl LinearExpression {
    pub fn new(coeffs: Vec<f64>, offset: f64) -> Self {
        Self { coeffs, offset }
    }

    pub fn constant(dim: usize, offset: f64) -> Self {
        Self { coeffs: vec![0.0; dim], offset }
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        self.offset + self.coeffs.iter().zip(z).map(|(c, x)| c * x).sum::<f64>()
    }

    /// Exact minimum and maximum over the box.
    pub fn concretize(&self, input: &InputBox) -> Result<Interval, SymbolicError> {
        concretize(self, input)
    }
}

/// Exact range of a linear expression over an input box: every coefficient
/// picks the box corner that minimizes (maximizes) its term.
pub fn concretize(e: &LinearExpression, input: &InputBox) -> Result<Interval, SymbolicError> {
    if e.dim() != input.dim() {
        return Err(SymbolicError::DimensionMismatch { expected: input.dim(), found: e.dim() });
    }
    let (mut lo, mut hi) = (e.offset, e.offset);
    for ((&c, &l), &h) in e.coeffs.iter().zip(input.lo()).zip(input.hi()) {
        if c > 0.0 {
            lo += c * l;
            hi += c * h;
        } else if c < 0.0 {
            lo += c * h;
            hi += c * l;
        }
    }
    Ok(Interval { lo, hi })
}
