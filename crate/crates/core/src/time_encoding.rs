//! Harmonic encoding of time differences.
//!
//! `encode(Δt)_i = sqrt(1/d) · cos(ω_i · Δt)` with trainable frequencies `ω`.

use crate::autodiff::{Graph, Var};
use crate::error::{AutodiffError, ModelError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TimeEncoder {
    pub omegas: Vec<f64>,
}

impl TimeEncoder {
    pub fn new(omegas: Vec<f64>) -> Self {
        Self { omegas }
    }

    /// `dim` frequencies spaced geometrically from `1/max_span` up to 1.
    pub fn geometric(dim: usize, max_span: f64) -> Self {
        Self::new(geometric_omegas(dim, max_span))
    }

    pub fn dim(&self) -> usize {
        self.omegas.len()
    }

    pub fn encode(&self, delta: f64) -> Result<Vec<f64>, ModelError> {
        if delta < 0.0 {
            return Err(ModelError::NegativeDelta(delta));
        }
        let scale = (1.0 / self.dim() as f64).sqrt();
        Ok(self.omegas.iter().map(|w| scale * (w * delta).cos()).collect())
    }
}

pub fn geometric_omegas(dim: usize, max_span: f64) -> Vec<f64> {
    let lo = 1.0 / max_span.max(1.0);
    match dim {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => (0..dim)
            .map(|i| lo * (1.0 / lo).powf(i as f64 / (dim - 1) as f64))
            .collect(),
    }
}

/// Encodes a column of differences `[n, 1]` against a `[1, d]` frequency row,
/// giving `[n, d]`.
pub fn encode_on_graph(g: &mut Graph, deltas: Var, omegas: Var) -> Result<Var, AutodiffError> {
    let d = g.value(omegas).cols();
    let phase = g.matmul(deltas, omegas)?;
    let c = g.cos(phase);
    Ok(g.scale(c, (1.0 / d as f64).sqrt()))
}

/// Encoding of constant differences, for callers that build rows by hand.
pub fn encode_constant_column(g: &mut Graph, deltas: &[f64], omegas: Var) -> Result<Var, AutodiffError> {
    let col = g.constant(Tensor::column(deltas.to_vec()));
    encode_on_graph(g, col, omegas)
}
