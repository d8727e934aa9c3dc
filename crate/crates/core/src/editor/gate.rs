use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gate threshold and the layer whose last-token state is compared.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Open iff the best similarity is at least `tau`.
    pub tau: f64,
    /// Layer read by the gate; `None` uses the shallowest adapter layer.
    pub layer: Option<usize>,
    /// When false the best-matching edit is always applied.
    pub enabled: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { tau: 0.6, layer: None, enabled: true }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(Error::Invalid(format!("gate threshold {} outside [-1, 1]", self.tau)));
        }
        Ok(())
    }
}

/// Outcome of comparing a query against the registry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum GateDecision {
    Closed {
        /// Best similarity and its edit, when the registry is non-empty.
        nearest: Option<(String, f64)>,
    },
    Open {
        edit_id: String,
        sim: f64,
    },
}

impl GateDecision {
    pub fn is_open(&self) -> bool {
        matches!(self, GateDecision::Open { .. })
    }

    /// Best similarity seen, if any edit was compared.
    pub fn max_sim(&self) -> Option<f64> {
        match self {
            GateDecision::Closed { nearest } => nearest.as_ref().map(|(_, s)| *s),
            GateDecision::Open { sim, .. } => Some(*sim),
        }
    }
}

/// Cosine similarity of two vectors, clamped to `[-1, 1]`.
pub fn gate_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape { op: "gate_similarity", lhs: vec![a.len()], rhs: vec![b.len()] });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if !(dot.is_finite() && na.is_finite() && nb.is_finite()) {
        return Err(Error::NonFinite("gate_similarity"));
    }
    if na.sqrt() <= 1e-12 || nb.sqrt() <= 1e-12 {
        return Err(Error::Degenerate("zero-norm vector in cosine similarity".into()));
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Best-matching key: highest similarity, ties to the smallest id.
pub fn select_best<'k, T: Scalar>(
    query: &[T],
    keys: impl IntoIterator<Item = (&'k str, &'k [T])>,
) -> Result<Option<(String, f64)>> {
    let mut best: Option<(&str, f64)> = None;
    for (id, key) in keys {
        let s = gate_similarity(key, query)?;
        let better = match best {
            None => true,
            Some((bid, bs)) => s > bs || (s == bs && id < bid),
        };
        if better {
            best = Some((id, s));
        }
    }
    Ok(best.map(|(id, s)| (id.to_string(), s)))
}

/// Applies the threshold to the best match.
pub fn decide(best: Option<(String, f64)>, gate: &GateConfig) -> GateDecision {
    match best {
        Some((edit_id, sim)) if !gate.enabled || sim >= gate.tau => GateDecision::Open { edit_id, sim },
        nearest => GateDecision::Closed { nearest },
    }
}
