use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sequence::{Modality, SpanLayout};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Called with the residual stream entering each block; may return a
/// modified stream.
pub trait Intervention<T: Scalar> {
    fn at_layer(&mut self, tape: &mut Tape<'_, T>, layer: usize, hidden: Var, layout: &SpanLayout) -> Result<Var>;
}

/// Leaves the stream untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct Passthrough;

impl<T: Scalar> Intervention<T> for Passthrough {
    fn at_layer(&mut self, _: &mut Tape<'_, T>, _: usize, hidden: Var, _: &SpanLayout) -> Result<Var> {
        Ok(hidden)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanTarget {
    Visual,
    Textual,
    All,
}

impl SpanTarget {
    pub fn range(self, layout: &SpanLayout) -> std::ops::Range<usize> {
        match self {
            SpanTarget::Visual => layout.span(Modality::Visual),
            SpanTarget::Textual => layout.span(Modality::Textual),
            SpanTarget::All => 0..layout.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HookAction<T> {
    /// Record the span's hidden states.
    Capture,
    /// Overwrite the span with the given `span_len×d` states.
    ReplaceSpan(Tensor<T>),
    /// Add i.i.d. `N(0, σ²)` noise to the span, seeded.
    AddNoise { sigma: f64, seed: u64 },
}

/// An action on one modality span at the input of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct HookSpec<T> {
    pub layer: usize,
    pub target: SpanTarget,
    pub action: HookAction<T>,
}

impl<T> HookSpec<T> {
    pub fn capture(layer: usize, target: SpanTarget) -> Self {
        Self { layer, target, action: HookAction::Capture }
    }

    pub fn noise(layer: usize, target: SpanTarget, sigma: f64, seed: u64) -> Self {
        Self { layer, target, action: HookAction::AddNoise { sigma, seed } }
    }

    pub fn replace(layer: usize, target: SpanTarget, states: Tensor<T>) -> Self {
        Self { layer, target, action: HookAction::ReplaceSpan(states) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Capture<T> {
    pub layer: usize,
    pub target: SpanTarget,
    pub states: Tensor<T>,
}

/// Applies a list of [`HookSpec`]s in order, collecting captures.
#[derive(Clone, Debug)]
pub struct HookRunner<'h, T> {
    specs: &'h [HookSpec<T>],
    pub captures: Vec<Capture<T>>,
}

impl<'h, T: Scalar> HookRunner<'h, T> {
    pub fn new(specs: &'h [HookSpec<T>], num_layers: usize) -> Result<Self> {
        for s in specs {
            if s.layer >= num_layers {
                return Err(Error::LayerOutOfRange { layer: s.layer, layers: num_layers });
            }
            if let HookAction::AddNoise { sigma, .. } = s.action {
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::Invalid(format!("noise sigma must be finite and non-negative, got {sigma}")));
                }
            }
        }
        Ok(Self { specs, captures: Vec::new() })
    }
}

/// Replaces rows `range` of `hidden` with the constant `rows`.
pub(crate) fn splice_rows<T: Scalar>(
    tape: &mut Tape<'_, T>,
    hidden: Var,
    range: std::ops::Range<usize>,
    rows: Var,
) -> Result<Var> {
    let n = tape.value(hidden).rows();
    let mut parts = Vec::with_capacity(3);
    if range.start > 0 {
        parts.push(tape.slice_rows(hidden, 0, range.start)?);
    }
    parts.push(rows);
    if range.end < n {
        parts.push(tape.slice_rows(hidden, range.end, n)?);
    }
    tape.concat_rows(&parts)
}

impl<T: Scalar> Intervention<T> for HookRunner<'_, T> {
    fn at_layer(&mut self, tape: &mut Tape<'_, T>, layer: usize, mut hidden: Var, layout: &SpanLayout) -> Result<Var> {
        for spec in self.specs.iter().filter(|s| s.layer == layer) {
            let range = spec.target.range(layout);
            let d = tape.value(hidden).cols();
            match &spec.action {
                HookAction::Capture => self.captures.push(Capture {
                    layer,
                    target: spec.target,
                    states: tape.value(hidden).slice_rows(range.start, range.end),
                }),
                HookAction::ReplaceSpan(states) => {
                    if states.shape() != [range.len(), d] {
                        return Err(Error::Shape {
                            op: "replace_span",
                            lhs: vec![range.len(), d],
                            rhs: states.shape().to_vec(),
                        });
                    }
                    if range.is_empty() {
                        continue;
                    }
                    let rows = tape.constant(states.clone());
                    hidden = splice_rows(tape, hidden, range, rows)?;
                }
                HookAction::AddNoise { sigma, seed } => {
                    if *sigma == 0.0 || range.is_empty() {
                        continue;
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                    let noise = Tensor::randn(&[range.len(), d], *sigma, &mut rng);
                    let span = tape.slice_rows(hidden, range.start, range.end)?;
                    let noise = tape.constant(noise);
                    let noisy = tape.add(span, noise)?;
                    hidden = splice_rows(tape, hidden, range, noisy)?;
                }
            }
        }
        Ok(hidden)
    }
}
