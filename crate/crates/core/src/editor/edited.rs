use super::adapter::{adapter_apply_taped, AdapterModes, AdapterParams};
use super::gate::{decide, select_best, GateConfig, GateDecision};
use super::registry::{EditEntry, EditRegistry, EditStates};
use crate::datasynth::vocab::TokenId;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::vlm::{greedy_decode_by, splice_rows, Intervention, Modality, Passthrough, SpanLayout, TokenSequence, Vlm};

/// One modality's adapter bound on a tape: its layer, weights and the
/// edit states it attends over.
#[derive(Clone, Copy, Debug)]
struct BoundAdapter {
    layer: usize,
    weights: [Var; 3],
    states: Var,
}

/// Applies bound adapters to their spans as the stream passes their
/// layers.
#[derive(Clone, Debug)]
pub struct AdapterHook {
    text: Option<BoundAdapter>,
    visual: Option<BoundAdapter>,
    modes: AdapterModes,
}

impl AdapterHook {
    /// Binds `weights` (six vars in text-then-visual order, e.g. from
    /// [`AdapterParams::bind`]) and the cached `states` as constants.
    pub fn bind<'a, T: Scalar>(
        tape: &mut Tape<'a, T>,
        weights: [Var; 6],
        params: &AdapterParams<T>,
        states: &'a EditStates<T>,
    ) -> Result<Self> {
        states.check_against(params)?;
        let [a, b, c, d, e, f] = weights;
        let text = states.text.as_ref().map(|(l, s)| BoundAdapter {
            layer: *l,
            weights: [a, b, c],
            states: tape.borrowed(s, false),
        });
        let visual = states.visual.as_ref().map(|(l, s)| BoundAdapter {
            layer: *l,
            weights: [d, e, f],
            states: tape.borrowed(s, false),
        });
        Ok(Self { text, visual, modes: params.modes })
    }
}

impl<T: Scalar> Intervention<T> for AdapterHook {
    fn at_layer(&mut self, tape: &mut Tape<'_, T>, layer: usize, mut hidden: Var, layout: &SpanLayout) -> Result<Var> {
        for (adapter, modality) in [(self.text, Modality::Textual), (self.visual, Modality::Visual)] {
            let Some(a) = adapter.filter(|a| a.layer == layer) else { continue };
            let range = layout.span(modality);
            if range.is_empty() {
                continue;
            }
            let span = tape.slice_rows(hidden, range.start, range.end)?;
            let out = adapter_apply_taped(tape, span, a.states, a.weights, self.modes)?;
            hidden = splice_rows(tape, hidden, range, out)?;
        }
        Ok(hidden)
    }
}

/// Gate layer in effect for `gate` over `registry`.
fn gate_layer<T: Scalar>(gate: &GateConfig, entry: &EditEntry<T>) -> Result<usize> {
    let layer = gate.layer.or(entry.adapters.first_layer()).ok_or_else(|| {
        Error::Registry(format!("edit {:?} has no active adapter layer to gate on", entry.id))
    })?;
    if layer != entry.states.gate_layer {
        return Err(Error::Registry(format!(
            "edit {:?} key was cached at layer {}, gate reads layer {layer}",
            entry.id, entry.states.gate_layer
        )));
    }
    Ok(layer)
}

/// Compares the prompt's last-token state at the gate layer with every
/// stored key.
pub fn gate_decide<T: Scalar>(
    model: &Vlm<T>,
    seq: &TokenSequence,
    registry: &EditRegistry<T>,
    gate: &GateConfig,
) -> Result<GateDecision> {
    gate.validate()?;
    let Some(first) = registry.entries().first() else {
        return Ok(GateDecision::Closed { nearest: None });
    };
    let layer = gate_layer(gate, first)?;
    for e in registry.entries() {
        gate_layer(gate, e)?;
    }
    let h = model.hidden_at(seq, layer)?;
    let query = h.row(h.rows() - 1);
    let best = select_best(query, registry.entries().iter().map(|e| (e.id.as_str(), e.states.key.as_slice())))?;
    Ok(decide(best, gate))
}

/// Output of an edited forward pass.
#[derive(Clone, Debug)]
pub struct EditedOutput<T> {
    pub logits: Tensor<T>,
    pub layout: SpanLayout,
    pub decision: GateDecision,
}

fn selected<'r, T: Scalar>(registry: &'r EditRegistry<T>, decision: &GateDecision) -> Result<Option<&'r EditEntry<T>>> {
    match decision {
        GateDecision::Closed { .. } => Ok(None),
        GateDecision::Open { edit_id, .. } => registry
            .get(edit_id)
            .map(Some)
            .ok_or_else(|| Error::Registry(format!("selected edit {edit_id:?} is not registered"))),
    }
}

/// Logits of `seq` with `entry`'s adapters forced active (no gate).
pub fn adapted_logits<T: Scalar>(
    model: &Vlm<T>,
    seq: &TokenSequence,
    entry_adapters: &AdapterParams<T>,
    states: &EditStates<T>,
    rows: Option<&[usize]>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let w = entry_adapters.bind(&mut tape, false);
    let mut hook = AdapterHook::bind(&mut tape, w, entry_adapters, states)?;
    let (h, layout) = model.embed(&mut tape, &b, seq)?;
    let h = model.run_blocks(&mut tape, &b, h, &layout, 0..model.config.num_layers, &mut hook, None)?;
    let logits = model.logits(&mut tape, &b, h, rows)?;
    Ok(tape.value(logits).clone())
}

/// The edited model: gate on the prompt, then either the untouched base
/// path (closed) or the base with the selected edit's adapters (open).
pub fn edited_forward<T: Scalar>(
    model: &Vlm<T>,
    seq: &TokenSequence,
    registry: &EditRegistry<T>,
    gate: &GateConfig,
) -> Result<EditedOutput<T>> {
    let decision = gate_decide(model, seq, registry, gate)?;
    let (logits, layout) = match selected(registry, &decision)? {
        None => model.forward_with(seq, &mut Passthrough, None)?,
        Some(e) => (adapted_logits(model, seq, &e.adapters, &e.states, None)?, model.layout(seq)),
    };
    Ok(EditedOutput { logits, layout, decision })
}

/// Greedy decoding under the edited model. The gate is decided once on
/// the prompt and held for the whole generation.
pub fn edited_decode<T: Scalar>(
    model: &Vlm<T>,
    prompt: &TokenSequence,
    registry: &EditRegistry<T>,
    gate: &GateConfig,
    max_new: usize,
) -> Result<(Vec<TokenId>, GateDecision)> {
    let decision = gate_decide(model, prompt, registry, gate)?;
    let tokens = match selected(registry, &decision)? {
        None => model.greedy_decode(prompt, max_new, &mut Passthrough)?,
        Some(e) => decode_with_adapters(model, prompt, &e.adapters, &e.states, max_new)?,
    };
    Ok((tokens, decision))
}

/// Greedy decoding with adapters forced active.
pub fn decode_with_adapters<T: Scalar>(
    model: &Vlm<T>,
    prompt: &TokenSequence,
    adapters: &AdapterParams<T>,
    states: &EditStates<T>,
    max_new: usize,
) -> Result<Vec<TokenId>> {
    let max_text = model.config.max_seq_len.saturating_sub(model.layout(prompt).n_visual);
    greedy_decode_by(prompt, max_new, max_text, |seq| {
        let last = model.layout(seq).len() - 1;
        Ok(adapted_logits(model, seq, adapters, states, Some(&[last]))?.into_data())
    })
}
