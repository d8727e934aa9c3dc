//! Modality-specific cross-attention adapters behind a last-token
//! similarity gate.
//!
//! The textual adapter rewrites the text span entering layer `i`, the
//! visual adapter the image span entering layer `j`; both attend over the
//! frozen-base states of the edit prompt at their layer. The gate compares
//! the query's last-token state at the gate layer with each stored edit
//! key and applies the best edit only if the cosine similarity reaches τ.

mod adapter;
mod edited;
mod gate;
mod registry;

pub use adapter::{
    adapter_apply, adapter_apply_taped, AdapterLayer, AdapterModes, AdapterParams, AdapterWeights, CombineMode,
    ScaleMode, ADAPTER_NAMES,
};
pub use edited::{adapted_logits, decode_with_adapters, edited_decode, edited_forward, gate_decide, AdapterHook, EditedOutput};
pub use gate::{decide, gate_similarity, select_best, GateConfig, GateDecision};
pub use registry::{cache_edit_states, EditEntry, EditRegistry, EditStates};
