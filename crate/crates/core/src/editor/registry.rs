use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adapter::{AdapterLayer, AdapterParams};
use crate::checkpoint::{self, Checkpoint};
use crate::datasynth::vocab::TokenId;
use crate::datasynth::SynthImage;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vlm::{HookSpec, SpanTarget, TokenSequence, Vlm};

/// Frozen-base states of one edit prompt: the gate key and the full
/// streams entering the adapter layers.
#[derive(Clone, Debug, PartialEq)]
pub struct EditStates<T> {
    pub gate_layer: usize,
    /// Last-token state entering `gate_layer`, length `d`.
    pub key: Vec<T>,
    pub text: Option<(usize, Tensor<T>)>,
    pub visual: Option<(usize, Tensor<T>)>,
}

/// One frozen-base forward over the edit prompt with captures at the gate
/// layer and the adapter layers.
pub fn cache_edit_states<T: Scalar>(
    model: &Vlm<T>,
    image: Option<&SynthImage>,
    question: &[TokenId],
    gate_layer: usize,
    text_layer: AdapterLayer,
    visual_layer: AdapterLayer,
) -> Result<EditStates<T>> {
    let seq = TokenSequence::new(image.cloned(), question.to_vec());
    let mut hooks = vec![HookSpec::capture(gate_layer, SpanTarget::All)];
    hooks.extend([text_layer, visual_layer].into_iter().flatten().map(|l| HookSpec::capture(l, SpanTarget::All)));
    let rec = model.forward(&seq, &hooks)?;
    let mut caps = rec.captures.into_iter();
    let gate = caps.next().expect("gate capture").states;
    let key = gate.row(gate.rows() - 1).to_vec();
    let text = text_layer.map(|l| (l, caps.next().expect("text capture").states));
    let visual = visual_layer.map(|l| (l, caps.next().expect("visual capture").states));
    Ok(EditStates { gate_layer, key, text, visual })
}

impl<T: Scalar> EditStates<T> {
    /// Checks the cached layers line up with `adapters`.
    pub fn check_against(&self, adapters: &AdapterParams<T>) -> Result<()> {
        let have = (self.text.as_ref().map(|s| s.0), self.visual.as_ref().map(|s| s.0));
        if have != (adapters.text_layer, adapters.visual_layer) {
            return Err(Error::Registry(format!(
                "cached edit states at layers {have:?} do not match adapter layers {:?}",
                (adapters.text_layer, adapters.visual_layer)
            )));
        }
        Ok(())
    }

    fn named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![("key".to_string(), Tensor::new(vec![self.key.len()], self.key.clone()).unwrap())];
        if let Some((_, t)) = &self.text {
            out.push(("text".into(), t.clone()));
        }
        if let Some((_, t)) = &self.visual {
            out.push(("visual".into(), t.clone()));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.named();
        let refs: Vec<(&str, &Tensor<T>)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let meta = serde_json::json!({
            "kind": "edit_states",
            "gate_layer": self.gate_layer,
            "text_layer": self.text.as_ref().map(|s| s.0),
            "visual_layer": self.visual.as_ref().map(|s| s.0),
        });
        checkpoint::save(path, &refs, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let layer = |k: &str| -> Option<usize> { ck.meta[k].as_u64().map(|v| v as usize) };
        let gate_layer = layer("gate_layer")
            .ok_or_else(|| crate::error::CheckpointError::Header("edit states without gate_layer".into()))?;
        let key = ck.get("key")?.cast::<T>().into_data();
        let text = match layer("text_layer") {
            Some(l) => Some((l, ck.get("text")?.cast())),
            None => None,
        };
        let visual = match layer("visual_layer") {
            Some(l) => Some((l, ck.get("visual")?.cast())),
            None => None,
        };
        Ok(Self { gate_layer, key, text, visual })
    }
}

/// A registered edit: its identity, target, cached states and adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct EditEntry<T> {
    pub id: String,
    pub answer: Vec<TokenId>,
    pub states: EditStates<T>,
    pub adapters: AdapterParams<T>,
}

/// Edits available to the gate. Ids are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EditRegistry<T> {
    entries: Vec<EditEntry<T>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistryFile {
    tau: f64,
    gate_layer: Option<usize>,
    edits: Vec<RegistryRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistryRecord {
    id: String,
    answer: Vec<TokenId>,
    key: Vec<f64>,
    adapters: String,
    states: String,
}

impl<T: Scalar> EditRegistry<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn register(&mut self, entry: EditEntry<T>) -> Result<()> {
        if self.entries.iter().any(|e| e.id == entry.id) {
            return Err(Error::Registry(format!("duplicate edit id {:?}", entry.id)));
        }
        entry.states.check_against(&entry.adapters)?;
        if entry.states.key.iter().any(|v| !v.is_finite()) {
            return Err(Error::Registry(format!("edit {:?} has a non-finite key", entry.id)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn remove(&mut self, id: &str) -> Option<EditEntry<T>> {
        let k = self.entries.iter().position(|e| e.id == id)?;
        Some(self.entries.remove(k))
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn get(&self, id: &str) -> Option<&EditEntry<T>> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn entries(&self) -> &[EditEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes `registry.json` plus per-edit adapter and state files into
    /// `dir`.
    pub fn save(&self, dir: &Path, gate: &super::GateConfig) -> Result<()> {
        let mut edits = Vec::with_capacity(self.entries.len());
        for (k, e) in self.entries.iter().enumerate() {
            let adapters = format!("edit-{k:04}.adapters.dled");
            let states = format!("edit-{k:04}.states.dled");
            e.adapters.save(&dir.join(&adapters), None)?;
            e.states.save(&dir.join(&states))?;
            edits.push(RegistryRecord {
                id: e.id.clone(),
                answer: e.answer.clone(),
                key: e.states.key.iter().map(|v| v.as_f64()).collect(),
                adapters,
                states,
            });
        }
        let file = RegistryFile { tau: gate.tau, gate_layer: gate.layer, edits };
        crate::io::write_atomic(&dir.join("registry.json"), &serde_json::to_vec_pretty(&file)?)
    }

    /// Reads a registry written by [`EditRegistry::save`]; returns it with
    /// the stored threshold and gate layer.
    pub fn load(dir: &Path) -> Result<(Self, f64, Option<usize>)> {
        let path = dir.join("registry.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let file: RegistryFile = serde_json::from_slice(&bytes)?;
        let mut reg = Self::new();
        for r in file.edits {
            let (adapters, _) = AdapterParams::load(&dir.join(&r.adapters))?;
            let states = EditStates::from_checkpoint(&checkpoint::load(&dir.join(&r.states))?)?;
            reg.register(EditEntry { id: r.id, answer: r.answer, states, adapters })?;
        }
        Ok((reg, file.tau, file.gate_layer))
    }
}
