//! Subcommand settings: defaults, then an optional JSON config file, then
//! command-line flags (flags win).

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use dualedit::analysis::{KlPosition, QueryRows, DEFAULT_SIGMAS};
use dualedit::datasynth::WorldCounts;
use dualedit::editor::{AdapterLayer, GateConfig};
use dualedit::evalkit::Protocol;
use dualedit::pipeline::{EndToEndConfig, SuiteConfig};
use dualedit::vlm::{PretrainConfig, SpanTarget, VlmConfig};

use crate::args::Precision;

/// Reads `path` as a settings object; missing keys keep their defaults,
/// unknown keys are rejected.
pub fn load<S: DeserializeOwned + Default>(path: Option<&Path>) -> Result<S> {
    let Some(path) = path else { return Ok(S::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Overwrites `slot` when the flag was given.
pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub seed: u64,
    pub facts: usize,
    pub text_facts: usize,
    pub probe: usize,
    pub edits: usize,
    pub edit_seed: u64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let c = WorldCounts::default();
        let e = EndToEndConfig::default();
        Self { seed: e.world_seed, facts: c.facts, text_facts: c.text_facts, probe: c.probe, edits: e.n_edits, edit_seed: e.edit_seed }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub precision: Precision,
    pub model: VlmConfig,
    pub pretrain: PretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditTrainSettings {
    pub precision: Precision,
    pub tau: f64,
    pub suite: SuiteConfig,
}

impl Default for EditTrainSettings {
    fn default() -> Self {
        Self { precision: Precision::default(), tau: GateConfig::default().tau, suite: SuiteConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub precision: Precision,
    pub gating: bool,
    /// `None` uses the threshold stored with the adapters.
    pub tau: Option<f64>,
    pub max_new_tokens: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { precision: Precision::default(), gating: true, tau: None, max_new_tokens: Protocol::default().max_new_tokens }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSettings {
    pub precision: Precision,
    pub samples: usize,
    pub queries: QueryRows,
}

impl Default for AttentionSettings {
    fn default() -> Self {
        Self { precision: Precision::default(), samples: 20, queries: QueryRows::All }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSettings {
    pub precision: Precision,
    pub samples: usize,
    pub modalities: Vec<SpanTarget>,
    pub sigmas: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
    pub position: KlPosition,
}

impl Default for PerturbSettings {
    fn default() -> Self {
        Self {
            precision: Precision::default(),
            samples: 20,
            modalities: vec![SpanTarget::Visual, SpanTarget::Textual, SpanTarget::All],
            sigmas: DEFAULT_SIGMAS.to_vec(),
            repeats: 5,
            seed: 0,
            position: KlPosition::Final,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateHistSettings {
    pub precision: Precision,
    /// `None` uses the default suite's gate layer.
    pub gate_layer: Option<usize>,
    pub seed: u64,
}

impl Default for GateHistSettings {
    fn default() -> Self {
        Self { precision: Precision::default(), gate_layer: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub precision: Precision,
    pub text_layers: Vec<AdapterLayer>,
    pub visual_layers: Vec<AdapterLayer>,
    pub gating: Vec<bool>,
    pub tau: f64,
    pub limit: Option<usize>,
    pub max_new_tokens: usize,
    pub suite: SuiteConfig,
}

impl Default for SweepSettings {
    fn default() -> Self {
        let e = EndToEndConfig::default();
        let all: Vec<AdapterLayer> = (0..VlmConfig::default().num_layers).map(Some).collect();
        Self {
            precision: Precision::default(),
            text_layers: all.clone(),
            visual_layers: all,
            gating: vec![true, false],
            tau: e.tau,
            limit: None,
            max_new_tokens: e.max_new_tokens,
            suite: e.suite,
        }
    }
}
