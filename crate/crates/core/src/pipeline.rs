//! Suite-level plumbing: one adapter set per edit case, trained and then
//! scored one edit at a time.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasynth::{gen_edit_cases, gen_world, EditCase, WorldCounts};
use crate::editor::{AdapterLayer, AdapterModes, AdapterParams, EditEntry, EditRegistry, GateConfig};
use crate::error::{Error, Result};
use crate::evalkit::{eval_suite, CaseResult, MetricsReport, Protocol};
use crate::scalar::Scalar;
use crate::training::{train_edit, Episode, LossBreakdown, LossRecord, TrainConfig, TrainOutput};
use crate::vlm::{pretrain, PretrainConfig, PretrainReport, Vlm, VlmConfig};

/// Where the adapters go and how they are trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub text_layer: AdapterLayer,
    pub visual_layer: AdapterLayer,
    /// Gate layer; `None` means the first adapter layer.
    pub gate_layer: Option<usize>,
    pub modes: AdapterModes,
    /// Seed of the adapter initialisation (shared by every edit).
    pub adapter_seed: u64,
    pub train: TrainConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            text_layer: Some(4),
            visual_layer: Some(5),
            gate_layer: None,
            modes: AdapterModes::default(),
            adapter_seed: 7,
            train: TrainConfig::default(),
        }
    }
}

impl SuiteConfig {
    /// The layer whose last-token state keys the gate.
    pub fn resolved_gate_layer(&self) -> Result<usize> {
        match (self.gate_layer, self.text_layer, self.visual_layer) {
            (Some(g), _, _) => Ok(g),
            (None, Some(i), Some(j)) => Ok(i.min(j)),
            (None, Some(l), None) | (None, None, Some(l)) => Ok(l),
            (None, None, None) => Err(Error::Invalid("at least one adapter layer is required".into())),
        }
    }

    /// Gate settings matching this suite, with threshold `tau`.
    pub fn gate(&self, tau: f64, enabled: bool) -> Result<GateConfig> {
        Ok(GateConfig { tau, layer: Some(self.resolved_gate_layer()?), enabled })
    }
}

/// A trained edit together with its training summary.
#[derive(Clone, Debug)]
pub struct TrainedEdit<T> {
    pub entry: EditEntry<T>,
    pub best_iter: usize,
    pub best_loss: LossBreakdown,
    pub history: Vec<LossRecord>,
    pub seconds: f64,
}

/// Trains one adapter set per case. With `out_dir`, each case writes its
/// checkpoints and loss history under `out_dir/<case id>/`.
pub fn train_suite<T: Scalar>(
    model: &Vlm<T>,
    cases: &[EditCase],
    cfg: &SuiteConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(usize, &TrainedEdit<T>),
) -> Result<Vec<TrainedEdit<T>>> {
    let gate_layer = cfg.resolved_gate_layer()?;
    let d = model.config.d_model;
    let mut trained = Vec::with_capacity(cases.len());
    for (k, case) in cases.iter().enumerate() {
        let start = Instant::now();
        let init = AdapterParams::init(d, cfg.text_layer, cfg.visual_layer, cfg.modes, cfg.adapter_seed);
        let episode = Episode::build(model, case, &init, gate_layer)?;
        let out = TrainOutput { dir: out_dir.map(|d| d.join(&case.id)) };
        let outcome = train_edit(model, &episode, init, &cfg.train, &out, |_| {})
            .map_err(|e| Error::Training(format!("case {}: {e}", case.id)))?;
        let item = TrainedEdit {
            entry: EditEntry {
                id: case.id.clone(),
                answer: case.edit.answer.clone(),
                states: episode.states,
                adapters: outcome.params,
            },
            best_iter: outcome.best_iter,
            best_loss: outcome.best_loss,
            history: outcome.history,
            seconds: start.elapsed().as_secs_f64(),
        };
        progress(k, &item);
        trained.push(item);
    }
    Ok(trained)
}

/// Writes the trained entries as a registry directory.
pub fn save_suite<T: Scalar>(dir: &Path, trained: &[TrainedEdit<T>], gate: &GateConfig) -> Result<()> {
    let mut reg = EditRegistry::new();
    for t in trained {
        reg.register(t.entry.clone())?;
    }
    reg.save(dir, gate)
}

/// Everything the seed-fixed toy run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndToEndConfig {
    pub world_seed: u64,
    pub counts: WorldCounts,
    pub model: VlmConfig,
    pub pretrain: PretrainConfig,
    pub edit_seed: u64,
    pub n_edits: usize,
    pub suite: SuiteConfig,
    pub tau: f64,
    pub max_new_tokens: usize,
}

impl Default for EndToEndConfig {
    fn default() -> Self {
        Self {
            world_seed: 0,
            counts: WorldCounts::default(),
            model: VlmConfig::default(),
            pretrain: PretrainConfig::default(),
            edit_seed: 1,
            n_edits: 20,
            suite: SuiteConfig {
                train: TrainConfig { max_iters: 600, checkpoint_interval: 100, ..TrainConfig::default() },
                ..SuiteConfig::default()
            },
            tau: GateConfig::default().tau,
            max_new_tokens: Protocol::default().max_new_tokens,
        }
    }
}

/// Results of [`run_end_to_end`].
#[derive(Clone, Debug)]
pub struct EndToEndReport<T> {
    pub model: Vlm<T>,
    pub cases: Vec<EditCase>,
    pub pretrain: PretrainReport,
    pub trained: Vec<TrainedEdit<T>>,
    pub gated: (MetricsReport, Vec<CaseResult>),
    pub ungated: (MetricsReport, Vec<CaseResult>),
    /// Wall-clock seconds for pretraining, edit training, and evaluation.
    pub seconds: [f64; 3],
}

/// World → pretraining → per-edit training → evaluation with the gate on
/// and off, all from the seeds in `cfg`.
pub fn run_end_to_end<T: Scalar>(cfg: &EndToEndConfig, mut log: impl FnMut(&str)) -> Result<EndToEndReport<T>> {
    let world = gen_world(cfg.world_seed, cfg.counts)?;
    let cases = gen_edit_cases(&world, cfg.edit_seed, cfg.n_edits)?;

    let t = Instant::now();
    let mut model = Vlm::<T>::init(cfg.model.clone())?;
    let pre = pretrain(&mut model, &world.facts, &world.probe, &cfg.pretrain, |step, loss, acc| {
        log(&format!("pretrain step {step}: loss {loss:.4}, probe accuracy {acc:.3}"))
    })?;
    let t_pre = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let trained = train_suite(&model, &cases, &cfg.suite, None, |k, e| {
        log(&format!(
            "edit {k} ({}): best iteration {}, loss {:.4}, {:.1}s",
            e.entry.id, e.best_iter, e.best_loss.total, e.seconds
        ))
    })?;
    let t_train = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let entries: Vec<EditEntry<T>> = trained.iter().map(|e| e.entry.clone()).collect();
    let protocol = |enabled| -> Result<Protocol> {
        Ok(Protocol { gate: cfg.suite.gate(cfg.tau, enabled)?, max_new_tokens: cfg.max_new_tokens })
    };
    let gated = eval_suite(&model, &cases, &entries, &protocol(true)?)?;
    let ungated = eval_suite(&model, &cases, &entries, &protocol(false)?)?;
    let t_eval = t.elapsed().as_secs_f64();

    Ok(EndToEndReport {
        model,
        cases,
        pretrain: pre,
        trained,
        gated,
        ungated,
        seconds: [t_pre, t_train, t_eval],
    })
}
