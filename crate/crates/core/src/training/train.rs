use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::episode::Episode;
use super::loss::{build_loss, evaluate_loss, Draw, GenTextModel, LossBreakdown, Terms};
use crate::editor::AdapterParams;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use crate::vlm::Vlm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    /// Candidate checkpoints are taken every `checkpoint_interval`
    /// iterations (and after the last one).
    pub checkpoint_interval: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub gen_text_model: GenTextModel,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 4,
            max_iters: 50_000,
            checkpoint_interval: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            gen_text_model: GenTextModel::Edited,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.checkpoint_interval == 0 {
            return Err(Error::Invalid("batch size and checkpoint interval must be at least 1".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// One logged training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Loss history as `iter,rel,gen,loc,total` CSV.
pub fn history_csv(history: &[LossRecord]) -> String {
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|r| {
            vec![
                r.iter.to_string(),
                format!("{:.10e}", r.loss.rel),
                format!("{:.10e}", r.loss.gen),
                format!("{:.10e}", r.loss.loc),
                format!("{:.10e}", r.loss.total),
            ]
        })
        .collect();
    crate::io::csv_string(&["iter", "rel", "gen", "loc", "total"], &rows)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// The candidate checkpoint with the lowest full-pool loss.
    pub params: AdapterParams<T>,
    pub best_iter: usize,
    pub best_loss: LossBreakdown,
    /// Per-iteration batch losses.
    pub history: Vec<LossRecord>,
    /// `(iteration, full-pool loss)` of every candidate checkpoint.
    pub checkpoints: Vec<(usize, LossBreakdown)>,
    pub base_hash_before: String,
    pub base_hash_after: String,
}

/// Where checkpoints go; `None` keeps them in memory only.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

impl TrainOutput {
    fn checkpoint_path(&self, iter: usize) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("ckpt-{iter:06}.dled")))
    }
}

fn draw_batch<T>(rng: &mut ChaCha8Rng, ep: &Episode<T>, batch: usize) -> Vec<Draw> {
    (0..batch)
        .map(|_| Draw {
            episode: 0,
            text_gen: rng.random_range(0..ep.text_gen.len()),
            visual_gen: rng.random_range(0..ep.visual_gen.len()),
            multimodal_loc: rng.random_range(0..ep.multimodal_loc.len()),
            text_loc: rng.random_range(0..ep.text_loc.len()),
        })
        .collect()
}

fn dump_batch(dir: Option<&Path>, iter: usize, ep_id: &str, draws: &[Draw], loss: &LossBreakdown) -> String {
    let dump = serde_json::json!({
        "iter": iter,
        "case": ep_id,
        "draws": draws,
        "loss": { "rel": loss.rel, "gen": loss.gen, "loc": loss.loc, "total": loss.total },
    });
    let mut msg = format!("non-finite loss at iteration {iter} on case {ep_id}: {dump}");
    if let Some(d) = dir {
        let path = d.join("nonfinite_batch.json");
        if crate::io::write_atomic(&path, dump.to_string().as_bytes()).is_ok() {
            msg.push_str(&format!(" (dumped to {})", path.display()));
        }
    }
    msg
}

/// Adam on the six adapter matrices for one episode; the base model is
/// only read. Returns the candidate checkpoint with the lowest full-pool
/// loss (iteration 0, every `checkpoint_interval`, and the last).
pub fn train_edit<T: Scalar>(
    model: &Vlm<T>,
    episode: &Episode<T>,
    init: AdapterParams<T>,
    cfg: &TrainConfig,
    out: &TrainOutput,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    init.validate(model.config.num_layers, model.config.d_model)?;
    let base_hash_before = model.weight_hash();
    let episodes = std::slice::from_ref(episode);
    let full = Terms::full_pools(0, episode);
    let d = model.config.d_model;
    let mut adam = Adam::new(cfg.adam(), &[&[d, d][..]; 6]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut history = Vec::with_capacity(cfg.max_iters);

    let mut checkpoints = Vec::new();
    let mut best = (0, evaluate_loss(model, &params, episodes, &full, cfg.gen_text_model)?, params.clone());
    checkpoints.push((0, best.1));

    for iter in 1..=cfg.max_iters {
        let draws = draw_batch(&mut rng, episode, cfg.batch_size);
        let terms = Terms::from_draws(&draws);
        let (loss, grads) = {
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, false);
            let w = params.bind(&mut tape, true);
            let vars = build_loss(&mut tape, model, &b, w, &params, episodes, &terms, cfg.gen_text_model)?;
            let loss = vars.breakdown(&tape);
            if !loss.total.is_finite() {
                return Err(Error::Training(dump_batch(out.dir.as_deref(), iter, &episode.case_id, &draws, &loss)));
            }
            let mut g = tape.backward(vars.total)?;
            let grads: Vec<Tensor<T>> =
                w.iter().map(|&v| g.take(v).unwrap_or_else(|| Tensor::zeros(&[d, d]))).collect();
            (loss, grads)
        };
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training(dump_batch(out.dir.as_deref(), iter, &episode.case_id, &draws, &loss)));
        }
        adam.update(&mut params.matrices_mut(), &grads)?;
        let record = LossRecord { iter, loss };
        on_step(&record);
        history.push(record);
        if iter % cfg.checkpoint_interval == 0 || iter == cfg.max_iters {
            let pool_loss = evaluate_loss(model, &params, episodes, &full, cfg.gen_text_model)?;
            checkpoints.push((iter, pool_loss));
            if let Some(path) = out.checkpoint_path(iter) {
                params.save(&path, Some(&adam))?;
            }
            if pool_loss.total < best.1.total {
                best = (iter, pool_loss, params.clone());
            }
        }
    }
    if let Some(dir) = &out.dir {
        crate::io::write_atomic(&dir.join("loss_history.csv"), history_csv(&history).as_bytes())?;
        best.2.save(&dir.join("best.dled"), None)?;
    }
    let base_hash_after = model.weight_hash();
    if base_hash_after != base_hash_before {
        return Err(Error::Training("base model weights changed during adapter training".into()));
    }
    Ok(TrainOutcome {
        params: best.2,
        best_iter: best.0,
        best_loss: best.1,
        history,
        checkpoints,
        base_hash_before,
        base_hash_after,
    })
}
