use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hooks::Passthrough;
use super::model::{argmax, Vlm};
use super::sequence::Supervised;
use crate::datasynth::Fact;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub eval_every: usize,
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 16,
            max_steps: 4000,
            warmup_steps: 50,
            grad_clip: 1.0,
            eval_every: 100,
            target_accuracy: 0.95,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub probe_accuracy: f64,
    pub reached_target: bool,
    /// `(step, mean batch loss, probe accuracy)` at each evaluation.
    pub history: Vec<(usize, f64, f64)>,
}

fn supervised_facts<T: Scalar>(model: &Vlm<T>, facts: &[Fact]) -> Vec<Supervised> {
    facts.iter().map(|f| model.supervise(f.image.clone(), &f.question, &f.answer)).collect()
}

/// Fraction of teacher-forced answer tokens (terminator included) whose
/// argmax prediction is correct.
pub fn probe_token_accuracy<T: Scalar>(model: &Vlm<T>, probe: &[Fact]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in supervised_facts(model, probe) {
        let (logits, _) = model.forward_with(&s.seq, &mut Passthrough, None)?;
        for (&r, &y) in s.rows.iter().zip(&s.targets) {
            hit += usize::from(argmax(logits.row(r)) == y as usize);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Dataset("empty probe set".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// Loss and gradients of one teacher-forced example.
pub(crate) fn example_grads<T: Scalar>(model: &Vlm<T>, s: &Supervised) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, true);
    let (h, layout) = model.embed(&mut tape, &b, &s.seq)?;
    let h = model.run_blocks(&mut tape, &b, h, &layout, 0..model.config.num_layers, &mut Passthrough, None)?;
    let logits = model.logits(&mut tape, &b, h, Some(&s.rows))?;
    let targets: Vec<usize> = s.targets.iter().map(|&t| t as usize).collect();
    let loss = tape.cross_entropy(logits, &targets, &vec![true; targets.len()])?;
    let value = tape.value(loss).item().as_f64();
    let mut grads = tape.backward(loss)?;
    let out = b
        .all
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();
    Ok((value, out))
}

/// Trains `model` on `facts` with Adam until the probe token accuracy
/// reaches the target or the step budget runs out. Falling short is an
/// error carrying the final accuracy.
pub fn pretrain<T: Scalar>(
    model: &mut Vlm<T>,
    facts: &[Fact],
    probe: &[Fact],
    cfg: &PretrainConfig,
    mut progress: impl FnMut(usize, f64, f64),
) -> Result<PretrainReport> {
    if facts.is_empty() {
        return Err(Error::Dataset("no training facts".into()));
    }
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::Invalid("batch_size and eval_every must be positive".into()));
    }
    let data = supervised_facts(model, facts);
    let shapes: Vec<Vec<usize>> = model.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }, &shape_refs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut report = PretrainReport {
        steps: 0,
        final_loss: f64::NAN,
        probe_accuracy: probe_token_accuracy(model, probe)?,
        reached_target: false,
        history: Vec::new(),
    };
    if report.probe_accuracy >= cfg.target_accuracy {
        report.reached_target = true;
        return Ok(report);
    }
    let mut window = (0.0, 0usize);
    for step in 1..=cfg.max_steps {
        let mut acc: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (loss, grads) = example_grads(model, &data[order[cursor]])?;
            cursor += 1;
            window.0 += loss;
            window.1 += 1;
            for (a, g) in acc.iter_mut().zip(&grads) {
                for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        let mut sq = 0.0;
        for a in &acc {
            for x in a.data() {
                sq += (x.as_f64() * inv).powi(2);
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Training(format!("non-finite gradient at step {step}")));
        }
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        let factor = T::from_f64_lossy(inv * clip);
        for a in &mut acc {
            for x in a.data_mut() {
                *x *= factor;
            }
        }
        let warm = if cfg.warmup_steps > 0 { (step as f64 / cfg.warmup_steps as f64).min(1.0) } else { 1.0 };
        adam.update_with_lr(&mut model.params_mut(), &acc, cfg.lr * warm)?;
        report.steps = step;
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let loss = window.0 / window.1.max(1) as f64;
            window = (0.0, 0);
            let accuracy = probe_token_accuracy(model, probe)?;
            report.final_loss = loss;
            report.probe_accuracy = accuracy;
            report.history.push((step, loss, accuracy));
            progress(step, loss, accuracy);
            if accuracy >= cfg.target_accuracy {
                report.reached_target = true;
                return Ok(report);
            }
        }
    }
    Err(Error::Training(format!(
        "probe token accuracy {:.4} below target {:.4} after {} steps",
        report.probe_accuracy, cfg.target_accuracy, report.steps
    )))
}
