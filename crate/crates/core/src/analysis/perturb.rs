use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vlm::{HookSpec, SpanTarget, TokenSequence, Vlm};

/// Default noise scales.
pub const DEFAULT_SIGMAS: [f64; 5] = [0.01, 0.05, 0.1, 0.5, 1.0];

/// Where the output distributions are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlPosition {
    /// The final prompt position (the first decoded token).
    #[default]
    Final,
    /// Averaged over every prompt position.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbPoint {
    pub layer: usize,
    pub sigma: f64,
    pub kl_mean: f64,
    /// Number of (sample, repeat) pairs averaged.
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    pub target: SpanTarget,
    pub sigmas: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
    pub position: KlPosition,
    /// Layer-major, then in `sigmas` order.
    pub points: Vec<PerturbPoint>,
}

fn target_name(t: SpanTarget) -> &'static str {
    match t {
        SpanTarget::Visual => "visual",
        SpanTarget::Textual => "textual",
        SpanTarget::All => "all",
    }
}

impl PerturbationCurve {
    pub const CSV_HEADER: [&'static str; 5] = ["modality", "layer", "sigma", "kl_mean", "n"];

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.points
            .iter()
            .map(|p| {
                vec![
                    target_name(self.target).to_string(),
                    p.layer.to_string(),
                    p.sigma.to_string(),
                    format!("{:.12e}", p.kl_mean),
                    p.n.to_string(),
                ]
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        crate::io::csv_string(&Self::CSV_HEADER, &self.csv_rows())
    }
}

/// `KL(softmax(a) ‖ softmax(b))` in nats, computed in `f64` through
/// log-softmax so identical inputs give exactly zero.
pub fn kl_from_logits(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape { op: "kl_from_logits", lhs: vec![a.len()], rhs: vec![b.len()] });
    }
    let log_softmax = |x: &[f64]| -> Result<Vec<f64>> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kl_from_logits"));
        }
        let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        Ok(x.iter().map(|v| v - lse).collect())
    };
    let (la, lb) = (log_softmax(a)?, log_softmax(b)?);
    Ok(la.iter().zip(&lb).map(|(p, q)| p.exp() * (p - q)).sum())
}

/// Mixes the run seed with the coordinates of one noise draw, so every
/// draw is independent of iteration order.
fn draw_seed(seed: u64, parts: [u64; 4]) -> u64 {
    let mut h = seed;
    for p in parts {
        h = (h ^ p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

fn position_kl<T: Scalar>(base: &Tensor<T>, pert: &Tensor<T>, position: KlPosition) -> Result<f64> {
    let rows: Vec<usize> = match position {
        KlPosition::Final => vec![base.rows() - 1],
        KlPosition::Mean => (0..base.rows()).collect(),
    };
    let mut total = 0.0;
    for &r in &rows {
        let a: Vec<f64> = base.row(r).iter().map(|v| v.as_f64()).collect();
        let b: Vec<f64> = pert.row(r).iter().map(|v| v.as_f64()).collect();
        total += kl_from_logits(&a, &b)?;
    }
    Ok(total / rows.len() as f64)
}

/// For every layer and σ: Gaussian noise on the `target` span entering
/// that layer, and the mean KL between base and perturbed next-token
/// distributions over `samples × repeats`.
pub fn perturbation_kl_curve<T: Scalar>(
    model: &Vlm<T>,
    samples: &[TokenSequence],
    target: SpanTarget,
    sigmas: &[f64],
    repeats: usize,
    seed: u64,
    position: KlPosition,
) -> Result<PerturbationCurve> {
    if samples.is_empty() || repeats == 0 || sigmas.is_empty() {
        return Err(Error::Invalid("perturbation curve needs samples, repeats and at least one sigma".into()));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(Error::Invalid(format!("noise sigma must be finite and non-negative, got {s}")));
    }
    let base: Vec<Tensor<T>> = samples.iter().map(|s| Ok(model.forward(s, &[])?.logits)).collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(model.config.num_layers * sigmas.len());
    for layer in 0..model.config.num_layers {
        for (si, &sigma) in sigmas.iter().enumerate() {
            let mut total = 0.0;
            for (k, seq) in samples.iter().enumerate() {
                for r in 0..repeats {
                    let s = draw_seed(seed, [layer as u64, si as u64, k as u64, r as u64]);
                    let pert = model.forward(seq, &[HookSpec::noise(layer, target, sigma, s)])?.logits;
                    total += position_kl(&base[k], &pert, position)?;
                }
            }
            let n = samples.len() * repeats;
            points.push(PerturbPoint { layer, sigma, kl_mean: total / n as f64, n });
        }
    }
    Ok(PerturbationCurve { target, sigmas: sigmas.to_vec(), repeats, seed, position, points })
}
