use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vlm::{Modality, Passthrough, SpanLayout, TokenSequence, Vlm};

/// Which query rows contribute to the per-key received score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryRows {
    /// Every query position (masked entries count as zero).
    #[default]
    All,
    /// Only the final prompt position.
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub layer: usize,
    /// Mean received score over textual keys.
    pub text_mean: f64,
    /// Mean received score over visual keys.
    pub vis_mean: f64,
    /// Mean of the three largest visual scores.
    pub vis_top3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub rows: Vec<AttentionRow>,
    pub queries: QueryRows,
    pub n_samples: usize,
    /// Some sample had fewer than three visual keys, so its top-3 value
    /// averages all of them.
    pub top3_fallback: bool,
}

impl AttentionProfile {
    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.layer.to_string(),
                    format!("{:.10}", r.text_mean),
                    format!("{:.10}", r.vis_mean),
                    format!("{:.10}", r.vis_top3),
                ]
            })
            .collect();
        crate::io::csv_string(&["layer", "text_mean", "vis_mean", "vis_top3"], &rows)
    }
}

/// Per-key received scores of one layer's `heads × n × n` attention,
/// averaged over heads and the selected query rows.
fn received<T: Scalar>(attn: &Tensor<T>, queries: QueryRows) -> Result<Vec<f64>> {
    let [h, n, m] = attn.shape() else {
        return Err(Error::Shape { op: "attention profile", lhs: attn.shape().to_vec(), rhs: vec![0, 0, 0] });
    };
    if n != m || *n == 0 || *h == 0 {
        return Err(Error::Shape { op: "attention profile", lhs: attn.shape().to_vec(), rhs: vec![*h, *n, *n] });
    }
    let rows: Vec<usize> = match queries {
        QueryRows::All => (0..*n).collect(),
        QueryRows::Last => vec![n - 1],
    };
    let mut score = vec![0.0; *n];
    for head in 0..*h {
        for &q in &rows {
            let base = (head * n + q) * n;
            for (k, s) in score.iter_mut().enumerate() {
                *s += attn.data()[base + k].as_f64();
            }
        }
    }
    let denom = (*h * rows.len()) as f64;
    Ok(score.into_iter().map(|s| s / denom).collect())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Profile of a single layer's attention; returns the row and whether
/// the top-3 value fell back to fewer keys.
pub fn layer_profile<T: Scalar>(
    layer: usize,
    attn: &Tensor<T>,
    layout: &SpanLayout,
    queries: QueryRows,
) -> Result<(AttentionRow, bool)> {
    let (vis, text) = (layout.span(Modality::Visual), layout.span(Modality::Textual));
    if vis.is_empty() || text.is_empty() {
        return Err(Error::Invalid("attention profile needs non-empty visual and textual spans".into()));
    }
    let score = received(attn, queries)?;
    if score.len() != layout.len() {
        return Err(Error::Shape { op: "attention profile", lhs: vec![score.len()], rhs: vec![layout.len()] });
    }
    let mut v: Vec<f64> = score[vis].to_vec();
    let vis_mean = mean(&v);
    v.sort_by(|a, b| b.total_cmp(a));
    let top = v.len().min(3);
    let row = AttentionRow { layer, text_mean: mean(&score[text]), vis_mean, vis_top3: mean(&v[..top]) };
    Ok((row, top < 3))
}

/// Average received attention per modality and layer over `samples`.
pub fn attention_modality_profile<T: Scalar>(
    model: &Vlm<T>,
    samples: &[TokenSequence],
    queries: QueryRows,
) -> Result<AttentionProfile> {
    if samples.is_empty() {
        return Err(Error::Invalid("attention profile needs at least one sample".into()));
    }
    let layers = model.config.num_layers;
    let mut sums = vec![[0.0; 3]; layers];
    let mut fallback = false;
    for seq in samples {
        let mut attn = Vec::with_capacity(layers);
        let (_, layout) = model.forward_with(seq, &mut Passthrough, Some(&mut attn))?;
        for (k, a) in attn.iter().enumerate() {
            let (row, fb) = layer_profile(k, a, &layout, queries)?;
            fallback |= fb;
            sums[k][0] += row.text_mean;
            sums[k][1] += row.vis_mean;
            sums[k][2] += row.vis_top3;
        }
    }
    let n = samples.len() as f64;
    let rows = sums
        .iter()
        .enumerate()
        .map(|(layer, s)| AttentionRow { layer, text_mean: s[0] / n, vis_mean: s[1] / n, vis_top3: s[2] / n })
        .collect();
    Ok(AttentionProfile { rows, queries, n_samples: samples.len(), top3_fallback: fallback })
}
