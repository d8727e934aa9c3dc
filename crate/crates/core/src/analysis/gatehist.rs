use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasynth::{EditCase, SynthImage};
use crate::datasynth::vocab::TokenId;
use crate::editor::gate_similarity;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vlm::{Modality, TokenSequence, Vlm};

/// How a prompt is summarised before comparing it with an edit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// State of the final prompt token (what the gate uses).
    LastToken,
    /// Mean of the textual span's states.
    TextMean,
    /// Mean of the visual span's states (skipped for text-only prompts).
    VisualMean,
    /// A fresh seeded random vector in place of the edit's key for every
    /// comparison, against last-token states: the chance-level baseline.
    RandomKey,
}

impl Representation {
    pub const ALL: [Representation; 4] =
        [Representation::LastToken, Representation::TextMean, Representation::VisualMean, Representation::RandomKey];

    pub fn name(self) -> &'static str {
        match self {
            Representation::LastToken => "last_token",
            Representation::TextMean => "text_mean",
            Representation::VisualMean => "visual_mean",
            Representation::RandomKey => "random_key",
        }
    }
}

/// Relation of a compared prompt to the edit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimPopulation {
    /// The edit prompt itself.
    SelfPair,
    TGen,
    VGen,
    TLoc,
    MLoc,
}

impl SimPopulation {
    pub fn name(self) -> &'static str {
        match self {
            SimPopulation::SelfPair => "self",
            SimPopulation::TGen => "t_gen",
            SimPopulation::VGen => "v_gen",
            SimPopulation::TLoc => "t_loc",
            SimPopulation::MLoc => "m_loc",
        }
    }

    /// Generality neighbours: the prompts the edit should fire on.
    pub fn is_neighbor(self) -> bool {
        matches!(self, SimPopulation::TGen | SimPopulation::VGen)
    }

    pub fn is_unrelated(self) -> bool {
        matches!(self, SimPopulation::TLoc | SimPopulation::MLoc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub case_id: String,
    pub representation: Representation,
    pub population: SimPopulation,
    pub sim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateHistogram {
    pub gate_layer: usize,
    pub records: Vec<SimRecord>,
    /// Per representation: (population, mean similarity).
    pub means: Vec<(Representation, SimPopulation, f64)>,
    /// Per representation: ranking AUC of neighbours over unrelated
    /// prompts (`None` when either side is empty).
    pub auc: Vec<(Representation, Option<f64>)>,
}

impl GateHistogram {
    pub const CSV_HEADER: [&'static str; 4] = ["population", "sim", "representation", "case_id"];

    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .records
            .iter()
            .map(|r| {
                vec![
                    r.population.name().to_string(),
                    format!("{:.12}", r.sim),
                    r.representation.name().to_string(),
                    r.case_id.clone(),
                ]
            })
            .collect();
        crate::io::csv_string(&Self::CSV_HEADER, &rows)
    }

    pub fn auc_of(&self, rep: Representation) -> Option<f64> {
        self.auc.iter().find(|(r, _)| *r == rep).and_then(|(_, a)| *a)
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let means: Vec<serde_json::Value> = self
            .means
            .iter()
            .map(|(r, p, m)| serde_json::json!({ "representation": r.name(), "population": p.name(), "mean": m }))
            .collect();
        let auc: serde_json::Map<String, serde_json::Value> =
            self.auc.iter().map(|(r, a)| (r.name().to_string(), serde_json::json!(a))).collect();
        serde_json::json!({ "gate_layer": self.gate_layer, "n_records": self.records.len(), "means": means, "auc": auc })
    }
}

/// `P(pos > neg) + ½·P(pos = neg)` over all pairs.
pub fn auc(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Summaries of one prompt at the gate layer.
#[derive(Clone)]
struct PromptStates<T> {
    last: Vec<T>,
    text_mean: Option<Vec<T>>,
    visual_mean: Option<Vec<T>>,
}

fn span_mean<T: Scalar>(h: &Tensor<T>, span: std::ops::Range<usize>) -> Option<Vec<T>> {
    if span.is_empty() {
        return None;
    }
    let n = T::from_usize(span.len()).unwrap();
    let mut acc = vec![T::zero(); h.cols()];
    for r in span {
        for (a, &v) in acc.iter_mut().zip(h.row(r)) {
            *a += v;
        }
    }
    Some(acc.into_iter().map(|a| a / n).collect())
}

fn prompt_states<T: Scalar>(
    model: &Vlm<T>,
    image: Option<&SynthImage>,
    question: &[TokenId],
    layer: usize,
) -> Result<PromptStates<T>> {
    let seq = TokenSequence::new(image.cloned(), question.to_vec());
    let layout = model.layout(&seq);
    let h = model.hidden_at(&seq, layer)?;
    Ok(PromptStates {
        last: h.row(h.rows() - 1).to_vec(),
        text_mean: span_mean(&h, layout.span(Modality::Textual)),
        visual_mean: span_mean(&h, layout.span(Modality::Visual)),
    })
}

/// Similarity of every case's edit prompt with its own generality
/// neighbours and its unrelated locality samples, under each
/// [`Representation`].
pub fn gate_similarity_histogram<T: Scalar>(
    model: &Vlm<T>,
    cases: &[EditCase],
    gate_layer: usize,
    seed: u64,
) -> Result<GateHistogram> {
    if gate_layer > model.config.num_layers {
        return Err(Error::LayerOutOfRange { layer: gate_layer, layers: model.config.num_layers });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.config.d_model;
    let mut records = Vec::new();
    for case in cases {
        let image = &case.edit.image;
        let edit = prompt_states(model, Some(image), &case.edit.question, gate_layer)?;
        let mut others: Vec<(SimPopulation, PromptStates<T>)> = vec![(SimPopulation::SelfPair, edit.clone())];
        for n in &case.t_gen {
            others.push((SimPopulation::TGen, prompt_states(model, Some(image), &n.question, gate_layer)?));
        }
        for n in &case.v_gen {
            others.push((SimPopulation::VGen, prompt_states(model, Some(&n.image), &case.edit.question, gate_layer)?));
        }
        for l in &case.t_loc {
            others.push((SimPopulation::TLoc, prompt_states(model, None, &l.question, gate_layer)?));
        }
        for l in &case.m_loc {
            others.push((SimPopulation::MLoc, prompt_states(model, Some(&l.image), &l.question, gate_layer)?));
        }
        for (population, st) in &others {
            let random_key: Vec<T> = Tensor::<T>::randn(&[d], 1.0, &mut rng).into_data();
            let pairs: [(Representation, Option<&[T]>, Option<&[T]>); 4] = [
                (Representation::LastToken, Some(&edit.last), Some(&st.last)),
                (Representation::TextMean, edit.text_mean.as_deref(), st.text_mean.as_deref()),
                (Representation::VisualMean, edit.visual_mean.as_deref(), st.visual_mean.as_deref()),
                (Representation::RandomKey, Some(&random_key), Some(&st.last)),
            ];
            for (representation, a, b) in pairs {
                if representation == Representation::RandomKey && *population == SimPopulation::SelfPair {
                    continue;
                }
                let (Some(a), Some(b)) = (a, b) else { continue };
                records.push(SimRecord {
                    case_id: case.id.clone(),
                    representation,
                    population: *population,
                    sim: gate_similarity(a, b)?,
                });
            }
        }
    }
    let pops = [SimPopulation::SelfPair, SimPopulation::TGen, SimPopulation::VGen, SimPopulation::TLoc, SimPopulation::MLoc];
    let mut means = Vec::new();
    let mut aucs = Vec::new();
    for rep in Representation::ALL {
        let of = |pred: &dyn Fn(SimPopulation) -> bool| -> Vec<f64> {
            records.iter().filter(|r| r.representation == rep && pred(r.population)).map(|r| r.sim).collect()
        };
        for p in pops {
            let xs = of(&|q| q == p);
            if !xs.is_empty() {
                means.push((rep, p, xs.iter().sum::<f64>() / xs.len() as f64));
            }
        }
        aucs.push((rep, auc(&of(&SimPopulation::is_neighbor), &of(&SimPopulation::is_unrelated))));
    }
    Ok(GateHistogram { gate_layer, records, means, auc: aucs })
}
