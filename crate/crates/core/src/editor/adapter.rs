use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{CheckpointError, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// How the adapter output is combined with the span it reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// The span is overwritten by the adapter output.
    #[default]
    Replace,
    /// The adapter output is added to the span.
    ResidualAdd,
}

/// Whether adapter scores are divided by `√d`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    #[default]
    Literal,
    Scaled,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterModes {
    pub combine: CombineMode,
    pub scale: ScaleMode,
}

/// The three projections of one modality's cross-attention adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterWeights<T> {
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
    pub w3: Tensor<T>,
}

impl<T: Scalar> AdapterWeights<T> {
    pub fn as_array(&self) -> [&Tensor<T>; 3] {
        [&self.w1, &self.w2, &self.w3]
    }

    fn as_array_mut(&mut self) -> [&mut Tensor<T>; 3] {
        [&mut self.w1, &mut self.w2, &mut self.w3]
    }
}

/// Where a modality's adapter sits; `None` disables it.
pub type AdapterLayer = Option<usize>;

/// The six trainable matrices plus placement and mode flags.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<T> {
    pub text: AdapterWeights<T>,
    pub visual: AdapterWeights<T>,
    /// Layer `i` of the textual adapter.
    pub text_layer: AdapterLayer,
    /// Layer `j` of the visual adapter.
    pub visual_layer: AdapterLayer,
    pub modes: AdapterModes,
}

pub const ADAPTER_NAMES: [&str; 6] = ["text.w1", "text.w2", "text.w3", "visual.w1", "visual.w2", "visual.w3"];

#[derive(Debug, Serialize, Deserialize)]
struct AdapterMeta {
    kind: String,
    text_layer: AdapterLayer,
    visual_layer: AdapterLayer,
    modes: AdapterModes,
    #[serde(default)]
    adam_step: Option<u64>,
}

impl<T: Scalar> AdapterParams<T> {
    /// Seeded initialisation: `W1`, `W2` ~ N(0, 0.02²); `W3` zero for
    /// residual adds (exact identity start) and N(0, 0.02²) otherwise.
    pub fn init(d: usize, text_layer: AdapterLayer, visual_layer: AdapterLayer, modes: AdapterModes, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = || {
            let w1 = Tensor::randn(&[d, d], 0.02, &mut rng);
            let w2 = Tensor::randn(&[d, d], 0.02, &mut rng);
            let w3 = match modes.combine {
                CombineMode::ResidualAdd => Tensor::zeros(&[d, d]),
                CombineMode::Replace => Tensor::randn(&[d, d], 0.02, &mut rng),
            };
            AdapterWeights { w1, w2, w3 }
        };
        let text = weights();
        let visual = weights();
        Self { text, visual, text_layer, visual_layer, modes }
    }

    pub fn d_model(&self) -> usize {
        self.text.w1.rows()
    }

    pub fn validate(&self, num_layers: usize, d: usize) -> Result<()> {
        for l in [self.text_layer, self.visual_layer].into_iter().flatten() {
            if l >= num_layers {
                return Err(Error::LayerOutOfRange { layer: l, layers: num_layers });
            }
        }
        for (name, m) in ADAPTER_NAMES.iter().zip(self.matrices()) {
            if m.shape() != [d, d] {
                return Err(Error::Invalid(format!("adapter {name} has shape {:?}, expected [{d}, {d}]", m.shape())));
            }
        }
        Ok(())
    }

    /// Shallowest active adapter layer.
    pub fn first_layer(&self) -> Option<usize> {
        [self.text_layer, self.visual_layer].into_iter().flatten().min()
    }

    pub fn matrices(&self) -> [&Tensor<T>; 6] {
        let [a, b, c] = self.text.as_array();
        let [d, e, f] = self.visual.as_array();
        [a, b, c, d, e, f]
    }

    pub fn matrices_mut(&mut self) -> [&mut Tensor<T>; 6] {
        let [a, b, c] = self.text.as_array_mut();
        let [d, e, f] = self.visual.as_array_mut();
        [a, b, c, d, e, f]
    }

    /// Pushes the six matrices onto `tape` without copying.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>, trainable: bool) -> [Var; 6] {
        self.matrices().map(|m| tape.borrowed(m, trainable))
    }

    fn meta(&self, adam_step: Option<u64>) -> serde_json::Value {
        serde_json::to_value(AdapterMeta {
            kind: "adapters".into(),
            text_layer: self.text_layer,
            visual_layer: self.visual_layer,
            modes: self.modes,
            adam_step,
        })
        .expect("adapter metadata serialises")
    }

    /// Encodes the adapters and, optionally, Adam moments.
    pub fn encode(&self, adam: Option<&crate::optim::Adam<T>>) -> Result<Vec<u8>> {
        let mut named: Vec<(String, &Tensor<T>)> =
            ADAPTER_NAMES.iter().map(|n| n.to_string()).zip(self.matrices()).collect();
        if let Some(opt) = adam {
            for (k, n) in ADAPTER_NAMES.iter().enumerate() {
                named.push((format!("adam.m.{n}"), &opt.m[k]));
                named.push((format!("adam.v.{n}"), &opt.v[k]));
            }
        }
        let refs: Vec<(&str, &Tensor<T>)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        checkpoint::encode(&refs, self.meta(adam.map(|a| a.step)))
    }

    pub fn save(&self, path: &Path, adam: Option<&crate::optim::Adam<T>>) -> Result<()> {
        crate::io::write_atomic(path, &self.encode(adam)?)
    }

    /// Decodes adapters and any stored Adam moments.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<crate::optim::Adam<T>>)> {
        let meta: AdapterMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| CheckpointError::Header(format!("adapter metadata: {e}")))?;
        if meta.kind != "adapters" {
            return Err(CheckpointError::Header(format!("expected adapters, found {:?}", meta.kind)).into());
        }
        let d = ck.get(ADAPTER_NAMES[0])?.rows();
        let m: Vec<Tensor<T>> = ADAPTER_NAMES.iter().map(|n| ck.get_as(n, &[d, d])).collect::<Result<_>>()?;
        let mut it = m.into_iter();
        let mut next = || it.next().unwrap();
        let text = AdapterWeights { w1: next(), w2: next(), w3: next() };
        let visual = AdapterWeights { w1: next(), w2: next(), w3: next() };
        let params = Self {
            text,
            visual,
            text_layer: meta.text_layer,
            visual_layer: meta.visual_layer,
            modes: meta.modes,
        };
        let adam = match meta.adam_step {
            None => None,
            Some(step) => {
                let mut opt = crate::optim::Adam::new(Default::default(), &[&[d, d][..]; 6]);
                opt.step = step;
                for (k, n) in ADAPTER_NAMES.iter().enumerate() {
                    opt.m[k] = ck.get_as(&format!("adam.m.{n}"), &[d, d])?;
                    opt.v[k] = ck.get_as(&format!("adam.v.{n}"), &[d, d])?;
                }
                Some(opt)
            }
        };
        Ok((params, adam))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<crate::optim::Adam<T>>)> {
        Self::from_checkpoint(&checkpoint::load(path)?)
    }
}

/// Cross-attention adapter on a tape: `softmax((h W1)(h_e W2)ᵀ [/√d]) ·
/// (h_e W3)`, returned as is (replace) or added to `h_span` (residual).
pub fn adapter_apply_taped<T: Scalar>(
    tape: &mut Tape<'_, T>,
    h_span: Var,
    h_edit: Var,
    w: [Var; 3],
    modes: AdapterModes,
) -> Result<Var> {
    let (m, d) = {
        let e = tape.value(h_edit);
        (e.rows(), e.cols())
    };
    if m == 0 {
        return Err(Error::Invalid("adapter needs at least one edit representation".into()));
    }
    let q = tape.matmul(h_span, w[0])?;
    let k = tape.matmul(h_edit, w[1])?;
    let v = tape.matmul(h_edit, w[2])?;
    let mut scores = tape.matmul_nt(q, k)?;
    if modes.scale == ScaleMode::Scaled {
        scores = tape.scale(scores, T::one() / T::from_usize(d).unwrap().sqrt());
    }
    let attn = tape.softmax_lastdim(scores)?;
    let out = tape.matmul(attn, v)?;
    match modes.combine {
        CombineMode::Replace => Ok(out),
        CombineMode::ResidualAdd => tape.add(h_span, out),
    }
}

/// Eager form of [`adapter_apply_taped`]. An empty span returns an empty
/// result.
pub fn adapter_apply<T: Scalar>(
    h_span: &Tensor<T>,
    h_edit: &Tensor<T>,
    w: [&Tensor<T>; 3],
    modes: AdapterModes,
) -> Result<Tensor<T>> {
    if h_edit.rows() == 0 {
        return Err(Error::Invalid("adapter needs at least one edit representation".into()));
    }
    if h_span.cols() != h_edit.cols() {
        return Err(Error::Shape { op: "adapter_apply", lhs: h_span.shape().to_vec(), rhs: h_edit.shape().to_vec() });
    }
    if h_span.rows() == 0 {
        return Ok(h_span.clone());
    }
    let mut tape = Tape::new();
    let hs = tape.borrowed(h_span, false);
    let he = tape.borrowed(h_edit, false);
    let w = w.map(|m| tape.borrowed(m, false));
    let out = adapter_apply_taped(&mut tape, hs, he, w, modes)?;
    Ok(tape.value(out).clone())
}
