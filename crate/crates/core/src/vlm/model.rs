use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::VlmConfig;
use super::hooks::{Capture, HookRunner, HookSpec, Intervention, Passthrough};
use super::sequence::{SpanLayout, Supervised, TokenSequence};
use crate::checkpoint::{self, Checkpoint};
use crate::datasynth::vocab::{TokenId, EOA, IMG};
use crate::datasynth::{SynthImage, RASTER};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Weights of one pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

const BLOCK_FIELDS: [&str; 12] = ["ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"];

impl<T> Block<T> {
    fn fields(&self) -> [&Tensor<T>; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.wk, &self.wv, &self.wo, &self.ln2_g, &self.ln2_b, &self.w1,
            &self.b1, &self.w2, &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// The tiny decoder-only vision-language model.
///
/// Images are cut into non-overlapping patches that are linearly projected
/// to the model width and placed before the text. Hooks and adapters at
/// layer `k` act on the residual stream entering block `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vlm<T> {
    pub config: VlmConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub patch_proj: Tensor<T>,
    pub patch_bias: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_g: Tensor<T>,
    pub lnf_b: Tensor<T>,
    pub head: Tensor<T>,
}

/// Model weights bound as leaves on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    tok_emb: Var,
    pos_emb: Var,
    patch_proj: Var,
    patch_bias: Var,
    blocks: Vec<[Var; 12]>,
    lnf_g: Var,
    lnf_b: Var,
    head: Var,
    /// Every bound leaf, in [`Vlm::named_params`] order.
    pub all: Vec<Var>,
}

/// Outcome of a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardRecord<T> {
    /// `seq_len × vocab` next-token logits.
    pub logits: Tensor<T>,
    pub layout: SpanLayout,
    pub captures: Vec<Capture<T>>,
}

impl<T: Scalar> Vlm<T> {
    /// Seeded random initialisation.
    pub fn init(config: VlmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, h, v) = (config.d_model, config.mlp_hidden, config.vocab_size);
        let std = 0.02;
        let resid_std = std / ((2 * config.num_layers) as f64).sqrt();
        let ones = |n| Tensor::full(&[n], T::one());
        let zeros = |n| Tensor::zeros(&[n]);
        let tok_emb = Tensor::randn(&[v, d], std, &mut rng);
        let pos_emb = Tensor::randn(&[config.max_seq_len, d], std, &mut rng);
        let patch_proj = Tensor::randn(&[config.patch_dim(), d], 1.0 / (config.patch_dim() as f64).sqrt(), &mut rng);
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            blocks.push(Block {
                ln1_g: ones(d),
                ln1_b: zeros(d),
                wq: Tensor::randn(&[d, d], std, &mut rng),
                wk: Tensor::randn(&[d, d], std, &mut rng),
                wv: Tensor::randn(&[d, d], std, &mut rng),
                wo: Tensor::randn(&[d, d], resid_std, &mut rng),
                ln2_g: ones(d),
                ln2_b: zeros(d),
                w1: Tensor::randn(&[d, h], std, &mut rng),
                b1: zeros(h),
                w2: Tensor::randn(&[h, d], resid_std, &mut rng),
                b2: zeros(d),
            });
        }
        Ok(Self {
            tok_emb,
            pos_emb,
            patch_proj,
            patch_bias: zeros(d),
            blocks,
            lnf_g: ones(d),
            lnf_b: zeros(d),
            head: Tensor::randn(&[d, v], std, &mut rng),
            config,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
            ("patch_proj".to_string(), &self.patch_proj),
            ("patch_bias".to_string(), &self.patch_bias),
        ];
        for (k, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("blocks.{k}.{name}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("head".into(), &self.head));
        out
    }

    /// Mutable parameters in [`Vlm::named_params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb, &mut self.patch_proj, &mut self.patch_bias];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.head);
        out
    }

    /// SHA-256 over every parameter's name, shape and little-endian `f64`
    /// bytes, as lowercase hex.
    pub fn weight_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Pushes every weight onto `tape` without copying.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>, trainable: bool) -> Bound {
        let mut all = Vec::new();
        let mut leaf = |t: &'a Tensor<T>, tape: &mut Tape<'a, T>| {
            let v = tape.borrowed(t, trainable);
            all.push(v);
            v
        };
        let tok_emb = leaf(&self.tok_emb, tape);
        let pos_emb = leaf(&self.pos_emb, tape);
        let patch_proj = leaf(&self.patch_proj, tape);
        let patch_bias = leaf(&self.patch_bias, tape);
        let blocks = self.blocks.iter().map(|b| b.fields().map(|t| leaf(t, tape))).collect();
        let lnf_g = leaf(&self.lnf_g, tape);
        let lnf_b = leaf(&self.lnf_b, tape);
        let head = leaf(&self.head, tape);
        Bound { tok_emb, pos_emb, patch_proj, patch_bias, blocks, lnf_g, lnf_b, head, all }
    }

    pub fn layout(&self, seq: &TokenSequence) -> SpanLayout {
        SpanLayout {
            n_visual: if seq.image.is_some() { self.config.visual_tokens() } else { 0 },
            n_text: seq.text.len(),
        }
    }

    /// Flattened RGB patches, `visual_tokens × patch_dim`, in raster order.
    pub fn patches(&self, image: &SynthImage) -> Result<Tensor<T>> {
        let px = image.rasterize()?;
        let p = self.config.patch_size;
        let side = RASTER / p;
        let mut data = Vec::with_capacity(side * side * p * p * 3);
        for py in 0..side {
            for pxi in 0..side {
                for y in 0..p {
                    for x in 0..p {
                        for c in px[(py * p + y) * RASTER + pxi * p + x] {
                            data.push(T::from_f64_lossy(c));
                        }
                    }
                }
            }
        }
        Tensor::new(vec![side * side, p * p * 3], data)
    }

    /// Visual-token embeddings of `image` (before position embeddings).
    pub fn embed_image(&self, image: &SynthImage) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let v = self.embed_visual(&mut tape, &b, image)?;
        Ok(tape.value(v).clone())
    }

    fn embed_visual(&self, tape: &mut Tape<'_, T>, b: &Bound, image: &SynthImage) -> Result<Var> {
        let patches = tape.constant(self.patches(image)?);
        let proj = tape.matmul(patches, b.patch_proj)?;
        let proj = tape.add_row(proj, b.patch_bias)?;
        let marker = tape.gather_rows(b.tok_emb, &vec![IMG as usize; self.config.visual_tokens()])?;
        tape.add(proj, marker)
    }

    /// Input embeddings (token/patch plus position), i.e. the stream
    /// entering block 0.
    pub fn embed(&self, tape: &mut Tape<'_, T>, b: &Bound, seq: &TokenSequence) -> Result<(Var, SpanLayout)> {
        let layout = self.layout(seq);
        if layout.is_empty() {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        if layout.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: layout.len(), max: self.config.max_seq_len });
        }
        if let Some(&bad) = seq.text.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: self.config.vocab_size });
        }
        let mut parts = Vec::with_capacity(2);
        if let Some(img) = &seq.image {
            parts.push(self.embed_visual(tape, b, img)?);
        }
        if !seq.text.is_empty() {
            let ids: Vec<usize> = seq.text.iter().map(|&t| t as usize).collect();
            parts.push(tape.gather_rows(b.tok_emb, &ids)?);
        }
        let x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let pos: Vec<usize> = (0..layout.len()).collect();
        let pos = tape.gather_rows(b.pos_emb, &pos)?;
        Ok((tape.add(x, pos)?, layout))
    }

    fn block(&self, tape: &mut Tape<'_, T>, w: &[Var; 12], h: Var, attn: Option<&mut Vec<Tensor<T>>>) -> Result<Var> {
        let [ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2] = *w;
        let x = tape.layer_norm(h, ln1_g, ln1_b)?;
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let dh = self.config.head_dim();
        let inv = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut probs = Vec::new();
        for hd in 0..self.config.heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, inv);
            let p = tape.causal_softmax(s, 0)?;
            if attn.is_some() {
                probs.push(p);
            }
            heads.push(tape.matmul(p, vh)?);
        }
        if let Some(out) = attn {
            let n = tape.value(probs[0]).rows();
            let mut data = Vec::with_capacity(probs.len() * n * n);
            for p in &probs {
                data.extend_from_slice(tape.value(*p).data());
            }
            out.push(Tensor::new(vec![probs.len(), n, n], data)?);
        }
        let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let o = tape.matmul(o, wo)?;
        let h = tape.add(h, o)?;
        let x = tape.layer_norm(h, ln2_g, ln2_b)?;
        let m = tape.matmul(x, w1)?;
        let m = tape.add_row(m, b1)?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, w2)?;
        let m = tape.add_row(m, b2)?;
        tape.add(h, m)
    }

    /// Runs blocks `layers` starting from `hidden` (the stream entering
    /// `layers.start`), offering the stream to `iv` before each block.
    /// Returns the stream leaving the last block of the range. When
    /// `attn` is given, each block's `heads × n × n` attention weights are
    /// appended to it.
    #[allow(clippy::too_many_arguments)]
    pub fn run_blocks(
        &self,
        tape: &mut Tape<'_, T>,
        b: &Bound,
        mut hidden: Var,
        layout: &SpanLayout,
        layers: Range<usize>,
        iv: &mut dyn Intervention<T>,
        mut attn: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Var> {
        if layers.end > self.config.num_layers {
            return Err(Error::LayerOutOfRange { layer: layers.end, layers: self.config.num_layers });
        }
        for k in layers {
            hidden = iv.at_layer(tape, k, hidden, layout)?;
            hidden = self.block(tape, &b.blocks[k], hidden, attn.as_deref_mut())?;
        }
        Ok(hidden)
    }

    /// Final norm and unembedding, optionally restricted to `rows`.
    pub fn logits(&self, tape: &mut Tape<'_, T>, b: &Bound, hidden: Var, rows: Option<&[usize]>) -> Result<Var> {
        let h = match rows {
            Some(r) => tape.gather_rows(hidden, r)?,
            None => hidden,
        };
        let h = tape.layer_norm(h, b.lnf_g, b.lnf_b)?;
        tape.matmul(h, b.head)
    }

    /// Full inference pass with hooks.
    pub fn forward(&self, seq: &TokenSequence, hooks: &[HookSpec<T>]) -> Result<ForwardRecord<T>> {
        let mut runner = HookRunner::new(hooks, self.config.num_layers)?;
        let (logits, layout) = self.forward_with(seq, &mut runner, None)?;
        Ok(ForwardRecord { logits, layout, captures: runner.captures })
    }

    /// Full inference pass with an arbitrary intervention.
    pub fn forward_with(
        &self,
        seq: &TokenSequence,
        iv: &mut dyn Intervention<T>,
        attn: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<(Tensor<T>, SpanLayout)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let (h, layout) = self.embed(&mut tape, &b, seq)?;
        let h = self.run_blocks(&mut tape, &b, h, &layout, 0..self.config.num_layers, iv, attn)?;
        let logits = self.logits(&mut tape, &b, h, None)?;
        Ok((tape.value(logits).clone(), layout))
    }

    /// The stream entering block `layer` (`layer == num_layers` gives the
    /// output of the last block). Blocks above `layer` are not run.
    pub fn hidden_at(&self, seq: &TokenSequence, layer: usize) -> Result<Tensor<T>> {
        if layer > self.config.num_layers {
            return Err(Error::LayerOutOfRange { layer, layers: self.config.num_layers });
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let (h, layout) = self.embed(&mut tape, &b, seq)?;
        let h = self.run_blocks(&mut tape, &b, h, &layout, 0..layer, &mut Passthrough, None)?;
        Ok(tape.value(h).clone())
    }

    /// Greedy decoding from `prompt` until the end-of-answer token or
    /// `max_new` tokens. Returns the generated tokens without the
    /// terminator. Ties go to the smallest token id.
    pub fn greedy_decode(
        &self,
        prompt: &TokenSequence,
        max_new: usize,
        iv: &mut dyn Intervention<T>,
    ) -> Result<Vec<TokenId>> {
        let max_text = self.config.max_seq_len.saturating_sub(self.layout(prompt).n_visual);
        greedy_decode_by(prompt, max_new, max_text, |seq| {
            let mut tape = Tape::new();
            let b = self.bind(&mut tape, false);
            let (h, layout) = self.embed(&mut tape, &b, seq)?;
            let h = self.run_blocks(&mut tape, &b, h, &layout, 0..self.config.num_layers, iv, None)?;
            let last = layout.len() - 1;
            let logits = self.logits(&mut tape, &b, h, Some(&[last]))?;
            Ok(tape.value(logits).row(0).to_vec())
        })
    }

    /// Teacher-forcing layout for `question → answer`: the input is the
    /// question followed by the answer, and the rows from the last question
    /// token onward predict the answer followed by the terminator.
    pub fn supervise(&self, image: Option<SynthImage>, question: &[TokenId], answer: &[TokenId]) -> Supervised {
        let nv = if image.is_some() { self.config.visual_tokens() } else { 0 };
        let start = nv + question.len() - 1;
        let mut text = question.to_vec();
        text.extend_from_slice(answer);
        let mut targets = answer.to_vec();
        targets.push(EOA);
        Supervised { seq: TokenSequence::new(image, text), rows: (start..start + targets.len()).collect(), targets }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.named_params();
        let refs: Vec<(&str, &Tensor<T>)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        checkpoint::save(path, &refs, serde_json::json!({ "kind": "vlm", "config": self.config }))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: VlmConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| crate::error::CheckpointError::Header(format!("model config: {e}")))?;
        let mut model = Self::init(config)?;
        let names: Vec<(String, Vec<usize>)> =
            model.named_params().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        for ((name, shape), p) in names.iter().zip(model.params_mut()) {
            *p = ck.get_as(name, shape)?;
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::load(path)?)
    }
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding driven by a `next_logits` callback; stops before the
/// text would exceed `max_text_len` tokens.
pub fn greedy_decode_by<T: Scalar>(
    prompt: &TokenSequence,
    max_new: usize,
    max_text_len: usize,
    mut next_logits: impl FnMut(&TokenSequence) -> Result<Vec<T>>,
) -> Result<Vec<TokenId>> {
    let mut seq = prompt.clone();
    let start = seq.text.len();
    for _ in 0..max_new {
        let logits = next_logits(&seq)?;
        let tok = argmax(&logits) as TokenId;
        if tok == EOA {
            break;
        }
        seq.text.push(tok);
        if seq.text.len() >= max_text_len {
            break;
        }
    }
    Ok(seq.text[start..].to_vec())
}
