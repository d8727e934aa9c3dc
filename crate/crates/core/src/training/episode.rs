use crate::datasynth::vocab::TokenId;
use crate::datasynth::{EditCase, SynthImage};
use crate::editor::{cache_edit_states, AdapterParams, EditStates};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use crate::vlm::{Passthrough, SpanLayout, Supervised, Vlm};

/// A teacher-forced sample with its frozen-base quantities precomputed.
#[derive(Clone, Debug)]
pub struct Item<T> {
    pub sup: Supervised,
    pub layout: SpanLayout,
    /// Stream entering the first adapter layer under the frozen base.
    pub base_hidden: Tensor<T>,
    /// Base next-token distributions at the supervised rows.
    pub base_probs: Tensor<T>,
    /// Base mean NLL of the targets.
    pub base_nll: f64,
}

/// The sample pools of one training case.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pool {
    Rel,
    TextGen,
    VisualGen,
    MultimodalLoc,
    TextLoc,
}

impl Pool {
    pub const ALL: [Pool; 5] = [Pool::Rel, Pool::TextGen, Pool::VisualGen, Pool::MultimodalLoc, Pool::TextLoc];
}

/// Everything needed to train adapters for one edit case.
#[derive(Clone, Debug)]
pub struct Episode<T> {
    pub case_id: String,
    pub answer: Vec<TokenId>,
    pub states: EditStates<T>,
    /// First adapter layer; blocks below it are never re-run.
    pub start_layer: usize,
    pub rel: Item<T>,
    pub text_gen: Vec<Item<T>>,
    pub visual_gen: Vec<Item<T>>,
    pub multimodal_loc: Vec<Item<T>>,
    pub text_loc: Vec<Item<T>>,
}

fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let l = tape.borrowed(logits, false);
    let p = tape.softmax_lastdim(l)?;
    Ok(tape.value(p).clone())
}

fn make_item<T: Scalar>(
    model: &Vlm<T>,
    start_layer: usize,
    image: Option<&SynthImage>,
    question: &[TokenId],
    answer: &[TokenId],
) -> Result<Item<T>> {
    if question.is_empty() {
        return Err(Error::Dataset("empty question".into()));
    }
    let sup = model.supervise(image.cloned(), question, answer);
    let layout = model.layout(&sup.seq);
    let base_hidden = model.hidden_at(&sup.seq, start_layer)?;
    let (logits, _) = model.forward_with(&sup.seq, &mut Passthrough, None)?;
    let rows: Vec<Vec<T>> = sup.rows.iter().map(|&r| logits.row(r).to_vec()).collect();
    let picked = Tensor::new(vec![rows.len(), logits.cols()], rows.concat())?;
    let base_probs = softmax_rows(&picked)?;
    let base_nll = sup
        .targets
        .iter()
        .enumerate()
        .map(|(k, &y)| -base_probs.get(k, y as usize).as_f64().max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / sup.targets.len() as f64;
    Ok(Item { sup, layout, base_hidden, base_probs, base_nll })
}

impl<T: Scalar> Episode<T> {
    /// Caches frozen-base states for `case` under the placement of
    /// `adapters`. `gate_layer` is where the edit key is read.
    pub fn build(model: &Vlm<T>, case: &EditCase, adapters: &AdapterParams<T>, gate_layer: usize) -> Result<Self> {
        adapters.validate(model.config.num_layers, model.config.d_model)?;
        let start_layer = adapters
            .first_layer()
            .ok_or_else(|| Error::Training("both adapters are disabled; nothing to train".into()))?;
        let edit = &case.edit;
        if edit.answer.is_empty() {
            return Err(Error::Dataset(format!("case {}: empty edit answer", case.id)));
        }
        for (name, n) in [
            ("textual neighbours", case.t_gen.len()),
            ("visual neighbours", case.v_gen.len()),
            ("text-only locality samples", case.t_loc.len()),
            ("multimodal locality samples", case.m_loc.len()),
        ] {
            if n == 0 {
                return Err(Error::Dataset(format!("case {}: no {name}", case.id)));
            }
        }
        let states = cache_edit_states(
            model,
            Some(&edit.image),
            &edit.question,
            gate_layer,
            adapters.text_layer,
            adapters.visual_layer,
        )?;
        let item = |img: Option<&SynthImage>, q: &[TokenId], a: &[TokenId]| make_item(model, start_layer, img, q, a);
        Ok(Self {
            case_id: case.id.clone(),
            answer: edit.answer.clone(),
            start_layer,
            rel: item(Some(&edit.image), &edit.question, &edit.answer)?,
            text_gen: case
                .t_gen
                .iter()
                .map(|n| item(Some(&edit.image), &n.question, &edit.answer))
                .collect::<Result<_>>()?,
            visual_gen: case
                .v_gen
                .iter()
                .map(|n| item(Some(&n.image), &edit.question, &edit.answer))
                .collect::<Result<_>>()?,
            multimodal_loc: case
                .m_loc
                .iter()
                .map(|l| item(Some(&l.image), &l.question, &l.answer))
                .collect::<Result<_>>()?,
            text_loc: case.t_loc.iter().map(|l| item(None, &l.question, &l.answer)).collect::<Result<_>>()?,
            states,
        })
    }

    pub fn pool(&self, pool: Pool) -> &[Item<T>] {
        match pool {
            Pool::Rel => std::slice::from_ref(&self.rel),
            Pool::TextGen => &self.text_gen,
            Pool::VisualGen => &self.visual_gen,
            Pool::MultimodalLoc => &self.multimodal_loc,
            Pool::TextLoc => &self.text_loc,
        }
    }
}
