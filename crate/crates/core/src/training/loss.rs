use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::episode::{Episode, Item, Pool};
use crate::editor::{AdapterHook, AdapterParams};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};
use crate::vlm::{Bound, Vlm};

/// Which model scores the textual-neighbour term of the generality loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenTextModel {
    /// The edited model, like every other term.
    #[default]
    Edited,
    /// The frozen base, taking the objective as literally written; the
    /// term then carries no gradient.
    Base,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rel: f64,
    pub gen: f64,
    pub loc: f64,
    pub total: f64,
}

/// One sampled batch element: an episode and one index per neighbour pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Draw {
    pub episode: usize,
    pub text_gen: usize,
    pub visual_gen: usize,
    pub multimodal_loc: usize,
    pub text_loc: usize,
}

/// Weighted per-item terms; identical items are merged so each is run
/// once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Terms(BTreeMap<(usize, Pool, usize), f64>);

impl Terms {
    fn add(&mut self, episode: usize, pool: Pool, index: usize, weight: f64) {
        *self.0.entry((episode, pool, index)).or_insert(0.0) += weight;
    }

    /// The batch objective: each component averaged over the draws.
    pub fn from_draws(draws: &[Draw]) -> Self {
        let mut t = Self::default();
        let w = 1.0 / draws.len().max(1) as f64;
        for d in draws {
            t.add(d.episode, Pool::Rel, 0, w);
            t.add(d.episode, Pool::TextGen, d.text_gen, w);
            t.add(d.episode, Pool::VisualGen, d.visual_gen, w);
            t.add(d.episode, Pool::MultimodalLoc, d.multimodal_loc, w);
            t.add(d.episode, Pool::TextLoc, d.text_loc, w);
        }
        t
    }

    /// The expected batch objective over uniformly drawn neighbours of one
    /// episode.
    pub fn full_pools<T: Scalar>(episode: usize, ep: &Episode<T>) -> Self {
        let mut t = Self::default();
        for pool in Pool::ALL {
            let n = ep.pool(pool).len();
            for k in 0..n {
                t.add(episode, pool, k, 1.0 / n as f64);
            }
        }
        t
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Loss components as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rel: Var,
    pub gen: Var,
    pub loc: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<'_, T>) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item().as_f64();
        LossBreakdown { rel: v(self.rel), gen: v(self.gen), loc: v(self.loc), total: v(self.total) }
    }
}

/// Mean NLL (`kl == false`) or mean per-position `KL(base ‖ edited)` of
/// one item under the adapters.
fn item_term<T: Scalar>(
    tape: &mut Tape<'_, T>,
    model: &Vlm<T>,
    b: &Bound,
    hook: &mut AdapterHook,
    start: usize,
    item: &Item<T>,
    kl: bool,
) -> Result<Var> {
    let h = tape.constant(item.base_hidden.clone());
    let h = model.run_blocks(tape, b, h, &item.layout, start..model.config.num_layers, hook, None)?;
    let logits = model.logits(tape, b, h, Some(&item.sup.rows))?;
    if kl {
        let q = tape.softmax_lastdim(logits)?;
        let p = tape.constant(item.base_probs.clone());
        tape.kl_divergence(p, q)
    } else {
        let targets: Vec<usize> = item.sup.targets.iter().map(|&t| t as usize).collect();
        tape.cross_entropy(logits, &targets, &vec![true; targets.len()])
    }
}

/// Builds `ℓ_rel + ℓ_gen + ℓ_loc` for `terms` on `tape`, with the adapter
/// matrices bound as `weights`.
#[allow(clippy::too_many_arguments)]
pub fn build_loss<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    model: &'a Vlm<T>,
    b: &Bound,
    weights: [Var; 6],
    params: &AdapterParams<T>,
    episodes: &'a [Episode<T>],
    terms: &Terms,
    gen_text: GenTextModel,
) -> Result<LossVars> {
    let mut hooks: BTreeMap<usize, AdapterHook> = BTreeMap::new();
    let mut parts: [Vec<Var>; 3] = Default::default();
    for (&(e, pool, k), &w) in &terms.0 {
        let ep = episodes
            .get(e)
            .ok_or_else(|| crate::Error::Training(format!("batch refers to missing episode {e}")))?;
        let item = ep.pool(pool).get(k).ok_or_else(|| {
            crate::Error::Training(format!("batch refers to missing {pool:?} item {k} of {}", ep.case_id))
        })?;
        let slot = match pool {
            Pool::Rel => 0,
            Pool::TextGen | Pool::VisualGen => 1,
            Pool::MultimodalLoc | Pool::TextLoc => 2,
        };
        let term = if pool == Pool::TextGen && gen_text == GenTextModel::Base {
            tape.constant(crate::tensor::Tensor::scalar(T::from_f64_lossy(item.base_nll)))
        } else {
            let hook = match hooks.entry(e) {
                std::collections::btree_map::Entry::Occupied(o) => o.into_mut(),
                std::collections::btree_map::Entry::Vacant(v) => {
                    v.insert(AdapterHook::bind(tape, weights, params, &ep.states)?)
                }
            };
            item_term(tape, model, b, hook, ep.start_layer, item, slot == 2)?
        };
        parts[slot].push(tape.scale(term, T::from_f64_lossy(w)));
    }
    let mut sum = |xs: &[Var]| -> Result<Var> {
        if xs.is_empty() {
            Ok(tape.constant(crate::tensor::Tensor::scalar(T::zero())))
        } else {
            tape.add_all(xs)
        }
    };
    let rel = sum(&parts[0])?;
    let gen = sum(&parts[1])?;
    let loc = sum(&parts[2])?;
    let total = tape.add_all(&[rel, gen, loc])?;
    Ok(LossVars { rel, gen, loc, total })
}

/// Evaluates the objective (no gradients) for `terms`.
pub fn evaluate_loss<T: Scalar>(
    model: &Vlm<T>,
    params: &AdapterParams<T>,
    episodes: &[Episode<T>],
    terms: &Terms,
    gen_text: GenTextModel,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let w = params.bind(&mut tape, false);
    let vars = build_loss(&mut tape, model, &b, w, params, episodes, terms, gen_text)?;
    Ok(vars.breakdown(&tape))
}
