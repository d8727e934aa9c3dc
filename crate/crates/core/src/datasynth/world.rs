use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::templates::{QuestionKind, Template};
use super::vocab::{self, TokenId, NUM_ENTITIES};
use super::{
    Cell, Color, EditCase, EditSample, Fact, MultimodalLocality, Shape, SynthImage, TextLocality, TextNeighbor,
    VisualNeighbor,
};
use crate::error::{Error, Result};

const GRID: usize = 4;
const FRUITS: [&str; 8] = ["apple", "banana", "cherry", "grape", "lemon", "mango", "peach", "plum"];
const CITIES: [&str; 8] = ["paris", "rome", "oslo", "lima", "cairo", "tokyo", "delhi", "quito"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldCounts {
    /// Image-grounded facts.
    pub facts: usize,
    /// Text-only facts about entities.
    pub text_facts: usize,
    /// Facts re-used as the probe set.
    pub probe: usize,
}

impl Default for WorldCounts {
    fn default() -> Self {
        Self { facts: 200, text_facts: 60, probe: 64 }
    }
}

/// Base facts plus the probe subset used to judge pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub facts: Vec<Fact>,
    pub probe: Vec<Fact>,
}

impl World {
    pub fn image_facts(&self) -> impl Iterator<Item = &Fact> {
        self.facts.iter().filter(|f| f.image.is_some())
    }

    pub fn text_facts(&self) -> impl Iterator<Item = &Fact> {
        self.facts.iter().filter(|f| f.image.is_none())
    }

    /// Every fact under every surface form of its question, so the base
    /// model answers paraphrases consistently. Ids get a `~form` suffix.
    pub fn with_paraphrases(&self) -> Vec<Fact> {
        let mut out = Vec::with_capacity(self.facts.len() * 5);
        for f in &self.facts {
            out.push(f.clone());
            let Some(tpl) = &f.template else { continue };
            for p in tpl.paraphrases() {
                out.push(Fact {
                    id: format!("{}~{}", f.id, p.form),
                    question: p.render(),
                    template: Some(p),
                    ..f.clone()
                });
            }
        }
        out
    }
}

/// Entity attribute table, a pure function of the seed.
fn entity_table(seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e471);
    (0..NUM_ENTITIES)
        .map(|_| (rng.random_range(0..FRUITS.len()), rng.random_range(0..CITIES.len())))
        .collect()
}

fn random_cell(rng: &mut ChaCha8Rng, row: usize, col: usize) -> Cell {
    Cell {
        row,
        col,
        color: *Color::ALL.choose(rng).unwrap(),
        shape: *Shape::ALL.choose(rng).unwrap(),
    }
}

fn random_image(rng: &mut ChaCha8Rng) -> SynthImage {
    let n = rng.random_range(5..=9);
    let mut slots: Vec<usize> = (0..GRID * GRID).collect();
    slots.shuffle(rng);
    let mut slots = slots[..n].to_vec();
    slots.sort_unstable();
    let cells = slots.into_iter().map(|k| random_cell(rng, k / GRID, k % GRID)).collect();
    SynthImage { grid: GRID, cells }
}

/// Ground-truth answer under the generator's rules.
pub(crate) fn answer_for(tpl: &Template, image: Option<&SynthImage>, entities: &[(usize, usize)]) -> Option<Vec<TokenId>> {
    match tpl.kind {
        QuestionKind::Color | QuestionKind::Shape | QuestionKind::Describe => {
            let cell = image?.cell(tpl.row?, tpl.col?)?;
            Some(match tpl.kind {
                QuestionKind::Color => vec![vocab::id(cell.color.word())],
                QuestionKind::Shape => vec![vocab::id(cell.shape.word())],
                _ => vec![vocab::id(cell.color.word()), vocab::id(cell.shape.word())],
            })
        }
        QuestionKind::Likes => Some(vec![vocab::id(FRUITS[entities[tpl.entity?].0])]),
        QuestionKind::Lives => Some(vec![vocab::id(CITIES[entities[tpl.entity?].1])]),
    }
}

fn fact(id: String, image: Option<SynthImage>, tpl: Template, entities: &[(usize, usize)]) -> Fact {
    let answer = answer_for(&tpl, image.as_ref(), entities).expect("template refers to an occupied cell");
    Fact {
        id,
        question: tpl.render(),
        image,
        answer,
        template: Some(tpl),
        extra: Map::new(),
    }
}

/// Generates the base facts and the probe subset, deterministically from
/// `seed`.
pub fn gen_world(seed: u64, counts: WorldCounts) -> Result<World> {
    if counts.facts == 0 {
        return Err(Error::Dataset("a world needs at least one image fact".into()));
    }
    if counts.text_facts > NUM_ENTITIES * QuestionKind::TEXTUAL.len() {
        return Err(Error::Dataset(format!("at most {} text facts are available", NUM_ENTITIES * 2)));
    }
    let entities = entity_table(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut facts = Vec::with_capacity(counts.facts + counts.text_facts);
    for k in 0..counts.facts {
        let image = random_image(&mut rng);
        let cell = *image.cells.choose(&mut rng).unwrap();
        let kind = *QuestionKind::VISUAL.choose(&mut rng).unwrap();
        let tpl = Template {
            kind,
            form: rng.random_range(0..kind.forms().len()),
            row: Some(cell.row),
            col: Some(cell.col),
            entity: None,
        };
        facts.push(fact(format!("fact-{k:04}"), Some(image), tpl, &entities));
    }
    let mut pairs: Vec<(usize, QuestionKind)> = (0..NUM_ENTITIES)
        .flat_map(|e| QuestionKind::TEXTUAL.into_iter().map(move |k| (e, k)))
        .collect();
    pairs.shuffle(&mut rng);
    for (k, &(entity, kind)) in pairs[..counts.text_facts].iter().enumerate() {
        let tpl = Template {
            kind,
            form: rng.random_range(0..kind.forms().len()),
            row: None,
            col: None,
            entity: Some(entity),
        };
        facts.push(fact(format!("text-{k:04}"), None, tpl, &entities));
    }
    let n_probe = counts.probe.min(facts.len());
    let mut idx = rand::seq::index::sample(&mut rng, facts.len(), n_probe).into_vec();
    idx.sort_unstable();
    let probe = idx.into_iter().map(|i| facts[i].clone()).collect();
    Ok(World { facts, probe })
}

/// Changes cells other than `(row, col)`; the queried cell is untouched.
fn jitter(image: &SynthImage, row: usize, col: usize, rng: &mut ChaCha8Rng) -> SynthImage {
    loop {
        let mut img = image.clone();
        for _ in 0..2 {
            let others: Vec<usize> = (0..img.cells.len())
                .filter(|&i| (img.cells[i].row, img.cells[i].col) != (row, col))
                .collect();
            let empty: Vec<usize> = (0..GRID * GRID)
                .filter(|&k| img.cell(k / GRID, k % GRID).is_none())
                .collect();
            match rng.random_range(0..4) {
                0 if !others.is_empty() => {
                    let i = *others.choose(rng).unwrap();
                    img.cells[i].color = *Color::ALL.choose(rng).unwrap();
                }
                1 if !others.is_empty() => {
                    let i = *others.choose(rng).unwrap();
                    img.cells[i].shape = *Shape::ALL.choose(rng).unwrap();
                }
                2 if others.len() > 1 => {
                    let i = *others.choose(rng).unwrap();
                    img.cells.remove(i);
                }
                _ if !empty.is_empty() => {
                    let k = *empty.choose(rng).unwrap();
                    img.cells.push(random_cell(rng, k / GRID, k % GRID));
                    img.cells.sort_by_key(|c| (c.row, c.col));
                }
                _ => {}
            }
        }
        if img != *image {
            return img;
        }
    }
}

fn flipped_answer(tpl: &Template, cell: &Cell, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    let other_color = |rng: &mut ChaCha8Rng| loop {
        let c = *Color::ALL.choose(rng).unwrap();
        if c != cell.color {
            break c;
        }
    };
    let other_shape = |rng: &mut ChaCha8Rng| loop {
        let s = *Shape::ALL.choose(rng).unwrap();
        if s != cell.shape {
            break s;
        }
    };
    match tpl.kind {
        QuestionKind::Color => vec![vocab::id(other_color(rng).word())],
        QuestionKind::Shape => vec![vocab::id(other_shape(rng).word())],
        _ => {
            let (c, s) = match rng.random_range(0..3) {
                0 => (other_color(rng), cell.shape),
                1 => (cell.color, other_shape(rng)),
                _ => (other_color(rng), other_shape(rng)),
            };
            vec![vocab::id(c.word()), vocab::id(s.word())]
        }
    }
}

/// Draws `n_edits` edit cases from the world's image facts. Each flips the
/// fact's answer and attaches every paraphrase, three visual jitters, and
/// three unrelated text-only and multimodal samples.
pub fn gen_edit_cases(world: &World, seed: u64, n_edits: usize) -> Result<Vec<EditCase>> {
    const POOL: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image_facts: Vec<&Fact> = world.image_facts().filter(|f| f.template.is_some()).collect();
    let text_facts: Vec<&Fact> = world.text_facts().collect();
    if image_facts.len() < n_edits {
        return Err(Error::Dataset(format!(
            "{n_edits} edits requested but the world has {} image facts",
            image_facts.len()
        )));
    }
    if text_facts.len() < POOL {
        return Err(Error::Dataset("world has too few text-only facts for locality samples".into()));
    }
    let chosen = rand::seq::index::sample(&mut rng, image_facts.len(), n_edits).into_vec();
    let mut cases = Vec::with_capacity(n_edits);
    for (k, fi) in chosen.into_iter().enumerate() {
        let f = image_facts[fi];
        let tpl = f.template.clone().unwrap();
        let image = f.image.clone().unwrap();
        let (row, col) = (tpl.row.unwrap(), tpl.col.unwrap());
        let cell = *image.cell(row, col).unwrap();
        let answer = flipped_answer(&tpl, &cell, &mut rng);

        let t_gen = tpl.paraphrases().iter().map(|p| TextNeighbor::new(p.render())).collect();
        let mut v_gen: Vec<VisualNeighbor> = Vec::with_capacity(POOL);
        while v_gen.len() < POOL {
            let j = jitter(&image, row, col, &mut rng);
            if j != image && v_gen.iter().all(|v| v.image != j) {
                v_gen.push(VisualNeighbor::new(j));
            }
        }
        let t_loc = text_facts
            .choose_multiple(&mut rng, POOL)
            .map(|t| TextLocality {
                question: t.question.clone(),
                answer: t.answer.clone(),
                extra: Map::new(),
            })
            .collect();
        let unrelated: Vec<&&Fact> = image_facts
            .iter()
            .filter(|g| g.id != f.id && g.template.as_ref().is_some_and(|t| t.kind != tpl.kind))
            .collect();
        if unrelated.len() < POOL {
            return Err(Error::Dataset("world has too few unrelated multimodal facts".into()));
        }
        let m_loc = unrelated
            .choose_multiple(&mut rng, POOL)
            .map(|g| MultimodalLocality {
                image: g.image.clone().unwrap(),
                question: g.question.clone(),
                answer: g.answer.clone(),
                extra: Map::new(),
            })
            .collect();

        let mut extra = Map::new();
        extra.insert("source_fact".into(), Value::String(f.id.clone()));
        extra.insert("original_answer".into(), serde_json::to_value(&f.answer)?);
        extra.insert("template".into(), serde_json::to_value(&tpl)?);
        cases.push(EditCase {
            id: format!("edit-{k:04}"),
            edit: EditSample {
                image,
                question: f.question.clone(),
                answer,
                extra: Map::new(),
            },
            t_gen,
            v_gen,
            t_loc,
            m_loc,
            extra,
        });
    }
    Ok(cases)
}
