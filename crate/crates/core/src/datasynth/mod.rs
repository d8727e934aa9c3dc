//! Procedural toy world: grid images, facts, edit cases and their JSONL
//! files.

mod image;
mod jsonl;
mod templates;
pub mod vocab;
mod world;

pub use image::{Cell, Color, Shape, SynthImage, RASTER};
pub use jsonl::{read_jsonl, write_jsonl};
pub use templates::{QuestionKind, Template};
pub use world::{gen_edit_cases, gen_world, World, WorldCounts};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use vocab::TokenId;

/// One base fact: optional image, tokenised question, answer tokens
/// (without the end-of-answer marker).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub id: String,
    #[serde(default)]
    pub image: Option<SynthImage>,
    pub question: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<Template>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// The sample an edit must make the model answer with `answer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSample {
    pub image: SynthImage,
    pub question: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Paraphrased question, same image and target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextNeighbor {
    pub question: Vec<TokenId>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Jittered image, same question and target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualNeighbor {
    pub image: SynthImage,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Unrelated text-only question with its original answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextLocality {
    pub question: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Unrelated image + question with its original answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalLocality {
    pub image: SynthImage,
    pub question: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// One edit with its generality neighbours and locality samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditCase {
    pub id: String,
    pub edit: EditSample,
    pub t_gen: Vec<TextNeighbor>,
    pub v_gen: Vec<VisualNeighbor>,
    pub t_loc: Vec<TextLocality>,
    pub m_loc: Vec<MultimodalLocality>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl TextNeighbor {
    pub fn new(question: Vec<TokenId>) -> Self {
        Self { question, extra: Map::new() }
    }
}

impl VisualNeighbor {
    pub fn new(image: SynthImage) -> Self {
        Self { image, extra: Map::new() }
    }
}

#[cfg(test)]
mod tests;
