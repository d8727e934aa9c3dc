use serde::{Deserialize, Serialize};

use crate::datasynth::vocab::{TokenId, IMG};
use crate::datasynth::SynthImage;

/// Which stream a position belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

/// An optional image followed by text tokens. Visual positions always
/// precede text positions.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub image: Option<SynthImage>,
    pub text: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(image: Option<SynthImage>, text: Vec<TokenId>) -> Self {
        Self { image, text }
    }

    pub fn text_only(text: Vec<TokenId>) -> Self {
        Self { image: None, text }
    }

    /// Copy with `tokens` appended to the text.
    pub fn extended(&self, tokens: &[TokenId]) -> Self {
        let mut text = self.text.clone();
        text.extend_from_slice(tokens);
        Self { image: self.image.clone(), text }
    }
}

/// Position ranges of the two modalities inside a concrete sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpanLayout {
    pub n_visual: usize,
    pub n_text: usize,
}

impl SpanLayout {
    pub fn len(&self) -> usize {
        self.n_visual + self.n_text
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn span(&self, m: Modality) -> std::ops::Range<usize> {
        match m {
            Modality::Visual => 0..self.n_visual,
            Modality::Textual => self.n_visual..self.len(),
        }
    }

    pub fn modality(&self, pos: usize) -> Modality {
        if pos < self.n_visual {
            Modality::Visual
        } else {
            Modality::Textual
        }
    }

    pub fn last(&self) -> Option<usize> {
        self.len().checked_sub(1)
    }

    /// Token ids with the image placeholder at visual positions.
    pub fn token_ids(&self, seq: &TokenSequence) -> Vec<TokenId> {
        std::iter::repeat_n(IMG, self.n_visual).chain(seq.text.iter().copied()).collect()
    }

    pub fn tags(&self) -> Vec<Modality> {
        (0..self.len()).map(|p| self.modality(p)).collect()
    }
}

/// A teacher-forced example: the full input sequence and, for each
/// supervised position, the next-token target.
#[derive(Clone, Debug, PartialEq)]
pub struct Supervised {
    pub seq: TokenSequence,
    /// Rows of the logits that predict the answer (and its terminator).
    pub rows: Vec<usize>,
    pub targets: Vec<TokenId>,
}
