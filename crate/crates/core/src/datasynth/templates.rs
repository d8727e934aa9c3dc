//! Question template families, several surface forms each.

use serde::{Deserialize, Serialize};

use super::vocab::{self, TokenId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Color,
    Shape,
    Describe,
    Likes,
    Lives,
}

impl QuestionKind {
    pub const VISUAL: [QuestionKind; 3] = [QuestionKind::Color, QuestionKind::Shape, QuestionKind::Describe];
    pub const TEXTUAL: [QuestionKind; 2] = [QuestionKind::Likes, QuestionKind::Lives];

    pub fn needs_image(self) -> bool {
        matches!(self, QuestionKind::Color | QuestionKind::Shape | QuestionKind::Describe)
    }

    pub fn forms(self) -> &'static [&'static str] {
        match self {
            QuestionKind::Color => &[
                "what color is at row {R} col {C} ?",
                "row {R} col {C} : which color ?",
                "tell me the color in row {R} column {C} ?",
                "at row {R} and col {C} , what color is there ?",
                "which color does cell {R} {C} have ?",
            ],
            QuestionKind::Shape => &[
                "what shape is at row {R} col {C} ?",
                "row {R} col {C} : which shape ?",
                "tell me the shape in row {R} column {C} ?",
                "at row {R} and col {C} , what shape is there ?",
                "which shape does cell {R} {C} have ?",
            ],
            QuestionKind::Describe => &[
                "what is at row {R} col {C} ?",
                "row {R} col {C} : describe it ?",
                "tell me what is in row {R} column {C} ?",
                "at row {R} and col {C} , what object is there ?",
                "describe the object of cell {R} {C} ?",
            ],
            QuestionKind::Likes => &[
                "what does {E} like ?",
                "{E} likes which fruit ?",
                "tell me the fruit {E} likes ?",
                "which fruit is liked by {E} ?",
            ],
            QuestionKind::Lives => &[
                "where does {E} live ?",
                "{E} lives in which city ?",
                "tell me the city of {E} ?",
                "which city is home to {E} ?",
            ],
        }
    }
}

/// Which template produced a question, and how its slots were filled.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Template {
    pub kind: QuestionKind,
    pub form: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub col: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<usize>,
}

impl Template {
    pub fn render(&self) -> Vec<TokenId> {
        let text = self.kind.forms()[self.form]
            .replace("{R}", &self.row.unwrap_or(0).to_string())
            .replace("{C}", &self.col.unwrap_or(0).to_string())
            .replace("{E}", &format!("e{}", self.entity.unwrap_or(0)));
        vocab::tokenize(&text)
    }

    /// Same question under every other surface form.
    pub fn paraphrases(&self) -> Vec<Template> {
        (0..self.kind.forms().len())
            .filter(|&f| f != self.form)
            .map(|form| Template { form, ..self.clone() })
            .collect()
    }
}
