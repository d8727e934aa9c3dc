//! The reliability + generality + locality objective and adapter training.
//!
//! Training runs with the gate bypassed: every sample goes through the
//! adapters, otherwise locality samples would skip them and the locality
//! term would carry no signal. Each batch element pairs the edit sample
//! with one textual neighbour, one visual neighbour, one multimodal and
//! one text-only locality sample.

mod episode;
mod loss;
mod train;
#[cfg(test)]
mod tests;

pub use episode::{Episode, Item, Pool};
pub use loss::{build_loss, evaluate_loss, Draw, GenTextModel, LossBreakdown, LossVars, Terms};
pub use train::{history_csv, train_edit, LossRecord, TrainConfig, TrainOutcome, TrainOutput};
