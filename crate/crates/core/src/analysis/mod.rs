//! Modality analyses of the base model and of trained editors: attention
//! received per modality, output sensitivity to noise per layer, gate
//! similarity populations, and the adapter-layer sweep.

mod attention;
mod gatehist;
mod perturb;
mod sweep;

pub use attention::{attention_modality_profile, layer_profile, AttentionProfile, AttentionRow, QueryRows};
pub use gatehist::{auc, gate_similarity_histogram, GateHistogram, Representation, SimRecord, SimPopulation};
pub use perturb::{kl_from_logits, perturbation_kl_curve, KlPosition, PerturbPoint, PerturbationCurve, DEFAULT_SIGMAS};
pub use sweep::{layer_sweep, SweepCell, SweepGrid, SweepSpec};

fn layer_label(l: Option<usize>) -> String {
    l.map_or_else(|| "none".to_string(), |l| l.to_string())
}
