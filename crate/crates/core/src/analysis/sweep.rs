use serde::{Deserialize, Serialize};

use super::layer_label;
use crate::datasynth::EditCase;
use crate::editor::{AdapterLayer, EditEntry};
use crate::error::{Error, Result};
use crate::evalkit::{eval_suite, MetricsReport, Protocol};
use crate::pipeline::{train_suite, SuiteConfig};
use crate::scalar::Scalar;
use crate::vlm::Vlm;

/// Grid to sweep: every `(text layer, visual layer)` pair, each scored
/// under every gating flag. `None` leaves that modality unedited.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub text_layers: Vec<AdapterLayer>,
    pub visual_layers: Vec<AdapterLayer>,
    pub gating: Vec<bool>,
    pub tau: f64,
    pub max_new_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub i: AdapterLayer,
    pub j: AdapterLayer,
    pub gating: bool,
    /// `Err` carries the training or evaluation failure of this cell.
    pub report: std::result::Result<MetricsReport, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub const CSV_HEADER: [&'static str; 11] = [
        "i",
        "j",
        "gating",
        "rel",
        "t_gen",
        "v_gen",
        "t_loc_agree",
        "t_loc_strict",
        "m_loc_agree",
        "m_loc_strict",
        "avg",
    ];

    /// One row per cell; failed cells carry empty metric fields.
    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .cells
            .iter()
            .map(|c| {
                let mut row = vec![layer_label(c.i), layer_label(c.j), if c.gating { "on" } else { "off" }.to_string()];
                match &c.report {
                    Ok(r) => row.extend(
                        [r.rel, r.t_gen, r.v_gen, r.t_loc.agreement, r.t_loc.strict, r.m_loc.agreement, r.m_loc.strict, r.avg]
                            .iter()
                            .map(|v| format!("{v:.2}")),
                    ),
                    Err(_) => row.extend(std::iter::repeat_n(String::new(), 8)),
                }
                row
            })
            .collect();
        crate::io::csv_string(&Self::CSV_HEADER, &rows)
    }

    /// Reliability per `(i, j)` for the given gating flag: rows are text
    /// layers, columns visual layers; failed cells are empty.
    pub fn rel_matrix_csv(&self, gating: bool) -> String {
        let mut is: Vec<AdapterLayer> = Vec::new();
        let mut js: Vec<AdapterLayer> = Vec::new();
        for c in self.cells.iter().filter(|c| c.gating == gating) {
            if !is.contains(&c.i) {
                is.push(c.i);
            }
            if !js.contains(&c.j) {
                js.push(c.j);
            }
        }
        let mut header = vec!["i".to_string()];
        header.extend(js.iter().map(|j| format!("j={}", layer_label(*j))));
        let rows: Vec<Vec<String>> = is
            .iter()
            .map(|&i| {
                let mut row = vec![layer_label(i)];
                for &j in &js {
                    let cell = self.cells.iter().find(|c| c.gating == gating && c.i == i && c.j == j);
                    row.push(match cell.map(|c| &c.report) {
                        Some(Ok(r)) => format!("{:.2}", r.rel),
                        _ => String::new(),
                    });
                }
                row
            })
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        crate::io::csv_string(&header, &rows)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SweepCell> {
        self.cells.iter().filter(|c| c.report.is_err())
    }
}

/// Trains fresh adapters for every `(i, j)` and evaluates them under each
/// gating flag. A failing cell is recorded and the sweep moves on; the
/// pair with no adapter at all is skipped.
pub fn layer_sweep<T: Scalar>(
    model: &Vlm<T>,
    cases: &[EditCase],
    spec: &SweepSpec,
    base: &SuiteConfig,
    mut progress: impl FnMut(&SweepCell),
) -> Result<SweepGrid> {
    if spec.gating.is_empty() || spec.text_layers.is_empty() || spec.visual_layers.is_empty() {
        return Err(Error::Invalid("sweep needs at least one text layer, visual layer and gating flag".into()));
    }
    let mut cells = Vec::new();
    for &i in &spec.text_layers {
        for &j in &spec.visual_layers {
            if i.is_none() && j.is_none() {
                continue;
            }
            if cells.iter().any(|c: &SweepCell| c.i == i && c.j == j) {
                continue;
            }
            let cfg = SuiteConfig { text_layer: i, visual_layer: j, gate_layer: None, ..base.clone() };
            let trained: std::result::Result<Vec<EditEntry<T>>, String> = train_suite(model, cases, &cfg, None, |_, _| {})
                .map(|t| t.into_iter().map(|e| e.entry).collect())
                .map_err(|e| e.to_string());
            for &gating in &spec.gating {
                let report = trained.clone().and_then(|entries| {
                    let gate = cfg.gate(spec.tau, gating).map_err(|e| e.to_string())?;
                    let protocol = Protocol { gate, max_new_tokens: spec.max_new_tokens };
                    eval_suite(model, cases, &entries, &protocol).map(|(r, _)| r).map_err(|e| e.to_string())
                });
                let cell = SweepCell { i, j, gating, report };
                progress(&cell);
                cells.push(cell);
            }
        }
    }
    Ok(SweepGrid { cells })
}
