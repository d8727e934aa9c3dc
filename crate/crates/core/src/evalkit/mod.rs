//! The five editing metrics and their average.
//!
//! Each edit is evaluated on its own: its entry is the only one in the
//! registry while its case is scored. Generality counts exact greedy
//! matches of the edit target; locality compares the edited decode with
//! the base decode (`agreement`) and additionally with the reference answer
//! (`strict`).


use serde::{Deserialize, Serialize};

use crate::datasynth::vocab::TokenId;
use crate::datasynth::EditCase;
use crate::editor::{edited_decode, EditEntry, EditRegistry, GateConfig, GateDecision};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vlm::{Passthrough, TokenSequence, Vlm};

/// Exact equality of decoded and target answers (terminator excluded).
pub fn sequence_match(pred: &[TokenId], target: &[TokenId]) -> bool {
    pred == target
}

/// Decoding and gating settings for an evaluation run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub gate: GateConfig,
    /// Generation budget beyond the longest expected answer.
    pub max_new_tokens: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self { gate: GateConfig::default(), max_new_tokens: 6 }
    }
}

/// Outcome of one decoded query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub decoded: Vec<TokenId>,
    pub gate_open: bool,
    pub max_sim: Option<f64>,
    /// Generality: matches the edit target. Locality: agrees with base.
    pub pass: bool,
    /// Locality only: agrees with base and with the reference answer.
    pub strict: Option<bool>,
}

/// Per-case results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub rel: QueryOutcome,
    /// Fraction of target positions decoded correctly (diagnostic).
    pub rel_token_accuracy: f64,
    pub t_gen: Vec<QueryOutcome>,
    pub v_gen: Vec<QueryOutcome>,
    pub t_loc: Vec<QueryOutcome>,
    pub m_loc: Vec<QueryOutcome>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityScore {
    pub strict: f64,
    pub agreement: f64,
}

/// Percentages in `[0, 100]`. `avg` averages the five headline numbers,
/// using agreement for locality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rel: f64,
    pub t_gen: f64,
    pub v_gen: f64,
    pub t_loc: LocalityScore,
    pub m_loc: LocalityScore,
    pub avg: f64,
    pub n_cases: usize,
    pub rel_token_accuracy: f64,
    /// Locality queries on which the gate opened.
    pub loc_gate_opened: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 8] =
        ["rel", "t_gen", "v_gen", "t_loc", "m_loc", "avg", "t_loc_strict", "m_loc_strict"];

    /// Headline values in table order, then the strict locality variants.
    pub fn csv_row(&self) -> Vec<String> {
        [self.rel, self.t_gen, self.v_gen, self.t_loc.agreement, self.m_loc.agreement, self.avg, self.t_loc.strict, self.m_loc.strict]
            .iter()
            .map(|v| format!("{v:.2}"))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        crate::io::csv_string(&Self::CSV_HEADER, &[self.csv_row()])
    }
}

fn outcome(decoded: Vec<TokenId>, decision: &GateDecision, pass: bool, strict: Option<bool>) -> QueryOutcome {
    QueryOutcome { decoded, gate_open: decision.is_open(), max_sim: decision.max_sim(), pass, strict }
}

/// Scores one case with `entry` as the only registered edit.
pub fn eval_case<T: Scalar>(
    model: &Vlm<T>,
    case: &EditCase,
    entry: &EditEntry<T>,
    protocol: &Protocol,
) -> Result<CaseResult> {
    let mut registry = EditRegistry::new();
    registry.register(entry.clone())?;
    let target = &case.edit.answer;
    let budget = protocol.max_new_tokens;
    let edited = |seq: &TokenSequence| edited_decode(model, seq, &registry, &protocol.gate, budget);
    let gen = |seq: TokenSequence| -> Result<QueryOutcome> {
        let (d, g) = edited(&seq)?;
        let pass = sequence_match(&d, target);
        Ok(outcome(d, &g, pass, None))
    };
    let loc = |seq: TokenSequence, reference: &[TokenId]| -> Result<QueryOutcome> {
        let (d, g) = edited(&seq)?;
        let base = model.greedy_decode(&seq, budget, &mut Passthrough)?;
        let agree = sequence_match(&d, &base);
        let strict = agree && sequence_match(&base, reference);
        Ok(outcome(d, &g, agree, Some(strict)))
    };
    let image = &case.edit.image;
    let rel = gen(TokenSequence::new(Some(image.clone()), case.edit.question.clone()))?;
    let hits = target.iter().enumerate().filter(|(k, t)| rel.decoded.get(*k) == Some(t)).count();
    Ok(CaseResult {
        case_id: case.id.clone(),
        rel_token_accuracy: hits as f64 / target.len().max(1) as f64,
        rel,
        t_gen: case
            .t_gen
            .iter()
            .map(|n| gen(TokenSequence::new(Some(image.clone()), n.question.clone())))
            .collect::<Result<_>>()?,
        v_gen: case
            .v_gen
            .iter()
            .map(|n| gen(TokenSequence::new(Some(n.image.clone()), case.edit.question.clone())))
            .collect::<Result<_>>()?,
        t_loc: case
            .t_loc
            .iter()
            .map(|l| loc(TokenSequence::text_only(l.question.clone()), &l.answer))
            .collect::<Result<_>>()?,
        m_loc: case
            .m_loc
            .iter()
            .map(|l| loc(TokenSequence::new(Some(l.image.clone()), l.question.clone()), &l.answer))
            .collect::<Result<_>>()?,
    })
}

fn percent(hits: usize, total: usize, what: &str) -> Result<f64> {
    if total == 0 {
        return Err(Error::Evaluation(format!("no {what} to evaluate")));
    }
    Ok(100.0 * hits as f64 / total as f64)
}

/// Aggregates per-case results; the order of `results` does not matter.
pub fn aggregate(results: &[CaseResult]) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::Evaluation("no edit cases".into()));
    }
    let count = |f: &dyn Fn(&CaseResult) -> &Vec<QueryOutcome>, strict: bool| -> (usize, usize) {
        let all = results.iter().flat_map(|r| f(r).iter());
        let (mut hit, mut n) = (0, 0);
        for q in all {
            n += 1;
            hit += usize::from(if strict { q.strict == Some(true) } else { q.pass });
        }
        (hit, n)
    };
    let rel = percent(results.iter().filter(|r| r.rel.pass).count(), results.len(), "edits")?;
    let (h, n) = count(&|r| &r.t_gen, false);
    let t_gen = percent(h, n, "textual neighbours")?;
    let (h, n) = count(&|r| &r.v_gen, false);
    let v_gen = percent(h, n, "visual neighbours")?;
    let loc_score = |f: &dyn Fn(&CaseResult) -> &Vec<QueryOutcome>, what: &str| -> Result<LocalityScore> {
        let (a, n) = count(f, false);
        let (s, _) = count(f, true);
        Ok(LocalityScore { strict: percent(s, n, what)?, agreement: percent(a, n, what)? })
    };
    let t_loc = loc_score(&|r| &r.t_loc, "text-only locality samples")?;
    let m_loc = loc_score(&|r| &r.m_loc, "multimodal locality samples")?;
    let avg = (rel + t_gen + v_gen + t_loc.agreement + m_loc.agreement) / 5.0;
    let loc_gate_opened = results
        .iter()
        .flat_map(|r| r.t_loc.iter().chain(&r.m_loc))
        .filter(|q| q.gate_open)
        .count();
    Ok(MetricsReport {
        rel,
        t_gen,
        v_gen,
        t_loc,
        m_loc,
        avg,
        n_cases: results.len(),
        rel_token_accuracy: results.iter().map(|r| r.rel_token_accuracy).sum::<f64>() / results.len() as f64,
        loc_gate_opened,
    })
}

/// Evaluates every case with its own trained entry (`entries[k]` belongs
/// to `cases[k]`), one edit at a time.
pub fn eval_suite<T: Scalar>(
    model: &Vlm<T>,
    cases: &[EditCase],
    entries: &[EditEntry<T>],
    protocol: &Protocol,
) -> Result<(MetricsReport, Vec<CaseResult>)> {
    if cases.len() != entries.len() {
        return Err(Error::Evaluation(format!("{} cases but {} trained edits", cases.len(), entries.len())));
    }
    let results: Vec<CaseResult> =
        cases.iter().zip(entries).map(|(c, e)| eval_case(model, c, e, protocol)).collect::<Result<_>>()?;
    Ok((aggregate(&results)?, results))
}
