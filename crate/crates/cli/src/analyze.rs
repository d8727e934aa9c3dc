use anyhow::{bail, Result};

use dualedit::analysis::{
    attention_modality_profile, gate_similarity_histogram, layer_sweep, perturbation_kl_curve, PerturbationCurve,
    SweepSpec,
};
use dualedit::pipeline::SuiteConfig;
use dualedit::vlm::{SpanTarget, TokenSequence};
use dualedit::Scalar;

use crate::args::{
    AnalyzeArgs, AnalyzeKind, AttentionArgs, Cli, GateHistArgs, ModalityArg, PerturbArgs, Precision, SampleArgs,
    SweepArgs,
};
use crate::commands::{load_model, read_cases, read_facts, say, write_json, write_text};
use crate::settings::{self, set, AttentionSettings, GateHistSettings, PerturbSettings, SweepSettings};

pub fn run(cli: &Cli, a: &AnalyzeArgs) -> Result<()> {
    match &a.kind {
        AnalyzeKind::Attention(a) => attention(cli, a),
        AnalyzeKind::Perturb(a) => perturb(cli, a),
        AnalyzeKind::GateHist(a) => gate_hist(cli, a),
        AnalyzeKind::Sweep(a) => sweep(cli, a),
    }
}

/// Image + question prompts of the first `n` image facts.
fn prompts(c: &SampleArgs, n: usize) -> Result<Vec<TokenSequence>> {
    let facts = read_facts(&c.data)?;
    let out: Vec<TokenSequence> = facts
        .into_iter()
        .filter(|f| f.image.is_some())
        .take(n)
        .map(|f| TokenSequence::new(f.image, f.question))
        .collect();
    if out.len() < n {
        bail!("asked for {n} samples but the data holds only {} image facts", out.len());
    }
    Ok(out)
}

fn attention(cli: &Cli, a: &AttentionArgs) -> Result<()> {
    let mut s: AttentionSettings = settings::load(a.common.config.as_deref())?;
    set(&mut s.precision, a.common.precision);
    set(&mut s.samples, a.common.samples);
    set(&mut s.queries, a.queries.map(Into::into));
    match s.precision {
        Precision::F32 => attention_as::<f32>(cli, a, &s),
        Precision::F64 => attention_as::<f64>(cli, a, &s),
    }
}

fn attention_as<T: Scalar>(cli: &Cli, a: &AttentionArgs, s: &AttentionSettings) -> Result<()> {
    let model = load_model::<T>(&a.common.base)?;
    let samples = prompts(&a.common, s.samples)?;
    let profile = attention_modality_profile(&model, &samples, s.queries)?;
    let out = a.common.out.clone().unwrap_or_else(|| cli.out_dir.clone());
    write_text(&out.join("attention_profile.csv"), &profile.to_csv())?;
    if profile.top3_fallback {
        eprintln!("note: some samples have fewer than 3 visual tokens; their top-3 averages all visual keys");
    }
    println!("attention profile over {} samples written to {}", profile.n_samples, out.display());
    Ok(())
}

fn perturb(cli: &Cli, a: &PerturbArgs) -> Result<()> {
    let mut s: PerturbSettings = settings::load(a.common.config.as_deref())?;
    set(&mut s.precision, a.common.precision);
    set(&mut s.samples, a.common.samples);
    if !a.modality.is_empty() {
        s.modalities = a
            .modality
            .iter()
            .map(|m| match m {
                ModalityArg::Visual => SpanTarget::Visual,
                ModalityArg::Textual => SpanTarget::Textual,
                ModalityArg::All => SpanTarget::All,
            })
            .collect();
    }
    if !a.sigma.is_empty() {
        s.sigmas = a.sigma.clone();
    }
    set(&mut s.repeats, a.repeats);
    set(&mut s.seed, a.seed);
    set(&mut s.position, a.position.map(Into::into));
    match s.precision {
        Precision::F32 => perturb_as::<f32>(cli, a, &s),
        Precision::F64 => perturb_as::<f64>(cli, a, &s),
    }
}

fn perturb_as<T: Scalar>(cli: &Cli, a: &PerturbArgs, s: &PerturbSettings) -> Result<()> {
    let model = load_model::<T>(&a.common.base)?;
    let samples = prompts(&a.common, s.samples)?;
    let mut rows = Vec::new();
    for &target in &s.modalities {
        say(cli, &format!("perturbing {target:?} spans"));
        let curve = perturbation_kl_curve(&model, &samples, target, &s.sigmas, s.repeats, s.seed, s.position)?;
        rows.extend(curve.csv_rows());
    }
    let out = a.common.out.clone().unwrap_or_else(|| cli.out_dir.clone());
    write_text(&out.join("perturb_kl.csv"), &dualedit::io::csv_string(&PerturbationCurve::CSV_HEADER, &rows))?;
    println!("{} perturbation points written to {}", rows.len(), out.display());
    Ok(())
}

fn gate_hist(cli: &Cli, a: &GateHistArgs) -> Result<()> {
    let mut s: GateHistSettings = settings::load(a.config.as_deref())?;
    set(&mut s.precision, a.precision);
    set(&mut s.gate_layer, a.gate_layer.map(Some));
    set(&mut s.seed, a.seed);
    match s.precision {
        Precision::F32 => gate_hist_as::<f32>(cli, a, &s),
        Precision::F64 => gate_hist_as::<f64>(cli, a, &s),
    }
}

fn gate_hist_as<T: Scalar>(cli: &Cli, a: &GateHistArgs, s: &GateHistSettings) -> Result<()> {
    let model = load_model::<T>(&a.base)?;
    let cases = read_cases(&a.cases)?;
    let layer = match s.gate_layer {
        Some(l) => l,
        None => SuiteConfig::default().resolved_gate_layer()?,
    };
    let hist = gate_similarity_histogram(&model, &cases, layer, s.seed)?;
    let out = a.out.clone().unwrap_or_else(|| cli.out_dir.clone());
    write_text(&out.join("gate_hist.csv"), &hist.to_csv())?;
    let summary = hist.summary_json();
    write_json(&out.join("gate_hist_summary.json"), &summary)?;
    println!("gate layer {layer}; AUC {}", summary["auc"]);
    Ok(())
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let mut s: SweepSettings = settings::load(a.config.as_deref())?;
    set(&mut s.precision, a.precision);
    if !a.tlayers.is_empty() {
        s.text_layers = a.tlayers.iter().map(|l| l.0).collect();
    }
    if !a.vlayers.is_empty() {
        s.visual_layers = a.vlayers.iter().map(|l| l.0).collect();
    }
    if !a.gating.is_empty() {
        s.gating = a.gating.iter().map(|g| g.enabled()).collect();
    }
    set(&mut s.tau, a.tau);
    set(&mut s.limit, a.limit.map(Some));
    set(&mut s.suite.train.max_iters, a.max_iters);
    set(&mut s.suite.train.checkpoint_interval, a.checkpoint_interval);
    set(&mut s.suite.train.lr, a.lr);
    set(&mut s.suite.train.seed, a.seed);
    match s.precision {
        Precision::F32 => sweep_as::<f32>(cli, a, &s),
        Precision::F64 => sweep_as::<f64>(cli, a, &s),
    }
}

fn sweep_as<T: Scalar>(cli: &Cli, a: &SweepArgs, s: &SweepSettings) -> Result<()> {
    let model = load_model::<T>(&a.base)?;
    let mut cases = read_cases(&a.cases)?;
    if let Some(n) = s.limit {
        cases.truncate(n);
    }
    let spec = SweepSpec {
        text_layers: s.text_layers.clone(),
        visual_layers: s.visual_layers.clone(),
        gating: s.gating.clone(),
        tau: s.tau,
        max_new_tokens: s.max_new_tokens,
    };
    let grid = layer_sweep(&model, &cases, &spec, &s.suite, |c| {
        let status = match &c.report {
            Ok(r) => format!("rel {:.1} avg {:.1}", r.rel, r.avg),
            Err(e) => format!("failed: {e}"),
        };
        say(cli, &format!("cell i={:?} j={:?} gating={}: {status}", c.i, c.j, c.gating));
    })?;
    let out = a.out.clone().unwrap_or_else(|| cli.out_dir.clone());
    write_text(&out.join("sweep.csv"), &grid.to_csv())?;
    for &g in &s.gating {
        let name = if g { "sweep_rel_gating_on.csv" } else { "sweep_rel_gating_off.csv" };
        write_text(&out.join(name), &grid.rel_matrix_csv(g))?;
    }
    write_json(&out.join("sweep.json"), &grid)?;
    println!("{} sweep cells written to {}", grid.cells.len(), out.display());
    let failed: Vec<_> = grid.failures().collect();
    if !failed.is_empty() {
        for c in &failed {
            eprintln!("failed cell i={:?} j={:?} gating={}: {}", c.i, c.j, c.gating, c.report.as_ref().unwrap_err());
        }
        bail!("{} sweep cell(s) failed", failed.len());
    }
    Ok(())
}
