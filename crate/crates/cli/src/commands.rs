use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use dualedit::datasynth::{gen_edit_cases, gen_world, read_jsonl, write_jsonl, EditCase, Fact, WorldCounts};
use dualedit::editor::{EditEntry, EditRegistry, GateConfig};
use dualedit::evalkit::{eval_suite, Protocol};
use dualedit::io::write_atomic;
use dualedit::pipeline::{save_suite, train_suite, TrainedEdit};
use dualedit::vlm::{pretrain as run_pretrain, Vlm};
use dualedit::Scalar;

use crate::args::{Cli, EditTrainArgs, EvalArgs, Precision, PretrainArgs, SynthArgs};
use crate::settings::{self, set, EditTrainSettings, EvalSettings, PretrainSettings, SynthSettings};

pub const FACTS_FILE: &str = "world.jsonl";
pub const PROBE_FILE: &str = "probe.jsonl";
pub const CASES_FILE: &str = "edits.jsonl";

/// Logs to standard error when `--verbose` is on.
pub fn say(cli: &Cli, msg: &str) {
    if cli.verbose {
        eprintln!("{msg}");
    }
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

/// A file given directly, or `default_name` inside a directory.
pub fn resolve_file(path: &Path, default_name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    }
}

pub fn read_facts(data: &Path) -> Result<Vec<Fact>> {
    let path = resolve_file(data, FACTS_FILE);
    read_jsonl(&path).with_context(|| format!("reading facts from {}", path.display()))
}

pub fn read_cases(cases: &Path) -> Result<Vec<EditCase>> {
    let path = resolve_file(cases, CASES_FILE);
    let cases: Vec<EditCase> = read_jsonl(&path).with_context(|| format!("reading edit cases from {}", path.display()))?;
    if cases.is_empty() {
        bail!("{} holds no edit cases", path.display());
    }
    Ok(cases)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Vlm<T>> {
    Vlm::load(path).with_context(|| format!("loading base model {}", path.display()))
}

pub fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut s: SynthSettings = settings::load(a.config.as_deref())?;
    set(&mut s.seed, a.seed);
    set(&mut s.facts, a.facts);
    set(&mut s.text_facts, a.text_facts);
    set(&mut s.probe, a.probe);
    set(&mut s.edits, a.edits);
    set(&mut s.edit_seed, a.edit_seed);
    let out = a.out.clone().unwrap_or_else(|| cli.out_dir.clone());

    let world = gen_world(s.seed, WorldCounts { facts: s.facts, text_facts: s.text_facts, probe: s.probe })?;
    let cases = gen_edit_cases(&world, s.edit_seed, s.edits)?;
    write_jsonl(&out.join(FACTS_FILE), &world.facts)?;
    write_jsonl(&out.join(PROBE_FILE), &world.probe)?;
    write_jsonl(&out.join(CASES_FILE), &cases)?;
    write_json(&out.join("synth.json"), &s)?;
    println!(
        "wrote {} facts, {} probe facts and {} edit cases to {}",
        world.facts.len(),
        world.probe.len(),
        cases.len(),
        out.display()
    );
    Ok(())
}

pub fn pretrain(cli: &Cli, a: &PretrainArgs) -> Result<()> {
    let mut s: PretrainSettings = settings::load(a.config.as_deref())?;
    set(&mut s.precision, a.precision);
    set(&mut s.pretrain.lr, a.lr);
    set(&mut s.pretrain.batch_size, a.batch_size);
    set(&mut s.pretrain.max_steps, a.max_steps);
    set(&mut s.pretrain.eval_every, a.eval_every);
    set(&mut s.pretrain.target_accuracy, a.target_accuracy);
    set(&mut s.pretrain.seed, a.seed);
    match s.precision {
        Precision::F32 => pretrain_as::<f32>(cli, a, &s),
        Precision::F64 => pretrain_as::<f64>(cli, a, &s),
    }
}

fn pretrain_as<T: Scalar>(cli: &Cli, a: &PretrainArgs, s: &PretrainSettings) -> Result<()> {
    let facts = read_facts(&a.data)?;
    let probe_path = match &a.probe {
        Some(p) => p.clone(),
        None if a.data.is_dir() => a.data.join(PROBE_FILE),
        None => a.data.with_file_name(PROBE_FILE),
    };
    let probe: Vec<Fact> =
        read_jsonl(&probe_path).with_context(|| format!("reading probe facts from {}", probe_path.display()))?;
    let out = a.out.clone().unwrap_or_else(|| cli.out_dir.join("base.dled"));

    let mut model = Vlm::<T>::init(s.model.clone())?;
    let mut history = Vec::new();
    let report = run_pretrain(&mut model, &facts, &probe, &s.pretrain, |step, loss, acc| {
        history.push(vec![step.to_string(), format!("{loss:.8}"), format!("{acc:.6}")]);
        say(cli, &format!("step {step}: loss {loss:.4}, probe accuracy {acc:.3}"));
    });
    let hist_path = out.with_file_name("pretrain_history.csv");
    write_text(&hist_path, &dualedit::io::csv_string(&["step", "loss", "probe_accuracy"], &history))?;
    let report = report.context("pretraining did not reach the target probe accuracy; no checkpoint written")?;
    model.save(&out).with_context(|| format!("writing {}", out.display()))?;
    write_json(&out.with_file_name("pretrain_report.json"), &report)?;
    println!(
        "probe accuracy {:.4} after {} steps (final loss {:.4}); weights {} saved to {}",
        report.probe_accuracy,
        report.steps,
        report.final_loss,
        model.weight_hash(),
        out.display()
    );
    Ok(())
}

pub fn edit_train(cli: &Cli, a: &EditTrainArgs) -> Result<()> {
    let mut s: EditTrainSettings = settings::load(a.config.as_deref())?;
    set(&mut s.precision, a.precision);
    set(&mut s.tau, a.tau);
    set(&mut s.suite.text_layer, a.tlayer.map(|l| l.0));
    set(&mut s.suite.visual_layer, a.vlayer.map(|l| l.0));
    set(&mut s.suite.gate_layer, a.gate_layer.map(Some));
    set(&mut s.suite.modes.combine, a.combine.map(Into::into));
    set(&mut s.suite.modes.scale, a.scale.map(Into::into));
    set(&mut s.suite.train.lr, a.lr);
    set(&mut s.suite.train.batch_size, a.batch_size);
    set(&mut s.suite.train.max_iters, a.max_iters);
    set(&mut s.suite.train.checkpoint_interval, a.checkpoint_interval);
    set(&mut s.suite.train.seed, a.seed);
    set(&mut s.suite.adapter_seed, a.adapter_seed);
    set(&mut s.suite.train.gen_text_model, a.gen_text_model.map(Into::into));
    match s.precision {
        Precision::F32 => edit_train_as::<f32>(cli, a, &s),
        Precision::F64 => edit_train_as::<f64>(cli, a, &s),
    }
}

fn edit_train_as<T: Scalar>(cli: &Cli, a: &EditTrainArgs, s: &EditTrainSettings) -> Result<()> {
    let model = load_model::<T>(&a.base)?;
    let mut cases = read_cases(&a.cases)?;
    if !a.only.is_empty() {
        if let Some(missing) = a.only.iter().find(|id| !cases.iter().any(|c| &c.id == *id)) {
            bail!("no edit case with id {missing:?}");
        }
        cases.retain(|c| a.only.contains(&c.id));
    }
    let gate = s.suite.gate(s.tau, true)?;
    gate.validate()?;
    let out = a.out.clone().unwrap_or_else(|| cli.out_dir.join("adapters"));
    write_json(&out.join("edit_train.json"), s)?;

    let mut trained: Vec<TrainedEdit<T>> = Vec::new();
    let mut failures = Vec::new();
    for case in &cases {
        match train_suite(&model, std::slice::from_ref(case), &s.suite, Some(&out), |_, _| {}) {
            Ok(mut t) => {
                let t = t.remove(0);
                say(
                    cli,
                    &format!(
                        "{}: best iteration {} (loss {:.4}) in {:.1}s",
                        case.id, t.best_iter, t.best_loss.total, t.seconds
                    ),
                );
                trained.push(t);
            }
            Err(e) => failures.push((case.id.clone(), e.to_string())),
        }
    }
    save_suite(&out, &trained, &gate)?;
    let summary: Vec<serde_json::Value> = trained
        .iter()
        .map(|t| {
            serde_json::json!({
                "id": t.entry.id,
                "best_iter": t.best_iter,
                "best_loss": t.best_loss,
                "seconds": t.seconds,
            })
        })
        .collect();
    write_json(&out.join("train_summary.json"), &serde_json::json!({ "trained": summary, "failed": failures }))?;
    println!("trained {} of {} edits into {}", trained.len(), cases.len(), out.display());
    if !failures.is_empty() {
        for (id, err) in &failures {
            eprintln!("failed: {id}: {err}");
        }
        bail!("{} edit(s) failed to train", failures.len());
    }
    Ok(())
}

pub fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let mut s: EvalSettings = settings::load(a.config.as_deref())?;
    set(&mut s.precision, a.precision);
    set(&mut s.gating, a.gating.map(|g| g.enabled()));
    set(&mut s.tau, a.tau.map(Some));
    set(&mut s.max_new_tokens, a.max_new_tokens);
    match s.precision {
        Precision::F32 => eval_as::<f32>(cli, a, &s),
        Precision::F64 => eval_as::<f64>(cli, a, &s),
    }
}

fn eval_as<T: Scalar>(cli: &Cli, a: &EvalArgs, s: &EvalSettings) -> Result<()> {
    let model = load_model::<T>(&a.base)?;
    let cases = read_cases(&a.cases)?;
    let (registry, stored_tau, gate_layer) = EditRegistry::<T>::load(&a.adapters)
        .with_context(|| format!("loading adapters from {}", a.adapters.display()))?;
    let mut entries: Vec<EditEntry<T>> = Vec::with_capacity(cases.len());
    let mut missing = Vec::new();
    for c in &cases {
        match registry.get(&c.id) {
            Some(e) => entries.push(e.clone()),
            None => missing.push(c.id.clone()),
        }
    }
    if !missing.is_empty() {
        for id in &missing {
            eprintln!("missing adapters: {id}");
        }
        bail!("{} case(s) have no trained adapters in {}", missing.len(), a.adapters.display());
    }
    let gate = GateConfig { tau: s.tau.unwrap_or(stored_tau), layer: gate_layer, enabled: s.gating };
    gate.validate()?;
    let protocol = Protocol { gate, max_new_tokens: s.max_new_tokens };
    let (report, results) = eval_suite(&model, &cases, &entries, &protocol)?;

    let path = a.report.clone().unwrap_or_else(|| cli.out_dir.join("report.json"));
    write_json(&path, &report)?;
    write_text(&path.with_extension("csv"), &report.to_csv())?;
    if a.details {
        write_json(&path.with_extension("details.json"), &serde_json::json!({ "protocol": protocol, "cases": results }))?;
    }
    say(cli, &format!("gating {}, tau {}", if s.gating { "on" } else { "off" }, protocol.gate.tau));
    println!(
        "rel {:.2}  t_gen {:.2}  v_gen {:.2}  t_loc {:.2}  m_loc {:.2}  avg {:.2}",
        report.rel, report.t_gen, report.v_gen, report.t_loc.agreement, report.m_loc.agreement, report.avg
    );
    Ok(())
}
