use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde_json::json;
use simfuse::data::{self, Dataset, SynthConfig};
use simfuse::exec::Exec;
use simfuse::experiment::{
    self, audit_gradients_with, run_ablation, run_cell, AuditReport, DataSpec, ExperimentSpec,
    Manifest, RunOptions,
};
use simfuse::model::{Checkpoint, Model, ModelVariant};
use simfuse::numerics::CheckOptions;
use simfuse::train;

use crate::config::{self, ensure_single, Loaded, SpecArgs};
use crate::{AuditFailure, CellFailure, Cli, Command, UsageError};

const BUILD: &str = env!("SIMFUSE_BUILD");

pub fn run(cli: &Cli) -> Result<()> {
    let det = cli.deterministic;
    match &cli.command {
        Command::GenData { config, seed, out } => gen_data(config.as_deref(), *seed, out, det),
        Command::Train { spec, variant } => train_cmd(spec, variant.as_deref(), det),
        Command::Eval {
            spec,
            checkpoint,
            split,
        } => eval_cmd(spec, checkpoint.as_deref(), split.as_deref(), det),
        Command::Ablate { spec } => ablate(spec, det),
        Command::Project {
            spec,
            checkpoint,
            split,
        } => project(spec, checkpoint.as_deref(), split.as_deref(), det),
        Command::GradAudit {
            config,
            seed,
            sabotage,
            out,
        } => grad_audit(
            config.as_deref(),
            *seed,
            sabotage.clone(),
            out.as_deref(),
            det,
        ),
    }
}

fn exec_for(deterministic: bool) -> Exec {
    if deterministic {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
        .map_err(UsageError::wrap)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn gen_data(config: Option<&Path>, seed: Option<u64>, out: &Path, det: bool) -> Result<()> {
    let mut synth = match config {
        None => SynthConfig::default(),
        Some(path) => match config::load(path) {
            Ok(Loaded::Manifest(m)) => {
                if m.command != "gen-data" {
                    return Err(UsageError::msg(format!(
                        "manifest was written by `{}`, not `gen-data`",
                        m.command
                    )));
                }
                match m.spec.data {
                    DataSpec::Synthetic(c) => c,
                    DataSpec::Embeddings { .. } => {
                        return Err(UsageError::msg(
                            "gen-data manifest without a synthetic config",
                        ))
                    }
                }
            }
            _ => config::read_file::<SynthConfig>(path)?,
        },
    };
    if let Some(s) = seed {
        synth.seed = s;
    }
    synth.validate().map_err(|e| UsageError::wrap(e.into()))?;
    create_dir(out)?;
    let dataset = data::generate(&synth)?;
    let file = out.join("embeddings.bin");
    data::save_embeddings(&dataset, &file)?;
    let spec = ExperimentSpec {
        name: "gen-data".into(),
        data: DataSpec::Synthetic(synth),
        out: out.to_path_buf(),
        ..ExperimentSpec::default()
    };
    Manifest::new("gen-data", &spec, det, BUILD).save(&out.join("manifest.json"))?;
    println!(
        "wrote {} samples ({} classes, d={}, L={}) to {}",
        dataset.len(),
        dataset.extents.classes,
        dataset.extents.width,
        dataset.extents.text_tokens,
        file.display()
    );
    Ok(())
}

fn train_cmd(args: &SpecArgs, variant: Option<&str>, det: bool) -> Result<()> {
    let resolved = args.resolve("train")?;
    let mut spec = resolved.spec;
    let chosen = match variant {
        Some(name) => spec
            .variants
            .iter()
            .find(|v| v.name == name)
            .cloned()
            .ok_or_else(|| UsageError::msg(format!("no variant named `{name}` in the spec")))?,
        None => ensure_single("variant (pick one with --variant)", &spec.variants)?,
    };
    let seed = ensure_single("seed", &spec.seeds)?;
    spec.variants = vec![chosen.clone()];
    let out = spec.out.clone();
    create_dir(&out)?;
    Manifest::new("train", &spec, det, BUILD).save(&out.join("manifest.json"))?;

    let (train_set, test_set) = spec.corpus()?;
    let (model, outcome) = run_cell(
        &chosen.variant,
        &train_set,
        &test_set,
        &spec.train,
        seed,
        exec_for(det),
    )?;
    train::save_metrics_csv(&outcome.history, !det, &out.join("metrics.csv"))?;
    write_timing(&outcome.history, &out.join("timing.csv"))?;
    Checkpoint::new(&model.variant, &outcome.params).save(&out.join("checkpoint.json"))?;
    match outcome.history.last() {
        Some(m) => println!(
            "{} seed {}: {} epochs, loss {:.4}, train acc {:.4}, test acc {:.4}",
            chosen.name,
            seed,
            m.epoch,
            m.loss,
            m.train_acc,
            m.test_acc.unwrap_or(f64::NAN)
        ),
        None => println!("{} seed {}: no epochs run", chosen.name, seed),
    }
    Ok(())
}

fn write_timing(history: &[train::EpochMetrics], path: &Path) -> Result<()> {
    let mut text = String::from("epoch,seconds\n");
    for m in history {
        text.push_str(&format!("{},{:?}\n", m.epoch, m.seconds));
    }
    std::fs::write(path, text)?;
    Ok(())
}

struct Scored {
    spec: ExperimentSpec,
    /// Where reports go; `None` when only a training manifest named the corpus.
    out: Option<PathBuf>,
    checkpoint: PathBuf,
    split: String,
    model: Model,
    params: simfuse::params::ParamSet,
    dataset: Dataset,
}

fn load_scored(
    args: &SpecArgs,
    command: &str,
    checkpoint: Option<&Path>,
    split: Option<&str>,
) -> Result<Scored> {
    let resolved = args.resolve_from(&[command, "train"])?;
    let manifest = resolved.manifest.as_ref();
    let from_training = manifest.is_some_and(|m| m.command == "train");
    let checkpoint = checkpoint
        .map(Path::to_path_buf)
        .or_else(|| manifest.and_then(|m| m.checkpoint.clone()))
        .or_else(|| {
            manifest
                .filter(|_| from_training)
                .map(|m| m.spec.out.join("checkpoint.json"))
        })
        .ok_or_else(|| UsageError::msg("--checkpoint is required"))?;
    let split = split
        .map(str::to_string)
        .or_else(|| manifest.and_then(|m| m.split.clone()))
        .unwrap_or_else(|| "test".into());
    let ck = Checkpoint::load(&checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))
        .map_err(UsageError::wrap)?;
    let params = ck.params().map_err(|e| UsageError::wrap(e.into()))?;
    let model = Model::new(ck.variant.clone())?;
    let spec = resolved.spec;
    let (train_set, test_set) = spec.corpus()?;
    let dataset = match split.as_str() {
        "train" => train_set,
        "test" => test_set,
        "all" => {
            let mut all = train_set;
            all.samples.extend(test_set.samples);
            all
        }
        other => {
            return Err(UsageError::msg(format!(
                "unknown split `{other}` (train, test or all)"
            )))
        }
    };
    let ex = dataset.extents;
    let v = &model.variant;
    if (ex.width, ex.text_tokens, ex.image_tokens, ex.classes)
        != (v.width, v.tokens, v.tokens, v.classes)
    {
        return Err(UsageError::msg(format!(
            "checkpoint expects d={}, L={}, {} classes; corpus has d={}, L={}/{}, {} classes",
            v.width, v.tokens, v.classes, ex.width, ex.text_tokens, ex.image_tokens, ex.classes
        )));
    }
    let out = match (&args.out, from_training) {
        (Some(dir), _) => Some(dir.clone()),
        (None, true) => None,
        (None, false) => Some(spec.out.clone()),
    };
    let mut spec = spec;
    if let Some(dir) = &out {
        spec.out = dir.clone();
    }
    Ok(Scored {
        spec,
        out,
        checkpoint,
        split,
        model,
        params,
        dataset,
    })
}

fn scored_manifest(command: &str, s: &Scored, det: bool) -> Manifest {
    let mut m = Manifest::new(command, &s.spec, det, BUILD);
    m.checkpoint = Some(s.checkpoint.clone());
    m.split = Some(s.split.clone());
    m
}

fn eval_cmd(
    args: &SpecArgs,
    checkpoint: Option<&Path>,
    split: Option<&str>,
    det: bool,
) -> Result<()> {
    let s = load_scored(args, "eval", checkpoint, split)?;
    if let Some(out) = &s.out {
        create_dir(out)?;
        scored_manifest("eval", &s, det).save(&out.join("manifest.json"))?;
    }
    let acc = train::evaluate(&s.model, &s.params, &s.dataset, exec_for(det))?;
    if let Some(out) = &s.out {
        let report = json!({
            "split": s.split,
            "samples": s.dataset.len(),
            "accuracy": acc,
        });
        write_json(&out.join("eval.json"), &report)?;
    }
    println!(
        "{} accuracy on {} samples: {:.4}",
        s.split,
        s.dataset.len(),
        acc
    );
    Ok(())
}

fn ablate(args: &SpecArgs, det: bool) -> Result<()> {
    let spec = args.resolve("ablate")?.spec;
    let out = spec.out.clone();
    create_dir(&out)?;
    Manifest::new("ablate", &spec, det, BUILD).save(&out.join("manifest.json"))?;
    let options = RunOptions {
        deterministic: det,
        save_checkpoints: false,
    };
    let report = run_ablation(&spec, &out, options)?;
    println!(
        "{:<20} {:>6} {:>8} {:>8}",
        "variant", "cells", "mean", "stdev"
    );
    for r in &report.summary {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
        println!(
            "{:<20} {:>6} {:>8} {:>8}",
            r.variant,
            r.cells - r.failed,
            pct(r.mean_test_acc),
            pct(r.std_test_acc)
        );
    }
    println!("reports in {}", out.display());
    match report.failed() {
        0 => Ok(()),
        n => Err(anyhow!(CellFailure(n))),
    }
}

fn project(
    args: &SpecArgs,
    checkpoint: Option<&Path>,
    split: Option<&str>,
    det: bool,
) -> Result<()> {
    let s = load_scored(args, "project", checkpoint, split)?;
    let out = s.out.clone().ok_or_else(|| {
        UsageError::msg("--out is required when projecting from a training manifest")
    })?;
    create_dir(&out)?;
    scored_manifest("project", &s, det).save(&out.join("manifest.json"))?;
    let projection =
        experiment::project_representations(&s.model, &s.params, &s.dataset, exec_for(det))?;
    let labels = s.dataset.labels();
    experiment::write_projection_csv(&projection, &labels, &out.join("projection.csv"))?;
    let sil = experiment::silhouette(&projection.coords, &labels).ok();
    let report = json!({
        "split": s.split,
        "samples": s.dataset.len(),
        "explained_variance_ratio": projection.explained_ratio(),
        "eigenvalues": projection.spectrum.iter().take(2).collect::<Vec<_>>(),
        "silhouette": sil,
    });
    write_json(&out.join("projection.json"), &report)?;
    println!(
        "projected {} samples; top-2 variance share {:.4}; silhouette {}",
        s.dataset.len(),
        projection.explained_ratio(),
        sil.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

fn grad_audit(
    config: Option<&Path>,
    seed: Option<u64>,
    sabotage: Option<String>,
    out: Option<&Path>,
    det: bool,
) -> Result<()> {
    let (variant, mut chosen_seed, mut chosen_sabotage) = match config {
        None => (AuditReport::default_variant(), 0, None),
        Some(path) => match config::load(path) {
            Ok(Loaded::Manifest(m)) => {
                if m.command != "grad-audit" {
                    return Err(UsageError::msg(format!(
                        "manifest was written by `{}`, not `grad-audit`",
                        m.command
                    )));
                }
                let v = ensure_single("variant", &m.spec.variants)?.variant;
                let s = ensure_single("seed", &m.spec.seeds)?;
                (v, s, m.sabotage.clone())
            }
            _ => (config::read_file::<ModelVariant>(path)?, 0, None),
        },
    };
    if let Some(s) = seed {
        chosen_seed = s;
    }
    if sabotage.is_some() {
        chosen_sabotage = sabotage;
    }
    let options = CheckOptions {
        sabotage: chosen_sabotage.clone(),
        ..CheckOptions::default()
    };
    let report = audit_gradients_with(&variant, chosen_seed, &options).map_err(|e| match e {
        simfuse::Error::Config(_) | simfuse::Error::UnknownParam(_) => UsageError::wrap(e.into()),
        other => other.into(),
    })?;
    if let Some(dir) = out {
        create_dir(dir)?;
        let spec = ExperimentSpec {
            name: "grad-audit".into(),
            variants: vec![experiment::NamedVariant::new("audit", variant.clone())],
            seeds: vec![chosen_seed],
            out: dir.to_path_buf(),
            ..ExperimentSpec::default()
        };
        let mut m = Manifest::new("grad-audit", &spec, det, BUILD);
        m.sabotage = chosen_sabotage;
        m.save(&dir.join("manifest.json"))?;
        write_json(&dir.join("audit.json"), &report)?;
    }
    println!(
        "{:<28} {:>8} {:>12}  status",
        "parameter", "entries", "max rel err"
    );
    for p in &report.params {
        println!(
            "{:<28} {:>8} {:>12.3e}  {}",
            p.name,
            p.entries,
            p.max_rel_error,
            if p.passed { "ok" } else { "FAIL" }
        );
    }
    println!(
        "{} parameters, max relative error {:.3e} (threshold {:.0e})",
        report.params.len(),
        report.max_rel_error(),
        report.threshold
    );
    if report.passed() {
        Ok(())
    } else {
        Err(anyhow!(AuditFailure(
            report.failures().map(|p| p.name.clone()).collect()
        )))
    }
}
