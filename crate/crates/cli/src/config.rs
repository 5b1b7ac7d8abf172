use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use simfuse::experiment::{self, ExperimentSpec, Manifest, Preset, MANIFEST_FORMAT};

use crate::UsageError;

/// Parses JSON, or TOML when the extension is `.toml`.
pub fn read_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(UsageError::wrap)?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(anyhow::Error::from)
    } else {
        serde_json::from_str(&text).map_err(anyhow::Error::from)
    };
    parsed
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(UsageError::wrap)
}

/// A config file is either a plain experiment spec or a manifest from an
/// earlier run.
pub enum Loaded {
    Spec(Box<ExperimentSpec>),
    Manifest(Box<Manifest>),
}

pub fn load(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(UsageError::wrap)?;
    let looks_like_manifest = path.extension().is_none_or(|e| e != "toml")
        && serde_json::from_str::<serde_json::Value>(&text)
            .ok()
            .and_then(|v| v.get("format").and_then(|f| f.as_str().map(str::to_string)))
            .is_some_and(|f| f == MANIFEST_FORMAT);
    if looks_like_manifest {
        let m = Manifest::load(path).map_err(|e| UsageError::wrap(e.into()))?;
        Ok(Loaded::Manifest(Box::new(m)))
    } else {
        Ok(Loaded::Spec(Box::new(read_file(path)?)))
    }
}

/// Flags shared by the commands that run experiments.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct SpecArgs {
    /// Experiment spec (JSON or TOML) or a manifest written by an earlier run.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Built-in grid: table2 (module ablation), table4 (fusion heads) or table5 (FFN role).
    #[arg(long, value_name = "NAME", conflicts_with = "config")]
    pub preset: Option<String>,
    /// Seed for a training cell; repeat for several. Replaces the configured seeds.
    #[arg(long = "seed", value_name = "N")]
    pub seeds: Vec<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override the number of training epochs.
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Override the Adam learning rate.
    #[arg(long, value_name = "LR")]
    pub learning_rate: Option<f64>,
}

pub struct Resolved {
    pub spec: ExperimentSpec,
    pub manifest: Option<Manifest>,
}

impl SpecArgs {
    /// The spec after applying preset, config and flag overrides, in that order.
    pub fn resolve(&self, command: &str) -> Result<Resolved> {
        self.resolve_from(&[command])
    }

    /// Like [`SpecArgs::resolve`], accepting manifests written by any of `commands`.
    pub fn resolve_from(&self, commands: &[&str]) -> Result<Resolved> {
        let (mut spec, manifest) = match (&self.preset, &self.config) {
            (Some(p), _) => {
                let p: Preset = p
                    .parse()
                    .map_err(|e: simfuse::Error| UsageError::wrap(e.into()))?;
                (experiment::preset(p), None)
            }
            (None, Some(path)) => match load(path)? {
                Loaded::Spec(s) => (*s, None),
                Loaded::Manifest(m) => {
                    if !commands.contains(&m.command.as_str()) {
                        return Err(UsageError::msg(format!(
                            "manifest was written by `{}`, expected {}",
                            m.command,
                            commands.join(" or ")
                        )));
                    }
                    (m.spec.clone(), Some(*m))
                }
            },
            (None, None) => (ExperimentSpec::default(), None),
        };
        if !self.seeds.is_empty() {
            spec.seeds = self.seeds.clone();
        }
        if let Some(out) = &self.out {
            spec.out = out.clone();
        }
        if let Some(e) = self.epochs {
            spec.train.epochs = e;
        }
        if let Some(lr) = self.learning_rate {
            spec.train.learning_rate = lr;
        }
        spec.validate().map_err(|e| UsageError::wrap(e.into()))?;
        Ok(Resolved { spec, manifest })
    }
}

pub fn ensure_single<T: Clone>(what: &str, items: &[T]) -> Result<T> {
    match items {
        [one] => Ok(one.clone()),
        _ => bail!(UsageError(format!(
            "expected exactly one {what}, found {}",
            items.len()
        ))),
    }
}
