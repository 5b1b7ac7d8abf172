use serde::{Deserialize, Serialize};

use crate::data::{generate, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelVariant};
use crate::numerics::{gradient_report, CheckOptions, ParamCheck};
use crate::params::Bound;

/// Largest relative error an audited parameter may show.
pub const AUDIT_THRESHOLD: f64 = 1e-4;
const MAX_WIDTH: usize = 8;
const MAX_TOKENS: usize = 2;
const BATCH: usize = 2;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditEntry {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditReport {
    pub variant: ModelVariant,
    pub seed: u64,
    pub batch: usize,
    pub step: f64,
    pub threshold: f64,
    pub sabotaged: Option<String>,
    pub loss: f64,
    pub params: Vec<AuditEntry>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AuditEntry> {
        self.params.iter().filter(|p| !p.passed)
    }

    /// The default audit target: every module of the full variant at `d = 8`, `L = 2`, two heads.
    pub fn default_variant() -> ModelVariant {
        ModelVariant::full().with_extents(MAX_WIDTH, MAX_TOKENS, 2)
    }
}

/// Central-difference audit of every parameter on a two-sample batch.
pub fn audit_gradients(variant: &ModelVariant, seed: u64) -> Result<AuditReport> {
    audit_gradients_with(variant, seed, &CheckOptions::default())
}

pub fn audit_gradients_with(
    variant: &ModelVariant,
    seed: u64,
    options: &CheckOptions,
) -> Result<AuditReport> {
    if variant.width > MAX_WIDTH || variant.tokens > MAX_TOKENS {
        return Err(Error::Config(format!(
            "audit extents limited to d <= {MAX_WIDTH} and L <= {MAX_TOKENS}, got d={} and L={}",
            variant.width, variant.tokens
        )));
    }
    let model = Model::new(variant.clone())?;
    let params = model.init(seed);
    if let Some(name) = &options.sabotage {
        if !params.contains(name) {
            return Err(Error::UnknownParam(name.clone()));
        }
    }
    let data = generate(&SynthConfig {
        classes: variant.classes,
        per_class: 1,
        tokens: variant.tokens,
        width: variant.width,
        sigma_noise: 0.25,
        rho_hetero: 0.5,
        seed,
        ..SynthConfig::default()
    })?;
    let batch: Vec<&Sample> = data.samples.iter().take(BATCH).collect();
    let named: Vec<(String, _)> = params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();

    let forward = params.clone();
    let loss = {
        let tape = crate::numerics::Tape::new();
        let p = forward.bind(&tape);
        let l = model.batch_loss(&p, &batch)?;
        let v = l.value().data()[0];
        v
    };
    let checks: Vec<ParamCheck> = gradient_report(
        |_tape, vars| {
            let p = Bound::from_vars(&names, vars);
            model.batch_loss(&p, &batch)
        },
        &named,
        options,
    )?;
    Ok(AuditReport {
        variant: variant.clone(),
        seed,
        batch: batch.len(),
        step: options.step,
        threshold: AUDIT_THRESHOLD,
        sabotaged: options.sabotage.clone(),
        loss,
        params: checks
            .into_iter()
            .map(|c| AuditEntry {
                passed: c.max_rel_error <= AUDIT_THRESHOLD,
                name: c.name,
                entries: c.entries,
                max_rel_error: c.max_rel_error,
            })
            .collect(),
    })
}
