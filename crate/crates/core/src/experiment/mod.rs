//! Experiment specifications, ablation grids, projections and gradient audits.

mod ablation;
mod audit;
mod project;

pub use ablation::{
    cell_dir, read_cells_csv, run_ablation, run_cell, summarize, AblationReport, CellRecord,
    CellStatus, RunOptions, SummaryRow, CELLS_HEADER, SUMMARY_HEADER,
};
pub use audit::{audit_gradients, audit_gradients_with, AuditReport, AUDIT_THRESHOLD};
pub use project::{pca_2d, project_representations, silhouette, write_projection_csv, Projection};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Extents, SynthConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::interaction::FfnRole;
use crate::model::ModelVariant;
use crate::train::TrainConfig;

/// Where a corpus comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Synthetic(SynthConfig),
    Embeddings { path: PathBuf },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic(SynthConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedVariant {
    pub name: String,
    /// Architecture; width, tokens and classes are taken from the corpus.
    #[serde(default)]
    pub variant: ModelVariant,
}

impl NamedVariant {
    pub fn new(name: impl Into<String>, variant: ModelVariant) -> Self {
        Self {
            name: name.into(),
            variant,
        }
    }
}

/// A named grid of `(variant, seed)` training cells over one corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub data: DataSpec,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub variants: Vec<NamedVariant>,
    pub train: TrainConfig,
    /// Each seed drives parameter initialization and batch shuffling of a cell.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            data: DataSpec::default(),
            test_fraction: 0.2,
            split_seed: 0,
            variants: vec![NamedVariant::new("sim-sfm", ModelVariant::full())],
            train: TrainConfig::default(),
            seeds: vec![0],
            out: PathBuf::from("runs"),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config(
                "experiment needs at least one variant".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one seed".into()));
        }
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate variant name `{}`", w[0])));
        }
        for v in &self.variants {
            if v.name.is_empty() || v.name.contains(['/', '\\', ',']) {
                return Err(Error::Config(format!("unusable variant name `{}`", v.name)));
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate seed".into()));
        }
        if let DataSpec::Synthetic(c) = &self.data {
            c.validate()?;
        }
        self.train.validate()
    }

    /// Loads or generates the corpus and splits it into `(train, test)`.
    pub fn corpus(&self) -> Result<(Dataset, Dataset)> {
        let full = match &self.data {
            DataSpec::Synthetic(c) => data::generate(c)?,
            DataSpec::Embeddings { path } => data::load_embeddings(path)?,
        };
        data::split(&full, self.test_fraction, self.split_seed)
    }
}

/// Copies the corpus extents into `variant`.
pub fn fit_variant(variant: &ModelVariant, extents: &Extents) -> Result<ModelVariant> {
    if extents.text_tokens != extents.image_tokens {
        return Err(Error::Config(format!(
            "the residual path needs equal token counts, got L_text={} and L_image={}",
            extents.text_tokens, extents.image_tokens
        )));
    }
    let mut v = variant.clone();
    v.width = extents.width;
    v.tokens = extents.text_tokens;
    v.classes = extents.classes;
    v.validate()?;
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Module ablation: SIM and SFM toggled against a concatenation baseline.
    Table2,
    /// Fusion heads behind the interaction layer.
    Table4,
    /// Which stream receives the similarity-aware feed-forward network.
    Table5,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table2" => Ok(Preset::Table2),
            "table4" => Ok(Preset::Table4),
            "table5" => Ok(Preset::Table5),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected table2, table4 or table5)"
            ))),
        }
    }
}

/// Corpus used by the presets: 7 balanced classes, 1,999 train and 500 test
/// samples at the default split.
pub fn preset_corpus() -> SynthConfig {
    SynthConfig {
        classes: 7,
        per_class: 357,
        tokens: 8,
        width: 64,
        sigma_noise: 0.3,
        rho_hetero: 0.5,
        ..SynthConfig::default()
    }
}

/// Training settings used by the presets.
pub fn preset_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs: 10,
        ..TrainConfig::default()
    }
}

pub fn preset_variants(preset: Preset) -> Vec<NamedVariant> {
    let full = ModelVariant::full();
    match preset {
        Preset::Table2 => vec![
            NamedVariant::new("concat-baseline", ModelVariant::baseline()),
            NamedVariant::new("sfm-only", full.clone().with_sim(false)),
            NamedVariant::new("sim-concat", full.clone().with_fusion(FusionKind::Concat)),
            NamedVariant::new("sim-sfm", full),
        ],
        Preset::Table4 => vec![
            NamedVariant::new(
                "sim-asym",
                full.clone().with_fusion(FusionKind::AsymCoAttention),
            ),
            NamedVariant::new(
                "sim-merge",
                full.clone().with_fusion(FusionKind::MergeAttention),
            ),
            NamedVariant::new("sim-co", full.clone().with_fusion(FusionKind::CoAttention)),
            NamedVariant::new("sim-sfm", full),
        ],
        Preset::Table5 => vec![
            NamedVariant::new("image-wise", full.clone().with_role(FfnRole::ImageWise)),
            NamedVariant::new("text-wise", full.with_role(FfnRole::TextWise)),
        ],
    }
}

pub fn preset(preset: Preset) -> ExperimentSpec {
    let name = match preset {
        Preset::Table2 => "table2",
        Preset::Table4 => "table4",
        Preset::Table5 => "table5",
    };
    ExperimentSpec {
        name: name.into(),
        data: DataSpec::Synthetic(preset_corpus()),
        test_fraction: 0.2,
        split_seed: 0,
        variants: preset_variants(preset),
        train: preset_train(),
        seeds: (0..5).collect(),
        out: PathBuf::from("runs").join(name),
    }
}

pub const MANIFEST_FORMAT: &str = "simfuse-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// Everything needed to rerun a CLI invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub spec: ExperimentSpec,
    pub deterministic: bool,
    pub embedding_format_version: u32,
    pub checkpoint_version: u32,
    pub prng: String,
    pub build: String,
    /// Checkpoint read by `eval` and `project`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset split read by `eval` and `project`: `train`, `test` or `all`.
    #[serde(default)]
    pub split: Option<String>,
    /// Parameter whose gradient the audit deliberately doubles.
    #[serde(default)]
    pub sabotage: Option<String>,
}

impl Manifest {
    pub fn new(command: &str, spec: &ExperimentSpec, deterministic: bool, build: &str) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            command: command.into(),
            spec: spec.clone(),
            deterministic,
            embedding_format_version: data::FORMAT_VERSION,
            checkpoint_version: crate::model::CHECKPOINT_VERSION,
            prng: data::PRNG_ID.into(),
            build: build.into(),
            checkpoint: None,
            split: None,
            sabotage: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(&std::fs::read(path)?)?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "unsupported manifest {} v{}",
                m.format, m.version
            )));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_expected_shapes() {
        assert_eq!(preset(Preset::Table2).variants.len(), 4);
        assert_eq!(preset(Preset::Table4).variants.len(), 4);
        assert_eq!(preset(Preset::Table5).variants.len(), 2);
        for p in [Preset::Table2, Preset::Table4, Preset::Table5] {
            preset(p).validate().unwrap();
        }
        let hetero = preset_corpus();
        assert_eq!(hetero.classes * hetero.per_class, 2499);
    }

    #[test]
    fn spec_validation() {
        let mut s = ExperimentSpec::default();
        s.seeds.clear();
        assert!(s.validate().is_err());
        let mut s = ExperimentSpec::default();
        s.variants.push(s.variants[0].clone());
        assert!(s.validate().is_err());
        let mut s = ExperimentSpec::default();
        s.variants[0].name = "a/b".into();
        assert!(s.validate().is_err());
        assert!("table3".parse::<Preset>().is_err());
    }

    #[test]
    fn fitting_copies_extents() {
        let ex = Extents {
            width: 16,
            text_tokens: 3,
            image_tokens: 3,
            classes: 2,
        };
        let v = fit_variant(&ModelVariant::full(), &ex).unwrap();
        assert_eq!((v.width, v.tokens, v.classes), (16, 3, 2));
        let bad = Extents {
            image_tokens: 4,
            ..ex
        };
        assert!(fit_variant(&ModelVariant::full(), &bad).is_err());
    }
}
