//! Encoder variants, the classifier head, the loss and checkpoints.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionKind};
use crate::interaction::{sim_layer, FfnRole, SimOptions, SimParams};
use crate::numerics::{concat_rows, Tape, Tensor, Var, PROB_FLOOR};
use crate::params::{Bound, NamedTensor, ParamSet, ParamSpec};

/// One point of the ablation grid plus the model extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelVariant {
    pub use_sim: bool,
    pub ffn_role: FfnRole,
    pub fusion: FusionKind,
    /// Number of stacked interaction layers.
    pub depth: usize,
    /// Channel width `d`.
    pub width: usize,
    /// Tokens per modality `L`.
    pub tokens: usize,
    pub heads: usize,
    /// Feed-forward hidden width; `4 * width` when unset.
    pub hidden: Option<usize>,
    pub classes: usize,
    /// Hidden widths of the classifier between the fused input and the class layer.
    pub classifier: Vec<usize>,
    /// Softmax temperature for both similarity normalizations.
    pub temperature: f64,
}

impl Default for ModelVariant {
    fn default() -> Self {
        Self {
            use_sim: true,
            ffn_role: FfnRole::TextWise,
            fusion: FusionKind::Sfm,
            depth: 1,
            width: 64,
            tokens: 8,
            heads: 8,
            hidden: None,
            classes: 7,
            classifier: vec![256, 128, 64, 32],
            temperature: 1.0,
        }
    }
}

impl ModelVariant {
    /// Interaction layers and the similarity-aware fusion head.
    pub fn full() -> Self {
        Self::default()
    }

    /// Concatenated pooled features straight into the classifier.
    pub fn baseline() -> Self {
        Self {
            use_sim: false,
            fusion: FusionKind::Concat,
            ..Self::default()
        }
    }

    pub fn with_fusion(mut self, fusion: FusionKind) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn with_sim(mut self, on: bool) -> Self {
        self.use_sim = on;
        self
    }

    pub fn with_role(mut self, role: FfnRole) -> Self {
        self.ffn_role = role;
        self
    }

    pub fn with_extents(mut self, width: usize, tokens: usize, heads: usize) -> Self {
        self.width = width;
        self.tokens = tokens;
        self.heads = heads;
        self
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(4 * self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.tokens == 0 || self.classes < 2 {
            return bad(format!(
                "width ({}), tokens ({}) must be positive and classes ({}) at least 2",
                self.width, self.tokens, self.classes
            ));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            ));
        }
        if self.use_sim && self.depth == 0 {
            return bad("interaction depth must be at least 1".into());
        }
        if self.hidden == Some(0) || self.classifier.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        Ok(())
    }

    /// Every parameter tensor of this variant, in initialization order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (d, dh) = (self.width, self.hidden_width());
        let mut specs = Vec::new();
        if self.use_sim {
            for layer in 0..self.depth {
                specs.extend(SimParams::specs(&format!("sim{layer}"), d, dh));
            }
        }
        specs.extend(self.fusion.specs("fuse", d, dh));
        let mut input = self.fusion.output_width(d);
        let widths = self.classifier.iter().copied().chain([self.classes]);
        for (k, out) in widths.enumerate() {
            specs.push(ParamSpec::weight(format!("cls.l{k}.w"), input, out));
            specs.push(ParamSpec::bias(format!("cls.l{k}.b"), out));
            input = out;
        }
        specs
    }
}

/// Initializes every parameter of `variant` from `seed`.
pub fn build_variant(variant: &ModelVariant, seed: u64) -> Result<ParamSet> {
    variant.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ParamSet::from_specs(&variant.param_specs(), &mut rng))
}

/// A validated variant plus test hooks.
#[derive(Clone, Debug)]
pub struct Model {
    pub variant: ModelVariant,
    /// Replace the modality-wise mask by a constant in every interaction layer.
    pub mask_override: Option<f64>,
}

impl Model {
    pub fn new(variant: ModelVariant) -> Result<Self> {
        variant.validate()?;
        Ok(Self {
            variant,
            mask_override: None,
        })
    }

    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ParamSet::from_specs(&self.variant.param_specs(), &mut rng)
    }

    fn check_sample(&self, text: &Tensor, image: &Tensor) -> Result<()> {
        let v = &self.variant;
        for t in [text, image] {
            if t.shape() != [v.tokens, v.width] {
                return Err(Error::Config(format!(
                    "features of shape {:?} do not match variant extents [{}, {}]",
                    t.shape(),
                    v.tokens,
                    v.width
                )));
            }
        }
        Ok(())
    }

    /// Token streams after the interaction layers (identity when disabled).
    pub fn encode<'t>(
        &self,
        p: &Bound<'t>,
        text: Var<'t>,
        image: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let v = &self.variant;
        let (mut t, mut i) = (text, image);
        if v.use_sim {
            let options = SimOptions {
                role: v.ffn_role,
                temperature: v.temperature,
                mask_override: self.mask_override,
            };
            for layer in 0..v.depth {
                let params = SimParams::bind(p, &format!("sim{layer}"), v.heads)?;
                let out = sim_layer(t, i, &params, &options)?;
                t = out.text;
                i = out.image;
            }
        }
        Ok((t, i))
    }

    /// Fused representation fed to the classifier.
    pub fn fused<'t>(&self, p: &Bound<'t>, text: Var<'t>, image: Var<'t>) -> Result<Var<'t>> {
        let (t, i) = self.encode(p, text, image)?;
        fuse(self.variant.fusion, t, i, p, "fuse", self.variant.heads)
    }

    /// Dense ReLU stack ending in a softmax over classes; `fused` is a vector.
    pub fn classify<'t>(&self, p: &Bound<'t>, fused: Var<'t>) -> Result<Var<'t>> {
        let n = fused.shape().iter().product::<usize>();
        let mut x = fused.reshape(&[1, n])?;
        let layers = self.variant.classifier.len() + 1;
        for k in 0..layers {
            let prefix = format!("cls.l{k}");
            x = x
                .matmul(p.at(&prefix, "w")?)?
                .add_row(p.at(&prefix, "b")?)?;
            if k + 1 < layers {
                x = x.relu()?;
            }
        }
        x.softmax(1)
    }

    /// Class probabilities (`1 × classes`) for one pair of token matrices.
    pub fn sample_probs<'t>(
        &self,
        p: &Bound<'t>,
        text: &Tensor,
        image: &Tensor,
    ) -> Result<Var<'t>> {
        self.check_sample(text, image)?;
        let tape = p
            .iter()
            .next()
            .map(|(_, v)| v.tape())
            .ok_or_else(|| Error::Config("no parameters bound".into()))?;
        let t = tape.leaf(text.clone());
        let i = tape.leaf(image.clone());
        let fused = self.fused(p, t, i)?;
        self.classify(p, fused)
    }

    /// Probabilities for a batch, one row per sample.
    pub fn forward(&self, params: &ParamSet, batch: &[&Sample]) -> Result<Tensor> {
        if batch.is_empty() {
            return Err(Error::Empty("forward batch".into()));
        }
        let c = self.variant.classes;
        let mut data = Vec::with_capacity(batch.len() * c);
        for s in batch {
            let tape = Tape::new();
            let p = params.bind(&tape);
            let probs = self.sample_probs(&p, s.text.tokens(), s.image.tokens())?;
            data.extend_from_slice(probs.value().data());
        }
        Tensor::matrix(batch.len(), c, data)
    }

    /// Mean cross-entropy of a batch recorded on one tape.
    pub fn batch_loss<'t>(&self, p: &Bound<'t>, batch: &[&Sample]) -> Result<Var<'t>> {
        if batch.is_empty() {
            return Err(Error::Empty("loss batch".into()));
        }
        let rows = batch
            .iter()
            .map(|s| self.sample_probs(p, s.text.tokens(), s.image.tokens()))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        concat_rows(&rows)?.cross_entropy(&labels)
    }
}

/// Mean over rows of `-ln max(p[row, label], 1e-12)`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.shape().len() != 2 || probs.rows() != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            probs.shape(),
            &[labels.len()],
        ));
    }
    let c = probs.cols();
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Label {
                label: y,
                classes: c,
            });
        }
        total -= probs.at(r, y).max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub const CHECKPOINT_FORMAT: &str = "simfuse-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON parameter checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub variant: ModelVariant,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(variant: &ModelVariant, params: &ParamSet) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            variant: variant.clone(),
            tensors: params.to_named(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(file)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(ck)
    }

    /// Parameters, checked against the names and shapes the variant expects.
    pub fn params(&self) -> Result<ParamSet> {
        self.variant.validate()?;
        let set = ParamSet::from_named(self.tensors.clone())?;
        let specs = self.variant.param_specs();
        if specs.len() != set.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, variant expects {}",
                set.len(),
                specs.len()
            )));
        }
        for s in &specs {
            match set.get(&s.name) {
                Some(t) if t.shape() == s.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::shape("checkpoint", &s.shape, t.shape()));
                }
                None => return Err(Error::UnknownParam(s.name.clone())),
            }
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_examples() {
        let onehot = Tensor::from_rows(&[[0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(cross_entropy(&onehot, &[1]).unwrap(), 0.0);

        let uniform = Tensor::filled(&[3, 7], 1.0 / 7.0);
        let l = cross_entropy(&uniform, &[0, 3, 6]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
        assert!((l - 1.9459).abs() < 1e-4);

        let half = Tensor::from_rows(&[[0.5, 0.5, 0.0], [0.0, 0.5, 0.5]]).unwrap();
        assert!((cross_entropy(&half, &[0, 2]).unwrap() - 2f64.ln()).abs() < 1e-12);

        assert!(matches!(
            cross_entropy(&half, &[0, 3]),
            Err(Error::Label {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.2, 0.7]), 2);
    }

    #[test]
    fn variant_validation() {
        assert!(ModelVariant::default().validate().is_ok());
        let bad = ModelVariant::default().with_extents(10, 2, 4);
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelVariant {
            classes: 1,
            ..ModelVariant::default()
        };
        assert!(bad.validate().is_err());
        assert!(build_variant(&ModelVariant::default().with_extents(6, 2, 4), 0).is_err());
    }

    #[test]
    fn seeds_control_initialization() {
        let v = ModelVariant::full().with_extents(8, 2, 2);
        let a = build_variant(&v, 9).unwrap();
        let b = build_variant(&v, 9).unwrap();
        let c = build_variant(&v, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn initialization_rule() {
        let v = ModelVariant::full().with_extents(8, 2, 2);
        let p = build_variant(&v, 1).unwrap();
        assert!(p
            .get("sim0.text.ln_g")
            .unwrap()
            .data()
            .iter()
            .all(|&g| g == 1.0));
        assert!(p
            .get("sim0.text.ln_b")
            .unwrap()
            .data()
            .iter()
            .all(|&b| b == 0.0));
        assert!(p.get("cls.l0.b").unwrap().data().iter().all(|&b| b == 0.0));
        let bound = 1.0 / 8f64.sqrt();
        let w = p.get("sim0.text.wq").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        let w1 = p.get("cls.l1.w").unwrap();
        assert!(w1.data().iter().all(|v| v.abs() <= 1.0 / 16.0));
    }

    #[test]
    fn default_variant_matches_published_settings() {
        let v = ModelVariant::default();
        assert_eq!(v.heads, 8);
        assert_eq!(v.classes, 7);
        assert_eq!(v.classifier.len() + 1, 5);
        assert_eq!(v.hidden_width(), 4 * v.width);
    }
}
