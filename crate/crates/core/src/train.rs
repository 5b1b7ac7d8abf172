//! Adam, the mini-batch training loop and accuracy evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{argmax, Model};
use crate::numerics::{Tape, Tensor};
use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds the per-epoch batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            batch_size: 20,
            epochs: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must be in (0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        Ok(())
    }
}

/// Gradient buffers keyed by parameter name.
pub type ParamGrads = BTreeMap<String, Vec<f64>>;

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update. Parameters without an entry in `grads`
/// see a zero gradient.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamGrads,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.clone()))?;
        if p.len() != g.len() {
            return Err(Error::shape("adam_step", p.shape(), &[g.len()]));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let n = p.len();
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        let g = grads.get(name);
        let data = p.data_mut();
        for i in 0..n {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            data[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Loss, prediction and gradients of one sample, with the loss scaled by
/// `weight`.
pub struct SampleGrad {
    pub loss: f64,
    pub predicted: usize,
    pub grads: Vec<Vec<f64>>,
}

pub fn sample_gradient(
    model: &Model,
    params: &ParamSet,
    sample: &Sample,
    weight: f64,
) -> Result<SampleGrad> {
    let tape = Tape::new();
    let p = params.bind(&tape);
    let probs = model.sample_probs(&p, sample.text.tokens(), sample.image.tokens())?;
    let predicted = argmax(probs.value().data());
    let ce = probs.cross_entropy(&[sample.label])?;
    let loss = ce.value().data()[0];
    let scaled = ce.scale(weight)?;
    let mut g = tape.backward(scaled)?;
    let grads = p
        .iter()
        .map(|(_, v)| g.take(v).unwrap_or_else(|| vec![0.0; v.value().len()]))
        .collect();
    Ok(SampleGrad {
        loss,
        predicted,
        grads,
    })
}

/// Mean loss, correct count and summed gradients for one batch.
///
/// Per-sample gradients are summed in batch order regardless of `exec`.
pub fn batch_gradients(
    model: &Model,
    params: &ParamSet,
    batch: &[&Sample],
    exec: Exec,
) -> Result<(f64, usize, ParamGrads)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    let weight = 1.0 / batch.len() as f64;
    let per_sample = exec.map(batch, |s| sample_gradient(model, params, s, weight));
    let mut total: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let mut loss = 0.0;
    let mut correct = 0;
    for (s, r) in batch.iter().zip(per_sample) {
        let r = r?;
        loss += r.loss;
        correct += usize::from(r.predicted == s.label);
        for (acc, g) in total.iter_mut().zip(&r.grads) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    let grads = params.names().map(str::to_string).zip(total).collect();
    Ok((loss * weight, correct, grads))
}

/// Metrics for one completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's samples, measured before each update.
    pub loss: f64,
    /// Running accuracy over the epoch's batches.
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    /// Wall-clock seconds since training started.
    pub seconds: f64,
}

/// One optimizer step as seen by an [`Observer`].
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub epoch: usize,
    /// 1-based global step.
    pub step: usize,
    pub loss: f64,
    pub correct: usize,
    pub batch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Hooks into the training loop.
pub trait Observer {
    fn on_step(&mut self, _record: &StepRecord) -> Control {
        Control::Continue
    }

    fn on_epoch(&mut self, _metrics: &EpochMetrics, _params: &ParamSet) -> Control {
        Control::Continue
    }
}

/// Observer that never intervenes.
pub struct Quiet;

impl Observer for Quiet {}

pub struct TrainOutcome {
    pub params: ParamSet,
    pub history: Vec<EpochMetrics>,
    pub steps: usize,
    pub optimizer: AdamState,
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient(_) => Error::Diverged { epoch, step },
        other => other,
    }
}

pub fn train(
    model: &Model,
    params: ParamSet,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    train_observed(model, params, train_set, test_set, config, exec, &mut Quiet)
}

/// [`train`] with step and epoch hooks.
pub fn train_observed(
    model: &Model,
    mut params: ParamSet,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
    exec: Exec,
    observer: &mut dyn Observer,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if let Some(t) = test_set {
        if t.is_empty() {
            return Err(Error::Empty("test set".into()));
        }
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut state = AdamState::default();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let mut stop = false;
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set.samples[i]).collect();
            let (loss, ok, grads) = batch_gradients(model, &params, &batch, exec)
                .map_err(|e| diverged(e, epoch, step))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            adam_step(&mut params, &grads, &mut state, config)
                .map_err(|e| diverged(e, epoch, step))?;
            loss_sum += loss * batch.len() as f64;
            correct += ok;
            seen += batch.len();
            let record = StepRecord {
                epoch,
                step,
                loss,
                correct: ok,
                batch: batch.len(),
            };
            if observer.on_step(&record) == Control::Stop {
                stop = true;
                break;
            }
        }
        let test_acc = match test_set {
            Some(t) => Some(evaluate(model, &params, t, exec)?),
            None => None,
        };
        let metrics = EpochMetrics {
            epoch,
            loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc,
            seconds: start.elapsed().as_secs_f64(),
        };
        let control = observer.on_epoch(&metrics, &params);
        history.push(metrics);
        if stop || control == Control::Stop {
            break 'epochs;
        }
    }
    Ok(TrainOutcome {
        params,
        history,
        steps: step,
        optimizer: state,
    })
}

/// Predicted class per sample (argmax, lowest index on ties).
pub fn predict(
    model: &Model,
    params: &ParamSet,
    dataset: &Dataset,
    exec: Exec,
) -> Result<Vec<usize>> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    exec.map(&dataset.samples, |s| {
        let probs = model.forward(params, &[s])?;
        Ok(argmax(probs.data()))
    })
    .into_iter()
    .collect()
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate(model: &Model, params: &ParamSet, dataset: &Dataset, exec: Exec) -> Result<f64> {
    let predicted = predict(model, params, dataset, exec)?;
    let correct = predicted
        .iter()
        .zip(&dataset.samples)
        .filter(|(p, s)| **p == s.label)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Fused representation of every sample, one row each.
pub fn fused_representations(
    model: &Model,
    params: &ParamSet,
    dataset: &Dataset,
    exec: Exec,
) -> Result<Tensor> {
    if dataset.is_empty() {
        return Err(Error::Empty("projection dataset".into()));
    }
    let rows = exec
        .map(&dataset.samples, |s| -> Result<Vec<f64>> {
            let tape = Tape::new();
            let p = params.bind(&tape);
            let t = tape.leaf(s.text.tokens().clone());
            let i = tape.leaf(s.image.tokens().clone());
            let fused = model.fused(&p, t, i)?;
            let v = fused.value().data().to_vec();
            Ok(v)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

pub const METRICS_HEADER: &str = "epoch,loss,train_acc,test_acc,seconds";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Writes the metric history as CSV. With `with_seconds` false the
/// wall-clock column is left empty so the file depends only on the inputs.
pub fn write_metrics_csv(
    history: &[EpochMetrics],
    with_seconds: bool,
    out: &mut impl Write,
) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for m in history {
        let seconds = with_seconds.then_some(m.seconds);
        writeln!(
            out,
            "{},{:?},{:?},{},{}",
            m.epoch,
            m.loss,
            m.train_acc,
            fmt_opt(m.test_acc),
            fmt_opt(seconds)
        )?;
    }
    Ok(())
}

pub fn save_metrics_csv(history: &[EpochMetrics], with_seconds: bool, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_metrics_csv(history, with_seconds, &mut f)?;
    f.flush()?;
    Ok(())
}

/// Parses a file written by [`write_metrics_csv`]; an empty seconds field reads as NaN.
pub fn read_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Config("metrics CSV header mismatch".into()));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Config(format!("bad number `{s}` in metrics CSV")))
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Config(format!("bad metrics row `{line}`")));
            }
            Ok(EpochMetrics {
                epoch: f[0]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad epoch `{}`", f[0])))?,
                loss: num(f[1])?,
                train_acc: num(f[2])?,
                test_acc: if f[3].is_empty() {
                    None
                } else {
                    Some(num(f[3])?)
                },
                seconds: if f[4].is_empty() {
                    f64::NAN
                } else {
                    num(f[4])?
                },
            })
        })
        .collect()
}
