//! Central-difference verification of tape gradients.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Per-tensor outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

/// Options for [`gradient_report`].
#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Double the gradient flowing into this leaf (used to prove the check bites).
    pub sabotage: Option<String>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            sabotage: None,
        }
    }
}

fn scalar<'t, F>(
    f: &F,
    tape: &'t Tape,
    names: &[String],
    params: &[Arc<Tensor>],
) -> Result<(Var<'t>, Vec<Var<'t>>)>
where
    F: for<'s> Fn(&'s Tape, &[Var<'s>]) -> Result<Var<'s>>,
{
    let vars: Vec<Var<'t>> = names
        .iter()
        .zip(params)
        .map(|(n, p)| tape.param(n, Arc::clone(p)))
        .collect();
    let out = f(tape, &vars)?;
    if out.value().len() != 1 {
        return Err(Error::shape("gradient_check", &out.shape(), &[1]));
    }
    if !out.value().data()[0].is_finite() {
        return Err(Error::NonFinite {
            op: "gradient_check",
        });
    }
    Ok((out, vars))
}

fn value_at<F>(f: &F, names: &[String], params: &[Arc<Tensor>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let (out, _) = scalar(f, &tape, names, params)?;
    let v = out.value().data()[0];
    Ok(v)
}

/// Analytic gradient of `f` for every parameter tensor.
pub fn analytic_gradients<F>(
    f: &F,
    names: &[String],
    params: &[Arc<Tensor>],
    sabotage: Option<&str>,
) -> Result<Vec<Vec<f64>>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut tape = Tape::new();
    if let Some(s) = sabotage {
        tape = tape.with_doubled_leaf(s);
    }
    let (out, vars) = scalar(f, &tape, names, params)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            grads
                .get(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect())
}

/// Central differences `(f(x + h) - f(x - h)) / 2h` for every entry.
pub fn numerical_gradients<F>(
    f: &F,
    names: &[String],
    params: &mut [Arc<Tensor>],
    step: f64,
) -> Result<Vec<Vec<f64>>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Vec::with_capacity(params[pi].len());
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            Arc::make_mut(&mut params[pi]).data_mut()[e] = orig + step;
            let plus = value_at(f, names, params)?;
            Arc::make_mut(&mut params[pi]).data_mut()[e] = orig - step;
            let minus = value_at(f, names, params)?;
            Arc::make_mut(&mut params[pi]).data_mut()[e] = orig;
            g.push((plus - minus) / (2.0 * step));
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares analytic and central-difference gradients for named parameters.
pub fn gradient_report<F>(
    f: F,
    params: &[(String, Tensor)],
    options: &CheckOptions,
) -> Result<Vec<ParamCheck>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let mut values: Vec<Arc<Tensor>> = params.iter().map(|(_, t)| Arc::new(t.clone())).collect();
    let analytic = analytic_gradients(&f, &names, &values, options.sabotage.as_deref())?;
    let numeric = numerical_gradients(&f, &names, &mut values, options.step)?;
    Ok(names
        .into_iter()
        .zip(analytic.iter().zip(&numeric))
        .map(|(name, (a, n))| ParamCheck {
            name,
            entries: a.len(),
            max_rel_error: a
                .iter()
                .zip(n)
                .map(|(x, y)| relative_error(*x, *y))
                .fold(0.0, f64::max),
        })
        .collect())
}

/// Max relative error between analytic and central-difference gradients of
/// the scalar `f` over every entry of every parameter tensor.
pub fn gradient_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let named: Vec<(String, Tensor)> = params
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("p{i}"), t.clone()))
        .collect();
    let opts = CheckOptions {
        step,
        sabotage: None,
    };
    let report = gradient_report(f, &named, &opts)?;
    Ok(report.iter().map(|c| c.max_rel_error).fold(0.0, f64::max))
}
