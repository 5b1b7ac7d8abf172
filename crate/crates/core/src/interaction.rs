//! Similarity-guided interaction: interpolation attention followed by the
//! similarity-aware feed-forward block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{concat_cols, Tensor, Var, LN_EPS};
use crate::params::{Bound, ParamSpec};
use crate::polymerizer::{polymerize, SimilarityGuidance};

/// Which modality receives the element-wise guided feed-forward block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnRole {
    #[default]
    TextWise,
    ImageWise,
}

/// Gain and bias of one layer norm.
#[derive(Clone, Copy, Debug)]
pub struct Norm<'t> {
    pub gain: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> Norm<'t> {
    pub fn bind(p: &Bound<'t>, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: p.at(prefix, "ln_g")?,
            bias: p.at(prefix, "ln_b")?,
        })
    }

    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(self.gain, self.bias, LN_EPS)
    }

    pub fn specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::gain(format!("{prefix}.ln_g"), d),
            ParamSpec::bias(format!("{prefix}.ln_b"), d),
        ]
    }
}

/// Query/key/value projection weights of one modality.
#[derive(Clone, Copy, Debug)]
pub struct Projections<'t> {
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
}

impl<'t> Projections<'t> {
    pub fn bind(p: &Bound<'t>, prefix: &str) -> Result<Self> {
        Ok(Self {
            wq: p.at(prefix, "wq")?,
            wk: p.at(prefix, "wk")?,
            wv: p.at(prefix, "wv")?,
        })
    }

    pub fn specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
        ["wq", "wk", "wv"]
            .iter()
            .map(|w| ParamSpec::weight(format!("{prefix}.{w}"), d, d))
            .collect()
    }
}

/// Projected queries, keys and values of one token matrix.
#[derive(Clone, Copy, Debug)]
pub struct Qkv<'t> {
    pub q: Var<'t>,
    pub k: Var<'t>,
    pub v: Var<'t>,
}

/// `Q = X·W^Q`, `K = X·W^K`, `V = X·W^V`.
pub fn project_qkv<'t>(x: Var<'t>, w: &Projections<'t>) -> Result<Qkv<'t>> {
    Ok(Qkv {
        q: x.matmul(w.wq)?,
        k: x.matmul(w.wk)?,
        v: x.matmul(w.wv)?,
    })
}

fn head_width(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "width {d} is not divisible by {heads} attention heads"
        )));
    }
    Ok(d / heads)
}

/// Per-head scaled dot-product attention, heads concatenated along columns
/// (before the output projection).
pub fn attention_heads<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || ks != vs || qs[1] != ks[1] {
        return Err(Error::shape("attention", &qs, &ks));
    }
    let dh = head_width(qs[1], heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let single = |q: Var<'t>, k: Var<'t>, v: Var<'t>| -> Result<Var<'t>> {
        q.matmul_t(k)?.scale(scale)?.softmax(1)?.matmul(v)
    };
    if heads == 1 {
        return single(q, k, v);
    }
    let outs = (0..heads)
        .map(|h| {
            let s = h * dh;
            single(
                q.slice_cols(s, dh)?,
                k.slice_cols(s, dh)?,
                v.slice_cols(s, dh)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    concat_cols(&outs)
}

/// `concat(head_1, …, head_h) · W_out`.
pub fn multi_head_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
    w_out: Var<'t>,
) -> Result<Var<'t>> {
    attention_heads(q, k, v, heads)?.matmul(w_out)
}

/// `CA ⊙ p_m + SA ⊙ (1 − p_m)` with `p_m` broadcast over rows.
pub fn interpolate_attention<'t>(ca: Var<'t>, sa: Var<'t>, p_m: Var<'t>) -> Result<Var<'t>> {
    let keep = p_m.scale(-1.0)?.add_scalar(1.0)?;
    ca.mul_row(p_m)?.add(sa.mul_row(keep)?)
}

/// Parameters of the interpolation attention stage.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams<'t> {
    pub text: Projections<'t>,
    pub image: Projections<'t>,
    /// Output projection of self-attention.
    pub w_self: Var<'t>,
    /// Output projection of cross-attention.
    pub w_cross: Var<'t>,
    pub text_norm: Norm<'t>,
    pub image_norm: Norm<'t>,
    pub heads: usize,
}

impl<'t> AttentionParams<'t> {
    pub fn bind(p: &Bound<'t>, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            text: Projections::bind(p, &format!("{prefix}.text"))?,
            image: Projections::bind(p, &format!("{prefix}.image"))?,
            w_self: p.at(prefix, "ws")?,
            w_cross: p.at(prefix, "wc")?,
            text_norm: Norm::bind(p, &format!("{prefix}.text"))?,
            image_norm: Norm::bind(p, &format!("{prefix}.image"))?,
            heads,
        })
    }

    pub fn specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
        let mut s = Vec::new();
        for m in ["text", "image"] {
            s.extend(Projections::specs(&format!("{prefix}.{m}"), d));
        }
        s.push(ParamSpec::weight(format!("{prefix}.ws"), d, d));
        s.push(ParamSpec::weight(format!("{prefix}.wc"), d, d));
        for m in ["text", "image"] {
            s.extend(Norm::specs(&format!("{prefix}.{m}"), d));
        }
        s
    }
}

/// Interpolation attention for both modalities.
///
/// Each branch self-attends over its own tokens and cross-attends with the
/// other modality's queries against its own keys and values; the two are
/// blended by `p_m` and passed through a residual layer norm. Returns
/// `(X_text^C, X_image^C)`.
pub fn coarse_block<'t>(
    text: Var<'t>,
    image: Var<'t>,
    p_m: Var<'t>,
    params: &AttentionParams<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let (ts, is) = (text.shape(), image.shape());
    if ts != is {
        // the residual on each branch needs the cross branch to keep its row count
        return Err(Error::shape("coarse_block", &ts, &is));
    }
    let t = project_qkv(text, &params.text)?;
    let i = project_qkv(image, &params.image)?;
    let h = params.heads;

    let sa_i = multi_head_attention(i.q, i.k, i.v, h, params.w_self)?;
    let ca_i = multi_head_attention(t.q, i.k, i.v, h, params.w_cross)?;
    let sa_t = multi_head_attention(t.q, t.k, t.v, h, params.w_self)?;
    let ca_t = multi_head_attention(i.q, t.k, t.v, h, params.w_cross)?;

    let x_i = interpolate_attention(ca_i, sa_i, p_m)?;
    let x_t = interpolate_attention(ca_t, sa_t, p_m)?;
    Ok((
        params.text_norm.apply(x_t.add(text)?)?,
        params.image_norm.apply(x_i.add(image)?)?,
    ))
}

/// Two-layer feed-forward block with an optional guidance input projection.
#[derive(Clone, Copy, Debug)]
pub struct FfnParams<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
    /// Projection of the similarity-weighted other-modality tokens.
    pub w3: Option<Var<'t>>,
    pub norm: Norm<'t>,
}

impl<'t> FfnParams<'t> {
    pub fn bind(p: &Bound<'t>, prefix: &str, guided: bool) -> Result<Self> {
        Ok(Self {
            w1: p.at(prefix, "w1")?,
            b1: p.at(prefix, "b1")?,
            w2: p.at(prefix, "w2")?,
            b2: p.at(prefix, "b2")?,
            w3: if guided {
                Some(p.at(prefix, "w3")?)
            } else {
                None
            },
            norm: Norm::bind(p, prefix)?,
        })
    }

    pub fn specs(prefix: &str, d: usize, hidden: usize, guided: bool) -> Vec<ParamSpec> {
        let mut s = vec![
            ParamSpec::weight(format!("{prefix}.w1"), d, hidden),
            ParamSpec::bias(format!("{prefix}.b1"), hidden),
            ParamSpec::weight(format!("{prefix}.w2"), hidden, d),
            ParamSpec::bias(format!("{prefix}.b2"), d),
        ];
        if guided {
            s.push(ParamSpec::weight(format!("{prefix}.w3"), d, hidden));
        }
        s.extend(Norm::specs(prefix, d));
        s
    }
}

/// `LayerNorm(ReLU(X·W1 + b1)·W2 + b2 + X)`.
pub fn plain_ffn<'t>(x: Var<'t>, params: &FfnParams<'t>) -> Result<Var<'t>> {
    let hidden = x.matmul(params.w1)?.add_row(params.b1)?.relu()?;
    let out = hidden.matmul(params.w2)?.add_row(params.b2)?;
    params.norm.apply(out.add(x)?)
}

/// Similarity-aware feed-forward block for the guided modality.
///
/// `X_inter = P^e · X_other`, then
/// `LayerNorm(ReLU(X_own·W1 + X_inter·W3 + b1)·W2 + b2 + X_own)`.
pub fn similarity_ffn<'t>(
    own: Var<'t>,
    other: Var<'t>,
    p_e: Var<'t>,
    params: &FfnParams<'t>,
) -> Result<Var<'t>> {
    let w3 = params
        .w3
        .ok_or_else(|| Error::Config("similarity_ffn needs a w3 projection".into()))?;
    let (os, ps) = (own.shape(), p_e.shape());
    if ps.len() != 2 || ps[0] != os[0] {
        return Err(Error::shape("similarity_ffn", &os, &ps));
    }
    let inter = p_e.matmul(other)?;
    let hidden = own
        .matmul(params.w1)?
        .add(inter.matmul(w3)?)?
        .add_row(params.b1)?
        .relu()?;
    let out = hidden.matmul(params.w2)?.add_row(params.b2)?;
    params.norm.apply(out.add(own)?)
}

/// All parameters of one interaction layer.
#[derive(Clone, Copy, Debug)]
pub struct SimParams<'t> {
    pub attention: AttentionParams<'t>,
    pub guided: FfnParams<'t>,
    pub plain: FfnParams<'t>,
}

impl<'t> SimParams<'t> {
    pub fn bind(p: &Bound<'t>, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            attention: AttentionParams::bind(p, prefix, heads)?,
            guided: FfnParams::bind(p, &format!("{prefix}.guided"), true)?,
            plain: FfnParams::bind(p, &format!("{prefix}.plain"), false)?,
        })
    }

    pub fn specs(prefix: &str, d: usize, hidden: usize) -> Vec<ParamSpec> {
        let mut s = AttentionParams::specs(prefix, d);
        s.extend(FfnParams::specs(
            &format!("{prefix}.guided"),
            d,
            hidden,
            true,
        ));
        s.extend(FfnParams::specs(
            &format!("{prefix}.plain"),
            d,
            hidden,
            false,
        ));
        s
    }
}

/// Knobs of one interaction layer that are not learned.
#[derive(Clone, Copy, Debug)]
pub struct SimOptions {
    pub role: FfnRole,
    pub temperature: f64,
    /// Replace `p_m` by this constant in every channel.
    pub mask_override: Option<f64>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            role: FfnRole::TextWise,
            temperature: 1.0,
            mask_override: None,
        }
    }
}

/// Output of one interaction layer: `(F_text^S, F_image^S)` and the guidance used.
pub struct SimOutput<'t> {
    pub text: Var<'t>,
    pub image: Var<'t>,
    pub guidance: SimilarityGuidance<'t>,
}

/// Polymerizer, interpolation attention and the feed-forward pair.
pub fn sim_layer<'t>(
    text: Var<'t>,
    image: Var<'t>,
    params: &SimParams<'t>,
    options: &SimOptions,
) -> Result<SimOutput<'t>> {
    let (guided_rows, other_rows) = match options.role {
        FfnRole::TextWise => (text, image),
        FfnRole::ImageWise => (image, text),
    };
    let guidance = polymerize(guided_rows, other_rows, options.temperature)?;
    let p_m = match options.mask_override {
        Some(c) => text.tape().leaf(Tensor::filled(&[text.shape()[1]], c)),
        None => guidance.p_m,
    };
    let (xt, xi) = coarse_block(text, image, p_m, &params.attention)?;
    let (text_out, image_out) = match options.role {
        FfnRole::TextWise => (
            similarity_ffn(xt, xi, guidance.p_e, &params.guided)?,
            plain_ffn(xi, &params.plain)?,
        ),
        FfnRole::ImageWise => (
            plain_ffn(xt, &params.plain)?,
            similarity_ffn(xi, xt, guidance.p_e, &params.guided)?,
        ),
    };
    Ok(SimOutput {
        text: text_out,
        image: image_out,
        guidance,
    })
}
