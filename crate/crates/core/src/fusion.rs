//! Fusion heads mapping two token streams to one classifier input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::{multi_head_attention, plain_ffn, FfnParams, Norm, Projections};
use crate::numerics::{concat_cols, concat_rows, Var};
use crate::params::{Bound, ParamSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Bidirectional cross-attention, pooled branches added.
    Sfm,
    /// Self-attention over the concatenated token sequences.
    MergeAttention,
    /// Two symmetric self → cross → feed-forward streams.
    CoAttention,
    /// Text stream only; the image tokens are skip-connected.
    AsymCoAttention,
    /// Pooled text followed by pooled image.
    Concat,
}

impl FusionKind {
    pub const ALL: [FusionKind; 5] = [
        FusionKind::Sfm,
        FusionKind::MergeAttention,
        FusionKind::CoAttention,
        FusionKind::AsymCoAttention,
        FusionKind::Concat,
    ];

    /// Width of the fused representation for channel width `d`.
    pub fn output_width(self, d: usize) -> usize {
        match self {
            FusionKind::Concat => 2 * d,
            _ => d,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Sfm => "sfm",
            FusionKind::MergeAttention => "merge_attention",
            FusionKind::CoAttention => "co_attention",
            FusionKind::AsymCoAttention => "asym_co_attention",
            FusionKind::Concat => "concat",
        }
    }

    pub fn specs(self, prefix: &str, d: usize, hidden: usize) -> Vec<ParamSpec> {
        match self {
            FusionKind::Sfm => {
                let mut s = Projections::specs(&format!("{prefix}.text"), d);
                s.extend(Projections::specs(&format!("{prefix}.image"), d));
                s.push(ParamSpec::weight(format!("{prefix}.text.wo"), d, d));
                s.push(ParamSpec::weight(format!("{prefix}.image.wo"), d, d));
                s
            }
            FusionKind::MergeAttention => AttentionBlock::specs(prefix, d, false),
            FusionKind::CoAttention => {
                let mut s = StreamParams::specs(&format!("{prefix}.text"), d, hidden);
                s.extend(StreamParams::specs(&format!("{prefix}.image"), d, hidden));
                s
            }
            FusionKind::AsymCoAttention => {
                StreamParams::specs(&format!("{prefix}.text"), d, hidden)
            }
            FusionKind::Concat => Vec::new(),
        }
    }
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion kind `{s}`")))
    }
}

fn check_widths(op: &'static str, text: Var<'_>, image: Var<'_>) -> Result<()> {
    let (ts, is) = (text.shape(), image.shape());
    if ts.len() != 2 || is.len() != 2 || ts[1] != is[1] {
        return Err(Error::shape(op, &ts, &is));
    }
    Ok(())
}

/// Cross-attention parameters of the default head.
#[derive(Clone, Copy, Debug)]
pub struct SfmParams<'t> {
    pub text: Projections<'t>,
    pub image: Projections<'t>,
    pub text_out: Var<'t>,
    pub image_out: Var<'t>,
}

impl<'t> SfmParams<'t> {
    pub fn bind(p: &Bound<'t>, prefix: &str) -> Result<Self> {
        Ok(Self {
            text: Projections::bind(p, &format!("{prefix}.text"))?,
            image: Projections::bind(p, &format!("{prefix}.image"))?,
            text_out: p.at(prefix, "text.wo")?,
            image_out: p.at(prefix, "image.wo")?,
        })
    }
}

/// `M_fuse = pool(CA(X_text)) + pool(CA(X_image))`.
///
/// `CA(X_text)` queries with text against image keys and values;
/// `CA(X_image)` the reverse.
pub fn sfm_fuse<'t>(
    text: Var<'t>,
    image: Var<'t>,
    params: &SfmParams<'t>,
    heads: usize,
) -> Result<Var<'t>> {
    check_widths("sfm_fuse", text, image)?;
    let ca_text = multi_head_attention(
        text.matmul(params.text.wq)?,
        image.matmul(params.image.wk)?,
        image.matmul(params.image.wv)?,
        heads,
        params.text_out,
    )?;
    let ca_image = multi_head_attention(
        image.matmul(params.image.wq)?,
        text.matmul(params.text.wk)?,
        text.matmul(params.text.wv)?,
        heads,
        params.image_out,
    )?;
    ca_text.mean_rows()?.add(ca_image.mean_rows()?)
}

/// Projections, output matrix and (optionally) the residual norm of one attention sublayer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionBlock<'t> {
    pub proj: Projections<'t>,
    pub w_out: Var<'t>,
    pub norm: Option<Norm<'t>>,
}

impl<'t> AttentionBlock<'t> {
    pub fn bind(p: &Bound<'t>, prefix: &str, residual: bool) -> Result<Self> {
        Ok(Self {
            proj: Projections::bind(p, prefix)?,
            w_out: p.at(prefix, "wo")?,
            norm: if residual {
                Some(Norm::bind(p, prefix)?)
            } else {
                None
            },
        })
    }

    pub fn specs(prefix: &str, d: usize, residual: bool) -> Vec<ParamSpec> {
        let mut s = Projections::specs(prefix, d);
        s.push(ParamSpec::weight(format!("{prefix}.wo"), d, d));
        if residual {
            s.extend(Norm::specs(prefix, d));
        }
        s
    }

    /// Attention with queries from `x` and keys/values from `context`,
    /// followed by `LayerNorm(x + ·)` when the block has a norm.
    pub fn apply(&self, x: Var<'t>, context: Var<'t>, heads: usize) -> Result<Var<'t>> {
        let att = multi_head_attention(
            x.matmul(self.proj.wq)?,
            context.matmul(self.proj.wk)?,
            context.matmul(self.proj.wv)?,
            heads,
            self.w_out,
        )?;
        match &self.norm {
            Some(n) => n.apply(x.add(att)?),
            None => Ok(att),
        }
    }
}

/// Self-attention over `[text; image]` then mean pooling.
pub fn merge_attention_fuse<'t>(
    text: Var<'t>,
    image: Var<'t>,
    params: &AttentionBlock<'t>,
    heads: usize,
) -> Result<Var<'t>> {
    check_widths("merge_attention_fuse", text, image)?;
    let x = concat_rows(&[text, image])?;
    params.apply(x, x, heads)?.mean_rows()
}

/// One co-attention stream: self-attention, cross-attention, feed-forward.
#[derive(Clone, Copy, Debug)]
pub struct StreamParams<'t> {
    pub self_attn: AttentionBlock<'t>,
    pub cross_attn: AttentionBlock<'t>,
    pub ffn: FfnParams<'t>,
}

impl<'t> StreamParams<'t> {
    pub fn bind(p: &Bound<'t>, prefix: &str) -> Result<Self> {
        Ok(Self {
            self_attn: AttentionBlock::bind(p, &format!("{prefix}.sa"), true)?,
            cross_attn: AttentionBlock::bind(p, &format!("{prefix}.ca"), true)?,
            ffn: FfnParams::bind(p, &format!("{prefix}.ffn"), false)?,
        })
    }

    pub fn specs(prefix: &str, d: usize, hidden: usize) -> Vec<ParamSpec> {
        let mut s = AttentionBlock::specs(&format!("{prefix}.sa"), d, true);
        s.extend(AttentionBlock::specs(&format!("{prefix}.ca"), d, true));
        s.extend(FfnParams::specs(&format!("{prefix}.ffn"), d, hidden, false));
        s
    }
}

/// Symmetric co-attention. Each stream self-attends, then cross-attends to
/// the other stream's self-attended tokens, then applies its feed-forward
/// block; the pooled streams are added.
pub fn co_attention_fuse<'t>(
    text: Var<'t>,
    image: Var<'t>,
    text_stream: &StreamParams<'t>,
    image_stream: &StreamParams<'t>,
    heads: usize,
) -> Result<Var<'t>> {
    check_widths("co_attention_fuse", text, image)?;
    let st = text_stream.self_attn.apply(text, text, heads)?;
    let si = image_stream.self_attn.apply(image, image, heads)?;
    let ct = text_stream.cross_attn.apply(st, si, heads)?;
    let ci = image_stream.cross_attn.apply(si, st, heads)?;
    let ft = plain_ffn(ct, &text_stream.ffn)?;
    let fi = plain_ffn(ci, &image_stream.ffn)?;
    ft.mean_rows()?.add(fi.mean_rows()?)
}

/// Asymmetric co-attention: the text stream cross-attends to the raw image
/// tokens, and the pooled raw image tokens are added on a skip path.
pub fn asym_co_attention_fuse<'t>(
    text: Var<'t>,
    image: Var<'t>,
    text_stream: &StreamParams<'t>,
    heads: usize,
) -> Result<Var<'t>> {
    check_widths("asym_co_attention_fuse", text, image)?;
    let st = text_stream.self_attn.apply(text, text, heads)?;
    let ct = text_stream.cross_attn.apply(st, image, heads)?;
    let ft = plain_ffn(ct, &text_stream.ffn)?;
    ft.mean_rows()?.add(image.mean_rows()?)
}

/// `[pool(text), pool(image)]`.
pub fn concat_fuse<'t>(text: Var<'t>, image: Var<'t>) -> Result<Var<'t>> {
    check_widths("concat_fuse", text, image)?;
    let d = text.shape()[1];
    let t = text.mean_rows()?.reshape(&[1, d])?;
    let i = image.mean_rows()?.reshape(&[1, d])?;
    concat_cols(&[t, i])?.reshape(&[2 * d])
}

/// Runs the head of `kind` with parameters under `prefix`.
pub fn fuse<'t>(
    kind: FusionKind,
    text: Var<'t>,
    image: Var<'t>,
    p: &Bound<'t>,
    prefix: &str,
    heads: usize,
) -> Result<Var<'t>> {
    match kind {
        FusionKind::Sfm => sfm_fuse(text, image, &SfmParams::bind(p, prefix)?, heads),
        FusionKind::MergeAttention => {
            merge_attention_fuse(text, image, &AttentionBlock::bind(p, prefix, false)?, heads)
        }
        FusionKind::CoAttention => co_attention_fuse(
            text,
            image,
            &StreamParams::bind(p, &format!("{prefix}.text"))?,
            &StreamParams::bind(p, &format!("{prefix}.image"))?,
            heads,
        ),
        FusionKind::AsymCoAttention => asym_co_attention_fuse(
            text,
            image,
            &StreamParams::bind(p, &format!("{prefix}.text"))?,
            heads,
        ),
        FusionKind::Concat => concat_fuse(text, image),
    }
}
