//! Modality-wise and element-wise similarity guidance between the two
//! token streams.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Text => Modality::Image,
            Modality::Image => Modality::Text,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
}

/// Token matrix of one modality together with its mean-pooled vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeatures {
    pub modality: Modality,
    tokens: Tensor,
    pooled: Tensor,
}

impl ModalityFeatures {
    pub fn new(modality: Modality, tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(Error::shape("modality features", tokens.shape(), &[0, 0]));
        }
        let (l, d) = (tokens.rows(), tokens.cols());
        let mut pooled = vec![0.0; d];
        for row in tokens.data().chunks_exact(d) {
            pooled.iter_mut().zip(row).for_each(|(p, v)| *p += v);
        }
        pooled.iter_mut().for_each(|p| *p /= l as f64);
        Ok(Self {
            modality,
            tokens,
            pooled: Tensor::vector(pooled)?,
        })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn pooled(&self) -> &Tensor {
        &self.pooled
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn into_tokens(self) -> Tensor {
        self.tokens
    }
}

/// Raw and normalized guidance for one text/image pair.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityGuidance<'t> {
    /// Channel-wise product of the pooled vectors (`d`).
    pub s_m: Var<'t>,
    /// Softmax of `s_m` over channels.
    pub p_m: Var<'t>,
    /// Token dot products, rows indexed by the guided modality (`L_a × L_b`).
    pub s_e: Var<'t>,
    /// Row-wise softmax of `s_e`.
    pub p_e: Var<'t>,
}

fn temper<'t>(s: Var<'t>, temperature: f64) -> Result<Var<'t>> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "similarity temperature must be > 0, got {temperature}"
        )));
    }
    if temperature == 1.0 {
        Ok(s)
    } else {
        s.scale(1.0 / temperature)
    }
}

/// `s_m = pooled_a ⊙ pooled_b`, `p_m = softmax(s_m / temperature)`.
pub fn modality_wise_similarity<'t>(
    pooled_a: Var<'t>,
    pooled_b: Var<'t>,
    temperature: f64,
) -> Result<(Var<'t>, Var<'t>)> {
    let (sa, sb) = (pooled_a.shape(), pooled_b.shape());
    if sa.len() != 1 || sa != sb {
        return Err(Error::shape("modality_wise_similarity", &sa, &sb));
    }
    let s_m = pooled_a.mul(pooled_b)?;
    let p_m = temper(s_m, temperature)?.softmax(0)?;
    Ok((s_m, p_m))
}

/// `s_e = tokens_a · tokens_bᵀ`, `p_e` its row-wise softmax.
pub fn element_wise_similarity<'t>(
    tokens_a: Var<'t>,
    tokens_b: Var<'t>,
    temperature: f64,
) -> Result<(Var<'t>, Var<'t>)> {
    let (sa, sb) = (tokens_a.shape(), tokens_b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::shape("element_wise_similarity", &sa, &sb));
    }
    let s_e = tokens_a.matmul_t(tokens_b)?;
    let p_e = temper(s_e, temperature)?.softmax(1)?;
    Ok((s_e, p_e))
}

/// Both guidance signals with `a` as the row (guided) modality.
pub fn polymerize<'t>(
    tokens_a: Var<'t>,
    tokens_b: Var<'t>,
    temperature: f64,
) -> Result<SimilarityGuidance<'t>> {
    let (s_m, p_m) =
        modality_wise_similarity(tokens_a.mean_rows()?, tokens_b.mean_rows()?, temperature)?;
    let (s_e, p_e) = element_wise_similarity(tokens_a, tokens_b, temperature)?;
    Ok(SimilarityGuidance { s_m, p_m, s_e, p_e })
}
