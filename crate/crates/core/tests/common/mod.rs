//! Plain `Vec<f64>` reference implementations, written without the tape.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simfuse::numerics::Tensor;
use simfuse::params::ParamSet;

#[derive(Clone, Debug, PartialEq)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub v: Vec<f64>,
}

impl M {
    pub fn new(r: usize, c: usize, v: Vec<f64>) -> Self {
        assert_eq!(v.len(), r * c);
        Self { r, c, v }
    }

    pub fn zeros(r: usize, c: usize) -> Self {
        Self::new(r, c, vec![0.0; r * c])
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        match t.shape() {
            [n] => Self::new(1, *n, t.data().to_vec()),
            [r, c] => Self::new(*r, *c, t.data().to_vec()),
            s => panic!("unsupported shape {s:?}"),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.r, self.c, self.v.clone()).unwrap()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.v[i * self.c..(i + 1) * self.c]
    }

    pub fn matmul(&self, o: &M) -> M {
        assert_eq!(self.c, o.r);
        let mut out = M::zeros(self.r, o.c);
        for i in 0..self.r {
            for j in 0..o.c {
                let mut s = 0.0;
                for k in 0..self.c {
                    s += self.get(i, k) * o.get(k, j);
                }
                out.v[i * o.c + j] = s;
            }
        }
        out
    }

    pub fn t(&self) -> M {
        let mut out = M::zeros(self.c, self.r);
        for i in 0..self.r {
            for j in 0..self.c {
                out.v[j * self.r + i] = self.get(i, j);
            }
        }
        out
    }

    pub fn add(&self, o: &M) -> M {
        assert_eq!((self.r, self.c), (o.r, o.c));
        M::new(
            self.r,
            self.c,
            self.v.iter().zip(&o.v).map(|(a, b)| a + b).collect(),
        )
    }

    /// Adds a length-`c` vector to every row.
    pub fn add_row(&self, b: &[f64]) -> M {
        assert_eq!(b.len(), self.c);
        let mut out = self.clone();
        for i in 0..self.r {
            for j in 0..self.c {
                out.v[i * self.c + j] += b[j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> M {
        M::new(self.r, self.c, self.v.iter().map(|&x| f(x)).collect())
    }

    pub fn relu(&self) -> M {
        self.map(|x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn cols(&self, start: usize, width: usize) -> M {
        let mut v = Vec::new();
        for i in 0..self.r {
            v.extend_from_slice(&self.row(i)[start..start + width]);
        }
        M::new(self.r, width, v)
    }

    pub fn hcat(parts: &[M]) -> M {
        let r = parts[0].r;
        let c = parts.iter().map(|p| p.c).sum();
        let mut v = Vec::new();
        for i in 0..r {
            for p in parts {
                v.extend_from_slice(p.row(i));
            }
        }
        M::new(r, c, v)
    }

    pub fn vcat(parts: &[M]) -> M {
        let c = parts[0].c;
        let mut v = Vec::new();
        for p in parts {
            assert_eq!(p.c, c);
            v.extend_from_slice(&p.v);
        }
        M::new(v.len() / c, c, v)
    }

    pub fn mean_rows(&self) -> Vec<f64> {
        (0..self.c)
            .map(|j| (0..self.r).map(|i| self.get(i, j)).sum::<f64>() / self.r as f64)
            .collect()
    }

    pub fn max_abs_diff(&self, o: &M) -> f64 {
        assert_eq!((self.r, self.c), (o.r, o.c));
        self.v
            .iter()
            .zip(&o.v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn softmax_rows(x: &M) -> M {
    let mut v = Vec::new();
    for i in 0..x.r {
        v.extend(softmax(x.row(i)));
    }
    M::new(x.r, x.c, v)
}

pub fn layer_norm(x: &M, g: &[f64], b: &[f64]) -> M {
    let eps = 1e-5;
    let mut v = Vec::new();
    for i in 0..x.r {
        let row = x.row(i);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        for (j, a) in row.iter().enumerate() {
            v.push(g[j] * (a - mean) / (var + eps).sqrt() + b[j]);
        }
    }
    M::new(x.r, x.c, v)
}

/// Brute-force per-head loop: scores scaled by the per-head width.
pub fn attention(q: &M, k: &M, v: &M, heads: usize, w_out: &M) -> M {
    let d = q.c;
    let dh = d / heads;
    let mut out = M::zeros(q.r, d);
    for h in 0..heads {
        for i in 0..q.r {
            let scores: Vec<f64> = (0..k.r)
                .map(|j| {
                    (0..dh)
                        .map(|t| q.get(i, h * dh + t) * k.get(j, h * dh + t))
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let w = softmax(&scores);
            for t in 0..dh {
                out.v[i * d + h * dh + t] = (0..k.r).map(|j| w[j] * v.get(j, h * dh + t)).sum();
            }
        }
    }
    out.matmul(w_out)
}

/// Parameter lookup in oracle form.
pub struct P<'a>(pub &'a ParamSet);

impl P<'_> {
    pub fn m(&self, name: &str) -> M {
        M::from_tensor(self.0.get(name).unwrap_or_else(|| panic!("missing {name}")))
    }

    pub fn vec(&self, name: &str) -> Vec<f64> {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("missing {name}"))
            .data()
            .to_vec()
    }

    pub fn ln(&self, x: &M, prefix: &str) -> M {
        layer_norm(
            x,
            &self.vec(&format!("{prefix}.ln_g")),
            &self.vec(&format!("{prefix}.ln_b")),
        )
    }

    /// Attention with queries from `x` and keys/values from `ctx`, all under `prefix`.
    pub fn attend(&self, x: &M, ctx: &M, prefix: &str, wo: &str, heads: usize) -> M {
        attention(
            &x.matmul(&self.m(&format!("{prefix}.wq"))),
            &ctx.matmul(&self.m(&format!("{prefix}.wk"))),
            &ctx.matmul(&self.m(&format!("{prefix}.wv"))),
            heads,
            &self.m(wo),
        )
    }

    pub fn plain_ffn(&self, x: &M, prefix: &str) -> M {
        let h = x
            .matmul(&self.m(&format!("{prefix}.w1")))
            .add_row(&self.vec(&format!("{prefix}.b1")))
            .relu();
        let out = h
            .matmul(&self.m(&format!("{prefix}.w2")))
            .add_row(&self.vec(&format!("{prefix}.b2")));
        self.ln(&out.add(x), prefix)
    }

    pub fn guided_ffn(&self, own: &M, other: &M, p_e: &M, prefix: &str) -> M {
        let inter = p_e.matmul(other);
        let h = own
            .matmul(&self.m(&format!("{prefix}.w1")))
            .add(&inter.matmul(&self.m(&format!("{prefix}.w3"))))
            .add_row(&self.vec(&format!("{prefix}.b1")))
            .relu();
        let out = h
            .matmul(&self.m(&format!("{prefix}.w2")))
            .add_row(&self.vec(&format!("{prefix}.b2")));
        self.ln(&out.add(own), prefix)
    }
}

pub struct Guidance {
    pub p_m: Vec<f64>,
    pub p_e: M,
}

pub fn guidance(a: &M, b: &M) -> Guidance {
    let s_m: Vec<f64> = a
        .mean_rows()
        .iter()
        .zip(b.mean_rows())
        .map(|(x, y)| x * y)
        .collect();
    Guidance {
        p_m: softmax(&s_m),
        p_e: softmax_rows(&a.matmul(&b.t())),
    }
}

fn blend(ca: &M, sa: &M, p: &[f64]) -> M {
    let mut out = ca.clone();
    for i in 0..ca.r {
        for j in 0..ca.c {
            out.v[i * ca.c + j] = ca.get(i, j) * p[j] + sa.get(i, j) * (1.0 - p[j]);
        }
    }
    out
}

/// One interaction layer. `text_wise` selects which stream gets the guided block.
pub fn sim_layer(
    p: &P,
    prefix: &str,
    text: &M,
    image: &M,
    heads: usize,
    text_wise: bool,
) -> (M, M) {
    let g = if text_wise {
        guidance(text, image)
    } else {
        guidance(image, text)
    };
    let ws = format!("{prefix}.ws");
    let wc = format!("{prefix}.wc");
    let (pt, pi) = (format!("{prefix}.text"), format!("{prefix}.image"));
    let q_t = text.matmul(&p.m(&format!("{pt}.wq")));
    let q_i = image.matmul(&p.m(&format!("{pi}.wq")));
    let kv = |x: &M, m: &str| {
        (
            x.matmul(&p.m(&format!("{m}.wk"))),
            x.matmul(&p.m(&format!("{m}.wv"))),
        )
    };
    let (k_t, v_t) = kv(text, &pt);
    let (k_i, v_i) = kv(image, &pi);
    let sa_t = attention(&q_t, &k_t, &v_t, heads, &p.m(&ws));
    let ca_t = attention(&q_i, &k_t, &v_t, heads, &p.m(&wc));
    let sa_i = attention(&q_i, &k_i, &v_i, heads, &p.m(&ws));
    let ca_i = attention(&q_t, &k_i, &v_i, heads, &p.m(&wc));
    let xt = p.ln(&blend(&ca_t, &sa_t, &g.p_m).add(text), &pt);
    let xi = p.ln(&blend(&ca_i, &sa_i, &g.p_m).add(image), &pi);
    let (guided, plain) = (format!("{prefix}.guided"), format!("{prefix}.plain"));
    if text_wise {
        (
            p.guided_ffn(&xt, &xi, &g.p_e, &guided),
            p.plain_ffn(&xi, &plain),
        )
    } else {
        (
            p.plain_ffn(&xt, &plain),
            p.guided_ffn(&xi, &xt, &g.p_e, &guided),
        )
    }
}

pub fn sfm(p: &P, text: &M, image: &M, heads: usize) -> Vec<f64> {
    let ct = attention(
        &text.matmul(&p.m("fuse.text.wq")),
        &image.matmul(&p.m("fuse.image.wk")),
        &image.matmul(&p.m("fuse.image.wv")),
        heads,
        &p.m("fuse.text.wo"),
    );
    let ci = attention(
        &image.matmul(&p.m("fuse.image.wq")),
        &text.matmul(&p.m("fuse.text.wk")),
        &text.matmul(&p.m("fuse.text.wv")),
        heads,
        &p.m("fuse.image.wo"),
    );
    ct.mean_rows()
        .iter()
        .zip(ci.mean_rows())
        .map(|(a, b)| a + b)
        .collect()
}

fn block(p: &P, x: &M, ctx: &M, prefix: &str, heads: usize) -> M {
    let att = p.attend(x, ctx, prefix, &format!("{prefix}.wo"), heads);
    p.ln(&x.add(&att), prefix)
}

pub fn merge(p: &P, text: &M, image: &M, heads: usize) -> Vec<f64> {
    let x = M::vcat(&[text.clone(), image.clone()]);
    p.attend(&x, &x, "fuse", "fuse.wo", heads).mean_rows()
}

pub fn co_attention(p: &P, text: &M, image: &M, heads: usize) -> Vec<f64> {
    let st = block(p, text, text, "fuse.text.sa", heads);
    let si = block(p, image, image, "fuse.image.sa", heads);
    let ct = block(p, &st, &si, "fuse.text.ca", heads);
    let ci = block(p, &si, &st, "fuse.image.ca", heads);
    let ft = p.plain_ffn(&ct, "fuse.text.ffn").mean_rows();
    let fi = p.plain_ffn(&ci, "fuse.image.ffn").mean_rows();
    ft.iter().zip(fi).map(|(a, b)| a + b).collect()
}

pub fn asym(p: &P, text: &M, image: &M, heads: usize) -> Vec<f64> {
    let st = block(p, text, text, "fuse.text.sa", heads);
    let ct = block(p, &st, image, "fuse.text.ca", heads);
    let ft = p.plain_ffn(&ct, "fuse.text.ffn").mean_rows();
    ft.iter()
        .zip(image.mean_rows())
        .map(|(a, b)| a + b)
        .collect()
}

pub fn concat(text: &M, image: &M) -> Vec<f64> {
    let mut v = text.mean_rows();
    v.extend(image.mean_rows());
    v
}

pub fn classifier(p: &P, fused: &[f64], layers: usize) -> Vec<f64> {
    let mut x = M::new(1, fused.len(), fused.to_vec());
    for k in 0..layers {
        x = x
            .matmul(&p.m(&format!("cls.l{k}.w")))
            .add_row(&p.vec(&format!("cls.l{k}.b")));
        if k + 1 < layers {
            x = x.relu();
        }
    }
    softmax(&x.v)
}

pub fn random_m(r: usize, c: usize, scale: f64, rng: &mut ChaCha8Rng) -> M {
    M::new(
        r,
        c,
        (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Replaces every parameter (gains and biases included) with uniform noise,
/// so that oracle comparisons do not lean on the ones/zeros initialization.
pub fn jitter_params(params: &mut ParamSet, seed: u64) {
    let mut r = rng(seed);
    for (_, t) in params.iter_mut() {
        for x in t.data_mut() {
            *x += r.gen_range(-0.3..0.3);
        }
    }
}
