use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::Model;
use crate::numerics::Tensor;
use crate::params::ParamSet;
use crate::train::fused_representations;

/// Rows projected onto the top two principal components.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Unit principal axes, each with its largest-magnitude entry positive.
    pub axes: [Vec<f64>; 2],
    /// Eigenvalues of the covariance matrix, descending.
    pub spectrum: Vec<f64>,
}

impl Projection {
    /// Share of total variance captured by the two axes.
    pub fn explained_ratio(&self) -> f64 {
        let total: f64 = self.spectrum.iter().sum();
        if total <= 0.0 {
            return 1.0;
        }
        (self.spectrum[0] + self.spectrum.get(1).copied().unwrap_or(0.0)) / total
    }
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Centers `rows` (`n × p`, `n ≥ 2`, `p ≥ 2`) and projects them onto the two
/// leading eigenvectors of the sample covariance.
pub fn pca_2d(rows: &Tensor) -> Result<Projection> {
    let (n, p) = match rows.shape() {
        [n, p] => (*n, *p),
        s => return Err(Error::shape("pca", s, &[0, 0])),
    };
    if n < 2 {
        return Err(Error::Config(format!(
            "projection needs at least 2 samples, got {n}"
        )));
    }
    if p < 2 {
        return Err(Error::Config(format!(
            "projection needs at least 2 features, got {p}"
        )));
    }
    let mut mean = vec![0.0; p];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(rows.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, p, |i, j| rows.at(i, j) - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
            .then(a.cmp(&b))
    });
    let axis = |k: usize| {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        fix_sign(&mut v);
        v
    };
    let axes = [axis(0), axis(1)];
    let coords = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let dot = |a: &[f64]| row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            [dot(&axes[0]), dot(&axes[1])]
        })
        .collect();
    let spectrum = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    Ok(Projection {
        coords,
        axes,
        spectrum,
    })
}

/// Mean silhouette coefficient of labeled points under Euclidean distance.
///
/// Points in singleton clusters score 0. Needs at least two distinct labels.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::shape("silhouette", &[points.len()], &[labels.len()]));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; classes];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Config(
            "silhouette needs at least two clusters".into(),
        ));
    }
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let mut sums = vec![0.0; classes];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += dist(p, q);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..classes)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}

/// Fused representations of `dataset` projected to two dimensions.
pub fn project_representations(
    model: &Model,
    params: &ParamSet,
    dataset: &Dataset,
    exec: Exec,
) -> Result<Projection> {
    if dataset.len() < 2 {
        return Err(Error::Config(format!(
            "projection needs at least 2 samples, got {}",
            dataset.len()
        )));
    }
    let fused = fused_representations(model, params, dataset, exec)?;
    pca_2d(&fused)
}

/// Writes `x,y,label` rows.
pub fn write_projection_csv(projection: &Projection, labels: &[usize], path: &Path) -> Result<()> {
    if projection.coords.len() != labels.len() {
        return Err(Error::shape(
            "projection csv",
            &[projection.coords.len()],
            &[labels.len()],
        ));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "x,y,label")?;
    for (c, l) in projection.coords.iter().zip(labels) {
        writeln!(f, "{:?},{:?},{l}", c[0], c[1])?;
    }
    f.flush()?;
    Ok(())
}
