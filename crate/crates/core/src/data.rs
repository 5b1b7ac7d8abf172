//! Paired-embedding datasets: a synthetic generator with controllable noise
//! and modality heterogeneity, the binary embedding file format, and
//! stratified splitting.
//!
//! # Embedding file layout
//!
//! All integers and floats are little-endian.
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 8  | magic `SIMFEMB\0` |
//! | 8  | 4  | format version (`u32`, currently 1) |
//! | 12 | 4  | channel width `d` (`u32`) |
//! | 16 | 4  | text tokens `L_text` (`u32`) |
//! | 20 | 4  | image tokens `L_image` (`u32`) |
//! | 24 | 4  | class count (`u32`) |
//! | 28 | 8  | sample count (`u64`) |
//! | 36 | 16 | PRNG id, ASCII, NUL padded |
//!
//! Each of the `sample count` records that follow is
//! `label: u32, text_rows: u32, image_rows: u32, width: u32`, then
//! `text_rows * width` text values and `image_rows * width` image values as
//! `f64`, row-major. A JSON sidecar at `<path>.json` carries provenance.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::numerics::Tensor;
use crate::polymerizer::{Modality, ModalityFeatures};

pub const MAGIC: &[u8; 8] = b"SIMFEMB\0";
pub const FORMAT_VERSION: u32 = 1;
/// Generator behind [`generate`]: `rand_chacha::ChaCha8Rng` seeded with
/// `seed_from_u64`, normals from `rand_distr::StandardNormal`.
pub const PRNG_ID: &str = "chacha8";
const HEADER_LEN: usize = 52;

/// Synthetic corpus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    /// Tokens per modality.
    pub tokens: usize,
    /// Channel width `d`.
    pub width: usize,
    /// Latent width `k`; `width / 2` when unset.
    pub latent: Option<usize>,
    /// Probability that a token is replaced by pure noise.
    pub sigma_noise: f64,
    /// Probability that one modality carries a distractor class.
    pub rho_hetero: f64,
    /// Scale of the class centres in latent space.
    pub separation: f64,
    /// Per-sample latent spread around the class centre.
    pub spread: f64,
    /// Per-token additive noise on informative tokens.
    pub jitter: f64,
    /// Standard deviation of replaced (pure-noise) tokens.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 7,
            per_class: 100,
            tokens: 8,
            width: 64,
            latent: None,
            sigma_noise: 0.0,
            rho_hetero: 0.0,
            separation: 0.08,
            spread: 0.1,
            jitter: 0.1,
            noise_scale: 0.6,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn latent_width(&self) -> usize {
        self.latent.unwrap_or((self.width / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        frac("sigma_noise", self.sigma_noise)?;
        frac("rho_hetero", self.rho_hetero)?;
        if self.classes == 0 || self.per_class == 0 || self.tokens == 0 || self.width == 0 {
            return Err(Error::Config("synthetic extents must be positive".into()));
        }
        if self.latent == Some(0) {
            return Err(Error::Config("latent width must be positive".into()));
        }
        if self.rho_hetero > 0.0 && self.classes < 2 {
            return Err(Error::Config(
                "heterogeneity needs at least two classes".into(),
            ));
        }
        for (name, v) in [
            ("separation", self.separation),
            ("spread", self.spread),
            ("jitter", self.jitter),
            ("noise_scale", self.noise_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// How a synthetic sample was built.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Modality fed a distractor-class latent, and that class.
    pub distractor: Option<(Modality, usize)>,
    /// Number of pure-noise tokens in the text and image streams.
    pub noise_tokens: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub text: ModalityFeatures,
    pub image: ModalityFeatures,
    pub label: usize,
    pub provenance: Option<Provenance>,
}

impl Sample {
    pub fn new(text: Tensor, image: Tensor, label: usize) -> Result<Self> {
        Ok(Self {
            text: ModalityFeatures::new(Modality::Text, text)?,
            image: ModalityFeatures::new(Modality::Image, image)?,
            label,
            provenance: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic(SynthConfig),
    File(PathBuf),
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Full,
    Train,
    Test,
}

/// Extents shared by every sample of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extents {
    pub width: usize,
    pub text_tokens: usize,
    pub image_tokens: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub extents: Extents,
    pub source: Source,
    pub split: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.extents.classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    fn with_samples(&self, samples: Vec<Sample>, split: SplitTag) -> Self {
        Self {
            samples,
            extents: self.extents,
            source: self.source.clone(),
            split,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Builds a labeled synthetic corpus, class-major.
///
/// Each class owns a latent centre; a sample draws `z` around its centre and
/// every informative token of modality `m` is `A_m·z` plus jitter, with
/// `A_m` a fixed random `d × k` map per modality. With probability
/// `rho_hetero` one modality (coin flip) is instead built from a latent of a
/// different, uniformly chosen class. Finally every token is independently
/// replaced by isotropic noise with probability `sigma_noise`.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let (d, k, l) = (config.width, config.latent_width(), config.tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let centres: Vec<Vec<f64>> = (0..config.classes)
        .map(|_| {
            (0..k)
                .map(|_| config.separation * normal(&mut rng))
                .collect()
        })
        .collect();
    let map_scale = 1.0 / (k as f64).sqrt();
    let mut maps = Vec::with_capacity(2);
    for _ in 0..2 {
        let a: Vec<f64> = (0..d * k).map(|_| map_scale * normal(&mut rng)).collect();
        maps.push(a);
    }

    let latent = |class: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        centres[class]
            .iter()
            .map(|c| c + config.spread * normal(rng))
            .collect()
    };

    let mut samples = Vec::with_capacity(config.classes * config.per_class);
    for class in 0..config.classes {
        for _ in 0..config.per_class {
            let z = latent(class, &mut rng);
            let distractor = if rng.gen_bool(config.rho_hetero) {
                let m = if rng.gen_bool(0.5) {
                    Modality::Text
                } else {
                    Modality::Image
                };
                let other = (class + rng.gen_range(1..config.classes)) % config.classes;
                Some((m, other, latent(other, &mut rng)))
            } else {
                None
            };
            let mut noise_tokens = [0usize; 2];
            let mut streams = Vec::with_capacity(2);
            for (mi, modality) in [Modality::Text, Modality::Image].into_iter().enumerate() {
                let zm = match &distractor {
                    Some((m, _, zd)) if *m == modality => zd,
                    _ => &z,
                };
                let a = &maps[mi];
                let clean: Vec<f64> = (0..d)
                    .map(|r| (0..k).map(|c| a[r * k + c] * zm[c]).sum())
                    .collect();
                let mut data = Vec::with_capacity(l * d);
                for _ in 0..l {
                    if rng.gen_bool(config.sigma_noise) {
                        noise_tokens[mi] += 1;
                        data.extend((0..d).map(|_| config.noise_scale * normal(&mut rng)));
                    } else {
                        data.extend(clean.iter().map(|v| v + config.jitter * normal(&mut rng)));
                    }
                }
                streams.push(Tensor::matrix(l, d, data)?);
            }
            let image = streams.pop().expect("two streams");
            let text = streams.pop().expect("two streams");
            let mut s = Sample::new(text, image, class)?;
            s.provenance = Some(Provenance {
                distractor: distractor.map(|(m, c, _)| (m, c)),
                noise_tokens,
            });
            samples.push(s);
        }
    }
    Ok(Dataset {
        samples,
        extents: Extents {
            width: d,
            text_tokens: l,
            image_tokens: l,
            classes: config.classes,
        },
        source: Source::Synthetic(config.clone()),
        split: SplitTag::Full,
    })
}

/// Seeded stratified split into `(train, test)`.
///
/// The test size is `round(n * test_fraction)`; per-class quotas follow
/// largest remainders, and every class with at least two samples keeps at
/// least one sample on each side when the sizes allow it.
pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let n = dataset.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::Config(format!(
            "split of {n} samples at {test_fraction} leaves an empty side"
        )));
    }
    let counts = dataset.class_counts();
    let exact: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 * n_test as f64 / n as f64)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    let mut remaining = n_test - quota.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if quota[c] < counts[c] {
            quota[c] += 1;
            remaining -= 1;
        }
    }
    // keep each class present on both sides when feasible
    for c in 0..counts.len() {
        if counts[c] < 2 {
            continue;
        }
        if quota[c] == 0 {
            if let Some(donor) = (0..counts.len())
                .filter(|&o| quota[o] > 1)
                .max_by_key(|&o| (quota[o], std::cmp::Reverse(o)))
            {
                quota[donor] -= 1;
                quota[c] += 1;
            }
        } else if quota[c] == counts[c] {
            if let Some(taker) = (0..counts.len())
                .filter(|&o| counts[o] - quota[o] > 1)
                .max_by_key(|&o| (counts[o] - quota[o], std::cmp::Reverse(o)))
            {
                quota[c] -= 1;
                quota[taker] += 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); counts.len()];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut test_idx = Vec::with_capacity(n_test);
    let mut train_idx = Vec::with_capacity(n - n_test);
    for (c, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut rng);
        test_idx.extend_from_slice(&idx[..quota[c]]);
        train_idx.extend_from_slice(&idx[quota[c]..]);
    }
    test_idx.shuffle(&mut rng);
    train_idx.shuffle(&mut rng);
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.samples[i].clone()).collect();
    Ok((
        dataset.with_samples(pick(&train_idx), SplitTag::Train),
        dataset.with_samples(pick(&test_idx), SplitTag::Test),
    ))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Provenance written next to an embedding file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub prng: String,
    pub samples: usize,
    pub extents: Extents,
    pub source: Source,
}

/// Writes the binary embedding file and its JSON sidecar.
pub fn save_embeddings(dataset: &Dataset, path: &Path) -> Result<()> {
    let ex = dataset.extents;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    for v in [ex.width, ex.text_tokens, ex.image_tokens, ex.classes] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    w.write_u64::<LittleEndian>(dataset.len() as u64)?;
    let mut prng = [0u8; 16];
    prng[..PRNG_ID.len()].copy_from_slice(PRNG_ID.as_bytes());
    w.write_all(&prng)?;
    for s in &dataset.samples {
        w.write_u32::<LittleEndian>(s.label as u32)?;
        w.write_u32::<LittleEndian>(s.text.len() as u32)?;
        w.write_u32::<LittleEndian>(s.image.len() as u32)?;
        w.write_u32::<LittleEndian>(s.text.width() as u32)?;
        for t in [s.text.tokens(), s.image.tokens()] {
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
    }
    w.flush()?;
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        prng: PRNG_ID.into(),
        samples: dataset.len(),
        extents: ex,
        source: dataset.source.clone(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

fn read_u32(r: &mut impl Read, record: Option<usize>) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(|e| eof(e, record))
}

fn eof(e: std::io::Error, record: Option<usize>) -> Error {
    match (e.kind(), record) {
        (std::io::ErrorKind::UnexpectedEof, Some(record)) => {
            FormatError::Truncated { record }.into()
        }
        (std::io::ErrorKind::UnexpectedEof, None) => {
            FormatError::MalformedHeader("file shorter than header".into()).into()
        }
        _ => e.into(),
    }
}

/// Parses an embedding file written by [`save_embeddings`] or an external tool.
pub fn load_embeddings(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_embeddings(&bytes, path)
}

fn parse_embeddings(bytes: &[u8], path: &Path) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(FormatError::BadMagic.into());
        }
        return Err(FormatError::MalformedHeader("file shorter than header".into()).into());
    }
    if &bytes[..8] != MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    let mut r = &bytes[8..];
    let version = read_u32(&mut r, None)?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let width = read_u32(&mut r, None)? as usize;
    let text_tokens = read_u32(&mut r, None)? as usize;
    let image_tokens = read_u32(&mut r, None)? as usize;
    let classes = read_u32(&mut r, None)? as usize;
    let count = r.read_u64::<LittleEndian>().map_err(|e| eof(e, None))? as usize;
    let mut prng = [0u8; 16];
    r.read_exact(&mut prng).map_err(|e| eof(e, None))?;
    if width == 0 || text_tokens == 0 || image_tokens == 0 || classes == 0 {
        return Err(FormatError::MalformedHeader(format!(
            "zero extent in header (d={width}, L_text={text_tokens}, L_image={image_tokens}, classes={classes})"
        ))
        .into());
    }
    let record_len = 16 + 8 * width * (text_tokens + image_tokens);
    let mut samples = Vec::with_capacity(count.min(r.len() / record_len));
    for record in 0..count {
        let label = read_u32(&mut r, Some(record))? as usize;
        let rows_t = read_u32(&mut r, Some(record))? as usize;
        let rows_i = read_u32(&mut r, Some(record))? as usize;
        let w = read_u32(&mut r, Some(record))? as usize;
        if [rows_t, rows_i, w] != [text_tokens, image_tokens, width] {
            return Err(FormatError::InconsistentShape {
                record,
                expected: [text_tokens, image_tokens, width],
                found: [rows_t, rows_i, w],
            }
            .into());
        }
        if label >= classes {
            return Err(FormatError::LabelOutOfRange {
                record,
                label,
                classes,
            }
            .into());
        }
        let mut read_matrix = |rows: usize| -> Result<Tensor> {
            let mut data = vec![0.0; rows * width];
            r.read_f64_into::<LittleEndian>(&mut data)
                .map_err(|e| eof(e, Some(record)))?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(FormatError::NonFinite { record }.into());
            }
            Tensor::matrix(rows, width, data)
        };
        let text = read_matrix(rows_t)?;
        let image = read_matrix(rows_i)?;
        samples.push(Sample::new(text, image, label)?);
    }
    if !r.is_empty() {
        return Err(FormatError::MalformedHeader(format!(
            "{} trailing bytes after {count} records",
            r.len()
        ))
        .into());
    }
    Ok(Dataset {
        samples,
        extents: Extents {
            width,
            text_tokens,
            image_tokens,
            classes,
        },
        source: Source::File(path.to_path_buf()),
        split: SplitTag::Full,
    })
}
