//! Multimodal dataset model, the on-disk dataset directory format, the
//! `concat` modality, the synthetic noisy-data generator and minibatching.
//!
//! A dataset directory contains:
//!
//! * `manifest.json` with the version tag, sample count, class names,
//!   modality descriptors and presence flags,
//! * `features_<name>.f32`, one per modality, `N x dim` row-major
//!   little-endian `f32`,
//! * `metadata.jsonl` (optional), one JSON string (or `null`) per sample,
//! * `labels.jsonl` (optional), pseudo labels, see [`crate::pseudolabel`],
//! * `ground_truth.u8` (optional), `N x C` bytes in `{0, 1}`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::pseudolabel::{self, PseudoLabelMatrix};

pub const DATASET_VERSION: &str = "webly-mmco/1";
pub const CONCAT: &str = "concat";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModalityRole {
    /// Available while training only (e.g. metadata-derived features).
    TrainOnly,
    TrainAndTest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDescriptor {
    pub name: String,
    pub dim: usize,
    pub role: ModalityRole,
}

impl ModalityDescriptor {
    pub fn new(name: impl Into<String>, dim: usize, role: ModalityRole) -> Self {
        ModalityDescriptor {
            name: name.into(),
            dim,
            role,
        }
    }
}

/// `N x C` binary class membership, used by evaluation only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    n_classes: usize,
    data: Vec<u8>,
}

impl GroundTruth {
    pub fn new(n_samples: usize, n_classes: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n_samples * n_classes {
            return Err(Error::argument(format!(
                "ground truth has {} entries, expected {}x{}",
                data.len(),
                n_samples,
                n_classes
            )));
        }
        if let Some(i) = data.iter().position(|&b| b > 1) {
            return Err(Error::argument(format!(
                "ground truth entry {} is {}, expected 0 or 1",
                i, data[i]
            )));
        }
        Ok(GroundTruth { n_classes, data })
    }

    pub fn zeros(n_samples: usize, n_classes: usize) -> Self {
        GroundTruth {
            n_classes,
            data: vec![0; n_samples * n_classes],
        }
    }

    pub fn n_samples(&self) -> usize {
        self.data.len().checked_div(self.n_classes).unwrap_or(0)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    #[inline]
    pub fn is_member(&self, n: usize, c: usize) -> bool {
        self.data[n * self.n_classes + c] == 1
    }

    pub(crate) fn set(&mut self, n: usize, c: usize, member: bool) {
        self.data[n * self.n_classes + c] = member as u8;
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    /// Relevance column for class `c`.
    pub fn class_column(&self, c: usize) -> Vec<bool> {
        (0..self.n_samples()).map(|n| self.is_member(n, c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalDataset {
    pub meta: Vec<ModalityDescriptor>,
    pub features: Vec<Matrix>,
    /// Per-sample metadata text; `None` entries are samples without a record.
    pub metadata: Option<Vec<Option<String>>>,
    pub ground_truth: Option<GroundTruth>,
    pub class_names: Vec<String>,
    pub labels: Option<PseudoLabelMatrix>,
}

impl MultimodalDataset {
    pub fn n_samples(&self) -> usize {
        self.features.first().map_or(0, |f| f.rows())
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.meta.iter().position(|m| m.name == name)
    }

    pub fn modality(&self, name: &str) -> Result<(&ModalityDescriptor, &Matrix)> {
        let i = self
            .modality_index(name)
            .ok_or_else(|| Error::argument(format!("unknown modality `{name}`")))?;
        Ok((&self.meta[i], &self.features[i]))
    }

    pub fn modality_names(&self) -> Vec<&str> {
        self.meta.iter().map(|m| m.name.as_str()).collect()
    }

    /// Modalities available at test time, excluding an existing concat.
    pub fn content_modality_names(&self) -> Vec<&str> {
        self.meta
            .iter()
            .filter(|m| m.role == ModalityRole::TrainAndTest && m.name != CONCAT)
            .map(|m| m.name.as_str())
            .collect()
    }

    /// Checks every structural invariant of the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.meta.len() != self.features.len() {
            return Err(Error::argument(format!(
                "{} modality descriptors but {} feature matrices",
                self.meta.len(),
                self.features.len()
            )));
        }
        let mut seen = HashSet::new();
        for m in &self.meta {
            if m.dim == 0 {
                return Err(Error::argument(format!("modality `{}` has dim 0", m.name)));
            }
            if !seen.insert(m.name.as_str()) {
                return Err(Error::argument(format!("duplicate modality `{}`", m.name)));
            }
        }
        if !self.meta.is_empty() && !self.meta.iter().any(|m| m.role == ModalityRole::TrainAndTest) {
            return Err(Error::argument("no train-and-test modality"));
        }
        let n = self.n_samples();
        for (m, f) in self.meta.iter().zip(&self.features) {
            if f.rows() != n {
                return Err(Error::argument(format!(
                    "modality `{}` has {} rows, expected {}",
                    m.name,
                    f.rows(),
                    n
                )));
            }
            if f.cols() != m.dim {
                return Err(Error::argument(format!(
                    "modality `{}` has {} columns, declared dim {}",
                    m.name,
                    f.cols(),
                    m.dim
                )));
            }
            if let Some(pos) = f.as_slice().iter().position(|v| !v.is_finite()) {
                return Err(Error::argument(format!(
                    "modality `{}` has a non-finite value at sample {}",
                    m.name,
                    pos / m.dim
                )));
            }
        }
        if let Some(md) = &self.metadata {
            if md.len() != n {
                return Err(Error::argument(format!(
                    "{} metadata records for {} samples",
                    md.len(),
                    n
                )));
            }
        }
        if let Some(gt) = &self.ground_truth {
            if gt.n_classes() != self.n_classes() || gt.as_bytes().len() != n * self.n_classes() {
                return Err(Error::argument("ground truth shape does not match N x C"));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.n_samples() != n || labels.n_classes() != self.n_classes() {
                return Err(Error::argument("pseudo-label shape does not match N x C"));
            }
            labels.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: String,
    n_samples: usize,
    class_names: Vec<String>,
    modalities: Vec<ModalityDescriptor>,
    has_metadata: bool,
    has_ground_truth: bool,
    #[serde(default)]
    has_labels: bool,
}

fn feature_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("features_{name}.f32"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Writes `d` into directory `path`, creating it if needed.
///
/// Features are stored as `f32`; values that are not exactly representable
/// in single precision are rounded.
pub fn save_dataset(d: &MultimodalDataset, path: &Path) -> Result<()> {
    d.validate()?;
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let manifest = Manifest {
        version: DATASET_VERSION.to_string(),
        n_samples: d.n_samples(),
        class_names: d.class_names.clone(),
        modalities: d.meta.clone(),
        has_metadata: d.metadata.is_some(),
        has_ground_truth: d.ground_truth.is_some(),
        has_labels: d.labels.is_some(),
    };
    let manifest_path = path.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;

    for (m, f) in d.meta.iter().zip(&d.features) {
        let p = feature_file(path, &m.name);
        let mut bytes = Vec::with_capacity(f.as_slice().len() * 4);
        for &v in f.as_slice() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }

    let md_path = path.join("metadata.jsonl");
    match &d.metadata {
        Some(md) => {
            let file = fs::File::create(&md_path).map_err(|e| Error::io(&md_path, e))?;
            let mut w = BufWriter::new(file);
            for text in md {
                let line = serde_json::to_string(text).expect("string serializes");
                writeln!(w, "{line}").map_err(|e| Error::io(&md_path, e))?;
            }
            w.flush().map_err(|e| Error::io(&md_path, e))?;
        }
        None => remove_if_exists(&md_path)?,
    }

    let labels_path = path.join("labels.jsonl");
    match &d.labels {
        Some(labels) => pseudolabel::write_labels_jsonl(labels, &d.class_names, &labels_path)?,
        None => remove_if_exists(&labels_path)?,
    }

    let gt_path = path.join("ground_truth.u8");
    match &d.ground_truth {
        Some(gt) => fs::write(&gt_path, gt.as_bytes()).map_err(|e| Error::io(&gt_path, e))?,
        None => remove_if_exists(&gt_path)?,
    }
    Ok(())
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn load_dataset(path: &Path) -> Result<MultimodalDataset> {
    let manifest_path = path.join("manifest.json");
    let text = read_file(&manifest_path)?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported version `{}`", manifest.version),
        ));
    }
    let n = manifest.n_samples;
    let n_classes = manifest.class_names.len();

    let mut features = Vec::with_capacity(manifest.modalities.len());
    for m in &manifest.modalities {
        if m.dim == 0 {
            return Err(Error::format(
                &manifest_path,
                format!("modality `{}` has dim 0", m.name),
            ));
        }
        let p = feature_file(path, &m.name);
        let bytes = read_file(&p)?;
        let row_bytes = m.dim * 4;
        if bytes.len() % row_bytes != 0 {
            return Err(Error::format(
                &p,
                format!("{} bytes is not a whole number of rows of dim {}", bytes.len(), m.dim),
            ));
        }
        let rows = bytes.len() / row_bytes;
        if rows != n {
            return Err(Error::format(
                &p,
                format!("row count {rows} does not match manifest count {n}"),
            ));
        }
        let mut data = Vec::with_capacity(n * m.dim);
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(&p, format!("non-finite value at sample {}", i / m.dim)));
            }
            data.push(v as f64);
        }
        features.push(Matrix::from_vec(n, m.dim, data));
    }

    let metadata = if manifest.has_metadata {
        let p = path.join("metadata.jsonl");
        let file = fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
        let mut out = Vec::with_capacity(n);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&p, e))?;
            let text: Option<String> =
                serde_json::from_str(&line).map_err(|e| Error::format(&p, format!("line {}: {e}", i + 1)))?;
            out.push(text);
        }
        if out.len() != n {
            return Err(Error::format(
                &p,
                format!("row count {} does not match manifest count {n}", out.len()),
            ));
        }
        Some(out)
    } else {
        None
    };

    let labels = if manifest.has_labels {
        let p = path.join("labels.jsonl");
        Some(pseudolabel::read_labels_jsonl(&p, n, &manifest.class_names)?)
    } else {
        None
    };

    let ground_truth = if manifest.has_ground_truth {
        let p = path.join("ground_truth.u8");
        let bytes = read_file(&p)?;
        if bytes.len() != n * n_classes {
            return Err(Error::format(
                &p,
                format!("{} bytes, expected {}x{}", bytes.len(), n, n_classes),
            ));
        }
        Some(GroundTruth::new(n, n_classes, bytes).map_err(|e| Error::format(&p, e.to_string()))?)
    } else {
        None
    };

    let d = MultimodalDataset {
        meta: manifest.modalities,
        features,
        metadata,
        ground_truth,
        class_names: manifest.class_names,
        labels,
    };
    d.validate().map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    Ok(d)
}

/// Returns a copy of `d` with an extra modality named `concat` whose rows are
/// the concatenation of the `members` rows, in the order given.
pub fn make_concat_modality(d: &MultimodalDataset, members: &[&str]) -> Result<MultimodalDataset> {
    if members.is_empty() {
        return Err(Error::argument("concat needs at least one member modality"));
    }
    if d.modality_index(CONCAT).is_some() {
        return Err(Error::argument("dataset already has a `concat` modality"));
    }
    let mut idx = Vec::with_capacity(members.len());
    for &name in members {
        let i = d
            .modality_index(name)
            .ok_or_else(|| Error::argument(format!("unknown modality `{name}`")))?;
        idx.push(i);
    }
    let dim: usize = idx.iter().map(|&i| d.meta[i].dim).sum();
    let n = d.n_samples();
    let mut data = Vec::with_capacity(n * dim);
    for row in 0..n {
        for &i in &idx {
            data.extend_from_slice(d.features[i].row(row));
        }
    }
    let role = if idx.iter().all(|&i| d.meta[i].role == ModalityRole::TrainAndTest) {
        ModalityRole::TrainAndTest
    } else {
        ModalityRole::TrainOnly
    };
    let mut out = d.clone();
    out.meta.push(ModalityDescriptor::new(CONCAT, dim, role));
    out.features.push(Matrix::from_vec(n, dim, data));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub n_background: usize,
    pub modality_dims: Vec<usize>,
    /// Fraction of false positives among the positive-labeled samples of a class.
    pub noise_level: f64,
    /// Fraction of true positives replaced by a background draw in one modality.
    pub hard_fraction: f64,
    pub class_separation: f64,
    /// Number of trailing modalities marked train-only.
    pub train_only_modalities: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 5,
            n_per_class: 500,
            n_background: 2500,
            modality_dims: vec![16, 16, 16],
            noise_level: 0.5,
            hard_fraction: 0.3,
            class_separation: 3.0,
            train_only_modalities: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::config("n_classes must be positive"));
        }
        if self.n_per_class == 0 {
            return Err(Error::config("n_per_class must be positive"));
        }
        if self.modality_dims.is_empty() || self.modality_dims.contains(&0) {
            return Err(Error::config("modality_dims must be nonempty and all positive"));
        }
        if !(0.0..1.0).contains(&self.noise_level) {
            return Err(Error::config(format!(
                "noise_level must be in [0, 1), got {}",
                self.noise_level
            )));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(Error::config(format!(
                "hard_fraction must be in [0, 1], got {}",
                self.hard_fraction
            )));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::config("class_separation must be positive and finite"));
        }
        if self.train_only_modalities >= self.modality_dims.len() {
            return Err(Error::config("at least one modality must be train-and-test"));
        }
        Ok(())
    }

    /// Number of false positives emitted per class.
    pub fn false_positives_per_class(&self) -> usize {
        floor_fraction(self.noise_level, self.n_per_class)
    }

    pub fn modality_names(&self) -> Vec<String> {
        (0..self.modality_dims.len()).map(|m| format!("m{m}")).collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes).map(|c| format!("concept{c}")).collect()
    }
}

/// `floor(fraction * n)`, tolerant of representation error in `fraction`.
fn floor_fraction(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// How a synthetic sample was generated. Evaluation-only bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleOrigin {
    TruePositive {
        class: usize,
        /// Modality replaced by a background draw, for hard examples.
        hard_modality: Option<usize>,
    },
    FalsePositive {
        class: usize,
    },
    Background,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub dataset: MultimodalDataset,
    pub origins: Vec<SampleOrigin>,
    /// Per class and modality, the cluster mean of true positives.
    pub class_means: Vec<Vec<Vec<f64>>>,
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Generates a noisy pseudo-labeled multimodal dataset.
///
/// Background is an isotropic unit Gaussian at the origin in every modality;
/// class `c` in modality `m` is the same Gaussian shifted by
/// `class_separation` along a random unit direction. False positives are
/// background draws labeled positive. Samples are shuffled, and every feature
/// value is rounded to `f32` so that the dataset survives a disk round trip
/// bit-for-bit.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let class_means: Vec<Vec<Vec<f64>>> = (0..cfg.n_classes)
        .map(|_| {
            cfg.modality_dims
                .iter()
                .map(|&dim| {
                    let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    dir.iter().map(|v| v * cfg.class_separation / norm).collect()
                })
                .collect()
        })
        .collect();
    let (dataset, origins) = synth_samples(cfg, &class_means, &mut rng)?;
    Ok(SynthDataset {
        dataset,
        origins,
        class_means,
    })
}

impl SynthDataset {
    /// A held-out split drawn from the same class clusters with clean labels:
    /// `n_per_class` true positives per class (hard ones included at the
    /// configured rate) and `n_background` background samples.
    pub fn test_split(&self, cfg: &SynthConfig, n_per_class: usize, n_background: usize) -> Result<SynthDataset> {
        let test_cfg = SynthConfig {
            n_per_class,
            n_background,
            noise_level: 0.0,
            ..cfg.clone()
        };
        test_cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let (dataset, origins) = synth_samples(&test_cfg, &self.class_means, &mut rng)?;
        Ok(SynthDataset {
            dataset,
            origins,
            class_means: self.class_means.clone(),
        })
    }
}

fn synth_samples(
    cfg: &SynthConfig,
    class_means: &[Vec<Vec<f64>>],
    rng: &mut ChaCha8Rng,
) -> Result<(MultimodalDataset, Vec<SampleOrigin>)> {
    let n_mod = cfg.modality_dims.len();
    let n_fp = cfg.false_positives_per_class();
    let n_tp = cfg.n_per_class - n_fp;
    let n_hard = floor_fraction(cfg.hard_fraction, n_tp);

    let mut origins = Vec::with_capacity(cfg.n_classes * cfg.n_per_class + cfg.n_background);
    for c in 0..cfg.n_classes {
        for _ in 0..n_fp {
            origins.push(SampleOrigin::FalsePositive { class: c });
        }
        for k in 0..n_tp {
            let hard_modality = (k < n_hard).then(|| rng.random_range(0..n_mod));
            origins.push(SampleOrigin::TruePositive {
                class: c,
                hard_modality,
            });
        }
    }
    origins.extend(std::iter::repeat_n(SampleOrigin::Background, cfg.n_background));
    origins.shuffle(rng);

    let n = origins.len();
    let mut features: Vec<Matrix> = cfg.modality_dims.iter().map(|&d| Matrix::zeros(n, d)).collect();
    for (i, origin) in origins.iter().enumerate() {
        for (m, f) in features.iter_mut().enumerate() {
            let mean = match *origin {
                SampleOrigin::TruePositive { class, hard_modality } if hard_modality != Some(m) => {
                    Some(&class_means[class][m])
                }
                _ => None,
            };
            let row = f.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *v = quantize(z + mean.map_or(0.0, |mu| mu[j]));
            }
        }
    }

    let class_names = cfg.class_names();
    let mut gt = GroundTruth::zeros(n, cfg.n_classes);
    let mut counts = vec![0u32; n * cfg.n_classes];
    let mut metadata = Vec::with_capacity(n);
    for (i, origin) in origins.iter().enumerate() {
        match *origin {
            SampleOrigin::TruePositive { class, .. } => {
                gt.set(i, class, true);
                counts[i * cfg.n_classes + class] = 1;
                metadata.push(Some(format!("a video about {}", class_names[class])));
            }
            SampleOrigin::FalsePositive { class } => {
                counts[i * cfg.n_classes + class] = 1;
                metadata.push(Some(format!("a video about {}", class_names[class])));
            }
            SampleOrigin::Background => metadata.push(Some("an untitled video".to_string())),
        }
    }
    let labels = PseudoLabelMatrix::from_counts(n, cfg.n_classes, counts)?;

    let n_train_test = n_mod - cfg.train_only_modalities;
    let meta = cfg
        .modality_names()
        .into_iter()
        .zip(&cfg.modality_dims)
        .enumerate()
        .map(|(m, (name, &dim))| {
            let role = if m < n_train_test {
                ModalityRole::TrainAndTest
            } else {
                ModalityRole::TrainOnly
            };
            ModalityDescriptor::new(name, dim, role)
        })
        .collect();

    let dataset = MultimodalDataset {
        meta,
        features,
        metadata: Some(metadata),
        ground_truth: Some(gt),
        class_names,
        labels: Some(labels),
    };
    dataset.validate()?;
    Ok((dataset, origins))
}

/// Shuffles `0..n_samples` as a pure function of `(seed, epoch)` and cuts the
/// permutation into batches of `batch_size` (the last may be shorter).
pub fn minibatch_iterator(n_samples: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::argument("batch_size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut perm: Vec<usize> = (0..n_samples).collect();
    perm.shuffle(&mut rng);
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
