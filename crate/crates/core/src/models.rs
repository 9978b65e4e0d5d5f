//! Per-class binary probabilistic classifiers.
//!
//! Every class has an independent sigmoid head, so a sample may be positive
//! for several classes. The linear model is `sigmoid(w_c . x + b_c)`; the MLP
//! adds one shared ReLU hidden layer in front of the per-class heads.
//!
//! Parameters live in one flat vector so that gradients and the Adam moments
//! share the same layout:
//!
//! * linear: `W (C x dim) | b (C)`
//! * mlp:    `W1 (H x dim) | b1 (H) | W2 (C x H) | b2 (C)`

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    kind: ModelKind,
    dim: usize,
    n_classes: usize,
    hidden_units: usize,
    values: Vec<f64>,
}

/// Gradient with the same flat layout as [`ClassifierParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&g| g == 0.0)
    }
}

fn param_count(kind: ModelKind, dim: usize, n_classes: usize, hidden: usize) -> usize {
    match kind {
        ModelKind::Linear => n_classes * dim + n_classes,
        ModelKind::Mlp => hidden * dim + hidden + n_classes * hidden + n_classes,
    }
}

impl ClassifierParams {
    pub fn zeros(kind: ModelKind, dim: usize, n_classes: usize, hidden_units: usize) -> Result<Self> {
        if dim == 0 || n_classes == 0 {
            return Err(Error::argument("classifier needs dim >= 1 and at least one class"));
        }
        let hidden_units = match kind {
            ModelKind::Linear => 0,
            ModelKind::Mlp if hidden_units == 0 => {
                return Err(Error::argument("mlp needs at least one hidden unit"));
            }
            ModelKind::Mlp => hidden_units,
        };
        Ok(ClassifierParams {
            kind,
            dim,
            n_classes,
            hidden_units,
            values: vec![0.0; param_count(kind, dim, n_classes, hidden_units)],
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn hidden_units(&self) -> usize {
        self.hidden_units
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Offsets of (first weight block, first bias, output weights, output bias).
    fn offsets(&self) -> (usize, usize, usize, usize) {
        match self.kind {
            ModelKind::Linear => {
                let w = self.n_classes * self.dim;
                (0, w, 0, w)
            }
            ModelKind::Mlp => {
                let w1 = self.hidden_units * self.dim;
                let b1 = w1 + self.hidden_units;
                let w2 = b1 + self.n_classes * self.hidden_units;
                (0, w1, b1, w2)
            }
        }
    }

    /// Range of the flat vector that belongs to class `c` alone: the class
    /// row and bias of the linear model, or the output head of the MLP.
    pub fn class_slots(&self, c: usize) -> Vec<usize> {
        let (_, b, w2, b2) = self.offsets();
        match self.kind {
            ModelKind::Linear => {
                let mut v: Vec<usize> = (c * self.dim..(c + 1) * self.dim).collect();
                v.push(b + c);
                v
            }
            ModelKind::Mlp => {
                let h = self.hidden_units;
                let mut v: Vec<usize> = (w2 + c * h..w2 + (c + 1) * h).collect();
                v.push(b2 + c);
                v
            }
        }
    }

    fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Builds initial parameters. Linear models start at zero (every prediction
/// is exactly 0.5); the MLP hidden layer is drawn from `U(-a, a)` with
/// `a = sqrt(6 / (dim + hidden_units))` and the output layer starts at zero.
pub fn init_params(
    kind: ModelKind,
    dim: usize,
    n_classes: usize,
    hidden_units: usize,
    seed: u64,
) -> Result<ClassifierParams> {
    let mut p = ClassifierParams::zeros(kind, dim, n_classes, hidden_units)?;
    if kind == ModelKind::Mlp {
        let a = (6.0 / (dim + p.hidden_units) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = p.hidden_units * dim;
        for v in &mut p.values[..n] {
            *v = rng.random_range(-a..a);
        }
    }
    Ok(p)
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn clamp_prob(s: f64) -> f64 {
    s.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `-(y ln s + (1 - y) ln(1 - s))` with `s` clamped to `[eps, 1 - eps]`.
#[inline]
pub fn binary_cross_entropy(s: f64, y: f64) -> f64 {
    let s = clamp_prob(s);
    -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
}

/// Outputs of a batched forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `B x C` logits.
    pub logits: Matrix,
    /// `B x C` clamped probabilities.
    pub probs: Matrix,
    /// `B x H` post-activation hidden units (MLP only).
    hidden: Option<Matrix>,
}

fn check_dim(params: &ClassifierParams, x: &Matrix) -> Result<()> {
    if x.cols() != params.dim {
        return Err(Error::argument(format!(
            "feature dim {} does not match model dim {}",
            x.cols(),
            params.dim
        )));
    }
    Ok(())
}

/// Forward pass over the rows `rows` of `x`.
pub fn forward(params: &ClassifierParams, x: &Matrix, rows: &[usize]) -> Result<Forward> {
    check_dim(params, x)?;
    let c_n = params.n_classes;
    let b_n = rows.len();
    let mut logits = Matrix::zeros(b_n, c_n);
    let (w_off, b_off, w2_off, b2_off) = params.offsets();
    let v = &params.values;
    let hidden = match params.kind {
        ModelKind::Linear => {
            for (bi, &n) in rows.iter().enumerate() {
                let xr = x.row(n);
                let out = logits.row_mut(bi);
                for (c, o) in out.iter_mut().enumerate() {
                    let w = &v[w_off + c * params.dim..w_off + (c + 1) * params.dim];
                    *o = dot(w, xr) + v[b_off + c];
                }
            }
            None
        }
        ModelKind::Mlp => {
            let h_n = params.hidden_units;
            let mut hidden = Matrix::zeros(b_n, h_n);
            for (bi, &n) in rows.iter().enumerate() {
                let xr = x.row(n);
                let hr = hidden.row_mut(bi);
                for (j, h) in hr.iter_mut().enumerate() {
                    let w = &v[w_off + j * params.dim..w_off + (j + 1) * params.dim];
                    *h = (dot(w, xr) + v[b_off + j]).max(0.0);
                }
                let hr = hidden.row(bi);
                let out = logits.row_mut(bi);
                for (c, o) in out.iter_mut().enumerate() {
                    let w = &v[w2_off + c * h_n..w2_off + (c + 1) * h_n];
                    *o = dot(w, hr) + v[b2_off + c];
                }
            }
            Some(hidden)
        }
    };
    let probs = Matrix::from_vec(
        b_n,
        c_n,
        logits.as_slice().iter().map(|&z| clamp_prob(sigmoid(z))).collect(),
    );
    Ok(Forward { logits, probs, hidden })
}

/// Probability that `x` belongs to class `c`.
pub fn predict(params: &ClassifierParams, x: &[f64], c: usize) -> Result<f64> {
    if c >= params.n_classes {
        return Err(Error::argument(format!("class {c} out of range")));
    }
    let m = Matrix::from_vec(1, x.len(), x.to_vec());
    let f = forward(params, &m, &[0])?;
    Ok(f.probs.get(0, c))
}

/// Scores every row of `x` for every class: an `N x C` probability matrix.
pub fn predict_all(params: &ClassifierParams, x: &Matrix) -> Result<Matrix> {
    let rows: Vec<usize> = (0..x.rows()).collect();
    Ok(forward(params, x, &rows)?.probs)
}

/// A minibatch with per-entry targets and weights, both `B x C`.
#[derive(Debug, Clone, Copy)]
pub struct WeightedBatch<'a> {
    pub features: &'a Matrix,
    pub rows: &'a [usize],
    pub targets: &'a Matrix,
    pub weights: &'a Matrix,
}

impl WeightedBatch<'_> {
    fn check(&self, params: &ClassifierParams) -> Result<()> {
        check_dim(params, self.features)?;
        let shape = (self.rows.len(), params.n_classes);
        for (name, m) in [("targets", self.targets), ("weights", self.weights)] {
            if (m.rows(), m.cols()) != shape {
                return Err(Error::argument(format!(
                    "{name} are {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    shape.0,
                    shape.1
                )));
            }
        }
        Ok(())
    }
}

/// `sum_n sum_c V[n,c] * L(y[n,c], g(x_n, c))`.
pub fn weighted_loss(params: &ClassifierParams, batch: &WeightedBatch<'_>) -> Result<f64> {
    batch.check(params)?;
    let f = forward(params, batch.features, batch.rows)?;
    Ok(weighted_loss_from(&f, batch))
}

pub(crate) fn weighted_loss_from(f: &Forward, batch: &WeightedBatch<'_>) -> f64 {
    let mut total = 0.0;
    for ((&s, &y), &w) in f
        .probs
        .as_slice()
        .iter()
        .zip(batch.targets.as_slice())
        .zip(batch.weights.as_slice())
    {
        if w != 0.0 {
            total += w * binary_cross_entropy(s, y);
        }
    }
    total
}

/// Gradient of [`weighted_loss`] given a forward pass already computed on the
/// same batch.
///
/// The logit derivative is `V (sigmoid(z) - y)`, taken on the unclamped
/// sigmoid so that saturated mistakes still receive a gradient.
pub fn backward(params: &ClassifierParams, fwd: &Forward, batch: &WeightedBatch<'_>) -> Result<Gradient> {
    batch.check(params)?;
    let c_n = params.n_classes;
    let dim = params.dim;
    let mut g = vec![0.0; params.values.len()];
    let (w_off, b_off, w2_off, b2_off) = params.offsets();

    let mut dz = vec![0.0; c_n];
    for (bi, &n) in batch.rows.iter().enumerate() {
        let mut any = false;
        for (c, d) in dz.iter_mut().enumerate() {
            let w = batch.weights.get(bi, c);
            *d = if w == 0.0 {
                0.0
            } else {
                any = true;
                w * (sigmoid(fwd.logits.get(bi, c)) - batch.targets.get(bi, c))
            };
        }
        if !any {
            continue;
        }
        let xr = batch.features.row(n);
        match params.kind {
            ModelKind::Linear => {
                for (c, &d) in dz.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let gw = &mut g[w_off + c * dim..w_off + (c + 1) * dim];
                    for (gi, &xi) in gw.iter_mut().zip(xr) {
                        *gi += d * xi;
                    }
                    g[b_off + c] += d;
                }
            }
            ModelKind::Mlp => {
                let h_n = params.hidden_units;
                let hidden = fwd.hidden.as_ref().expect("mlp forward keeps hidden units");
                let hr = hidden.row(bi);
                let mut dh = vec![0.0; h_n];
                for (c, &d) in dz.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let w2 = &params.values[w2_off + c * h_n..w2_off + (c + 1) * h_n];
                    let gw2 = &mut g[w2_off + c * h_n..w2_off + (c + 1) * h_n];
                    for j in 0..h_n {
                        gw2[j] += d * hr[j];
                        dh[j] += d * w2[j];
                    }
                    g[b2_off + c] += d;
                }
                for j in 0..h_n {
                    // ReLU: hidden output is zero exactly when inactive.
                    if hr[j] <= 0.0 || dh[j] == 0.0 {
                        continue;
                    }
                    let gw1 = &mut g[w_off + j * dim..w_off + (j + 1) * dim];
                    for (gi, &xi) in gw1.iter_mut().zip(xr) {
                        *gi += dh[j] * xi;
                    }
                    g[b_off + j] += dh[j];
                }
            }
        }
    }
    Ok(Gradient(g))
}

/// Exact gradient of `sum_n sum_c V[n,c] L(y[n,c], g(x_n, w, c))`.
pub fn weighted_gradient(params: &ClassifierParams, batch: &WeightedBatch<'_>) -> Result<Gradient> {
    batch.check(params)?;
    let f = forward(params, batch.features, batch.rows)?;
    backward(params, &f, batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0
            && self.lr.is_finite()
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ClassifierParams) -> Self {
        AdamState {
            config,
            first_moment: vec![0.0; params.len()],
            second_moment: vec![0.0; params.len()],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut ClassifierParams, grad: &Gradient, state: &mut AdamState) -> Result<()> {
    if grad.0.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::argument(
            "gradient/optimizer state shape does not match parameters",
        ));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
        weight_decay,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for i in 0..params.values.len() {
        let mut g = grad.0[i];
        if weight_decay != 0.0 {
            g += weight_decay * params.values[i];
        }
        let m = beta1 * state.first_moment[i] + (1.0 - beta1) * g;
        let v = beta2 * state.second_moment[i] + (1.0 - beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        params.values[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
    debug_assert!(params.is_finite());
    Ok(())
}

/// Compares [`weighted_gradient`] against central differences
/// `(f(theta + h) - f(theta - h)) / 2h` on up to `max_coords` evenly spaced
/// coordinates and returns the largest relative error.
///
/// The relative error of one coordinate is `|a - n| / max(|a|, |n|, 1e-3)`;
/// coordinates where both sides are exactly zero count as zero error.
pub fn finite_difference_check(
    params: &ClassifierParams,
    batch: &WeightedBatch<'_>,
    h: f64,
    max_coords: usize,
) -> Result<f64> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::argument("finite-difference step must be positive"));
    }
    let analytic = weighted_gradient(params, batch)?;
    let total = params.len();
    let picks: Vec<usize> = if max_coords == 0 || max_coords >= total {
        (0..total).collect()
    } else {
        (0..max_coords).map(|k| k * total / max_coords).collect()
    };
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in picks {
        let orig = probe.values[i];
        probe.values[i] = orig + h;
        let up = weighted_loss(&probe, batch)?;
        probe.values[i] = orig - h;
        let down = weighted_loss(&probe, batch)?;
        probe.values[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.0[i];
        if a == 0.0 && numeric == 0.0 {
            continue;
        }
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(err);
    }
    Ok(worst)
}

const MODEL_MAGIC: &[u8; 8] = b"WMMCOMDL";
const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    kind: ModelKind,
    dim: usize,
    n_classes: usize,
    hidden_units: usize,
    class_names: Vec<String>,
    modality: String,
    n_values: usize,
}

/// A trained classifier together with what it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub modality: String,
    pub class_names: Vec<String>,
    pub params: ClassifierParams,
}

/// Writes `magic | u32 version | u64 manifest length | manifest JSON |
/// parameters as f64 LE`.
pub fn save_model(model: &ModelFile, path: &Path) -> Result<()> {
    let p = &model.params;
    if model.class_names.len() != p.n_classes {
        return Err(Error::argument("class name count does not match the model"));
    }
    let manifest = ModelManifest {
        kind: p.kind,
        dim: p.dim,
        n_classes: p.n_classes,
        hidden_units: p.hidden_units,
        class_names: model.class_names.clone(),
        modality: model.modality.clone(),
        n_values: p.values.len(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * p.values.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &p.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(path, msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != MODEL_MAGIC {
        return Err(bad("not a model file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported model version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: ModelManifest = serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
    let mut params = ClassifierParams::zeros(manifest.kind, manifest.dim, manifest.n_classes, manifest.hidden_units)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if params.len() != manifest.n_values || manifest.class_names.len() != manifest.n_classes {
        return Err(bad("manifest shape is inconsistent"));
    }
    let tensor = &bytes[20 + len..];
    if tensor.len() != 8 * params.len() {
        return Err(Error::format(
            path,
            format!("{} parameter bytes, expected {}", tensor.len(), 8 * params.len()),
        ));
    }
    for (v, chunk) in params.values.iter_mut().zip(tensor.chunks_exact(8)) {
        *v = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    if !params.is_finite() {
        return Err(bad("non-finite parameter"));
    }
    Ok(ModelFile {
        modality: manifest.modality,
        class_names: manifest.class_names,
        params,
    })
}
