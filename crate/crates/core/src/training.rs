//! Training loops: online self-paced training on one modality, online
//! training with multimodal co-training, plain minibatch training, and the
//! batch alternating-optimization oracle.
//!
//! Training only ever sees [`TrainingData`]: features plus pseudo labels.
//! Ground truth is not reachable from here; selection quality is measured by
//! an optional [`SelectionJudge`] supplied by the caller.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{minibatch_iterator, ModalityDescriptor, MultimodalDataset, CONCAT};
use crate::error::{Error, Result};
use crate::eval::SelectionReport;
use crate::matrix::Matrix;
use crate::mmco::{consensus_losses, consensus_weights_batch, VotingScheme};
use crate::models::{
    adam_step, backward, binary_cross_entropy, forward, init_params, save_model, weighted_loss_from, AdamConfig,
    AdamState, ClassifierParams, Forward, ModelFile, ModelKind, WeightedBatch,
};
use crate::pseudolabel::PseudoLabelMatrix;
use crate::selfpaced::{
    advance_schedule, batch_weights, compute_sample_weight, default_queue_capacity, regularizer_value, AgeSchedule,
    AgeState, LambdaSummary, WeightMatrix,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hidden_units: usize,
    /// Per-modality kind overrides.
    pub overrides: BTreeMap<String, ModelKind>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::Linear,
            hidden_units: 64,
            overrides: BTreeMap::new(),
        }
    }
}

impl ModelSpec {
    pub fn kind_for(&self, modality: &str) -> ModelKind {
        self.overrides.get(modality).copied().unwrap_or(self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u64,
    pub schedule: AgeSchedule,
    pub voting: VotingScheme,
    pub train_modalities: Vec<String>,
    /// Modalities whose classifiers vote on the weights; empty means all
    /// training modalities.
    pub voting_modalities: Vec<String>,
    pub test_modality: String,
    pub optimizer: AdamConfig,
    pub model: ModelSpec,
    pub seed: u64,
    /// When false every weight is 1 (plain minibatch training).
    pub selection: bool,
    /// Apply the weight rule to negative-labeled entries as well.
    pub weight_negatives: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 40,
            schedule: AgeSchedule::default(),
            voting: VotingScheme::Max,
            train_modalities: vec![CONCAT.to_string()],
            voting_modalities: Vec::new(),
            test_modality: CONCAT.to_string(),
            optimizer: AdamConfig::default(),
            model: ModelSpec::default(),
            seed: 0,
            selection: true,
            weight_negatives: false,
        }
    }
}

impl TrainConfig {
    /// Checks the settings that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.model.hidden_units == 0 {
            return Err(Error::config("hidden_units must be positive"));
        }
        self.schedule.validate()?;
        self.optimizer.validate()?;
        if self.train_modalities.is_empty() {
            return Err(Error::config("at least one training modality is required"));
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.train_modalities {
            if !seen.insert(m) {
                return Err(Error::config(format!("modality `{m}` listed twice")));
            }
        }
        if !self.train_modalities.contains(&self.test_modality) {
            return Err(Error::config(format!(
                "test modality `{}` must be one of the training modalities",
                self.test_modality
            )));
        }
        for v in &self.voting_modalities {
            if !self.train_modalities.contains(v) {
                return Err(Error::config(format!("voting modality `{v}` is not trained")));
            }
        }
        Ok(())
    }

    fn voters(&self) -> Vec<&str> {
        if self.voting_modalities.is_empty() {
            self.train_modalities.iter().map(String::as_str).collect()
        } else {
            self.voting_modalities.iter().map(String::as_str).collect()
        }
    }
}

/// Features and pseudo labels, without ground truth.
#[derive(Debug, Clone)]
pub struct TrainingData<'a> {
    meta: &'a [ModalityDescriptor],
    features: &'a [Matrix],
    labels: &'a PseudoLabelMatrix,
    class_names: &'a [String],
    targets: Matrix,
    prior: Matrix,
}

impl<'a> TrainingData<'a> {
    pub fn new(d: &'a MultimodalDataset) -> Result<Self> {
        let labels = d
            .labels
            .as_ref()
            .ok_or_else(|| Error::data("dataset has no pseudo labels; run labeling first"))?;
        Self::with_labels(d, labels)
    }

    pub fn with_labels(d: &'a MultimodalDataset, labels: &'a PseudoLabelMatrix) -> Result<Self> {
        let (n, c) = (d.n_samples(), d.n_classes());
        if labels.n_samples() != n || labels.n_classes() != c {
            return Err(Error::argument("pseudo labels do not match the dataset shape"));
        }
        let mut targets = Matrix::zeros(n, c);
        let mut prior = Matrix::zeros(n, c);
        for i in 0..n {
            for k in 0..c {
                targets.set(i, k, labels.target(i, k));
                prior.set(i, k, labels.confidence(i, k));
            }
        }
        Ok(TrainingData {
            meta: &d.meta,
            features: &d.features,
            labels,
            class_names: &d.class_names,
            targets,
            prior,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.targets.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.targets.cols()
    }

    pub fn labels(&self) -> &PseudoLabelMatrix {
        self.labels
    }

    pub fn class_names(&self) -> &[String] {
        self.class_names
    }

    /// Pseudo-label targets, `N x C`.
    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    /// Prior confidences, `N x C`.
    pub fn prior(&self) -> &Matrix {
        &self.prior
    }

    pub fn features(&self, modality: &str) -> Result<&'a Matrix> {
        self.modality(modality).map(|(_, x)| x)
    }

    fn modality(&self, name: &str) -> Result<(usize, &'a Matrix)> {
        let i = self
            .meta
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::config(format!("unknown modality `{name}`")))?;
        Ok((i, &self.features[i]))
    }
}

/// How minibatch weights are derived.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightRule {
    /// Every weight is 1.
    Uniform,
    /// Closed-form self-paced weights from the single model's own losses.
    SelfPaced,
    /// Shared weights from the voted score of the listed models.
    Consensus { scheme: VotingScheme, voters: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct ModalityModel {
    pub name: String,
    pub params: ClassifierParams,
    pub adam: AdamState,
    feature_index: usize,
}

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub models: Vec<ModalityModel>,
    pub age: AgeState,
    pub epoch: u64,
    /// Per model, number of per-sample loss evaluations made by training.
    pub loss_evaluations: Vec<u64>,
    pub rule: WeightRule,
    weight_negatives: bool,
}

impl TrainerState {
    pub fn model(&self, name: &str) -> Option<&ModalityModel> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn export(&self, name: &str, class_names: &[String]) -> Result<ModelFile> {
        let m = self
            .model(name)
            .ok_or_else(|| Error::argument(format!("no trained model for `{name}`")))?;
        Ok(ModelFile {
            modality: m.name.clone(),
            class_names: class_names.to_vec(),
            params: m.params.clone(),
        })
    }

    /// Losses that decide selection for every positive-labeled sample, with
    /// the current per-class ages, evaluated at the current models.
    pub fn selection_snapshot(&self, data: &TrainingData<'_>) -> Result<SelectionSnapshot> {
        let n = data.n_samples();
        let all: Vec<usize> = (0..n).collect();
        let losses = self.selection_losses(data, &all)?;
        let classes = (0..data.n_classes())
            .map(|c| {
                let positives = data.labels.positives_of_class(c);
                let l = positives.iter().map(|&i| losses.get(i, c)).collect();
                ClassSelection {
                    positives,
                    losses: l,
                    lambda: self.age.lambda(c),
                }
            })
            .collect();
        Ok(SelectionSnapshot { classes })
    }

    fn selection_losses(&self, data: &TrainingData<'_>, rows: &[usize]) -> Result<Matrix> {
        let targets = data.targets.select_rows(rows);
        let voters: Vec<usize> = match &self.rule {
            WeightRule::Consensus { voters, .. } => voters.clone(),
            _ => vec![0],
        };
        let probs: Vec<Matrix> = voters
            .iter()
            .map(|&v| {
                let m = &self.models[v];
                forward(&m.params, &data.features[m.feature_index], rows).map(|f| f.probs)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Matrix> = probs.iter().collect();
        let scheme = match &self.rule {
            WeightRule::Consensus { scheme, .. } => *scheme,
            _ => VotingScheme::Max,
        };
        consensus_losses(&refs, &targets, scheme)
    }
}

/// Selection-relevant losses of the positive-labeled samples of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub positives: Vec<usize>,
    pub losses: Vec<f64>,
    pub lambda: Option<f64>,
}

impl ClassSelection {
    /// Whether each positive is currently selected (`loss < lambda`).
    pub fn selected(&self) -> Vec<bool> {
        match self.lambda {
            Some(l) => self.losses.iter().map(|&x| x < l).collect(),
            None => vec![false; self.losses.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSnapshot {
    pub classes: Vec<ClassSelection>,
}

/// Measures selection quality; implemented by evaluation code that holds
/// ground truth.
pub trait SelectionJudge {
    fn judge(&self, snapshot: &SelectionSnapshot) -> Result<SelectionReport>;
}

#[derive(Debug, Clone)]
pub struct BatchEvent<'a> {
    pub epoch: u64,
    pub batch: usize,
    pub rows: &'a [usize],
    pub weights: &'a Matrix,
    pub prior: &'a Matrix,
    pub warmup: bool,
}

pub trait TrainObserver {
    fn on_batch(&mut self, _event: &BatchEvent<'_>) {}

    fn on_epoch(&mut self, _state: &TrainerState, _report: &EpochReport) -> Result<()> {
        Ok(())
    }
}

/// Optional instrumentation for a training run.
#[derive(Default)]
pub struct Hooks<'a> {
    pub observer: Option<&'a mut dyn TrainObserver>,
    pub judge: Option<&'a dyn SelectionJudge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityLoss {
    pub modality: String,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u64,
    pub p: f64,
    pub losses: Vec<ModalityLoss>,
    pub lambda: Option<LambdaSummary>,
    pub selection: Option<SelectionReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainerState,
    pub reports: Vec<EpochReport>,
}

fn model_seed(seed: u64, m: usize) -> u64 {
    // Same stream for every modality so identical modalities train identically.
    let _ = m;
    seed
}

fn build_models(data: &TrainingData<'_>, cfg: &TrainConfig) -> Result<Vec<ModalityModel>> {
    cfg.train_modalities
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let (idx, x) = data.modality(name)?;
            let params = init_params(
                cfg.model.kind_for(name),
                x.cols(),
                data.n_classes(),
                cfg.model.hidden_units,
                model_seed(cfg.seed, m),
            )?;
            let adam = AdamState::new(cfg.optimizer, &params);
            Ok(ModalityModel {
                name: name.clone(),
                params,
                adam,
                feature_index: idx,
            })
        })
        .collect()
}

fn check_against_data(data: &TrainingData<'_>, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.batch_size > data.n_samples() {
        return Err(Error::config(format!(
            "batch_size {} exceeds the {} training samples",
            cfg.batch_size,
            data.n_samples()
        )));
    }
    for m in &cfg.train_modalities {
        data.modality(m)?;
    }
    Ok(())
}

fn init_state(data: &TrainingData<'_>, cfg: &TrainConfig, rule: WeightRule) -> Result<TrainerState> {
    let models = build_models(data, cfg)?;
    let capacity = cfg
        .schedule
        .queue_capacity
        .unwrap_or_else(|| default_queue_capacity(&data.labels.positive_counts()));
    let age = AgeState::new(data.n_classes(), capacity, cfg.schedule.p_init)?;
    let n_models = models.len();
    Ok(TrainerState {
        models,
        age,
        epoch: 0,
        loss_evaluations: vec![0; n_models],
        rule,
        weight_negatives: cfg.weight_negatives,
    })
}

/// Online self-paced training of a single modality classifier.
pub fn train_online_well(data: &TrainingData<'_>, cfg: &TrainConfig, hooks: Hooks<'_>) -> Result<TrainOutcome> {
    check_against_data(data, cfg)?;
    if cfg.train_modalities.len() != 1 {
        return Err(Error::config(format!(
            "online WELL trains exactly one modality, got {}",
            cfg.train_modalities.len()
        )));
    }
    let rule = if cfg.selection {
        WeightRule::SelfPaced
    } else {
        WeightRule::Uniform
    };
    run_online(data, cfg, rule, hooks)
}

/// Online training of every configured modality with weights shared across
/// modalities and derived from the vote of the voting modalities.
///
/// A single modality is accepted and reduces to [`train_online_well`].
pub fn train_mmco(data: &TrainingData<'_>, cfg: &TrainConfig, hooks: Hooks<'_>) -> Result<TrainOutcome> {
    check_against_data(data, cfg)?;
    let voters = cfg
        .voters()
        .iter()
        .map(|v| cfg.train_modalities.iter().position(|t| t == v).expect("validated"))
        .collect();
    let rule = if cfg.selection {
        WeightRule::Consensus {
            scheme: cfg.voting,
            voters,
        }
    } else {
        WeightRule::Uniform
    };
    run_online(data, cfg, rule, hooks)
}

/// Minibatch training with every weight equal to 1.
pub fn train_plain(data: &TrainingData<'_>, cfg: &TrainConfig, hooks: Hooks<'_>) -> Result<TrainOutcome> {
    check_against_data(data, cfg)?;
    run_online(data, cfg, WeightRule::Uniform, hooks)
}

fn bce_matrix(probs: &Matrix, targets: &Matrix) -> Matrix {
    Matrix::from_vec(
        probs.rows(),
        probs.cols(),
        probs
            .as_slice()
            .iter()
            .zip(targets.as_slice())
            .map(|(&s, &y)| binary_cross_entropy(s, y))
            .collect(),
    )
}

/// Per-entry weights for one minibatch. Classes whose age is still undefined
/// (warmup) use the prior confidences.
fn minibatch_weights(
    state: &TrainerState,
    forwards: &[Forward],
    losses: &[Matrix],
    targets: &Matrix,
    prior: &Matrix,
    warmup: bool,
) -> Result<(WeightMatrix, Matrix)> {
    let (b, c_n) = (targets.rows(), targets.cols());
    let (weights, selection_losses) = match &state.rule {
        WeightRule::Uniform => return Ok((WeightMatrix::ones(b, c_n), losses[0].clone())),
        WeightRule::SelfPaced if !warmup && state.age.lambdas().iter().all(Option::is_some) => {
            let w = batch_weights(&losses[0], targets, &state.age, state.weight_negatives)?;
            (w, losses[0].clone())
        }
        WeightRule::Consensus { scheme, voters } if !warmup && state.age.lambdas().iter().all(Option::is_some) => {
            let probs: Vec<&Matrix> = voters.iter().map(|&v| &forwards[v].probs).collect();
            consensus_weights_batch(&probs, targets, &state.age, *scheme, state.weight_negatives)?
        }
        WeightRule::SelfPaced => (
            partial_weights(state, &losses[0], targets, prior, warmup)?,
            losses[0].clone(),
        ),
        WeightRule::Consensus { scheme, voters } => {
            let probs: Vec<&Matrix> = voters.iter().map(|&v| &forwards[v].probs).collect();
            let l = consensus_losses(&probs, targets, *scheme)?;
            (partial_weights(state, &l, targets, prior, warmup)?, l)
        }
    };
    Ok((weights, selection_losses))
}

fn partial_weights(
    state: &TrainerState,
    losses: &Matrix,
    targets: &Matrix,
    prior: &Matrix,
    warmup: bool,
) -> Result<WeightMatrix> {
    let mut w = prior.clone();
    if !warmup {
        for c in 0..targets.cols() {
            let Some(lambda) = state.age.lambda(c) else { continue };
            for n in 0..targets.rows() {
                let v = if targets.get(n, c) == 1.0 || state.weight_negatives {
                    compute_sample_weight(losses.get(n, c), lambda)?
                } else {
                    1.0
                };
                w.set(n, c, v);
            }
        }
    }
    WeightMatrix::new(w)
}

fn run_online(
    data: &TrainingData<'_>,
    cfg: &TrainConfig,
    rule: WeightRule,
    mut hooks: Hooks<'_>,
) -> Result<TrainOutcome> {
    let mut state = init_state(data, cfg, rule)?;
    let n = data.n_samples();
    let c_n = data.n_classes();
    let mut reports = Vec::with_capacity(cfg.epochs as usize);

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let p = advance_schedule(&cfg.schedule, epoch);
        state.age.set_p(p);
        let warmup = epoch < cfg.schedule.warmup_epochs;
        let mut loss_sums = vec![0.0; state.models.len()];
        let mut entries = 0usize;

        for (bi, rows) in minibatch_iterator(n, cfg.batch_size, cfg.seed, epoch)?
            .iter()
            .enumerate()
        {
            let targets = data.targets.select_rows(rows);
            let prior = data.prior.select_rows(rows);

            // Step 2: one forward pass per modality; its outputs serve both
            // the weights and the gradient.
            let forwards: Vec<Forward> = state
                .models
                .par_iter()
                .map(|m| forward(&m.params, &data.features[m.feature_index], rows))
                .collect::<Result<_>>()?;
            for e in state.loss_evaluations.iter_mut() {
                *e += rows.len() as u64;
            }
            let losses: Vec<Matrix> = forwards.iter().map(|f| bce_matrix(&f.probs, &targets)).collect();
            for (s, l) in loss_sums.iter_mut().zip(&losses) {
                *s += l.as_slice().iter().sum::<f64>();
            }
            entries += rows.len() * c_n;

            // Step 3: weights.
            let (weights, selection_losses) = minibatch_weights(&state, &forwards, &losses, &targets, &prior, warmup)?;
            if let Some(obs) = hooks.observer.as_deref_mut() {
                obs.on_batch(&BatchEvent {
                    epoch,
                    batch: bi,
                    rows,
                    weights: weights.as_matrix(),
                    prior: &prior,
                    warmup,
                });
            }

            // Step 4: every modality is updated with the shared weights.
            let w = weights.as_matrix();
            state
                .models
                .par_iter_mut()
                .zip(forwards.par_iter())
                .try_for_each(|(m, f)| -> Result<()> {
                    let batch = WeightedBatch {
                        features: &data.features[m.feature_index],
                        rows,
                        targets: &targets,
                        weights: w,
                    };
                    let g = backward(&m.params, f, &batch)?;
                    adam_step(&mut m.params, &g, &mut m.adam)
                })?;

            // Step 5: feed the queues and refresh the ages.
            for c in 0..c_n {
                let pos: Vec<f64> = (0..rows.len())
                    .filter(|&b| targets.get(b, c) == 1.0)
                    .map(|b| selection_losses.get(b, c))
                    .collect();
                if !pos.is_empty() {
                    state.age.push_losses(c, &pos);
                }
                if state.age.queue_len(c) > 0 {
                    state.age.compute_age(c)?;
                }
            }
        }

        let selection = match (hooks.judge, &state.rule) {
            (Some(judge), WeightRule::SelfPaced | WeightRule::Consensus { .. }) => {
                Some(judge.judge(&state.selection_snapshot(data)?)?)
            }
            _ => None,
        };
        let report = EpochReport {
            epoch,
            p,
            losses: state
                .models
                .iter()
                .zip(&loss_sums)
                .map(|(m, &s)| ModalityLoss {
                    modality: m.name.clone(),
                    mean_loss: if entries > 0 { s / entries as f64 } else { 0.0 },
                })
                .collect(),
            lambda: state.age.lambda_summary(),
            selection,
        };
        if let Some(obs) = hooks.observer.as_deref_mut() {
            obs.on_epoch(&state, &report)?;
        }
        reports.push(report);
    }
    Ok(TrainOutcome { state, reports })
}

/// Minibatch Adam on one modality for `cfg.epochs` epochs with fixed
/// per-entry weights.
pub fn fit_weighted(
    data: &TrainingData<'_>,
    cfg: &TrainConfig,
    modality: &str,
    weights: &Matrix,
) -> Result<ClassifierParams> {
    cfg.validate()?;
    let x = data.features(modality)?;
    let n = data.n_samples();
    if weights.rows() != n || weights.cols() != data.n_classes() {
        return Err(Error::argument("weights do not match the data shape"));
    }
    WeightMatrix::new(weights.clone())?;
    let mut params = init_params(
        cfg.model.kind_for(modality),
        x.cols(),
        data.n_classes(),
        cfg.model.hidden_units,
        cfg.seed,
    )?;
    let mut adam = AdamState::new(cfg.optimizer, &params);
    for epoch in 0..cfg.epochs {
        for rows in minibatch_iterator(n, cfg.batch_size, cfg.seed, epoch)? {
            let targets = data.targets.select_rows(&rows);
            let w = weights.select_rows(&rows);
            let batch = WeightedBatch {
                features: x,
                rows: &rows,
                targets: &targets,
                weights: &w,
            };
            let f = forward(&params, x, &rows)?;
            let g = backward(&params, &f, &batch)?;
            adam_step(&mut params, &g, &mut adam)?;
        }
    }
    Ok(params)
}

/// `sum V[n,c] L(y[n,c], g(x_n, c)) + sum (lambda_c / 2)(V[n,c]^2 - 2 V[n,c])`
/// over all samples and classes.
pub fn objective_value(
    features: &Matrix,
    targets: &Matrix,
    params: &ClassifierParams,
    weights: &Matrix,
    lambdas: &[f64],
) -> Result<f64> {
    if lambdas.len() != targets.cols() {
        return Err(Error::argument("one age per class is required"));
    }
    let rows: Vec<usize> = (0..targets.rows()).collect();
    let batch = WeightedBatch {
        features,
        rows: &rows,
        targets,
        weights,
    };
    let f = forward(params, features, &rows)?;
    let loss = weighted_loss_from(&f, &batch);
    let mut reg = 0.0;
    for n in 0..weights.rows() {
        for (c, &lambda) in lambdas.iter().enumerate() {
            reg += regularizer_value(weights.get(n, c), lambda);
        }
    }
    Ok(loss + reg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchWellConfig {
    /// Passes over the full dataset, with frozen weights, per round.
    pub inner_epochs: u64,
    /// `None`: rounds until `p` reaches its cap, plus two.
    pub rounds: Option<u64>,
}

impl Default for BatchWellConfig {
    fn default() -> Self {
        BatchWellConfig {
            inner_epochs: 20,
            rounds: None,
        }
    }
}

impl BatchWellConfig {
    pub fn resolved_rounds(&self, schedule: &AgeSchedule) -> u64 {
        self.rounds.unwrap_or_else(|| {
            let steps = if schedule.p_step > 0.0 {
                ((schedule.p_max - schedule.p_init) / schedule.p_step - 1e-9)
                    .ceil()
                    .max(0.0) as u64
            } else {
                0
            };
            steps + 1 + 2
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRoundReport {
    pub round: u64,
    pub p: f64,
    /// Weighted loss (fixed weights) before and after fitting the model.
    pub weighted_loss_before_fit: f64,
    pub weighted_loss_after_fit: f64,
    /// Objective at this round's ages before and after re-solving weights.
    pub objective_before_reweight: f64,
    pub objective_after_reweight: f64,
    pub lambda: Option<LambdaSummary>,
    pub selection: Option<SelectionReport>,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub state: TrainerState,
    pub rounds: Vec<BatchRoundReport>,
    /// Weights each round was fitted with; entry 0 is the prior.
    pub weight_history: Vec<Matrix>,
}

/// Alternating optimization over the full dataset: fit the model with fixed
/// weights, compute every loss, re-solve every weight in closed form at the
/// age given by the `p` schedule, repeat. Round `r` uses the schedule value
/// at epoch `r * step_every_epochs`, so each round advances `p` by one step.
pub fn train_batch_well(
    data: &TrainingData<'_>,
    cfg: &TrainConfig,
    batch_cfg: &BatchWellConfig,
    mut hooks: Hooks<'_>,
) -> Result<BatchOutcome> {
    check_against_data(data, cfg)?;
    if cfg.train_modalities.len() != 1 {
        return Err(Error::config("batch WELL trains exactly one modality"));
    }
    if batch_cfg.inner_epochs == 0 {
        return Err(Error::config("inner_epochs must be positive"));
    }
    let n = data.n_samples();
    let c_n = data.n_classes();
    let mut state = init_state(data, cfg, WeightRule::SelfPaced)?;
    let x = &data.features[state.models[0].feature_index];
    let all: Vec<usize> = (0..n).collect();
    let mut weights = data.prior.clone();
    let mut history = vec![weights.clone()];
    let mut rounds = Vec::new();

    for round in 0..batch_cfg.resolved_rounds(&cfg.schedule) {
        let model = &mut state.models[0];
        let full = |params: &ClassifierParams, w: &Matrix| -> Result<f64> {
            let f = forward(params, x, &all)?;
            Ok(weighted_loss_from(
                &f,
                &WeightedBatch {
                    features: x,
                    rows: &all,
                    targets: &data.targets,
                    weights: w,
                },
            ))
        };
        let before_fit = full(&model.params, &weights)?;
        for inner in 0..batch_cfg.inner_epochs {
            let epoch = round * batch_cfg.inner_epochs + inner;
            for rows in minibatch_iterator(n, cfg.batch_size, cfg.seed, epoch)? {
                let targets = data.targets.select_rows(&rows);
                let w = weights.select_rows(&rows);
                let f = forward(&model.params, x, &rows)?;
                state.loss_evaluations[0] += rows.len() as u64;
                let batch = WeightedBatch {
                    features: x,
                    rows: &rows,
                    targets: &targets,
                    weights: &w,
                };
                let g = backward(&model.params, &f, &batch)?;
                adam_step(&mut model.params, &g, &mut model.adam)?;
            }
        }
        let after_fit = full(&model.params, &weights)?;

        let f = forward(&model.params, x, &all)?;
        state.loss_evaluations[0] += n as u64;
        let losses = bce_matrix(&f.probs, &data.targets);
        let p = advance_schedule(&cfg.schedule, round * cfg.schedule.step_every_epochs);
        let mut age = AgeState::new(c_n, n.max(1), p)?;
        for c in 0..c_n {
            let pos: Vec<f64> = (0..n)
                .filter(|&i| data.targets.get(i, c) == 1.0)
                .map(|i| losses.get(i, c))
                .collect();
            age.push_losses(c, &pos);
            if !pos.is_empty() {
                age.compute_age(c)?;
            }
        }
        // Classes without positives keep weight 1 everywhere; any positive
        // age works for the objective.
        let lambdas: Vec<f64> = (0..c_n).map(|c| age.lambda(c).unwrap_or(1.0)).collect();
        let objective_before = objective_value(x, &data.targets, &model.params, &weights, &lambdas)?;
        let new_weights = if age.lambdas().iter().all(Option::is_some) {
            batch_weights(&losses, &data.targets, &age, cfg.weight_negatives)?.into_matrix()
        } else {
            let mut w = Matrix::filled(n, c_n, 1.0);
            for c in 0..c_n {
                if let Some(lambda) = age.lambda(c) {
                    for i in 0..n {
                        if data.targets.get(i, c) == 1.0 || cfg.weight_negatives {
                            w.set(i, c, compute_sample_weight(losses.get(i, c), lambda)?);
                        }
                    }
                }
            }
            w
        };
        let objective_after = objective_value(x, &data.targets, &model.params, &new_weights, &lambdas)?;
        state.age = age;
        state.epoch = round;

        let selection = match hooks.judge {
            Some(judge) => Some(judge.judge(&state.selection_snapshot(data)?)?),
            None => None,
        };
        rounds.push(BatchRoundReport {
            round,
            p,
            weighted_loss_before_fit: before_fit,
            weighted_loss_after_fit: after_fit,
            objective_before_reweight: objective_before,
            objective_after_reweight: objective_after,
            lambda: state.age.lambda_summary(),
            selection,
        });
        weights = new_weights;
        history.push(weights.clone());
        if let Some(obs) = hooks.observer.as_deref_mut() {
            let report = EpochReport {
                epoch: round,
                p,
                losses: vec![ModalityLoss {
                    modality: state.models[0].name.clone(),
                    mean_loss: losses.as_slice().iter().sum::<f64>() / (n * c_n).max(1) as f64,
                }],
                lambda: state.age.lambda_summary(),
                selection: rounds.last().and_then(|r| r.selection.clone()),
            };
            obs.on_epoch(&state, &report)?;
        }
    }
    Ok(BatchOutcome {
        state,
        rounds,
        weight_history: history,
    })
}

/// Writes every model to `<dir>/epoch_<e>/<modality>.model` every `every`
/// epochs.
pub struct CheckpointWriter {
    pub dir: PathBuf,
    pub every: u64,
    pub class_names: Vec<String>,
    pub written: Vec<PathBuf>,
}

impl CheckpointWriter {
    pub fn new(dir: impl Into<PathBuf>, every: u64, class_names: Vec<String>) -> Self {
        CheckpointWriter {
            dir: dir.into(),
            every,
            class_names,
            written: Vec::new(),
        }
    }
}

impl TrainObserver for CheckpointWriter {
    fn on_epoch(&mut self, state: &TrainerState, report: &EpochReport) -> Result<()> {
        if self.every == 0 || !(report.epoch + 1).is_multiple_of(self.every) {
            return Ok(());
        }
        let dir = self.dir.join(format!("epoch_{:04}", report.epoch + 1));
        for m in &state.models {
            let path = dir.join(format!("{}.model", m.name));
            save_model(&state.export(&m.name, &self.class_names)?, &path)?;
            self.written.push(path);
        }
        Ok(())
    }
}
