//! Measurement: ranking metrics, example-selection quality, easiness
//! buckets, and the synthetic experiments (noise sweep, modality ablation).
//!
//! This is the only module that reads ground truth.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    make_concat_modality, synth_generate, GroundTruth, MultimodalDataset, SampleOrigin, SynthConfig, CONCAT,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::models::{predict_all, ClassifierParams, ModelFile};
use crate::training::{
    fit_weighted, train_mmco, train_online_well, ClassSelection, Hooks, SelectionJudge, SelectionSnapshot, TrainConfig,
    TrainOutcome, TrainingData,
};

/// Indices sorted by descending score, ties by ascending index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Mean over relevant items of the precision at their rank.
pub fn average_precision(scores: &[f64], relevance: &[bool]) -> Result<f64> {
    if scores.len() != relevance.len() {
        return Err(Error::argument(format!(
            "{} scores but {} relevance labels",
            scores.len(),
            relevance.len()
        )));
    }
    let total = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::UndefinedMetric(
            "average precision with no relevant items".into(),
        ));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in rank_descending(scores).iter().enumerate() {
        if relevance[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

/// Fraction of relevant items among the top `k` by score.
pub fn precision_at_k(scores: &[f64], relevance: &[bool], k: usize) -> Result<f64> {
    if scores.len() != relevance.len() {
        return Err(Error::argument("scores and relevance differ in length"));
    }
    if k == 0 || k > scores.len() {
        return Err(Error::argument(format!("k = {k} outside 1..={}", scores.len())));
    }
    let hits = rank_descending(scores)[..k].iter().filter(|&&i| relevance[i]).count();
    Ok(hits as f64 / k as f64)
}

fn check_scores(scores: &Matrix, truth: &GroundTruth) -> Result<()> {
    if scores.rows() != truth.n_samples() || scores.cols() != truth.n_classes() {
        return Err(Error::argument(format!(
            "scores are {}x{} but ground truth is {}x{}",
            scores.rows(),
            scores.cols(),
            truth.n_samples(),
            truth.n_classes()
        )));
    }
    Ok(())
}

/// Unweighted mean of per-class AP over classes with at least one positive.
pub fn mean_average_precision(scores: &Matrix, truth: &GroundTruth) -> Result<f64> {
    check_scores(scores, truth)?;
    let aps: Vec<f64> = (0..truth.n_classes())
        .filter_map(|c| average_precision(&scores.column(c), &truth.class_column(c)).ok())
        .collect();
    if aps.is_empty() {
        return Err(Error::UndefinedMetric("no class has a positive sample".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Mean of per-class precision at `k` over classes with at least one positive.
pub fn mean_precision_at_k(scores: &Matrix, truth: &GroundTruth, k: usize) -> Result<f64> {
    check_scores(scores, truth)?;
    let mut vals = Vec::new();
    for c in 0..truth.n_classes() {
        let rel = truth.class_column(c);
        if rel.iter().any(|&r| r) {
            vals.push(precision_at_k(&scores.column(c), &rel, k)?);
        }
    }
    if vals.is_empty() {
        return Err(Error::UndefinedMetric("no class has a positive sample".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSelectionMetrics {
    pub class: usize,
    pub positive_labeled: usize,
    /// Ground-truth positives among the positive-labeled samples.
    pub true_positives: usize,
    pub selected: usize,
    pub tp_selected: usize,
    pub fp_selected: usize,
    /// 1.0 when nothing is selected; see `empty_selection`.
    pub precision: f64,
    pub empty_selection: bool,
    /// `None` when the class has no true positives.
    pub recall: Option<f64>,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub classes: Vec<ClassSelectionMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_ap: f64,
    pub selected: usize,
    pub tp_selected: usize,
    pub fp_selected: usize,
}

/// Selection quality of one class: selected = positive-labeled samples with
/// loss strictly below the age.
pub fn class_selection_metrics(
    sel: &ClassSelection,
    truth: &GroundTruth,
    class: usize,
) -> Result<ClassSelectionMetrics> {
    if sel.positives.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "class {class} has no positive-labeled samples"
        )));
    }
    if sel.positives.len() != sel.losses.len() {
        return Err(Error::argument("positives and losses differ in length"));
    }
    let relevant: Vec<bool> = sel.positives.iter().map(|&i| truth.is_member(i, class)).collect();
    let chosen = sel.selected();
    let true_positives = relevant.iter().filter(|&&r| r).count();
    let selected = chosen.iter().filter(|&&s| s).count();
    let tp_selected = chosen.iter().zip(&relevant).filter(|(&s, &r)| s && r).count();
    let precision = if selected == 0 {
        1.0
    } else {
        tp_selected as f64 / selected as f64
    };
    let (recall, ap) = if true_positives == 0 {
        (None, None)
    } else {
        let neg: Vec<f64> = sel.losses.iter().map(|l| -l).collect();
        (
            Some(tp_selected as f64 / true_positives as f64),
            Some(average_precision(&neg, &relevant)?),
        )
    };
    Ok(ClassSelectionMetrics {
        class,
        positive_labeled: sel.positives.len(),
        true_positives,
        selected,
        tp_selected,
        fp_selected: selected - tp_selected,
        precision,
        empty_selection: selected == 0,
        recall,
        ap,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-class and macro-averaged selection quality. Recall and AP are
/// averaged over classes with true positives.
pub fn selection_metrics(snapshot: &SelectionSnapshot, truth: &GroundTruth) -> Result<SelectionReport> {
    if snapshot.classes.len() != truth.n_classes() {
        return Err(Error::argument("snapshot and ground truth differ in class count"));
    }
    let classes: Vec<ClassSelectionMetrics> = snapshot
        .classes
        .iter()
        .enumerate()
        .map(|(c, s)| class_selection_metrics(s, truth, c))
        .collect::<Result<_>>()?;
    Ok(SelectionReport {
        macro_precision: mean(classes.iter().map(|m| m.precision)),
        macro_recall: mean(classes.iter().filter_map(|m| m.recall)),
        macro_ap: mean(classes.iter().filter_map(|m| m.ap)),
        selected: classes.iter().map(|m| m.selected).sum(),
        tp_selected: classes.iter().map(|m| m.tp_selected).sum(),
        fp_selected: classes.iter().map(|m| m.fp_selected).sum(),
        classes,
    })
}

/// Judges training-time selections against ground truth.
pub struct GroundTruthJudge<'a> {
    pub truth: &'a GroundTruth,
}

impl SelectionJudge for GroundTruthJudge<'_> {
    fn judge(&self, snapshot: &SelectionSnapshot) -> Result<SelectionReport> {
        selection_metrics(snapshot, self.truth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub map: f64,
    pub prec_at_10: f64,
    pub prec_at_100: f64,
}

/// Ranking quality of `params` on `features` against `truth`. Precision at
/// `k` is omitted (NaN) when fewer than `k` samples exist.
pub fn test_metrics(params: &ClassifierParams, features: &Matrix, truth: &GroundTruth) -> Result<TestMetrics> {
    let scores = predict_all(params, features)?;
    let at = |k: usize| {
        if k <= truth.n_samples() {
            mean_precision_at_k(&scores, truth, k)
        } else {
            Ok(f64::NAN)
        }
    };
    Ok(TestMetrics {
        map: mean_average_precision(&scores, truth)?,
        prec_at_10: at(10)?,
        prec_at_100: at(100)?,
    })
}

/// Evaluates a saved model on a dataset carrying its modality and ground truth.
pub fn evaluate_model(model: &ModelFile, d: &MultimodalDataset) -> Result<TestMetrics> {
    let truth = d
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::data("evaluation dataset has no ground truth"))?;
    check_model_classes(model, d)?;
    let (_, x) = d.modality(&model.modality)?;
    test_metrics(&model.params, x, truth)
}

fn check_model_classes(model: &ModelFile, d: &MultimodalDataset) -> Result<()> {
    if model.class_names != d.class_names {
        return Err(Error::argument("model and dataset class names differ"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub rank: usize,
    pub sample: usize,
    pub score: f64,
}

/// The `k` highest-scoring samples for `class`, ties by index.
pub fn top_k_retrieval(model: &ModelFile, d: &MultimodalDataset, class: usize, k: usize) -> Result<Vec<RetrievalHit>> {
    check_model_classes(model, d)?;
    if class >= d.n_classes() {
        return Err(Error::argument(format!("class {class} out of range")));
    }
    if k > d.n_samples() {
        return Err(Error::argument(format!(
            "k = {k} exceeds the {} samples",
            d.n_samples()
        )));
    }
    let (_, x) = d.modality(&model.modality)?;
    let scores = predict_all(&model.params, x)?.column(class);
    Ok(rank_descending(&scores)[..k]
        .iter()
        .enumerate()
        .map(|(rank, &i)| RetrievalHit {
            rank: rank + 1,
            sample: i,
            score: scores[i],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEasiness {
    /// Positive-labeled samples in ascending index order.
    pub positives: Vec<usize>,
    pub scores: Vec<f64>,
    /// Size of the auxiliary positive training set.
    pub aux_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EasinessScores {
    pub classes: Vec<ClassEasiness>,
}

pub const EASINESS_TOP_FRACTION: f64 = 0.3;

/// Number of items in the top `fraction`, rounded up.
pub fn top_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Scores every positive-labeled sample with an auxiliary classifier on the
/// test modality trained on the highest-confidence 30% of each class's
/// positives (ties by index) plus that class's negatives.
pub fn easiness_scores(data: &TrainingData<'_>, cfg: &TrainConfig) -> Result<EasinessScores> {
    let labels = data.labels();
    let (n, c_n) = (data.n_samples(), data.n_classes());
    let mut weights = Matrix::filled(n, c_n, 1.0);
    let mut aux = vec![0usize; c_n];
    for c in 0..c_n {
        let mut pos = labels.positives_of_class(c);
        if pos.is_empty() {
            log::warn!(
                "class {} has no positive-labeled samples; easiness skipped",
                data.class_names()[c]
            );
            continue;
        }
        pos.sort_by(|&a, &b| {
            labels
                .confidence(b, c)
                .partial_cmp(&labels.confidence(a, c))
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        aux[c] = top_count(EASINESS_TOP_FRACTION, pos.len());
        for &i in &pos[aux[c]..] {
            weights.set(i, c, 0.0);
        }
    }
    let params = fit_weighted(data, cfg, &cfg.test_modality, &weights)?;
    let probs = predict_all(&params, data.features(&cfg.test_modality)?)?;
    let classes = (0..c_n)
        .map(|c| {
            let positives = labels.positives_of_class(c);
            let scores = positives.iter().map(|&i| probs.get(i, c)).collect();
            ClassEasiness {
                positives,
                scores,
                aux_positives: aux[c],
            }
        })
        .collect();
    Ok(EasinessScores { classes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Easy,
    Normal,
    Hard,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Easy, Bucket::Normal, Bucket::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Bucket::Easy => "easy",
            Bucket::Normal => "normal",
            Bucket::Hard => "hard",
        }
    }
}

/// Sizes of the easy/normal/hard split of `n` items: 30% (rounded), the
/// remainder, 30% (rounded).
pub fn bucket_sizes(n: usize) -> [usize; 3] {
    let edge = (3 * n + 5) / 10;
    let edge = edge.min(n / 2);
    [edge, n - 2 * edge, edge]
}

/// Bucket of each position of `scores` (easiest first by descending score,
/// ties by position).
pub fn assign_buckets(scores: &[f64]) -> Vec<Bucket> {
    let [easy, normal, _] = bucket_sizes(scores.len());
    let mut out = vec![Bucket::Hard; scores.len()];
    for (rank, &i) in rank_descending(scores).iter().enumerate() {
        out[i] = if rank < easy {
            Bucket::Easy
        } else if rank < easy + normal {
            Bucket::Normal
        } else {
            Bucket::Hard
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub bucket: Bucket,
    pub size: usize,
    pub true_positives: usize,
    pub tp_selected: usize,
    /// Macro mean over classes with true positives in the bucket.
    pub map: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EasinessReport {
    pub buckets: Vec<BucketMetrics>,
}

impl EasinessReport {
    pub fn bucket(&self, b: Bucket) -> &BucketMetrics {
        self.buckets
            .iter()
            .find(|m| m.bucket == b)
            .expect("every bucket is reported")
    }
}

/// Per-bucket selection AP and recall.
pub fn easiness_split_report(
    easiness: &EasinessScores,
    snapshot: &SelectionSnapshot,
    truth: &GroundTruth,
) -> Result<EasinessReport> {
    if easiness.classes.len() != snapshot.classes.len() {
        return Err(Error::argument("easiness and selection differ in class count"));
    }
    // Per bucket: size, true positives, selected true positives, APs, recalls.
    type Acc = (usize, usize, usize, Vec<f64>, Vec<f64>);
    let mut acc: Vec<Acc> = vec![(0, 0, 0, Vec::new(), Vec::new()); 3];
    for (c, (e, s)) in easiness.classes.iter().zip(&snapshot.classes).enumerate() {
        if e.positives != s.positives {
            return Err(Error::argument(format!(
                "class {c}: easiness and selection cover different samples"
            )));
        }
        let buckets = assign_buckets(&e.scores);
        let selected = s.selected();
        for (bi, b) in Bucket::ALL.iter().enumerate() {
            let members: Vec<usize> = (0..buckets.len()).filter(|&k| buckets[k] == *b).collect();
            let rel: Vec<bool> = members.iter().map(|&k| truth.is_member(s.positives[k], c)).collect();
            let tp = rel.iter().filter(|&&r| r).count();
            let tp_sel = members.iter().zip(&rel).filter(|(&k, &r)| r && selected[k]).count();
            let slot = &mut acc[bi];
            slot.0 += members.len();
            slot.1 += tp;
            slot.2 += tp_sel;
            if tp > 0 {
                let neg: Vec<f64> = members.iter().map(|&k| -s.losses[k]).collect();
                slot.3.push(average_precision(&neg, &rel)?);
                slot.4.push(tp_sel as f64 / tp as f64);
            }
        }
    }
    Ok(EasinessReport {
        buckets: Bucket::ALL
            .iter()
            .zip(acc)
            .map(
                |(&bucket, (size, true_positives, tp_selected, aps, recalls))| BucketMetrics {
                    bucket,
                    size,
                    true_positives,
                    tp_selected,
                    map: mean(aps.into_iter()),
                    recall: mean(recalls.into_iter()),
                },
            )
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestSplit {
    pub n_per_class: usize,
    pub n_background: usize,
}

impl Default for TestSplit {
    fn default() -> Self {
        TestSplit {
            n_per_class: 200,
            n_background: 1000,
        }
    }
}

/// Training and held-out test data, each with the concat modality built from
/// the test-time modalities.
#[derive(Debug, Clone)]
pub struct SynthExperiment {
    pub train: MultimodalDataset,
    pub test: MultimodalDataset,
    pub origins: Vec<SampleOrigin>,
}

pub fn prepare_synth_experiment(cfg: &SynthConfig, split: &TestSplit) -> Result<SynthExperiment> {
    let synth = synth_generate(cfg)?;
    let test = synth.test_split(cfg, split.n_per_class, split.n_background)?;
    let members = synth.dataset.content_modality_names();
    let train = make_concat_modality(&synth.dataset, &members)?;
    let test = make_concat_modality(&test.dataset, &members)?;
    Ok(SynthExperiment {
        train,
        test,
        origins: synth.origins,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Online self-paced training of the test modality alone.
    Baseline,
    /// Online training of every configured modality with consensus weights.
    Mmco,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Mmco => "mmco",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub outcome: TrainOutcome,
    pub test: TestMetrics,
    /// Selection at the first epoch whose `p` reached the schedule cap.
    pub selection_at_cap: Option<SelectionReport>,
    pub final_selection: Option<SelectionReport>,
    pub final_snapshot: SelectionSnapshot,
}

/// The configuration the baseline runs with: only the test modality.
pub fn baseline_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        train_modalities: vec![cfg.test_modality.clone()],
        voting_modalities: Vec::new(),
        ..cfg.clone()
    }
}

/// Trains with `method` on `train` and evaluates the test-modality model on
/// `test`.
pub fn run_method(
    train: &MultimodalDataset,
    test: &MultimodalDataset,
    cfg: &TrainConfig,
    method: Method,
) -> Result<MethodRun> {
    let data = TrainingData::new(train)?;
    let judge = train.ground_truth.as_ref().map(|truth| GroundTruthJudge { truth });
    let hooks = Hooks {
        observer: None,
        judge: judge.as_ref().map(|j| j as &dyn SelectionJudge),
    };
    let outcome = match method {
        Method::Baseline => train_online_well(&data, &baseline_config(cfg), hooks)?,
        Method::Mmco => train_mmco(&data, cfg, hooks)?,
    };
    let model = outcome.state.export(&cfg.test_modality, &train.class_names)?;
    let metrics = evaluate_model(&model, test)?;
    let selection_at_cap = outcome
        .reports
        .iter()
        .find(|r| r.p >= cfg.schedule.p_max - 1e-12)
        .and_then(|r| r.selection.clone());
    let final_selection = outcome.reports.last().and_then(|r| r.selection.clone());
    let final_snapshot = outcome.state.selection_snapshot(&data)?;
    Ok(MethodRun {
        outcome,
        test: metrics,
        selection_at_cap,
        final_selection,
        final_snapshot,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub noise: f64,
    pub seed: u64,
    pub method: Method,
    pub test_map: f64,
}

/// For every noise level and seed, generates data and trains with and
/// without co-training. `cfg.train_modalities` is the co-training set; the
/// baseline trains `cfg.test_modality` alone. Rows are ordered by level,
/// seed, then method.
pub fn noise_sweep(
    base: &SynthConfig,
    levels: &[f64],
    cfg: &TrainConfig,
    seeds: &[u64],
    split: &TestSplit,
) -> Result<Vec<SweepRow>> {
    for &l in levels {
        if !(0.0..1.0).contains(&l) {
            return Err(Error::config(format!("noise level {l} outside [0, 1)")));
        }
    }
    let cells: Vec<(f64, u64)> = levels
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    let rows: Vec<Vec<SweepRow>> = cells
        .par_iter()
        .map(|&(noise, seed)| {
            let synth = SynthConfig {
                noise_level: noise,
                seed,
                ..base.clone()
            };
            let exp = prepare_synth_experiment(&synth, split)?;
            let run_cfg = TrainConfig { seed, ..cfg.clone() };
            [Method::Baseline, Method::Mmco]
                .into_iter()
                .map(|method| {
                    let run = run_method(&exp.train, &exp.test, &run_cfg, method)?;
                    Ok(SweepRow {
                        noise,
                        seed,
                        method,
                        test_map: run.test.map,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub noise: f64,
    pub method: Method,
    pub runs: usize,
    pub mean_map: f64,
    pub std_map: f64,
}

/// Mean and sample standard deviation per (noise, method), in first-seen order.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut keys: Vec<(f64, Method)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.noise, r.method)) {
            keys.push((r.noise, r.method));
        }
    }
    keys.into_iter()
        .map(|(noise, method)| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.noise == noise && r.method == method)
                .map(|r| r.test_map)
                .collect();
            let m = mean(v.iter().copied());
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            SweepSummary {
                noise,
                method,
                runs: v.len(),
                mean_map: m,
                std_map: std,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub subset: Vec<String>,
    pub selection_map: f64,
    pub selection_precision: f64,
    pub selection_recall: f64,
    pub test_map: f64,
    pub prec_at_10: f64,
    pub prec_at_100: f64,
}

/// One co-training run per subset of voting modalities. The test-modality
/// classifier is always trained and evaluated; the subset decides which
/// classifiers vote on the weights.
pub fn modality_ablation(
    train: &MultimodalDataset,
    test: &MultimodalDataset,
    subsets: &[Vec<String>],
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let names = train.modality_names();
    for s in subsets {
        if s.is_empty() {
            return Err(Error::argument("empty modality subset"));
        }
        for m in s {
            if !names.contains(&m.as_str()) {
                return Err(Error::argument(format!("unknown modality `{m}`")));
            }
        }
    }
    subsets
        .par_iter()
        .map(|subset| {
            let mut train_modalities = subset.clone();
            if !train_modalities.contains(&cfg.test_modality) {
                train_modalities.push(cfg.test_modality.clone());
            }
            let run_cfg = TrainConfig {
                train_modalities,
                voting_modalities: subset.clone(),
                ..cfg.clone()
            };
            let run = run_method(train, test, &run_cfg, Method::Mmco)?;
            let sel = run
                .final_selection
                .ok_or_else(|| Error::data("training data has no ground truth"))?;
            Ok(AblationRow {
                subset: subset.clone(),
                selection_map: sel.macro_ap,
                selection_precision: sel.macro_precision,
                selection_recall: sel.macro_recall,
                test_map: run.test.map,
                prec_at_10: run.test.prec_at_10,
                prec_at_100: run.test.prec_at_100,
            })
        })
        .collect()
}

/// The default ablation subsets for a dataset: concat alone, each test-time
/// modality with concat, all test-time modalities, each train-only modality
/// with concat, and everything.
pub fn default_ablation_subsets(d: &MultimodalDataset) -> Vec<Vec<String>> {
    let content: Vec<String> = d.content_modality_names().iter().map(|s| s.to_string()).collect();
    let train_only: Vec<String> = d
        .meta
        .iter()
        .filter(|m| m.role == crate::dataset::ModalityRole::TrainOnly && m.name != CONCAT)
        .map(|m| m.name.clone())
        .collect();
    let concat = CONCAT.to_string();
    let mut out = vec![vec![concat.clone()]];
    for m in &content {
        out.push(vec![m.clone(), concat.clone()]);
    }
    out.push(content.clone());
    for m in &train_only {
        out.push(vec![concat.clone(), m.clone()]);
    }
    let mut all = content;
    all.extend(train_only);
    all.push(concat);
    out.push(all);
    out.dedup();
    out
}

/// Aligned-column text table.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: Vec<&str>| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, headers.to_vec());
    line(
        &mut out,
        widths
            .iter()
            .map(|&w| "-".repeat(w))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str)
            .collect(),
    );
    for r in rows {
        line(&mut out, r.iter().map(String::as_str).collect());
    }
    out
}

/// Tab-separated table with a header line.
pub fn render_tsv(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = headers.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join("\t"));
        out.push('\n');
    }
    out
}

/// One JSON document per line.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::State(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

pub const SWEEP_HEADERS: [&str; 4] = ["noise", "seed", "method", "test_map"];

pub fn sweep_cells(rows: &[SweepRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                format!("{:.2}", r.noise),
                r.seed.to_string(),
                r.method.name().into(),
                f4(r.test_map),
            ]
        })
        .collect()
}

pub const SWEEP_SUMMARY_HEADERS: [&str; 5] = ["noise", "method", "runs", "mean_map", "std_map"];

pub fn sweep_summary_cells(rows: &[SweepSummary]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                format!("{:.2}", r.noise),
                r.method.name().into(),
                r.runs.to_string(),
                f4(r.mean_map),
                f4(r.std_map),
            ]
        })
        .collect()
}

pub const ABLATION_HEADERS: [&str; 7] = [
    "modalities",
    "sel_map",
    "sel_prec",
    "sel_recall",
    "test_map",
    "prec@10",
    "prec@100",
];

pub fn ablation_cells(rows: &[AblationRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.subset.join("+"),
                f4(r.selection_map),
                f4(r.selection_precision),
                f4(r.selection_recall),
                f4(r.test_map),
                f4(r.prec_at_10),
                f4(r.prec_at_100),
            ]
        })
        .collect()
}

pub const EASINESS_HEADERS: [&str; 5] = ["bucket", "size", "true_pos", "sel_map", "sel_recall"];

pub fn easiness_cells(report: &EasinessReport) -> Vec<Vec<String>> {
    report
        .buckets
        .iter()
        .map(|b| {
            vec![
                b.bucket.name().into(),
                b.size.to_string(),
                b.true_positives.to_string(),
                f4(b.map),
                f4(b.recall),
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// AP from the definition: for each relevant item, count relevant items
    /// ranked at or above it.
    fn brute_ap(order: &[bool]) -> f64 {
        let mut total = 0.0;
        let mut n_rel = 0;
        for (i, &r) in order.iter().enumerate() {
            if r {
                n_rel += 1;
                let above = order[..=i].iter().filter(|&&x| x).count();
                total += above as f64 / (i + 1) as f64;
            }
        }
        total / n_rel as f64
    }

    fn in_order(rel: &[bool]) -> (Vec<f64>, Vec<bool>) {
        let scores = (0..rel.len()).map(|i| (rel.len() - i) as f64).collect();
        (scores, rel.to_vec())
    }

    #[test]
    fn ap_examples() {
        let (s, r) = in_order(&[true, true, false]);
        assert_eq!(average_precision(&s, &r).unwrap(), 1.0);
        let (s, r) = in_order(&[false, true]);
        assert_eq!(average_precision(&s, &r).unwrap(), 0.5);
        let (s, r) = in_order(&[true, false, true]);
        assert!((average_precision(&s, &r).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!(matches!(
            average_precision(&[0.1, 0.2], &[false, false]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ap_ties_break_by_index() {
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
    }

    #[test]
    fn ap_matches_brute_force_exhaustively() {
        for len in 1..=8usize {
            for mask in 0u32..(1 << len) {
                let rel: Vec<bool> = (0..len).map(|i| mask >> i & 1 == 1).collect();
                if !rel.iter().any(|&r| r) {
                    continue;
                }
                let (s, r) = in_order(&rel);
                assert_eq!(average_precision(&s, &r).unwrap(), brute_ap(&rel));
            }
        }
    }

    #[test]
    fn precision_at_k_basics() {
        let s = [0.9, 0.8, 0.1, 0.7];
        let r = [true, true, false, false];
        assert_eq!(precision_at_k(&s, &r, 2).unwrap(), 1.0);
        assert_eq!(precision_at_k(&s, &r, 3).unwrap(), 2.0 / 3.0);
        assert!(precision_at_k(&s, &r, 5).is_err());
        assert!(precision_at_k(&s, &r, 0).is_err());
    }

    #[test]
    fn map_perfect_and_skips_empty_classes() {
        let truth = GroundTruth::new(3, 2, vec![1, 0, 1, 0, 0, 0]).unwrap();
        let scores = Matrix::from_rows(2, &[vec![0.9, 0.1], vec![0.2, 0.5], vec![0.1, 0.9]]);
        assert_eq!(mean_average_precision(&scores, &truth).unwrap(), 1.0);
    }

    /// Permutations of `0..n` by Heap's algorithm.
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if k == 1 {
                out.push(a.clone());
                return;
            }
            for i in 0..k {
                heap(k - 1, a, out);
                if k.is_multiple_of(2) {
                    a.swap(i, k - 1);
                } else {
                    a.swap(0, k - 1);
                }
            }
        }
        let mut out = Vec::new();
        heap(n, &mut (0..n).collect(), &mut out);
        out
    }

    #[test]
    fn map_matches_exhaustive_rankings() {
        let n = 6;
        let rel = [true, false, true, false, false, true];
        for perm in permutations(n) {
            let scores: Vec<f64> = perm.iter().map(|&p| p as f64).collect();
            let order: Vec<bool> = rank_descending(&scores).iter().map(|&i| rel[i]).collect();
            let truth = GroundTruth::new(n, 1, rel.iter().map(|&r| r as u8).collect()).unwrap();
            let m = Matrix::from_vec(n, 1, scores.clone());
            assert_eq!(mean_average_precision(&m, &truth).unwrap(), brute_ap(&order));
            for k in 1..=n {
                let want = order[..k].iter().filter(|&&r| r).count() as f64 / k as f64;
                assert_eq!(precision_at_k(&scores, &rel, k).unwrap(), want);
            }
        }
    }

    fn truth_for(rel: &[bool]) -> GroundTruth {
        GroundTruth::new(rel.len(), 1, rel.iter().map(|&r| r as u8).collect()).unwrap()
    }

    #[test]
    fn selection_conventions() {
        let rel = [true, false, true, true];
        let truth = truth_for(&rel);
        let sel = |lambda| ClassSelection {
            positives: vec![0, 1, 2, 3],
            losses: vec![0.1, 0.2, 0.3, 0.4],
            lambda: Some(lambda),
        };
        let none = class_selection_metrics(&sel(0.05), &truth, 0).unwrap();
        assert_eq!((none.selected, none.precision, none.recall), (0, 1.0, Some(0.0)));
        assert!(none.empty_selection);
        let all = class_selection_metrics(&sel(1.0), &truth, 0).unwrap();
        assert_eq!(all.precision, 0.75);
        assert_eq!(all.recall, Some(1.0));
        let empty = ClassSelection {
            positives: vec![],
            losses: vec![],
            lambda: Some(1.0),
        };
        assert!(matches!(
            class_selection_metrics(&empty, &truth, 0),
            Err(Error::UndefinedMetric(_))
        ));
    }

    proptest! {
        #[test]
        fn selection_matches_recount(
            items in prop::collection::vec((0.0f64..3.0, any::<bool>()), 1..40),
            lambda in 0.01f64..3.0,
        ) {
            let rel: Vec<bool> = items.iter().map(|x| x.1).collect();
            let truth = truth_for(&rel);
            let sel = ClassSelection {
                positives: (0..items.len()).collect(),
                losses: items.iter().map(|x| x.0).collect(),
                lambda: Some(lambda),
            };
            let m = class_selection_metrics(&sel, &truth, 0).unwrap();
            let mut chosen = 0;
            let mut tp = 0;
            for &(l, r) in &items {
                if l < lambda {
                    chosen += 1;
                    if r { tp += 1; }
                }
            }
            prop_assert_eq!(m.selected, chosen);
            prop_assert_eq!(m.tp_selected, tp);
            prop_assert_eq!(m.selected, m.tp_selected + m.fp_selected);
            if chosen > 0 {
                prop_assert!((m.precision * chosen as f64 - tp as f64).abs() < 1e-9);
            }
            prop_assert!((0.0..=1.0).contains(&m.precision));
            if let Some(r) = m.recall { prop_assert!((0.0..=1.0).contains(&r)); }
            if let Some(a) = m.ap { prop_assert!((0.0..=1.0).contains(&a)); }
        }

        #[test]
        fn buckets_partition(scores in prop::collection::vec(0.0f64..1.0, 0..60)) {
            let b = assign_buckets(&scores);
            let sizes = bucket_sizes(scores.len());
            for (k, bucket) in Bucket::ALL.iter().enumerate() {
                prop_assert_eq!(b.iter().filter(|x| *x == bucket).count(), sizes[k]);
            }
            prop_assert_eq!(sizes.iter().sum::<usize>(), scores.len());
        }
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(bucket_sizes(10), [3, 4, 3]);
        let equal = assign_buckets(&[0.5; 10]);
        assert_eq!(&equal[..3], &[Bucket::Easy; 3]);
        assert_eq!(&equal[3..7], &[Bucket::Normal; 4]);
        assert_eq!(&equal[7..], &[Bucket::Hard; 3]);
    }

    #[test]
    fn easiness_report_recount() {
        // One class, ten positives; easiness descending with index.
        let rel = [true, true, false, true, false, true, true, false, true, true];
        let truth = truth_for(&rel);
        let scores: Vec<f64> = (0..10).map(|i| 1.0 - i as f64 / 10.0).collect();
        let losses = vec![0.1, 0.9, 0.2, 0.3, 0.1, 0.8, 0.2, 0.1, 0.9, 0.4];
        let e = EasinessScores {
            classes: vec![ClassEasiness {
                positives: (0..10).collect(),
                scores,
                aux_positives: 3,
            }],
        };
        let snap = SelectionSnapshot {
            classes: vec![ClassSelection {
                positives: (0..10).collect(),
                losses,
                lambda: Some(0.5),
            }],
        };
        let r = easiness_split_report(&e, &snap, &truth).unwrap();
        // easy = {0,1,2}: true {0,1}, selected true {0} -> recall 1/2.
        let easy = r.bucket(Bucket::Easy);
        assert_eq!((easy.size, easy.true_positives, easy.tp_selected), (3, 2, 1));
        assert_eq!(easy.recall, 0.5);
        // ranking by ascending loss: 0 (0.1, rel), 2 (0.2), 1 (0.9, rel)
        assert!((easy.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        // normal = {3,4,5,6}: true {3,5,6}, selected true {3,6}.
        let normal = r.bucket(Bucket::Normal);
        assert_eq!((normal.size, normal.true_positives, normal.tp_selected), (4, 3, 2));
        // hard = {7,8,9}: true {8,9}, selected true {9}.
        let hard = r.bucket(Bucket::Hard);
        assert_eq!((hard.size, hard.true_positives, hard.tp_selected), (3, 2, 1));
    }

    #[test]
    fn retrieval_order() {
        let params = ClassifierParams::zeros(crate::models::ModelKind::Linear, 1, 1, 0).unwrap();
        let mut params = params;
        params.values_mut()[0] = 1.0;
        let x = Matrix::from_vec(4, 1, vec![0.5, -1.0, 2.0, 0.5]);
        let d = MultimodalDataset {
            meta: vec![crate::dataset::ModalityDescriptor::new(
                "concat",
                1,
                crate::dataset::ModalityRole::TrainAndTest,
            )],
            features: vec![x],
            metadata: None,
            ground_truth: None,
            class_names: vec!["a".into()],
            labels: None,
        };
        let model = ModelFile {
            modality: "concat".into(),
            class_names: vec!["a".into()],
            params,
        };
        let hits = top_k_retrieval(&model, &d, 0, 4).unwrap();
        let order: Vec<usize> = hits.iter().map(|h| h.sample).collect();
        assert_eq!(order, vec![2, 0, 3, 1]);
        assert_eq!(top_k_retrieval(&model, &d, 0, 1).unwrap()[0].sample, 2);
        assert!(top_k_retrieval(&model, &d, 0, 5).is_err());
    }

    #[test]
    fn table_alignment() {
        let t = render_table(&["a", "long"], &[vec!["xyz".into(), "1".into()]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "a    long");
        assert_eq!(lines[1], "---  ----");
        assert_eq!(lines[2], "xyz  1");
    }

    #[test]
    fn top_count_rounds_up() {
        assert_eq!(top_count(0.3, 10), 3);
        assert_eq!(top_count(0.3, 11), 4);
        assert_eq!(top_count(0.3, 1), 1);
        assert_eq!(top_count(0.3, 0), 0);
    }
}
