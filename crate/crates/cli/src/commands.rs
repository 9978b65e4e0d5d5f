use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use webly_core::dataset::{load_dataset, make_concat_modality, save_dataset, CONCAT};
use webly_core::eval::{
    ablation_cells, average_precision, baseline_config, default_ablation_subsets, evaluate_model, modality_ablation,
    noise_sweep, prepare_synth_experiment, render_table, render_tsv, summarize_sweep, sweep_cells, sweep_summary_cells,
    top_k_retrieval, write_text, GroundTruthJudge, TestMetrics, ABLATION_HEADERS, SWEEP_HEADERS, SWEEP_SUMMARY_HEADERS,
};
use webly_core::mmco::{combine_raw, consensus_weight};
use webly_core::models::{finite_difference_check, init_params, load_model, save_model, ModelKind, WeightedBatch};
use webly_core::pseudolabel::label_dataset;
use webly_core::selfpaced::{compute_sample_weight, regularizer_value, AgeState};
use webly_core::training::{
    train_batch_well, train_mmco, train_online_well, train_plain, CheckpointWriter, Hooks, SelectionJudge, TrainConfig,
    TrainObserver, TrainerState, TrainingData,
};
use webly_core::{Error, Matrix, MultimodalDataset, Result, VotingScheme};

use crate::config::{RunConfig, RunMethod};

pub const METRICS_SCHEMA: &str = "webly-metrics/1";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// One line of a metrics log.
#[derive(Serialize)]
struct Record<'a, T: Serialize> {
    schema: &'static str,
    record: &'static str,
    #[serde(flatten)]
    body: &'a T,
}

fn record_line<T: Serialize>(kind: &'static str, body: &T) -> String {
    let r = Record {
        schema: METRICS_SCHEMA,
        record: kind,
        body,
    };
    serde_json::to_string(&r).expect("metrics record serializes")
}

fn records<T: Serialize>(kind: &'static str, items: &[T]) -> String {
    items.iter().map(|i| record_line(kind, i) + "\n").collect()
}

/// Adds the concat modality when it is required but absent.
fn with_concat(d: MultimodalDataset, needed: bool) -> Result<MultimodalDataset> {
    if !needed || d.modality_index(CONCAT).is_some() {
        return Ok(d);
    }
    let members = d.content_modality_names();
    info!("building `{CONCAT}` from {members:?}");
    make_concat_modality(&d, &members)
}

fn needs_concat(cfg: &TrainConfig) -> bool {
    cfg.train_modalities
        .iter()
        .chain([&cfg.test_modality])
        .any(|m| m == CONCAT)
}

/// Training data and optional test data for a configured run.
fn load_run_data(cfg: &RunConfig) -> Result<(MultimodalDataset, Option<MultimodalDataset>)> {
    cfg.check_source()?;
    if let Some(s) = &cfg.synth {
        let exp = prepare_synth_experiment(s, &cfg.test_split)?;
        return Ok((exp.train, Some(exp.test)));
    }
    let need = needs_concat(&cfg.train);
    let train = with_concat(load_dataset(cfg.dataset.as_deref().expect("checked"))?, need)?;
    let test = match &cfg.test_dataset {
        Some(p) => Some(with_concat(load_dataset(p)?, need)?),
        None => None,
    };
    Ok((train, test))
}

fn dataset_summary(name: &str, d: &MultimodalDataset) -> String {
    let modalities: Vec<String> = d.meta.iter().map(|m| format!("{}[{}]", m.name, m.dim)).collect();
    let positives = d
        .labels
        .as_ref()
        .map(|l| format!(", labeled positives per class {:?}", l.positive_counts()))
        .unwrap_or_default();
    format!(
        "{name}: {} samples, {} classes, modalities {}{positives}",
        d.n_samples(),
        d.n_classes(),
        modalities.join(" ")
    )
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let s = cfg.synth_only()?;
    let out = cfg.out_dir()?.to_path_buf();
    cfg.write_snapshot()?;
    let exp = prepare_synth_experiment(&s, &cfg.test_split)?;
    save_dataset(&exp.train, &out.join("train"))?;
    save_dataset(&exp.test, &out.join("test"))?;
    println!("{}", dataset_summary("train", &exp.train));
    println!("{}", dataset_summary("test", &exp.test));
    println!("written to {}", out.display());
    Ok(())
}

/// Concepts file: one concept per line; blank lines and `#` comments skipped.
pub fn read_concepts(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let concepts: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    if concepts.is_empty() {
        return Err(Error::argument(format!("{} lists no concepts", path.display())));
    }
    Ok(concepts)
}

pub fn label(dataset: &Path, concepts_file: &Path) -> Result<()> {
    let concepts = read_concepts(concepts_file)?;
    let mut d = load_dataset(dataset)?;
    let labels = label_dataset(&d, &concepts)?;
    if concepts != d.class_names {
        if d.ground_truth.take().is_some() {
            warn!("concepts differ from the dataset classes; dropping ground truth");
        }
        d.class_names = concepts.clone();
    }
    let counts = labels.positive_counts();
    for (c, &n) in concepts.iter().zip(&counts) {
        if n == 0 {
            warn!("concept `{c}` matched no sample");
        }
    }
    d.labels = Some(labels);
    save_dataset(&d, dataset)?;
    let rows: Vec<Vec<String>> = concepts
        .iter()
        .zip(&counts)
        .map(|(c, n)| vec![c.clone(), n.to_string()])
        .collect();
    print!("{}", render_table(&["concept", "positives"], &rows));
    Ok(())
}

/// Writes one metrics record per epoch as training proceeds, plus
/// checkpoints when enabled.
struct EpochLog {
    lines: String,
    checkpoints: Option<CheckpointWriter>,
}

impl TrainObserver for EpochLog {
    fn on_epoch(&mut self, state: &TrainerState, report: &webly_core::training::EpochReport) -> Result<()> {
        self.lines.push_str(&record_line("epoch", report));
        self.lines.push('\n');
        info!(
            "epoch {} p={:.2} loss {}",
            report.epoch + 1,
            report.p,
            report
                .losses
                .iter()
                .map(|l| format!("{}={:.4}", l.modality, l.mean_loss))
                .collect::<Vec<_>>()
                .join(" ")
        );
        match &mut self.checkpoints {
            Some(w) => w.on_epoch(state, report),
            None => Ok(()),
        }
    }
}

#[derive(Serialize)]
struct TestRecord<'a> {
    modality: &'a str,
    #[serde(flatten)]
    metrics: &'a TestMetrics,
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    cfg.train.validate()?;
    let out = cfg.out_dir()?.to_path_buf();
    let (train, test) = load_run_data(cfg)?;
    cfg.write_snapshot()?;
    let data = TrainingData::new(&train)?;
    let judge = train.ground_truth.as_ref().map(|truth| GroundTruthJudge { truth });
    let judge = judge.as_ref().map(|j| j as &dyn SelectionJudge);
    let mut log = EpochLog {
        lines: String::new(),
        checkpoints: (cfg.checkpoint_every > 0)
            .then(|| CheckpointWriter::new(out.join("checkpoints"), cfg.checkpoint_every, train.class_names.clone())),
    };
    let single = baseline_config(&cfg.train);
    let hooks = Hooks {
        observer: Some(&mut log),
        judge,
    };
    let (state, rounds) = match cfg.method {
        RunMethod::Mmco => (train_mmco(&data, &cfg.train, hooks)?.state, Vec::new()),
        RunMethod::OnlineWell => (train_online_well(&data, &single, hooks)?.state, Vec::new()),
        RunMethod::Plain => (train_plain(&data, &cfg.train, hooks)?.state, Vec::new()),
        RunMethod::BatchWell => {
            let outcome = train_batch_well(&data, &single, &cfg.batch_well, hooks)?;
            (outcome.state, outcome.rounds)
        }
    };
    log.lines.push_str(&records("round", &rounds));

    let model_dir = out.join("model");
    for m in &state.models {
        save_model(
            &state.export(&m.name, &train.class_names)?,
            &model_dir.join(format!("{}.model", m.name)),
        )?;
    }
    let test_model = state.export(&cfg.train.test_modality, &train.class_names)?;
    if let Some(test) = &test {
        let metrics = evaluate_model(&test_model, test)?;
        log.lines.push_str(&record_line(
            "test",
            &TestRecord {
                modality: &cfg.train.test_modality,
                metrics: &metrics,
            },
        ));
        log.lines.push('\n');
        print!("{}", metrics_table(&cfg.train.test_modality, &metrics));
    } else {
        info!("no test data; skipping evaluation");
    }
    write_text(&out.join(METRICS_FILE), &log.lines)?;
    println!("models written to {}", model_dir.display());
    Ok(())
}

fn metrics_table(modality: &str, m: &TestMetrics) -> String {
    render_table(
        &["modality", "map", "prec@10", "prec@100"],
        &[vec![
            modality.to_string(),
            format!("{:.4}", m.map),
            format!("{:.4}", m.prec_at_10),
            format!("{:.4}", m.prec_at_100),
        ]],
    )
}

fn load_for_model(model_path: &Path, dataset: &Path) -> Result<(webly_core::ModelFile, MultimodalDataset)> {
    let model = load_model(model_path)?;
    let d = with_concat(load_dataset(dataset)?, model.modality == CONCAT)?;
    Ok((model, d))
}

pub fn eval(model_path: &Path, dataset: &Path, json: bool) -> Result<()> {
    let (model, d) = load_for_model(model_path, dataset)?;
    let metrics = evaluate_model(&model, &d)?;
    if json {
        println!(
            "{}",
            record_line(
                "test",
                &TestRecord {
                    modality: &model.modality,
                    metrics: &metrics
                }
            )
        );
    } else {
        print!("{}", metrics_table(&model.modality, &metrics));
    }
    Ok(())
}

fn class_index(names: &[String], class: &str) -> Result<usize> {
    if let Some(i) = names.iter().position(|n| n == class) {
        return Ok(i);
    }
    class
        .parse::<usize>()
        .ok()
        .filter(|&i| i < names.len())
        .ok_or_else(|| Error::argument(format!("unknown class `{class}`; known: {}", names.join(", "))))
}

pub fn retrieve(model_path: &Path, dataset: &Path, class: &str, k: usize) -> Result<()> {
    let (model, d) = load_for_model(model_path, dataset)?;
    let c = class_index(&d.class_names, class)?;
    let hits = top_k_retrieval(&model, &d, c, k)?;
    let truth = d.ground_truth.as_ref();
    let mut headers = vec!["rank", "sample", "score"];
    if truth.is_some() {
        headers.push("relevant");
    }
    let rows: Vec<Vec<String>> = hits
        .iter()
        .map(|h| {
            let mut row = vec![h.rank.to_string(), h.sample.to_string(), format!("{:.6}", h.score)];
            if let Some(t) = truth {
                row.push(u8::from(t.is_member(h.sample, c)).to_string());
            }
            row
        })
        .collect();
    print!("{}", render_tsv(&headers, &rows));
    Ok(())
}

pub fn sweep_noise(cfg: &RunConfig) -> Result<()> {
    let s = cfg.synth_only()?;
    cfg.train.validate()?;
    if cfg.sweep.levels.is_empty() || cfg.sweep.seeds.is_empty() {
        return Err(Error::config("sweep needs at least one level and one seed"));
    }
    for &l in &cfg.sweep.levels {
        if !(0.0..1.0).contains(&l) {
            return Err(Error::config(format!("noise level {l} outside [0, 1)")));
        }
    }
    let out = cfg.out_dir()?.to_path_buf();
    cfg.write_snapshot()?;
    let rows = noise_sweep(&s, &cfg.sweep.levels, &cfg.train, &cfg.sweep.seeds, &cfg.test_split)?;
    let summary = summarize_sweep(&rows);
    write_text(&out.join(METRICS_FILE), &records("sweep", &rows))?;
    write_text(&out.join("sweep.tsv"), &render_tsv(&SWEEP_HEADERS, &sweep_cells(&rows)))?;
    let cells = sweep_summary_cells(&summary);
    write_text(
        &out.join("sweep_summary.tsv"),
        &render_tsv(&SWEEP_SUMMARY_HEADERS, &cells),
    )?;
    print!("{}", render_table(&SWEEP_SUMMARY_HEADERS, &cells));
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    cfg.train.validate()?;
    let out = cfg.out_dir()?.to_path_buf();
    let (train, test) = load_run_data(cfg)?;
    let test = test.ok_or_else(|| Error::config("ablation needs test data: set `test_dataset`"))?;
    cfg.write_snapshot()?;
    let subsets = if cfg.ablation.subsets.is_empty() {
        default_ablation_subsets(&train)
    } else {
        cfg.ablation.subsets.clone()
    };
    let rows = modality_ablation(&train, &test, &subsets, &cfg.train)?;
    let cells = ablation_cells(&rows);
    write_text(&out.join(METRICS_FILE), &records("ablation", &rows))?;
    write_text(&out.join("ablation.tsv"), &render_tsv(&ABLATION_HEADERS, &cells))?;
    print!("{}", render_table(&ABLATION_HEADERS, &cells));
    Ok(())
}

struct CheckLine {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check_gradients(rng: &mut ChaCha8Rng) -> Result<CheckLine> {
    let mut worst = 0.0f64;
    for kind in [ModelKind::Linear, ModelKind::Mlp] {
        for _ in 0..20 {
            let (dim, c, b) = (rng.random_range(2..7), rng.random_range(1..4), rng.random_range(2..9));
            let mut params = init_params(kind, dim, c, 8, rng.random())?;
            for v in params.values_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
            let x = Matrix::from_vec(b, dim, (0..b * dim).map(|_| rng.random_range(-1.0..1.0)).collect());
            let y = Matrix::from_vec(b, c, (0..b * c).map(|_| f64::from(rng.random_range(0..2u8))).collect());
            let w = Matrix::from_vec(b, c, (0..b * c).map(|_| rng.random_range(0.0..1.0)).collect());
            let rows: Vec<usize> = (0..b).collect();
            let batch = WeightedBatch {
                features: &x,
                rows: &rows,
                targets: &y,
                weights: &w,
            };
            worst = worst.max(finite_difference_check(&params, &batch, 1e-5, 0)?);
        }
    }
    Ok(CheckLine {
        name: "gradient",
        pass: worst <= 1e-5,
        detail: format!("max relative error {worst:.2e} over 40 linear and mlp instances"),
    })
}

fn check_weight_rule(rng: &mut ChaCha8Rng) -> Result<CheckLine> {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let l: f64 = rng.random_range(0.0..3.0);
        let lambda: f64 = rng.random_range(0.01..3.0);
        let (mut best_f, mut best_v) = (f64::INFINITY, 0.0);
        for k in 0..=10_000 {
            let v = f64::from(k) * 1e-4;
            let f = v * l + regularizer_value(v, lambda);
            if f < best_f {
                (best_f, best_v) = (f, v);
            }
        }
        worst = worst.max((compute_sample_weight(l, lambda)? - best_v).abs());
    }
    Ok(CheckLine {
        name: "weight-rule",
        pass: worst <= 1e-4,
        detail: format!("max |v - grid argmin| {worst:.2e} over 200 pairs"),
    })
}

fn check_voting(rng: &mut ChaCha8Rng) -> Result<CheckLine> {
    let mut violations = 0;
    for _ in 0..10_000 {
        let m = rng.random_range(1..6);
        let s: Vec<f64> = (0..m).map(|_| rng.random_range(1e-7..1.0 - 1e-7)).collect();
        let min = s.iter().copied().fold(f64::INFINITY, f64::min);
        let max = combine_raw(&s, VotingScheme::Max)?;
        let avg = combine_raw(&s, VotingScheme::Average)?;
        let prod = combine_raw(&s, VotingScheme::Product)?;
        if !(prod <= min && min <= avg && avg <= max) {
            violations += 1;
        }
        let lambda = rng.random_range(0.05..3.0);
        let joint = consensus_weight(&s, 1.0, lambda, VotingScheme::Max)?;
        for &one in &s {
            if joint < consensus_weight(&[one], 1.0, lambda, VotingScheme::Max)? {
                violations += 1;
            }
        }
    }
    Ok(CheckLine {
        name: "voting",
        pass: violations == 0,
        detail: format!("{violations} ordering or max-rescue violations over 10000 score vectors"),
    })
}

fn check_percentile(rng: &mut ChaCha8Rng) -> Result<CheckLine> {
    let mut failures = 0;
    for &n in &[1usize, 7, 100, 1000] {
        let pool: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let mut sorted = pool.clone();
        sorted.sort_by(f64::total_cmp);
        for k in 6..=20usize {
            let mut state = AgeState::new(1, n, k as f64 * 0.05)?;
            state.push_losses(0, &pool);
            let rank = (k * n).div_ceil(20).max(1);
            if state.compute_age(0)? != sorted[rank - 1] {
                failures += 1;
            }
        }
    }
    Ok(CheckLine {
        name: "age-percentile",
        pass: failures == 0,
        detail: format!("{failures} mismatches against the sorted nearest rank"),
    })
}

fn check_average_precision() -> Result<CheckLine> {
    let mut mismatches = 0;
    for len in 1..=8usize {
        for mask in 1u32..(1 << len) {
            let rel: Vec<bool> = (0..len).map(|i| mask >> i & 1 == 1).collect();
            let scores: Vec<f64> = (0..len).map(|i| (len - i) as f64).collect();
            let (mut hits, mut total) = (0, 0.0);
            for (i, &r) in rel.iter().enumerate() {
                if r {
                    hits += 1;
                    total += f64::from(hits) / (i + 1) as f64;
                }
            }
            if average_precision(&scores, &rel)? != total / f64::from(hits) {
                mismatches += 1;
            }
        }
    }
    Ok(CheckLine {
        name: "average-precision",
        pass: mismatches == 0,
        detail: format!("{mismatches} mismatches over every relevance pattern up to length 8"),
    })
}

pub fn check(seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lines = [
        check_gradients(&mut rng)?,
        check_weight_rule(&mut rng)?,
        check_voting(&mut rng)?,
        check_percentile(&mut rng)?,
        check_average_precision()?,
    ];
    let mut failed = 0;
    for l in &lines {
        println!("{:<18} {}  {}", l.name, if l.pass { "PASS" } else { "FAIL" }, l.detail);
        failed += usize::from(!l.pass);
    }
    if failed > 0 {
        return Err(Error::State(format!("{failed} checks failed")));
    }
    Ok(())
}
