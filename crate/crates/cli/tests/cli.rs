use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use webly_core::dataset::{load_dataset, save_dataset};
use webly_core::eval::top_k_retrieval;
use webly_core::models::load_model;

const CONFIG: &str = r#"
checkpoint_every = 3

[synth]
n_classes = 3
n_per_class = 60
n_background = 150
modality_dims = [6, 6, 4]
noise_level = 0.4
train_only_modalities = 1
class_separation = 2.5
seed = 3

[test_split]
n_per_class = 60
n_background = 150

[train]
epochs = 6
batch_size = 32
train_modalities = ["m0", "m1", "m2", "concat"]

[train.optimizer]
lr = 0.01
"#;

fn webly(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_webly"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = webly(args);
    assert!(
        out.status.success(),
        "webly {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, CONFIG).unwrap();
    path
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn records(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_with_the_same_seed_writes_identical_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&["synth", "--config", s(&cfg), "--seed", "5", "--out", s(out)]);
    }
    for part in ["train", "test"] {
        assert_eq!(dir_contents(&a.join(part)), dir_contents(&b.join(part)));
        load_dataset(&a.join(part)).unwrap();
    }
    assert!(a.join("config.toml").exists());
}

#[test]
fn out_of_range_noise_is_a_config_error_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");
    let res = webly(&["synth", "--noise-level", "1.5", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn unknown_config_key_exits_with_config_status() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepoch = 3\n").unwrap();
    let res = webly(&["train", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn missing_files_exit_with_data_status() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    let res = webly(&["eval", "--model", s(&missing), "--dataset", s(&missing)]);
    assert_eq!(res.status.code(), Some(3));
}

#[test]
fn training_twice_and_from_the_snapshot_gives_identical_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&["train", "--config", s(&cfg), "--voting", "average", "--out", s(&a)]);
    ok(&["train", "--config", s(&cfg), "--voting", "average", "--out", s(&b)]);
    let snapshot = a.join("config.toml");
    ok(&["train", "--config", s(&snapshot), "--out", s(&c)]);

    let log = fs::read(a.join("metrics.jsonl")).unwrap();
    assert_eq!(log, fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(log, fs::read(c.join("metrics.jsonl")).unwrap());

    let recs = records(&a.join("metrics.jsonl"));
    assert_eq!(recs.len(), 7);
    assert!(recs.iter().all(|r| r["schema"] == "webly-metrics/1"));
    assert_eq!(recs.iter().filter(|r| r["record"] == "epoch").count(), 6);
    assert_eq!(recs[6]["record"], "test");
    assert!(fs::read_to_string(&snapshot).unwrap().contains("voting = \"average\""));
}

#[test]
fn eval_of_a_checkpoint_matches_the_in_run_report_and_retrieve_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);

    let run = tmp.path().join("run");
    let train_cfg = tmp.path().join("train.toml");
    let text = CONFIG.split("[test_split]").nth(1).unwrap();
    fs::write(&train_cfg, format!("checkpoint_every = 3\n[test_split]{text}")).unwrap();
    ok(&[
        "train",
        "--config",
        s(&train_cfg),
        "--dataset",
        s(&data.join("train")),
        "--test-dataset",
        s(&data.join("test")),
        "--out",
        s(&run),
    ]);
    let recs = records(&run.join("metrics.jsonl"));
    let in_run = recs.last().unwrap();
    assert_eq!(in_run["record"], "test");

    let checkpoint = run.join("checkpoints").join("epoch_0006").join("concat.model");
    assert!(run.join("checkpoints").join("epoch_0003").join("m2.model").exists());
    let out = ok(&[
        "eval",
        "--model",
        s(&checkpoint),
        "--dataset",
        s(&data.join("test")),
        "--json",
    ]);
    let evaluated: Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["map", "prec_at_10", "prec_at_100"] {
        assert_eq!(evaluated[key], in_run[key], "{key}");
    }

    let out = ok(&[
        "retrieve",
        "--model",
        s(&checkpoint),
        "--dataset",
        s(&data.join("test")),
        "--class",
        "concept1",
        "--k",
        "10",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let listed: Vec<(usize, usize)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap())
        })
        .collect();
    let model = load_model(&checkpoint).unwrap();
    let test = load_dataset(&data.join("test")).unwrap();
    let want: Vec<(usize, usize)> = top_k_retrieval(&model, &test, 1, 10)
        .unwrap()
        .iter()
        .map(|h| (h.rank, h.sample))
        .collect();
    assert_eq!(listed, want);
}

fn recount(labels: &Path, concepts: &[&str]) -> Vec<usize> {
    let mut counts = vec![0; concepts.len()];
    for r in records(labels) {
        for key in r["positives"].as_object().unwrap().keys() {
            counts[concepts.iter().position(|c| c == key).unwrap()] += 1;
        }
    }
    counts
}

#[test]
fn label_prints_counts_that_match_a_recount_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    let train = data.join("train");
    let concepts = ["concept0", "concept1", "concept2"];
    let file = tmp.path().join("concepts.txt");
    fs::write(&file, concepts.join("\n")).unwrap();

    let before = fs::read(train.join("labels.jsonl")).unwrap();
    let out = ok(&["label", "--dataset", s(&train), "--concepts", s(&file)]);
    let after = fs::read(train.join("labels.jsonl")).unwrap();
    assert_eq!(before, after);
    ok(&["label", "--dataset", s(&train), "--concepts", s(&file)]);
    assert_eq!(after, fs::read(train.join("labels.jsonl")).unwrap());

    let printed: Vec<usize> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            concepts
                .contains(&f.first()?.trim_matches('|'))
                .then(|| f.last().unwrap().trim_matches('|').parse().unwrap())
        })
        .collect();
    assert_eq!(printed, recount(&train.join("labels.jsonl"), &concepts));
    assert!(load_dataset(&train).unwrap().ground_truth.is_some());
}

#[test]
fn concepts_matching_nothing_give_negative_labels_and_a_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    let train = data.join("train");
    let file = tmp.path().join("concepts.txt");
    fs::write(&file, "# unrelated\nzebra crossing\n").unwrap();
    let out = ok(&["label", "--dataset", s(&train), "--concepts", s(&file)]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("matched no sample"), "{stderr}");
    assert_eq!(recount(&train.join("labels.jsonl"), &["zebra crossing"]), [0]);
    let d = load_dataset(&train).unwrap();
    assert_eq!(d.class_names, ["zebra crossing"]);
    assert!(d.ground_truth.is_none());
}

#[test]
fn training_unlabeled_data_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    let train = data.join("train");
    let mut d = load_dataset(&train).unwrap();
    d.labels = None;
    save_dataset(&d, &train).unwrap();
    let res = webly(&["train", "--dataset", s(&train), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(res.status.code(), Some(3));
}

#[test]
fn self_checks_pass() {
    let out = ok(&["check", "--seed", "3"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().all(|l| l.contains("PASS")), "{text}");
}
