//! Pseudo labels and label confidences inferred from metadata text by exact
//! word matching against concept names.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::MultimodalDataset;
use crate::error::{Error, Result};

/// Per-sample, per-class pseudo labels `y`, prior confidences `v0` and the
/// match counts they were derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMatrix {
    n_samples: usize,
    n_classes: usize,
    labels: Vec<u8>,
    confidence: Vec<f64>,
    match_counts: Vec<u32>,
}

impl PseudoLabelMatrix {
    /// Builds labels from raw match counts: positive iff the count is at
    /// least one, confidence from [`confidence_from_count`], 1 for negatives.
    pub fn from_counts(n_samples: usize, n_classes: usize, counts: Vec<u32>) -> Result<Self> {
        if counts.len() != n_samples * n_classes {
            return Err(Error::argument(format!(
                "{} counts for a {}x{} label matrix",
                counts.len(),
                n_samples,
                n_classes
            )));
        }
        let labels = counts.iter().map(|&k| (k >= 1) as u8).collect();
        let confidence = counts
            .iter()
            .map(|&k| if k == 0 { 1.0 } else { count_ratio(k) })
            .collect();
        Ok(PseudoLabelMatrix {
            n_samples,
            n_classes,
            labels,
            confidence,
            match_counts: counts,
        })
    }

    /// Builds labels with explicit confidences (e.g. from another inference
    /// method). Entries with `count == 0` are negatives and must carry `v0 = 1`.
    pub fn from_parts(n_samples: usize, n_classes: usize, counts: Vec<u32>, confidence: Vec<f64>) -> Result<Self> {
        if confidence.len() != counts.len() {
            return Err(Error::argument("confidence and count lengths differ"));
        }
        let mut m = Self::from_counts(n_samples, n_classes, counts)?;
        m.confidence = confidence;
        m.validate()?;
        Ok(m)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    #[inline]
    pub fn is_positive(&self, n: usize, c: usize) -> bool {
        self.labels[n * self.n_classes + c] == 1
    }

    /// Label as a float target in `{0, 1}`.
    #[inline]
    pub fn target(&self, n: usize, c: usize) -> f64 {
        self.labels[n * self.n_classes + c] as f64
    }

    #[inline]
    pub fn confidence(&self, n: usize, c: usize) -> f64 {
        self.confidence[n * self.n_classes + c]
    }

    #[inline]
    pub fn count(&self, n: usize, c: usize) -> u32 {
        self.match_counts[n * self.n_classes + c]
    }

    /// Indices of the positive-labeled samples of class `c`, ascending.
    pub fn positives_of_class(&self, c: usize) -> Vec<usize> {
        (0..self.n_samples).filter(|&n| self.is_positive(n, c)).collect()
    }

    pub fn positive_counts(&self) -> Vec<usize> {
        (0..self.n_classes)
            .map(|c| (0..self.n_samples).filter(|&n| self.is_positive(n, c)).count())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.labels.len() {
            let (y, v, k) = (self.labels[i], self.confidence[i], self.match_counts[i]);
            let (n, c) = (i / self.n_classes.max(1), i % self.n_classes.max(1));
            if y > 1 {
                return Err(Error::argument(format!("label ({n}, {c}) is {y}")));
            }
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::argument(format!("confidence ({n}, {c}) = {v} outside (0, 1]")));
            }
            if y == 0 && v != 1.0 {
                return Err(Error::argument(format!("negative ({n}, {c}) has confidence {v} != 1")));
            }
            if (y == 1) != (k >= 1) {
                return Err(Error::argument(format!("label ({n}, {c}) inconsistent with count {k}")));
            }
        }
        Ok(())
    }
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|ch: char| !ch.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Number of non-overlapping occurrences of the concept's token sequence in
/// the tokenized text.
pub fn match_concept(concept: &str, text: &str) -> Result<usize> {
    let needle = tokenize(concept);
    if needle.is_empty() {
        return Err(Error::argument(format!("concept `{concept}` has no tokens")));
    }
    Ok(count_token_matches(&needle, &tokenize(text)))
}

fn count_token_matches(needle: &[String], haystack: &[String]) -> usize {
    let mut count = 0;
    let mut i = 0;
    while i + needle.len() <= haystack.len() {
        if haystack[i..i + needle.len()] == *needle {
            count += 1;
            i += needle.len();
        } else {
            i += 1;
        }
    }
    count
}

fn count_ratio(count: u32) -> f64 {
    let k = count as f64;
    k / (k + 1.0)
}

/// Prior confidence of a positive pseudo label matched `count` times:
/// `count / (count + 1)`.
pub fn confidence_from_count(count: u32) -> Result<f64> {
    if count == 0 {
        return Err(Error::argument(
            "confidence is only defined for positive counts; negatives take confidence 1",
        ));
    }
    Ok(count_ratio(count))
}

/// Labels every sample against every concept by matching its metadata.
pub fn label_dataset(d: &MultimodalDataset, concepts: &[String]) -> Result<PseudoLabelMatrix> {
    let n = d.n_samples();
    let metadata = d
        .metadata
        .as_ref()
        .ok_or_else(|| Error::data("dataset has no metadata; cannot infer pseudo labels"))?;
    let missing: Vec<usize> = metadata
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.is_none().then_some(i))
        .collect();
    if !missing.is_empty() {
        let shown: Vec<String> = missing.iter().take(20).map(usize::to_string).collect();
        let more = if missing.len() > 20 { ", ..." } else { "" };
        return Err(Error::data(format!(
            "missing metadata for {} samples: [{}{}]",
            missing.len(),
            shown.join(", "),
            more
        )));
    }
    let needles: Vec<Vec<String>> = concepts
        .iter()
        .map(|c| {
            let t = tokenize(c);
            if t.is_empty() {
                Err(Error::argument(format!("concept `{c}` has no tokens")))
            } else {
                Ok(t)
            }
        })
        .collect::<Result<_>>()?;
    let mut counts = Vec::with_capacity(n * concepts.len());
    for text in metadata.iter().flatten() {
        let tokens = tokenize(text);
        for needle in &needles {
            counts.push(count_token_matches(needle, &tokens) as u32);
        }
    }
    PseudoLabelMatrix::from_counts(n, concepts.len(), counts)
}

#[derive(Debug, Serialize, Deserialize)]
struct PositiveEntry {
    y: u8,
    v0: f64,
    count: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct NegativeDefault {
    y: u8,
    v0: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRecord {
    positives: BTreeMap<String, PositiveEntry>,
    default: NegativeDefault,
}

/// Writes one JSON record per sample: the positive classes with their
/// `{y, v0, count}`, plus the default applied to every other class.
pub fn write_labels_jsonl(labels: &PseudoLabelMatrix, class_names: &[String], path: &Path) -> Result<()> {
    if class_names.len() != labels.n_classes() {
        return Err(Error::argument("class name count does not match label matrix"));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for n in 0..labels.n_samples() {
        let positives = (0..labels.n_classes())
            .filter(|&c| labels.is_positive(n, c))
            .map(|c| {
                (
                    class_names[c].clone(),
                    PositiveEntry {
                        y: 1,
                        v0: labels.confidence(n, c),
                        count: labels.count(n, c),
                    },
                )
            })
            .collect();
        let record = LabelRecord {
            positives,
            default: NegativeDefault { y: 0, v0: 1.0 },
        };
        let line = serde_json::to_string(&record).expect("label record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels_jsonl(path: &Path, n_samples: usize, class_names: &[String]) -> Result<PseudoLabelMatrix> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let n_classes = class_names.len();
    let index: BTreeMap<&str, usize> = class_names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut counts = vec![0u32; n_samples * n_classes];
    let mut confidence = vec![1.0; n_samples * n_classes];
    let mut rows = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if rows >= n_samples {
            return Err(Error::format(path, format!("more than {n_samples} records")));
        }
        let record: LabelRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        if record.default.y != 0 || record.default.v0 != 1.0 {
            return Err(Error::format(
                path,
                format!("line {}: negative default must be y=0, v0=1", i + 1),
            ));
        }
        for (name, entry) in record.positives {
            let c = *index
                .get(name.as_str())
                .ok_or_else(|| Error::format(path, format!("line {}: unknown class `{name}`", i + 1)))?;
            if entry.y != 1 || entry.count == 0 {
                return Err(Error::format(
                    path,
                    format!("line {}: bad positive entry for `{name}`", i + 1),
                ));
            }
            counts[rows * n_classes + c] = entry.count;
            confidence[rows * n_classes + c] = entry.v0;
        }
        rows += 1;
    }
    if rows != n_samples {
        return Err(Error::format(
            path,
            format!("row count {rows} does not match manifest count {n_samples}"),
        ));
    }
    PseudoLabelMatrix::from_parts(n_samples, n_classes, counts, confidence)
        .map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_generate, SynthConfig};
    use proptest::prelude::*;

    #[test]
    fn matches_whole_tokens() {
        assert_eq!(match_concept("dog", "a dog is barking").unwrap(), 1);
        assert_eq!(match_concept("dog", "DOG dog, dogs").unwrap(), 2);
        assert_eq!(match_concept("cello performance", "solo cello concert").unwrap(), 0);
        assert_eq!(
            match_concept("cello performance", "Cello-Performance by a cello performance class").unwrap(),
            2
        );
        assert!(match_concept("  ", "anything").is_err());
    }

    #[test]
    fn matches_do_not_overlap() {
        assert_eq!(match_concept("la la", "la la la").unwrap(), 1);
        assert_eq!(match_concept("la la", "la la la la").unwrap(), 2);
    }

    #[test]
    fn confidence_values() {
        assert_eq!(confidence_from_count(1).unwrap(), 0.5);
        assert_eq!(confidence_from_count(3).unwrap(), 0.75);
        assert!(confidence_from_count(0).is_err());
        let mut prev = 0.0;
        for k in 1..10_000u32 {
            let v = confidence_from_count(k).unwrap();
            assert!(v > prev && v < 1.0);
            prev = v;
        }
        assert!(1.0 - prev < 1e-3);
    }

    fn text_dataset(texts: Vec<Option<&str>>) -> MultimodalDataset {
        use crate::dataset::{ModalityDescriptor, ModalityRole};
        use crate::matrix::Matrix;
        let n = texts.len();
        MultimodalDataset {
            meta: vec![ModalityDescriptor::new("a", 1, ModalityRole::TrainAndTest)],
            features: vec![Matrix::zeros(n, 1)],
            metadata: Some(texts.into_iter().map(|t| t.map(str::to_string)).collect()),
            ground_truth: None,
            class_names: vec!["dog".into(), "cat".into()],
            labels: None,
        }
    }

    #[test]
    fn label_dataset_cases() {
        let concepts = vec!["dog".to_string(), "cat".to_string()];
        let empty = text_dataset(vec![Some(""), Some("")]);
        let l = label_dataset(&empty, &concepts).unwrap();
        for n in 0..2 {
            for c in 0..2 {
                assert!(!l.is_positive(n, c));
                assert_eq!(l.confidence(n, c), 1.0);
            }
        }
        let both = text_dataset(vec![Some("Dog chases cat, cat runs"), Some("bird")]);
        let l = label_dataset(&both, &concepts).unwrap();
        assert!(l.is_positive(0, 0) && l.is_positive(0, 1));
        assert_eq!(l.confidence(0, 0), 0.5);
        assert!((l.confidence(0, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert!(!l.is_positive(1, 0));
        l.validate().unwrap();

        let missing = text_dataset(vec![Some("dog"), None, Some("cat"), None]);
        match label_dataset(&missing, &concepts) {
            Err(Error::Data(msg)) => assert!(msg.contains("[1, 3]"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn synthetic_metadata_reproduces_labels() {
        let cfg = SynthConfig {
            n_classes: 4,
            n_per_class: 20,
            n_background: 10,
            modality_dims: vec![2],
            ..SynthConfig::default()
        };
        let s = synth_generate(&cfg).unwrap();
        let relabeled = label_dataset(&s.dataset, &s.dataset.class_names).unwrap();
        assert_eq!(&relabeled, s.dataset.labels.as_ref().unwrap());
    }

    #[test]
    fn labels_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.jsonl");
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let l = PseudoLabelMatrix::from_counts(3, 3, vec![0, 1, 0, 3, 0, 2, 0, 0, 0]).unwrap();
        write_labels_jsonl(&l, &names, &p).unwrap();
        assert_eq!(read_labels_jsonl(&p, 3, &names).unwrap(), l);
        assert!(read_labels_jsonl(&p, 4, &names).is_err());
    }

    proptest! {
        #[test]
        fn matching_ignores_case_and_punctuation(
            words in proptest::collection::vec("[a-z]{1,6}", 1..8),
            seps in proptest::collection::vec(prop_oneof![Just(" "), Just(", "), Just("-"), Just("!! "), Just("_")], 8),
            upper in proptest::collection::vec(any::<bool>(), 8),
            concept_len in 1usize..3,
        ) {
            let concept_len = concept_len.min(words.len());
            let concept = words[..concept_len].join(" ");
            let plain = words.join(" ");
            let mut noisy = String::new();
            for (i, w) in words.iter().enumerate() {
                if upper[i % upper.len()] { noisy.push_str(&w.to_uppercase()) } else { noisy.push_str(w) }
                noisy.push_str(seps[i % seps.len()]);
            }
            prop_assert_eq!(match_concept(&concept, &plain).unwrap(), match_concept(&concept, &noisy).unwrap());
            prop_assert!(match_concept(&concept, &noisy).unwrap() >= 1);
        }

        #[test]
        fn label_matrix_invariants_hold(counts in proptest::collection::vec(0u32..5, 12)) {
            let l = PseudoLabelMatrix::from_counts(4, 3, counts).unwrap();
            prop_assert!(l.validate().is_ok());
        }
    }
}
