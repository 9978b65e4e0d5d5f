//! Consensus scoring across modality classifiers and the shared sample
//! weight derived from it.
//!
//! Each modality classifier scores a sample; a voting function combines the
//! scores into one confidence `s`, and the weight is
//! `max(0, 1 - L(s, y) / lambda)`. The same weight then scales the loss of
//! every modality classifier, so a sample that is hard for one modality can
//! still be learned when another modality is confident about it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::models::{binary_cross_entropy, clamp_prob};
use crate::selfpaced::{AgeState, WeightMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum VotingScheme {
    #[default]
    Max,
    /// Also accepted as `sum`.
    #[serde(alias = "sum")]
    Average,
    Product,
}

impl fmt::Display for VotingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VotingScheme::Max => "max",
            VotingScheme::Average => "average",
            VotingScheme::Product => "product",
        })
    }
}

impl FromStr for VotingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(VotingScheme::Max),
            "average" | "avg" | "mean" | "sum" => Ok(VotingScheme::Average),
            "product" | "prod" => Ok(VotingScheme::Product),
            other => Err(Error::argument(format!(
                "unknown voting scheme `{other}` (expected max, average or product)"
            ))),
        }
    }
}

/// Combined score before clamping.
///
/// The product is evaluated in log space. A single score is returned as is
/// under every scheme, and the average is kept inside `[min, max]` against
/// rounding.
pub fn combine_raw(scores: &[f64], scheme: VotingScheme) -> Result<f64> {
    match scores {
        [] => Err(Error::argument("voting needs at least one score")),
        [s] => Ok(*s),
        _ => Ok(match scheme {
            VotingScheme::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            VotingScheme::Average => {
                let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (scores.iter().sum::<f64>() / scores.len() as f64).clamp(lo, hi)
            }
            VotingScheme::Product => scores.iter().map(|s| s.ln()).sum::<f64>().exp(),
        }),
    }
}

/// Voted confidence, clamped to `[eps, 1 - eps]`.
pub fn vote(scores: &[f64], scheme: VotingScheme) -> Result<f64> {
    combine_raw(scores, scheme).map(clamp_prob)
}

/// `max(0, 1 - L(vote(scores), y) / lambda)` with cross-entropy `L`.
pub fn consensus_weight(scores: &[f64], y: f64, lambda: f64, scheme: VotingScheme) -> Result<f64> {
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(Error::argument(format!("age must be positive, got {lambda}")));
    }
    let loss = binary_cross_entropy(vote(scores, scheme)?, y);
    Ok(f64::max(0.0, 1.0 - loss / lambda))
}

fn check_shapes(scores: &[&Matrix], targets: &Matrix) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::argument("no modality scores"));
    }
    for (m, s) in scores.iter().enumerate() {
        if (s.rows(), s.cols()) != (targets.rows(), targets.cols()) {
            return Err(Error::argument(format!(
                "modality {m} scores are {}x{}, labels are {}x{}",
                s.rows(),
                s.cols(),
                targets.rows(),
                targets.cols()
            )));
        }
    }
    Ok(())
}

/// Cross-entropy of the voted score for every `(sample, class)` entry.
pub fn consensus_losses(scores: &[&Matrix], targets: &Matrix, scheme: VotingScheme) -> Result<Matrix> {
    check_shapes(scores, targets)?;
    let mut out = Matrix::zeros(targets.rows(), targets.cols());
    let mut buf = vec![0.0; scores.len()];
    for n in 0..targets.rows() {
        for c in 0..targets.cols() {
            for (b, s) in buf.iter_mut().zip(scores) {
                *b = s.get(n, c);
            }
            out.set(n, c, binary_cross_entropy(vote(&buf, scheme)?, targets.get(n, c)));
        }
    }
    Ok(out)
}

/// One weight per `(sample, class)` shared by all modalities, together with
/// the consensus losses (the values the age queue should receive for
/// positive-labeled entries).
///
/// `scores` holds one `batch x C` probability matrix per voting modality.
/// Negative-labeled entries get weight 1 unless `weight_negatives` is set.
pub fn consensus_weights_batch(
    scores: &[&Matrix],
    targets: &Matrix,
    state: &AgeState,
    scheme: VotingScheme,
    weight_negatives: bool,
) -> Result<(WeightMatrix, Matrix)> {
    check_shapes(scores, targets)?;
    if targets.cols() != state.n_classes() {
        return Err(Error::argument("label and age class counts differ"));
    }
    let losses = consensus_losses(scores, targets, scheme)?;
    let mut w = Matrix::zeros(targets.rows(), targets.cols());
    for c in 0..targets.cols() {
        let lambda = state
            .lambda(c)
            .ok_or_else(|| Error::State(format!("age of class {c} is undefined")))?;
        for n in 0..targets.rows() {
            let v = if targets.get(n, c) == 1.0 || weight_negatives {
                f64::max(0.0, 1.0 - losses.get(n, c) / lambda)
            } else {
                1.0
            };
            w.set(n, c, v);
        }
    }
    Ok((WeightMatrix::new(w)?, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::PROB_EPS;
    use crate::selfpaced::batch_weights;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn voting_values() {
        assert_eq!(vote(&[0.2, 0.9, 0.4], VotingScheme::Max).unwrap(), 0.9);
        assert!((vote(&[0.2, 0.9, 0.4], VotingScheme::Average).unwrap() - 0.5).abs() < 1e-15);
        assert!((vote(&[0.5, 0.5, 0.8], VotingScheme::Product).unwrap() - 0.2).abs() < 1e-15);
        assert!(vote(&[], VotingScheme::Max).is_err());
        // Clamped after voting.
        assert_eq!(vote(&[PROB_EPS; 40], VotingScheme::Product).unwrap(), PROB_EPS);
    }

    #[test]
    fn scheme_names() {
        assert_eq!("sum".parse::<VotingScheme>().unwrap(), VotingScheme::Average);
        assert_eq!("MAX".parse::<VotingScheme>().unwrap(), VotingScheme::Max);
        assert!("median".parse::<VotingScheme>().is_err());
        assert_eq!(VotingScheme::Product.to_string(), "product");
    }

    #[test]
    fn consensus_weight_cases() {
        let v = consensus_weight(&[0.3, 1.0 - PROB_EPS], 1.0, 1.0, VotingScheme::Max).unwrap();
        assert!((v - (1.0 - 1e-7)).abs() < 1e-12);
        assert_eq!(consensus_weight(&[0.5], 1.0, 0.1, VotingScheme::Max).unwrap(), 0.0);
        // -ln 0.99 = 0.01005033585350144...
        let v = consensus_weight(&[0.5, 0.99], 1.0, 1.0, VotingScheme::Max).unwrap();
        assert!((v - 0.989_949_664_146_498_6).abs() < 1e-12, "{v}");
        assert!(consensus_weight(&[0.5], 1.0, 0.0, VotingScheme::Max).is_err());
    }

    fn random_scores(rng: &mut ChaCha8Rng, b: usize, c: usize) -> Matrix {
        Matrix::from_vec(
            b,
            c,
            (0..b * c).map(|_| rng.random_range(PROB_EPS..1.0 - PROB_EPS)).collect(),
        )
    }

    fn ready_state(c: usize, rng: &mut ChaCha8Rng) -> AgeState {
        let mut s = AgeState::new(c, 50, 0.5).unwrap();
        for k in 0..c {
            let l: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..2.0)).collect();
            s.push_losses(k, &l);
            s.compute_age(k).unwrap();
        }
        s
    }

    #[test]
    fn single_modality_matches_selfpaced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (b, c) = (30, 4);
        let scores = random_scores(&mut rng, b, c);
        let targets = Matrix::from_vec(b, c, (0..b * c).map(|_| rng.random_range(0..2) as f64).collect());
        let state = ready_state(c, &mut rng);
        let losses = Matrix::from_vec(
            b,
            c,
            scores
                .as_slice()
                .iter()
                .zip(targets.as_slice())
                .map(|(&s, &y)| binary_cross_entropy(s, y))
                .collect(),
        );
        let expected = batch_weights(&losses, &targets, &state, false).unwrap();
        for scheme in [VotingScheme::Max, VotingScheme::Average, VotingScheme::Product] {
            let (w, l) = consensus_weights_batch(&[&scores], &targets, &state, scheme, false).unwrap();
            assert_eq!(w, expected);
            assert_eq!(l, losses);
            // Consensus of equals.
            let (w3, _) =
                consensus_weights_batch(&[&scores, &scores, &scores], &targets, &state, scheme, false).unwrap();
            if scheme != VotingScheme::Product {
                assert_eq!(w3, expected);
            }
        }
    }

    #[test]
    fn batch_matches_entrywise_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (b, c) = (25, 3);
        let mats: Vec<Matrix> = (0..3).map(|_| random_scores(&mut rng, b, c)).collect();
        let refs: Vec<&Matrix> = mats.iter().collect();
        let targets = Matrix::from_vec(b, c, (0..b * c).map(|_| rng.random_range(0..2) as f64).collect());
        let state = ready_state(c, &mut rng);
        for scheme in [VotingScheme::Max, VotingScheme::Average, VotingScheme::Product] {
            let (w, _) = consensus_weights_batch(&refs, &targets, &state, scheme, true).unwrap();
            for n in 0..b {
                for k in 0..c {
                    let s: Vec<f64> = mats.iter().map(|m| m.get(n, k)).collect();
                    let expected = consensus_weight(&s, targets.get(n, k), state.lambda(k).unwrap(), scheme).unwrap();
                    assert_eq!(w.get(n, k), expected);
                }
            }
        }
        let bad = Matrix::zeros(b + 1, c);
        assert!(consensus_weights_batch(&[&mats[0], &bad], &targets, &state, VotingScheme::Max, false).is_err());
    }

    proptest! {
        #[test]
        fn scheme_ordering(scores in proptest::collection::vec(PROB_EPS..1.0 - PROB_EPS, 1..8)) {
            let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let p = combine_raw(&scores, VotingScheme::Product).unwrap();
            let a = combine_raw(&scores, VotingScheme::Average).unwrap();
            let m = combine_raw(&scores, VotingScheme::Max).unwrap();
            prop_assert!(p <= min && min <= a && a <= m);
        }

        #[test]
        fn max_voting_rescues_positives(scores in proptest::collection::vec(PROB_EPS..1.0 - PROB_EPS, 1..6), lambda in 1e-3f64..5.0) {
            let v = consensus_weight(&scores, 1.0, lambda, VotingScheme::Max).unwrap();
            let v0 = consensus_weight(&scores, 0.0, lambda, VotingScheme::Max).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            for &s in &scores {
                prop_assert!(v >= consensus_weight(&[s], 1.0, lambda, VotingScheme::Max).unwrap());
                prop_assert!(v0 <= consensus_weight(&[s], 0.0, lambda, VotingScheme::Max).unwrap());
            }
        }
    }
}
