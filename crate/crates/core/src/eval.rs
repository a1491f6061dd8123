//! Metrics (accuracy, selection precision/recall, rank-based AUROC) and the
//! two reference OOD detectors: max-softmax and its
//! temperature-scaled, input-perturbed refinement.
//!
//! Detector scores are oriented so that higher means more likely OOD, for
//! every detector.

use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::PROB_EPS;
use crate::model::ModelParams;

/// Scores and ground truth for one detection evaluation.
#[derive(Debug, Clone)]
pub struct DetectionOutcome {
    /// Higher = more OOD.
    pub scores: Vec<f64>,
    /// True marks an OOD sample.
    pub labels: Vec<bool>,
    pub selected: Option<Vec<usize>>,
}

impl DetectionOutcome {
    pub fn auroc(&self) -> Result<f64> {
        auroc(&self.scores, &self.labels)
    }
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.is_empty() || truth.is_empty() {
        return Err(Error::EmptyInput("accuracy"));
    }
    if predictions.len() != truth.len() {
        return Err(Error::shape(
            "accuracy",
            format!(
                "{} predictions vs {} labels",
                predictions.len(),
                truth.len()
            ),
        ));
    }
    let hits = predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Argmax class index per row.
pub fn predict_classes(params: &ModelParams, batch: &Tensor) -> Result<Vec<usize>> {
    let probs = params.forward(batch)?.class_probs;
    Ok((0..probs.rows()).map(|i| argmax(probs.row(i))).collect())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Precision is the ID fraction of the selected set; recall is the selected
/// fraction of all ID samples. An empty selection has undefined precision,
/// reported as `None` with recall 0.
pub fn selection_precision_recall(
    selected: &[usize],
    hidden_is_ood: &[bool],
) -> Result<(Option<f64>, f64)> {
    if let Some(&bad) = selected.iter().find(|&&i| i >= hidden_is_ood.len()) {
        return Err(Error::Config(format!(
            "selected index {bad} out of range for pool of {}",
            hidden_is_ood.len()
        )));
    }
    let total_id = hidden_is_ood.iter().filter(|&&o| !o).count();
    if selected.is_empty() {
        return Ok((None, 0.0));
    }
    let selected_id = selected.iter().filter(|&&i| !hidden_is_ood[i]).count();
    let precision = selected_id as f64 / selected.len() as f64;
    // A pool with no ID samples leaves nothing to recall.
    let recall = if total_id == 0 {
        1.0
    } else {
        selected_id as f64 / total_id as f64
    };
    Ok((Some(precision), recall))
}

/// Exact AUROC by the rank statistic: the probability a random OOD sample
/// outscores a random ID sample, ties counted half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "auroc",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    let n_ood = labels.iter().filter(|&&l| l).count();
    let n_id = labels.len() - n_ood;
    if n_ood == 0 || n_id == 0 {
        return Err(Error::EmptyInput("auroc: needs both ID and OOD samples"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("scores are finite")
    });

    // Average ranks within tie groups (ranks are 1-based).
    let mut rank_sum_ood = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_ood += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_ood - (n_ood * (n_ood + 1)) as f64 / 2.0;
    Ok(u / (n_ood as f64 * n_id as f64))
}

fn max_softmax_from_probs(probs_row: &[f64]) -> f64 {
    1.0 - probs_row[argmax(probs_row)]
}

/// `1 - max_k p_k` per row, so higher means more OOD.
pub fn max_softmax_scores(params: &ModelParams, batch: &Tensor) -> Result<Vec<f64>> {
    let probs = params.forward(batch)?.class_probs;
    Ok((0..probs.rows())
        .map(|i| max_softmax_from_probs(probs.row(i)))
        .collect())
}

pub fn max_softmax_score(params: &ModelParams, x: &[f64]) -> Result<f64> {
    Ok(max_softmax_scores(params, &Tensor::from_rows(&[x])?)?[0])
}

/// Temperature-scaled detection with a gradient-sign input perturbation: the
/// input moves against the gradient of the predicted-class cross-entropy on
/// temperature-scaled logits, then is rescored. With `temperature = 1` and
/// `perturbation = 0` this reduces bitwise to [`max_softmax_scores`].
pub fn odin_scores(
    params: &ModelParams,
    batch: &Tensor,
    temperature: f64,
    perturbation: f64,
) -> Result<Vec<f64>> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if !perturbation.is_finite() || perturbation < 0.0 {
        return Err(Error::Config(format!(
            "perturbation must be >= 0, got {perturbation}"
        )));
    }

    // First pass: cross-entropy of the predicted class on scaled logits,
    // summed over rows so one backward yields every per-row input gradient.
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.leaf(batch.clone());
    let fwd = bound.forward(&mut g, x)?;
    let scaled = g.scale(fwd.class_logits, 1.0 / temperature);
    let probs = g.softmax(scaled);
    let (onehot, complement) = {
        let p = g.value(probs);
        let mut hot = Tensor::zeros(p.rows(), p.cols());
        let mut rest = Tensor::zeros(p.rows(), p.cols()).map(|_| 1.0);
        for i in 0..p.rows() {
            let best = argmax(p.row(i));
            hot.set(i, best, 1.0);
            rest.set(i, best, 0.0);
        }
        (g.leaf(hot), g.leaf(rest))
    };
    // Predicted-class probability on the hot entry, constant 1 elsewhere, so
    // the log of every off-class entry is exactly 0 and the row sums reduce
    // to sum_i log p_pred_i.
    let picked = g.mul(probs, onehot)?;
    let shifted = g.add(picked, complement)?;
    let clamped = g.clamp(shifted, PROB_EPS, 1.0);
    let logs = g.log(clamped);
    let summed = g.sum(logs);
    let loss = g.scale(summed, -1.0);
    g.backward(loss)?;
    let input_grad = g.grad(x).expect("input participates in the loss").clone();

    let mut perturbed = batch.clone();
    for (v, &grad) in perturbed.data_mut().iter_mut().zip(input_grad.data()) {
        *v -= perturbation * sign(grad);
    }

    // Second pass: rescore the perturbed input at the same temperature.
    let logits = params.forward(&perturbed)?.class_logits;
    let mut g2 = Graph::new();
    let l = g2.leaf(logits);
    let scaled = g2.scale(l, 1.0 / temperature);
    let probs = g2.softmax(scaled);
    let probs = g2.value(probs);
    Ok((0..probs.rows())
        .map(|i| max_softmax_from_probs(probs.row(i)))
        .collect())
}

pub fn odin_score(
    params: &ModelParams,
    x: &[f64],
    temperature: f64,
    perturbation: f64,
) -> Result<f64> {
    Ok(odin_scores(params, &Tensor::from_rows(&[x])?, temperature, perturbation)?[0])
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accuracy_counts_exact_matches() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 0], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn precision_recall_set_arithmetic() {
        // Pool: indices 0..9 ID, 10..15 OOD.
        let hidden: Vec<bool> = (0..16).map(|i| i >= 10).collect();

        let all_id: Vec<usize> = (0..10).collect();
        assert_eq!(
            selection_precision_recall(&all_id, &hidden).unwrap(),
            (Some(1.0), 1.0)
        );

        let half_id: Vec<usize> = (0..5).collect();
        assert_eq!(
            selection_precision_recall(&half_id, &hidden).unwrap(),
            (Some(1.0), 0.5)
        );

        // 8 selected, 6 of them ID, 10 ID total.
        let mixed: Vec<usize> = vec![0, 1, 2, 3, 4, 5, 10, 11];
        assert_eq!(
            selection_precision_recall(&mixed, &hidden).unwrap(),
            (Some(0.75), 0.6)
        );

        assert_eq!(
            selection_precision_recall(&[], &hidden).unwrap(),
            (None, 0.0)
        );
        assert!(selection_precision_recall(&[99], &hidden).is_err());
    }

    #[test]
    fn precision_recall_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let n = rng.gen_range(2..40);
            let hidden: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let selected: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.5)).collect();
            let (p, r) = selection_precision_recall(&selected, &hidden).unwrap();

            let sel_id = selected.iter().filter(|&&i| !hidden[i]).count();
            let ids = hidden.iter().filter(|&&o| !o).count();
            if selected.is_empty() {
                assert_eq!(p, None);
                assert_eq!(r, 0.0);
            } else {
                assert_eq!(p, Some(sel_id as f64 / selected.len() as f64));
                if ids > 0 {
                    assert_eq!(r, sel_id as f64 / ids as f64);
                }
            }
        }
    }

    #[test]
    fn auroc_perfect_ties_and_frozen_example() {
        assert_eq!(
            auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(
            auroc(&[0.4, 0.4, 0.4, 0.4], &[false, false, true, true]).unwrap(),
            0.5
        );
        // Brute force over the 4 (ID, OOD) pairs gives 3 wins / 4.
        assert_eq!(
            auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(),
            0.75
        );
        assert!(auroc(&[0.1, 0.2], &[false, false]).is_err());
    }

    #[test]
    fn auroc_matches_pair_counting_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let n = rng.gen_range(2..50);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            if labels.iter().all(|&l| l) {
                labels[0] = false;
            }
            if labels.iter().all(|&l| !l) {
                labels[0] = true;
            }
            // Coarse grid so ties actually occur.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();

            let mut wins = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] && !labels[j] {
                        pairs += 1.0;
                        if scores[i] > scores[j] {
                            wins += 1.0;
                        } else if scores[i] == scores[j] {
                            wins += 0.5;
                        }
                    }
                }
            }
            let expected = wins / pairs;
            assert_eq!(auroc(&scores, &labels).unwrap(), expected);
        }
    }

    #[test]
    fn auroc_is_invariant_under_monotone_transforms_and_flips_under_negation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Distinct scores so negation flips exactly.
        let scores: Vec<f64> = (0..30)
            .map(|i| i as f64 + rng.gen_range(0.0..0.5))
            .collect();
        let labels: Vec<bool> = (0..30).map(|_| rng.gen_bool(0.5)).collect();
        let base = auroc(&scores, &labels).unwrap();

        let squashed: Vec<f64> = scores.iter().map(|&s| (0.1 * s).tanh()).collect();
        assert_eq!(auroc(&squashed, &labels).unwrap(), base);

        let negated: Vec<f64> = scores.iter().map(|&s| -s).collect();
        assert!((auroc(&negated, &labels).unwrap() + base - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_model_max_softmax_is_uniform_complement() {
        let mut params = init_model(2, &[4], 4, 0).unwrap();
        for p in params.params_mut() {
            *p = Tensor::zeros(p.rows(), p.cols());
        }
        let s = max_softmax_score(&params, &[0.3, -0.8]).unwrap();
        assert!((s - 0.75).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_drive_score_to_zero() {
        // Linear model with a huge bias gap behaves like a one-hot softmax.
        let mut params = init_model(2, &[], 3, 0).unwrap();
        {
            let mut t = params.params_mut();
            *t[0] = Tensor::zeros(2, 3);
            *t[1] = Tensor::row_vector(&[60.0, 0.0, 0.0]);
        }
        let s = max_softmax_score(&params, &[0.0, 0.0]).unwrap();
        assert!(s < 1e-20, "score {s}");
    }

    #[test]
    fn detector_reduction_is_bitwise() {
        let params = init_model(3, &[8, 8], 4, 33).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        for _ in 0..25 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let msp = max_softmax_score(&params, &x).unwrap();
            let odin = odin_score(&params, &x, 1.0, 0.0).unwrap();
            assert_eq!(msp.to_bits(), odin.to_bits());
        }
    }

    #[test]
    fn high_temperature_flattens_score_toward_uniform_from_below() {
        let params = init_model(2, &[6], 4, 8).unwrap();
        let x = [0.7, -0.2];
        let s = odin_score(&params, &x, 1000.0, 0.0).unwrap();
        assert!(s < 0.75, "score {s} not below 1 - 1/K");
        assert!(0.75 - s < 1e-3, "score {s} not near 1 - 1/K");
    }

    #[test]
    fn perturbation_matches_two_step_straight_line_oracle() {
        let params = init_model(2, &[5], 3, 77).unwrap();
        let x = [0.25, 0.6];
        let (temperature, eps) = (1000.0, 0.01);

        // Straight-line re-computation: finite-difference the scaled CE to get
        // the input gradient sign, perturb, rescore.
        let ce = |x: &[f64]| -> f64 {
            let logits = params
                .forward(&Tensor::from_rows(&[x]).unwrap())
                .unwrap()
                .class_logits;
            let scaled: Vec<f64> = logits.row(0).iter().map(|&v| v / temperature).collect();
            let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let probs: Vec<f64> = exps.iter().map(|&e| e / total).collect();
            let best = (0..3)
                .max_by(|&a, &b| probs[a].partial_cmp(&probs[b]).unwrap())
                .unwrap();
            -probs[best].ln()
        };
        let fd_step = 1e-6;
        let mut perturbed = x;
        for i in 0..2 {
            let mut plus = x;
            plus[i] += fd_step;
            let mut minus = x;
            minus[i] -= fd_step;
            let grad = (ce(&plus) - ce(&minus)) / (2.0 * fd_step);
            perturbed[i] -= eps * grad.signum();
        }
        let logits = params
            .forward(&Tensor::from_rows(&[&perturbed]).unwrap())
            .unwrap()
            .class_logits;
        let scaled: Vec<f64> = logits.row(0).iter().map(|&v| v / temperature).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let expected = 1.0
            - exps
                .iter()
                .map(|&e| e / total)
                .fold(f64::NEG_INFINITY, f64::max);

        let got = odin_score(&params, &x, temperature, eps).unwrap();
        assert!(
            (got - expected).abs() < 1e-9,
            "got {got}, expected {expected}"
        );
    }

    #[test]
    fn odin_rejects_bad_temperature() {
        let params = init_model(2, &[4], 2, 0).unwrap();
        assert!(odin_score(&params, &[0.0, 0.0], 0.0, 0.0).is_err());
        assert!(odin_score(&params, &[0.0, 0.0], -5.0, 0.0).is_err());
        assert!(odin_score(&params, &[0.0, 0.0], 1.0, -0.1).is_err());
    }
}
