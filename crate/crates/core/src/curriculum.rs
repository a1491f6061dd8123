//! Per-sample OOD scores and their alternating update, plus the Otsu
//! threshold and the curriculum selection of in-distribution unlabeled
//! samples.
//!
//! Labeled scores start at zero and are never touched; unlabeled scores start
//! at one and are reassigned to the model's current OOD-head output at each
//! update.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Histogram resolution used by the trainer for Otsu thresholding.
pub const OTSU_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    labeled: Vec<f64>,
    unlabeled: Vec<f64>,
    epoch_last_updated: Option<usize>,
}

/// Fresh table: labeled scores all 0, unlabeled scores all 1.
pub fn init_scores(n_labeled: usize, n_unlabeled: usize) -> ScoreTable {
    ScoreTable {
        labeled: vec![0.0; n_labeled],
        unlabeled: vec![1.0; n_unlabeled],
        epoch_last_updated: None,
    }
}

impl ScoreTable {
    /// Rebuilds a table from explicit unlabeled scores, e.g. from a persisted
    /// snapshot. Labeled scores are zero as always.
    pub fn from_unlabeled_scores(n_labeled: usize, unlabeled: Vec<f64>) -> Result<Self> {
        if let Some(&bad) = unlabeled.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Config(format!("score {bad} outside [0, 1]")));
        }
        Ok(ScoreTable {
            labeled: vec![0.0; n_labeled],
            unlabeled,
            epoch_last_updated: None,
        })
    }

    pub fn labeled_scores(&self) -> &[f64] {
        &self.labeled
    }

    pub fn unlabeled_scores(&self) -> &[f64] {
        &self.unlabeled
    }

    pub fn epoch_last_updated(&self) -> Option<usize> {
        self.epoch_last_updated
    }

    /// Largest labeled-score magnitude; stays exactly 0 for the whole run.
    pub fn labeled_score_max(&self) -> f64 {
        self.labeled.iter().fold(0.0, |m, &s| m.max(s.abs()))
    }
}

/// Reassigns every unlabeled score to the model's current OOD-head output.
/// Labeled scores are left untouched.
pub fn update_scores(
    table: &mut ScoreTable,
    params: &ModelParams,
    unlabeled_inputs: &Tensor,
    epoch: usize,
) -> Result<()> {
    if unlabeled_inputs.rows() != table.unlabeled.len() {
        return Err(Error::shape(
            "update_scores",
            format!(
                "{} inputs for {} unlabeled scores",
                unlabeled_inputs.rows(),
                table.unlabeled.len()
            ),
        ));
    }
    if table.unlabeled.is_empty() {
        table.epoch_last_updated = Some(epoch);
        return Ok(());
    }
    table.unlabeled = params.ood_scores(unlabeled_inputs)?;
    table.epoch_last_updated = Some(epoch);
    Ok(())
}

/// Otsu threshold over `num_bins` equal-width bins on [0, 1]: the bin edge
/// maximizing the between-class variance `w0 * w1 * (mu0 - mu1)^2`, ties
/// broken toward the smallest threshold. Errors when every score falls in a
/// single bin, since no separating edge exists at that resolution.
pub fn otsu_threshold(scores: &[f64], num_bins: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("otsu_threshold: scores"));
    }
    if num_bins < 2 {
        return Err(Error::Config(format!(
            "num_bins must be >= 2, got {num_bins}"
        )));
    }
    let counts = histogram(scores, num_bins);
    if counts.iter().filter(|&&c| c > 0).count() <= 1 {
        return Err(Error::DegenerateHistogram {
            count: scores.len(),
        });
    }

    let total = scores.len() as f64;
    let centers: Vec<f64> = (0..num_bins)
        .map(|i| (i as f64 + 0.5) / num_bins as f64)
        .collect();

    // Single ascending pass with running mass and first-moment sums.
    let grand_sum: f64 = ascending_weighted_sum(&counts, &centers, num_bins);
    let mut mass0 = 0.0;
    let mut sum0 = 0.0;
    let mut best_var = f64::NEG_INFINITY;
    let mut best_threshold = 0.0;
    for split in 1..num_bins {
        mass0 += counts[split - 1] as f64;
        sum0 += counts[split - 1] as f64 * centers[split - 1];
        let mass1 = total - mass0;
        if mass0 == 0.0 || mass1 == 0.0 {
            continue;
        }
        let w0 = mass0 / total;
        let w1 = mass1 / total;
        let mu0 = sum0 / mass0;
        let mu1 = (grand_sum - sum0) / mass1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_threshold = split as f64 / num_bins as f64;
        }
    }
    Ok(best_threshold)
}

/// Bin index of a score in a `num_bins` equal-width histogram over [0, 1].
pub fn histogram_bin_of(score: f64, num_bins: usize) -> usize {
    ((score * num_bins as f64) as usize).min(num_bins - 1)
}

pub(crate) fn histogram(scores: &[f64], num_bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_bins];
    for &s in scores {
        debug_assert!((0.0..=1.0).contains(&s), "score {s} outside [0, 1]");
        counts[histogram_bin_of(s, num_bins)] += 1;
    }
    counts
}

fn ascending_weighted_sum(counts: &[usize], centers: &[f64], num_bins: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..num_bins {
        acc += counts[i] as f64 * centers[i];
    }
    acc
}

/// One epoch's curriculum pick over the unlabeled pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub threshold: f64,
    /// Ascending unlabeled indices admitted this epoch.
    pub selected_indices: Vec<usize>,
    pub selected_fraction: f64,
}

impl SelectionResult {
    pub fn empty(threshold: f64) -> Self {
        SelectionResult {
            threshold,
            selected_indices: Vec::new(),
            selected_fraction: 0.0,
        }
    }
}

/// Unlabeled indices with score strictly below the threshold.
pub fn select_id_subset(table: &ScoreTable, threshold: f64) -> SelectionResult {
    let selected_indices: Vec<usize> = table
        .unlabeled
        .iter()
        .enumerate()
        .filter(|(_, &s)| s < threshold)
        .map(|(i, _)| i)
        .collect();
    let n = table.unlabeled.len();
    let selected_fraction = if n == 0 {
        0.0
    } else {
        selected_indices.len() as f64 / n as f64
    };
    SelectionResult {
        threshold,
        selected_indices,
        selected_fraction,
    }
}

/// The `ceil(fraction * n)` lowest-scoring unlabeled indices, ties broken by
/// lower index. The reported threshold is the score of the last admitted
/// sample, so admitted boundary samples sit exactly at it.
pub fn select_id_fraction(table: &ScoreTable, fraction: f64) -> Result<SelectionResult> {
    if !fraction.is_finite() || fraction <= 0.0 || fraction > 1.0 {
        return Err(Error::Config(format!(
            "selection fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = table.unlabeled.len();
    if n == 0 {
        return Ok(SelectionResult::empty(0.0));
    }
    let want = (fraction * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        table.unlabeled[a]
            .partial_cmp(&table.unlabeled[b])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut selected_indices: Vec<usize> = order[..want].to_vec();
    let threshold = table.unlabeled[*order[..want].last().expect("want >= 1")];
    selected_indices.sort_unstable();
    Ok(SelectionResult {
        threshold,
        selected_indices,
        selected_fraction: want as f64 / n as f64,
    })
}
