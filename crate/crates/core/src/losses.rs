//! The two training losses: binary cross-entropy against per-sample OOD
//! scores, and a reduced MixMatch recipe (multi-augmentation label guessing,
//! temperature sharpening, mixup, supervised CE plus ramped L2 consistency).

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::datagen::augment;
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::model::{BoundModel, ModelParams};

/// Probabilities are clamped into `[PROB_EPS, 1]` before any logarithm so
/// saturated sigmoid/softmax outputs cannot produce infinities.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    /// Sharpening temperature in (0, 1]; 1 leaves guessed labels untouched.
    pub sharpen_temperature: f64,
    /// Stochastic augmentations averaged per guessed label.
    pub num_guess_augmentations: usize,
    /// Beta(alpha, alpha) parameter for mixup.
    pub mixup_alpha: f64,
    /// Final weight of the unlabeled consistency term.
    pub unlabeled_weight_max: f64,
    /// Epochs over which the consistency weight ramps linearly from 0.
    pub unlabeled_weight_rampup_epochs: usize,
    /// Standard deviation of the additive jitter augmentation.
    pub augment_strength: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            sharpen_temperature: 0.5,
            num_guess_augmentations: 2,
            mixup_alpha: 0.75,
            unlabeled_weight_max: 30.0,
            unlabeled_weight_rampup_epochs: 15,
            augment_strength: 0.25,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.sharpen_temperature.is_finite()
            || self.sharpen_temperature <= 0.0
            || self.sharpen_temperature > 1.0
        {
            return Err(Error::Config(format!(
                "sharpen_temperature must be in (0, 1], got {}",
                self.sharpen_temperature
            )));
        }
        if self.num_guess_augmentations < 1 {
            return Err(Error::Config("num_guess_augmentations must be >= 1".into()));
        }
        if !self.mixup_alpha.is_finite() || self.mixup_alpha <= 0.0 {
            return Err(Error::Config(format!(
                "mixup_alpha must be > 0, got {}",
                self.mixup_alpha
            )));
        }
        if !self.unlabeled_weight_max.is_finite() || self.unlabeled_weight_max < 0.0 {
            return Err(Error::Config("unlabeled_weight_max must be >= 0".into()));
        }
        if !self.augment_strength.is_finite() || self.augment_strength < 0.0 {
            return Err(Error::Config("augment_strength must be >= 0".into()));
        }
        Ok(())
    }

    /// Linear ramp from 0 to `unlabeled_weight_max` over the configured epochs.
    pub fn unlabeled_weight(&self, epoch: usize) -> f64 {
        if self.unlabeled_weight_rampup_epochs == 0 {
            return self.unlabeled_weight_max;
        }
        let frac = (epoch as f64 / self.unlabeled_weight_rampup_epochs as f64).min(1.0);
        self.unlabeled_weight_max * frac
    }
}

/// Per-sample binary cross-entropy with the same probability clamp the graph
/// loss uses.
pub fn binary_cross_entropy(target: f64, pred: f64) -> f64 {
    let p = pred.clamp(PROB_EPS, 1.0);
    let q = (1.0 - pred).clamp(PROB_EPS, 1.0);
    -(target * p.ln() + (1.0 - target) * q.ln())
}

/// Mean BCE of one group: `-mean_i [t_i log p_i + (1 - t_i) log(1 - p_i)]`.
fn group_bce(g: &mut Graph, pred: NodeId, target: &Tensor) -> Result<NodeId> {
    let shape = g.value(pred).shape();
    if shape != target.shape() {
        return Err(Error::shape(
            "ood_loss",
            format!(
                "predictions {}x{} vs targets {}x{}",
                shape.0,
                shape.1,
                target.rows(),
                target.cols()
            ),
        ));
    }
    let t = g.leaf(target.clone());
    let p_clamped = g.clamp(pred, PROB_EPS, 1.0);
    let log_p = g.log(p_clamped);
    let neg_p = g.scale(pred, -1.0);
    let one_minus_p = g.add_scalar(neg_p, 1.0);
    let q_clamped = g.clamp(one_minus_p, PROB_EPS, 1.0);
    let log_q = g.log(q_clamped);
    let neg_t = g.scale(t, -1.0);
    let one_minus_t = g.add_scalar(neg_t, 1.0);
    let a = g.mul(t, log_p)?;
    let b = g.mul(one_minus_t, log_q)?;
    let sum = g.add(a, b)?;
    let mean = g.mean(sum);
    Ok(g.scale(mean, -1.0))
}

/// The OOD supervision loss: the sum of the labeled-group and unlabeled-group
/// mean binary cross-entropies. Either group may be absent, not both.
/// Predictions are graph nodes (`n x 1`), targets are constants.
pub fn ood_loss(
    g: &mut Graph,
    labeled: Option<(NodeId, &Tensor)>,
    unlabeled: Option<(NodeId, &Tensor)>,
) -> Result<NodeId> {
    let labeled = labeled.filter(|(_, t)| !t.is_empty());
    let unlabeled = unlabeled.filter(|(_, t)| !t.is_empty());
    match (labeled, unlabeled) {
        (None, None) => Err(Error::EmptyInput("ood_loss: both groups empty")),
        (Some((p, t)), None) => group_bce(g, p, t),
        (None, Some((p, t))) => group_bce(g, p, t),
        (Some((pl, tl)), Some((pu, tu))) => {
            let a = group_bce(g, pl, tl)?;
            let b = group_bce(g, pu, tu)?;
            g.add(a, b)
        }
    }
}

/// Raises every entry to `1/t` and renormalizes. Entropy never increases;
/// `t = 1` is the identity.
pub fn sharpen(p: &[f64], t: f64) -> Result<Vec<f64>> {
    if !t.is_finite() || t <= 0.0 {
        return Err(Error::Config(format!(
            "sharpen temperature must be > 0, got {t}"
        )));
    }
    let powered: Vec<f64> = p.iter().map(|&v| v.powf(1.0 / t)).collect();
    let total: f64 = powered.iter().sum();
    Ok(powered.into_iter().map(|v| v / total).collect())
}

/// Guessed label for each unlabeled row: class probabilities averaged over
/// `num_guess_augmentations` jittered copies, then sharpened. The result is a
/// constant target; no gradient flows back through the guessing pass.
///
/// RNG order: row by row, augmentation by augmentation, one jitter draw per
/// coordinate.
pub fn guess_labels<R: Rng>(
    params: &ModelParams,
    unlabeled: &Tensor,
    cfg: &SslConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let n = unlabeled.rows();
    let a = cfg.num_guess_augmentations;
    let mut stacked = Vec::with_capacity(n * a * unlabeled.cols());
    for i in 0..n {
        for _ in 0..a {
            stacked.extend(augment(unlabeled.row(i), cfg.augment_strength, rng));
        }
    }
    let batch = Tensor::from_vec(n * a, unlabeled.cols(), stacked)?;
    let probs = params.forward(&batch)?.class_probs;
    let k = probs.cols();
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        let mut avg = vec![0.0; k];
        for copy in 0..a {
            let row = probs.row(i * a + copy);
            for (acc, &v) in avg.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in avg.iter_mut() {
            *v /= a as f64;
        }
        out.extend(sharpen(&avg, cfg.sharpen_temperature)?);
    }
    Tensor::from_vec(n, k, out)
}

/// Single-sample guess, matching the batch path exactly.
pub fn guess_label<R: Rng>(
    params: &ModelParams,
    x: &[f64],
    cfg: &SslConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let t = guess_labels(params, &Tensor::from_rows(&[x])?, cfg, rng)?;
    Ok(t.data().to_vec())
}

/// Convex combination with a fixed coefficient; exposed for tests that pin λ.
pub fn mixup_with_lambda(
    x1: &[f64],
    t1: &[f64],
    x2: &[f64],
    t2: &[f64],
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(&u, &v)| lambda * u + (1.0 - lambda) * v)
            .collect()
    };
    (mix(x1, x2), mix(t1, t2))
}

/// Mixup with `λ ~ Beta(alpha, alpha)` folded to `λ' = max(λ, 1 - λ)`, keeping
/// the mix closer to the first argument.
pub fn mixup<R: Rng>(
    x1: &[f64],
    t1: &[f64],
    x2: &[f64],
    t2: &[f64],
    alpha: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if x1.len() != x2.len() || t1.len() != t2.len() {
        return Err(Error::shape(
            "mixup",
            format!(
                "inputs {} vs {}, targets {} vs {}",
                x1.len(),
                x2.len(),
                t1.len(),
                t2.len()
            ),
        ));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|_| Error::Config(format!("mixup alpha must be > 0, got {alpha}")))?;
    let lambda: f64 = beta.sample(rng);
    let lambda = lambda.max(1.0 - lambda);
    Ok(mixup_with_lambda(x1, t1, x2, t2, lambda))
}

/// A mixed training batch ready for the differentiable part of the SSL loss.
/// All stochastic choices (augmentation, guessing, shuffling, λ draws) are
/// already baked in, so the loss is a deterministic function of parameters.
#[derive(Debug, Clone)]
pub struct MixedSslBatch {
    pub labeled_x: Tensor,
    /// `n_l x K` mixed soft targets for the labeled portion.
    pub labeled_t: Tensor,
    pub unlabeled_x: Option<Tensor>,
    /// `n_u x K` mixed guessed targets for the unlabeled portion.
    pub unlabeled_t: Option<Tensor>,
}

fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(labels.len(), k);
    for (i, &y) in labels.iter().enumerate() {
        t.set(i, y, 1.0);
    }
    t
}

/// Guess labels for the unlabeled rows, pool them with the one-hot labeled
/// rows, and mix every entry against a shuffled partner from the pool.
///
/// RNG order: guessing (see [`guess_labels`]), then one shuffle of the pool,
/// then one λ per pool entry in pool order (labeled rows first).
pub fn prepare_ssl_batch<R: Rng>(
    params: &ModelParams,
    labeled_x: &Tensor,
    labeled_y: &[usize],
    unlabeled_x: Option<&Tensor>,
    cfg: &SslConfig,
    rng: &mut R,
) -> Result<MixedSslBatch> {
    if labeled_x.rows() == 0 {
        return Err(Error::EmptyInput("ssl_loss: labeled batch"));
    }
    if labeled_x.rows() != labeled_y.len() {
        return Err(Error::shape(
            "ssl_loss",
            format!(
                "{} labeled rows vs {} labels",
                labeled_x.rows(),
                labeled_y.len()
            ),
        ));
    }
    let k = params.class_count();
    let labeled_t = one_hot(labeled_y, k);
    let unlabeled_x = unlabeled_x.filter(|u| u.rows() > 0);
    let unlabeled_t = match unlabeled_x {
        Some(u) => Some(guess_labels(params, u, cfg, rng)?),
        None => None,
    };

    let n_l = labeled_x.rows();
    let n_u = unlabeled_x.map_or(0, |u| u.rows());
    let pool_x = |i: usize| -> &[f64] {
        if i < n_l {
            labeled_x.row(i)
        } else {
            unlabeled_x
                .expect("i >= n_l implies unlabeled")
                .row(i - n_l)
        }
    };
    let pool_t = |i: usize| -> &[f64] {
        if i < n_l {
            labeled_t.row(i)
        } else {
            unlabeled_t
                .as_ref()
                .expect("i >= n_l implies unlabeled")
                .row(i - n_l)
        }
    };

    let mut perm: Vec<usize> = (0..n_l + n_u).collect();
    for i in (1..perm.len()).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }

    let beta = Beta::new(cfg.mixup_alpha, cfg.mixup_alpha)
        .map_err(|_| Error::Config(format!("mixup alpha must be > 0, got {}", cfg.mixup_alpha)))?;
    let mix_into = |i: usize, xs: &mut Vec<f64>, ts: &mut Vec<f64>, rng: &mut R| {
        let lambda: f64 = beta.sample(rng);
        let lambda = lambda.max(1.0 - lambda);
        let partner = perm[i];
        let (x, t) = mixup_with_lambda(
            pool_x(i),
            pool_t(i),
            pool_x(partner),
            pool_t(partner),
            lambda,
        );
        xs.extend(x);
        ts.extend(t);
    };

    let d = labeled_x.cols();
    let mut lx = Vec::with_capacity(n_l * d);
    let mut lt = Vec::with_capacity(n_l * k);
    for i in 0..n_l {
        mix_into(i, &mut lx, &mut lt, rng);
    }
    let mut ux = Vec::with_capacity(n_u * d);
    let mut ut = Vec::with_capacity(n_u * k);
    for i in 0..n_u {
        mix_into(n_l + i, &mut ux, &mut ut, rng);
    }

    Ok(MixedSslBatch {
        labeled_x: Tensor::from_vec(n_l, d, lx)?,
        labeled_t: Tensor::from_vec(n_l, k, lt)?,
        unlabeled_x: if n_u > 0 {
            Some(Tensor::from_vec(n_u, d, ux)?)
        } else {
            None
        },
        unlabeled_t: if n_u > 0 {
            Some(Tensor::from_vec(n_u, k, ut)?)
        } else {
            None
        },
    })
}

/// Node handles for the SSL loss and its parts.
#[derive(Debug, Clone, Copy)]
pub struct SslLossNodes {
    pub total: NodeId,
    pub supervised: NodeId,
    pub consistency: Option<NodeId>,
    pub unlabeled_weight: f64,
}

/// Cross-entropy of the mixed labeled portion plus the weighted mean squared
/// error between unlabeled probabilities and their mixed guessed targets.
pub fn ssl_loss_from_batch(
    g: &mut Graph,
    bound: &BoundModel,
    batch: &MixedSslBatch,
    unlabeled_weight: f64,
) -> Result<SslLossNodes> {
    let x = g.leaf(batch.labeled_x.clone());
    let fwd = bound.forward(g, x)?;
    let probs_clamped = g.clamp(fwd.class_probs, PROB_EPS, 1.0);
    let log_probs = g.log(probs_clamped);
    let targets = g.leaf(batch.labeled_t.clone());
    let weighted = g.mul(targets, log_probs)?;
    let total = g.sum(weighted);
    let supervised = g.scale(total, -1.0 / batch.labeled_x.rows() as f64);

    let consistency = match (&batch.unlabeled_x, &batch.unlabeled_t) {
        (Some(ux), Some(ut)) => {
            let xu = g.leaf(ux.clone());
            let fwd_u = bound.forward(g, xu)?;
            let tgt = g.leaf(ut.clone());
            let diff = g.sub(fwd_u.class_probs, tgt)?;
            let sq = g.mul(diff, diff)?;
            Some(g.mean(sq))
        }
        _ => None,
    };

    let total = match consistency {
        Some(c) => {
            let scaled = g.scale(c, unlabeled_weight);
            g.add(supervised, scaled)?
        }
        None => supervised,
    };
    Ok(SslLossNodes {
        total,
        supervised,
        consistency,
        unlabeled_weight,
    })
}

/// Full SSL loss for one minibatch at the given (multitask-local) epoch:
/// guess, sharpen, mix, then CE + w(epoch) * L2.
#[allow(clippy::too_many_arguments)]
pub fn ssl_loss<R: Rng>(
    g: &mut Graph,
    bound: &BoundModel,
    params: &ModelParams,
    labeled_x: &Tensor,
    labeled_y: &[usize],
    selected_unlabeled_x: Option<&Tensor>,
    cfg: &SslConfig,
    epoch: usize,
    rng: &mut R,
) -> Result<SslLossNodes> {
    let batch = prepare_ssl_batch(params, labeled_x, labeled_y, selected_unlabeled_x, cfg, rng)?;
    ssl_loss_from_batch(g, bound, &batch, cfg.unlabeled_weight(epoch))
}
