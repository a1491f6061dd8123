//! Training orchestration: the OOD-only warmup with alternating score
//! updates, then the multi-task curriculum loop where each epoch selects an
//! in-distribution unlabeled subset, takes combined-loss optimizer steps, and
//! reassigns the score table.
//!
//! Parameter updates, score updates, and selection read only the dataset's
//! [`TrainView`]; hidden ground truth is touched exclusively by the
//! metric-recording blocks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::curriculum::{
    init_scores, otsu_threshold, select_id_fraction, select_id_subset, update_scores, ScoreTable,
    SelectionResult, OTSU_BINS,
};
use crate::datagen::{OpenSetDataset, TrainView};
use crate::diffcore::{Adam, Graph, Tensor};
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{ood_loss, ssl_loss, SslConfig};
use crate::model::{init_model, ModelParams};

/// ODIN defaults used for the final-model detector comparison.
pub const ODIN_TEMPERATURE: f64 = 1000.0;
pub const ODIN_PERTURBATION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SelectionMode {
    /// Threshold from the score histogram (no free parameter).
    Otsu,
    /// Keep the lowest-scoring `eta` fraction, the fallback for
    /// few-outlier regimes where the histogram split misfires.
    Fraction { eta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Warmup on the OOD loss, then the full multi-task curriculum loop.
    Ours,
    /// Plain semi-supervised training on every unlabeled sample; no OOD
    /// loss, no score updates, no filtering.
    BaselineNoFilter,
    /// Labeled data only; the sanity band.
    SupervisedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    /// Epoch index (0-based) at which score reassignment begins.
    pub score_update_start_epoch: usize,
    pub multitask_epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub learning_rate: f64,
    pub ssl: SslConfig,
    /// Coefficient on the OOD loss inside the combined objective.
    pub ood_loss_weight: f64,
    pub selection: SelectionMode,
    pub checkpoint_window: usize,
    pub hidden_widths: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale schedule; see [`TrainConfig::paper_scale`] for the full-size
    /// one. The warmup is long relative to the multi-task phase because the
    /// alternating score updates need a sharp OOD boundary before the first
    /// reassignment and many update cycles to sweep each ID cluster.
    fn default() -> Self {
        TrainConfig {
            warmup_epochs: 120,
            score_update_start_epoch: 30,
            multitask_epochs: 60,
            iterations_per_epoch: 300,
            batch_labeled: 16,
            batch_unlabeled: 16,
            learning_rate: 0.002,
            ssl: SslConfig::default(),
            ood_loss_weight: 1.0,
            selection: SelectionMode::Otsu,
            checkpoint_window: 10,
            hidden_widths: vec![64, 64],
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The original schedule: 100 warmup epochs with score updates from the
    /// 10th, 1024 multi-task epochs of 1024 iterations, 64+64 batches.
    pub fn paper_scale() -> Self {
        TrainConfig {
            warmup_epochs: 100,
            score_update_start_epoch: 10,
            multitask_epochs: 1024,
            iterations_per_epoch: 1024,
            batch_labeled: 64,
            batch_unlabeled: 64,
            ssl: SslConfig {
                unlabeled_weight_rampup_epochs: 256,
                ..SslConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.score_update_start_epoch > self.warmup_epochs {
            return Err(Error::Config(format!(
                "score_update_start_epoch ({}) must be <= warmup_epochs ({})",
                self.score_update_start_epoch, self.warmup_epochs
            )));
        }
        for (name, v) in [
            ("multitask_epochs", self.multitask_epochs),
            ("iterations_per_epoch", self.iterations_per_epoch),
            ("batch_labeled", self.batch_labeled),
            ("batch_unlabeled", self.batch_unlabeled),
            ("checkpoint_window", self.checkpoint_window),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !self.ood_loss_weight.is_finite() || self.ood_loss_weight < 0.0 {
            return Err(Error::Config("ood_loss_weight must be >= 0".into()));
        }
        if let SelectionMode::Fraction { eta } = self.selection {
            if !eta.is_finite() || eta <= 0.0 || eta > 1.0 {
                return Err(Error::Config(format!(
                    "selection fraction must be in (0, 1], got {eta}"
                )));
            }
        }
        self.ssl.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Multitask,
}

/// One epoch's metrics. Optional fields are absent where the phase or mode
/// does not produce them (no SSL loss during warmup, no threshold when the
/// histogram degenerates, no precision for an empty selection).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub ood_loss: Option<f64>,
    pub ssl_loss: Option<f64>,
    pub threshold: Option<f64>,
    pub selected_fraction: Option<f64>,
    pub selection_precision: Option<f64>,
    pub selection_recall: Option<f64>,
    pub test_accuracy: f64,
    /// Max |s| over labeled scores; pinned at exactly 0 by construction.
    pub labeled_score_max: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
}

/// Deep-copied model snapshot taken at a multitask epoch end.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: ModelParams,
    pub test_accuracy: f64,
}

/// End-of-run metrics, including the detector comparison on the final model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: TrainMode,
    pub epochs_completed: usize,
    pub checkpoint_window_used: usize,
    /// Mean test accuracy over the checkpoint ring.
    pub checkpoint_mean_accuracy: f64,
    pub final_test_accuracy: f64,
    pub final_threshold: Option<f64>,
    pub selected_count: usize,
    pub selection_precision: Option<f64>,
    pub selection_recall: Option<f64>,
    /// AUROC of the final score table.
    pub auroc_learned: Option<f64>,
    /// Mean AUROC of the score snapshots over the checkpoint-window epochs.
    pub auroc_learned_window_mean: Option<f64>,
    pub auroc_max_softmax: Option<f64>,
    pub auroc_odin: Option<f64>,
    pub ssl_evaluations_warmup: u64,
}

/// Wrap-around index sampler: hands out minibatch indices from a shuffled
/// order and reshuffles whenever the pool is exhausted.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(indices: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut c = Cycler {
            order: indices,
            pos: 0,
        };
        c.reshuffle(rng);
        c
    }

    fn reshuffle(&mut self, rng: &mut ChaCha8Rng) {
        for i in (1..self.order.len()).rev() {
            let j = rng.gen_range(0..=i);
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    fn next_batch(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                self.reshuffle(rng);
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn gather(rows: &[Vec<f64>], indices: &[usize]) -> Tensor {
    let d = rows.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(&rows[i]);
    }
    Tensor::from_vec(indices.len(), d, data).expect("gather rows share dimension")
}

/// State of one training run. The run owns its model, optimizer, score table
/// and generator; nothing is shared, so independent runs can execute in
/// parallel.
pub struct Trainer {
    cfg: TrainConfig,
    mode: TrainMode,
    model: ModelParams,
    adam: Adam,
    table: ScoreTable,
    rng: ChaCha8Rng,
    history: RunHistory,
    checkpoints: VecDeque<Checkpoint>,
    score_snapshots: Vec<(usize, Vec<f64>)>,
    ssl_evaluations: u64,
    ssl_evaluations_warmup: u64,
    epochs_completed: usize,
    labeled_cycler: Cycler,
    unlabeled_cycler: Cycler,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, mode: TrainMode, data: &OpenSetDataset) -> Result<Self> {
        cfg.validate()?;
        let view = data.train_view();
        if view.labeled_x.is_empty() {
            return Err(Error::EmptyInput("trainer: labeled split"));
        }
        let model = init_model(
            data.meta().dim,
            &cfg.hidden_widths,
            data.meta().class_count,
            cfg.seed,
        )?;
        let adam = Adam::new(cfg.learning_rate, &model.param_shapes());
        let table = init_scores(view.labeled_x.len(), view.unlabeled_x.len());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e_5f72_6e67);
        let labeled_cycler = Cycler::new((0..view.labeled_x.len()).collect(), &mut rng);
        let unlabeled_cycler = Cycler::new((0..view.unlabeled_x.len()).collect(), &mut rng);
        Ok(Trainer {
            cfg,
            mode,
            model,
            adam,
            table,
            rng,
            history: RunHistory::default(),
            checkpoints: VecDeque::new(),
            score_snapshots: Vec::new(),
            ssl_evaluations: 0,
            ssl_evaluations_warmup: 0,
            epochs_completed: 0,
            labeled_cycler,
            unlabeled_cycler,
        })
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn score_table(&self) -> &ScoreTable {
        &self.table
    }

    pub fn history(&self) -> &RunHistory {
        &self.history
    }

    pub fn checkpoints(&self) -> &VecDeque<Checkpoint> {
        &self.checkpoints
    }

    pub fn score_snapshots(&self) -> &[(usize, Vec<f64>)] {
        &self.score_snapshots
    }

    pub fn ssl_evaluations_warmup(&self) -> u64 {
        self.ssl_evaluations_warmup
    }

    /// Runs the configured mode start to finish.
    pub fn run(&mut self, data: &OpenSetDataset) -> Result<()> {
        match self.mode {
            TrainMode::Ours => {
                self.run_warmup(data)?;
                self.run_multitask(data)
            }
            TrainMode::BaselineNoFilter | TrainMode::SupervisedOnly => self.run_multitask(data),
        }
    }

    /// Warmup phase: minibatch steps on the OOD loss alone, with score
    /// reassignment at each epoch end once `score_update_start_epoch` is
    /// reached. Not used by the baseline modes.
    pub fn run_warmup(&mut self, data: &OpenSetDataset) -> Result<()> {
        debug_assert_eq!(self.mode, TrainMode::Ours);
        let view = data.train_view();
        for _ in 0..self.cfg.warmup_epochs {
            let epoch = self.epochs_completed;
            let mut loss_sum = 0.0;
            for _ in 0..self.cfg.iterations_per_epoch {
                loss_sum += self.ood_step(&view, epoch, "warmup")?;
            }
            self.end_epoch(
                data,
                Phase::Warmup,
                Some(loss_sum / self.cfg.iterations_per_epoch as f64),
                None,
                None,
            )?;
        }
        self.ssl_evaluations_warmup = self.ssl_evaluations;
        assert_eq!(
            self.ssl_evaluations_warmup, 0,
            "warmup must not evaluate the SSL loss"
        );
        Ok(())
    }

    /// Multi-task phase. Per epoch: select the ID subset from the current
    /// scores, take combined-loss steps, then reassign scores. The baseline
    /// modes run the same loop shape with selection pinned to everything
    /// (or nothing) and the OOD machinery disabled.
    pub fn run_multitask(&mut self, data: &OpenSetDataset) -> Result<()> {
        let view = data.train_view();
        for local_epoch in 0..self.cfg.multitask_epochs {
            let epoch = self.epochs_completed;
            let selection = self.select(&view);

            let selected_x: Vec<Vec<f64>> = selection
                .as_ref()
                .map(|sel| {
                    sel.selected_indices
                        .iter()
                        .map(|&i| view.unlabeled_x[i].clone())
                        .collect()
                })
                .unwrap_or_default();
            let mut ssl_cycler = Cycler::new((0..selected_x.len()).collect(), &mut self.rng);

            let mut ood_sum = 0.0;
            let mut ssl_sum = 0.0;
            for _ in 0..self.cfg.iterations_per_epoch {
                let (ssl_v, ood_v) =
                    self.multitask_step(&view, &selected_x, &mut ssl_cycler, local_epoch, epoch)?;
                ssl_sum += ssl_v;
                ood_sum += ood_v;
            }

            let iters = self.cfg.iterations_per_epoch as f64;
            let ood_mean = (self.mode == TrainMode::Ours).then_some(ood_sum / iters);
            self.end_epoch(
                data,
                Phase::Multitask,
                ood_mean,
                Some(ssl_sum / iters),
                selection,
            )?;
        }
        Ok(())
    }

    /// Per-epoch curriculum selection. `None` means the mode does not select
    /// (baselines); an empty selection inside `Some` is the degenerate-Otsu
    /// fallback.
    fn select(&self, view: &TrainView<'_>) -> Option<SelectionResult> {
        match self.mode {
            TrainMode::Ours => Some(match self.cfg.selection {
                SelectionMode::Otsu => {
                    match otsu_threshold(self.table.unlabeled_scores(), OTSU_BINS) {
                        Ok(t) => select_id_subset(&self.table, t),
                        // One occupied bin (for instance before the first score
                        // update, when every score is still 1): no evidence any
                        // unlabeled sample is ID, so select nothing this epoch.
                        Err(Error::DegenerateHistogram { .. }) => SelectionResult::empty(f64::NAN),
                        Err(_) => SelectionResult::empty(f64::NAN),
                    }
                }
                SelectionMode::Fraction { eta } => {
                    select_id_fraction(&self.table, eta).expect("eta validated")
                }
            }),
            TrainMode::BaselineNoFilter => Some(SelectionResult {
                threshold: f64::NAN,
                selected_indices: (0..view.unlabeled_x.len()).collect(),
                selected_fraction: 1.0,
            }),
            TrainMode::SupervisedOnly => None,
        }
    }

    /// One optimizer step on the OOD loss alone.
    fn ood_step(&mut self, view: &TrainView<'_>, epoch: usize, phase: &'static str) -> Result<f64> {
        let lb = self
            .labeled_cycler
            .next_batch(self.cfg.batch_labeled, &mut self.rng);
        let ub = self
            .unlabeled_cycler
            .next_batch(self.cfg.batch_unlabeled, &mut self.rng);
        let lx = gather(view.labeled_x, &lb);
        let ux = gather(view.unlabeled_x, &ub);
        let lt = Tensor::column_vector(
            &lb.iter()
                .map(|&i| self.table.labeled_scores()[i])
                .collect::<Vec<_>>(),
        );
        let ut = Tensor::column_vector(
            &ub.iter()
                .map(|&i| self.table.unlabeled_scores()[i])
                .collect::<Vec<_>>(),
        );

        let mut g = Graph::new();
        let bound = self.model.bind(&mut g);
        let lx_node = g.leaf(lx);
        let fwd_l = bound.forward(&mut g, lx_node)?;
        let ux_node = g.leaf(ux);
        let fwd_u = bound.forward(&mut g, ux_node)?;
        let loss = ood_loss(
            &mut g,
            Some((fwd_l.ood_score, &lt)),
            Some((fwd_u.ood_score, &ut)),
        )?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { phase, epoch });
        }
        g.backward(loss)?;
        self.apply_gradients(&g, &bound)?;
        Ok(value)
    }

    /// One optimizer step on the combined objective. Baseline modes drop the
    /// OOD term; supervised mode also drops unlabeled data entirely.
    fn multitask_step(
        &mut self,
        view: &TrainView<'_>,
        selected_x: &[Vec<f64>],
        ssl_cycler: &mut Cycler,
        local_epoch: usize,
        epoch: usize,
    ) -> Result<(f64, f64)> {
        let lb = self
            .labeled_cycler
            .next_batch(self.cfg.batch_labeled, &mut self.rng);
        let lx = gather(view.labeled_x, &lb);
        let ly: Vec<usize> = lb.iter().map(|&i| view.labeled_y[i]).collect();

        let ssl_batch_x = if selected_x.is_empty() {
            None
        } else {
            let sb = ssl_cycler.next_batch(self.cfg.batch_unlabeled, &mut self.rng);
            Some(gather(selected_x, &sb))
        };

        let mut g = Graph::new();
        let bound = self.model.bind(&mut g);
        let ssl_nodes = ssl_loss(
            &mut g,
            &bound,
            &self.model,
            &lx,
            &ly,
            ssl_batch_x.as_ref(),
            &self.cfg.ssl,
            local_epoch,
            &mut self.rng,
        )?;
        self.ssl_evaluations += 1;

        let (total, ood_value) = if self.mode == TrainMode::Ours {
            // The OOD loss sees the raw labeled batch and a batch from the
            // whole unlabeled pool; only the SSL loss is restricted to the
            // curriculum subset.
            let ub = self
                .unlabeled_cycler
                .next_batch(self.cfg.batch_unlabeled, &mut self.rng);
            let ux = gather(view.unlabeled_x, &ub);
            let lt = Tensor::column_vector(
                &lb.iter()
                    .map(|&i| self.table.labeled_scores()[i])
                    .collect::<Vec<_>>(),
            );
            let ut = Tensor::column_vector(
                &ub.iter()
                    .map(|&i| self.table.unlabeled_scores()[i])
                    .collect::<Vec<_>>(),
            );
            let lx_node = g.leaf(lx.clone());
            let fwd_l = bound.forward(&mut g, lx_node)?;
            let ux_node = g.leaf(ux);
            let fwd_u = bound.forward(&mut g, ux_node)?;
            let ood = ood_loss(
                &mut g,
                Some((fwd_l.ood_score, &lt)),
                Some((fwd_u.ood_score, &ut)),
            )?;
            let ood_value = g.value(ood).item();
            let weighted = g.scale(ood, self.cfg.ood_loss_weight);
            (g.add(ssl_nodes.total, weighted)?, ood_value)
        } else {
            (ssl_nodes.total, 0.0)
        };

        let ssl_value = g.value(ssl_nodes.total).item();
        let total_value = g.value(total).item();
        if !total_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                phase: "multitask",
                epoch,
            });
        }
        g.backward(total)?;
        self.apply_gradients(&g, &bound)?;
        Ok((ssl_value, ood_value))
    }

    fn apply_gradients(&mut self, g: &Graph, bound: &crate::model::BoundModel) -> Result<()> {
        let grads: Vec<Tensor> = bound
            .param_ids()
            .iter()
            .map(|&id| match g.grad(id) {
                Some(t) => t.clone(),
                // Parameter untouched by this loss (e.g. the class head
                // during warmup): zero gradient.
                None => {
                    let (r, c) = g.value(id).shape();
                    Tensor::zeros(r, c)
                }
            })
            .collect();
        let mut params = self.model.params_mut();
        self.adam.step(&mut params, &grads)
    }

    /// Shared epoch wrap-up: score reassignment, invariants, checkpointing,
    /// metric recording, score snapshot.
    fn end_epoch(
        &mut self,
        data: &OpenSetDataset,
        phase: Phase,
        ood_loss_mean: Option<f64>,
        ssl_loss_mean: Option<f64>,
        selection: Option<SelectionResult>,
    ) -> Result<()> {
        let epoch = self.epochs_completed;
        let view = data.train_view();

        let scores_updatable = self.mode == TrainMode::Ours;
        let due = match phase {
            Phase::Warmup => epoch >= self.cfg.score_update_start_epoch,
            Phase::Multitask => true,
        };
        if scores_updatable && due && !view.unlabeled_x.is_empty() {
            let inputs = gather(
                view.unlabeled_x,
                &(0..view.unlabeled_x.len()).collect::<Vec<_>>(),
            );
            update_scores(&mut self.table, &self.model, &inputs, epoch)?;
        }
        assert_eq!(
            self.table.labeled_score_max(),
            0.0,
            "labeled scores must stay at zero"
        );

        let test_matrix = gather(data.test_x(), &(0..data.test_x().len()).collect::<Vec<_>>());
        let predictions = eval::predict_classes(&self.model, &test_matrix)?;
        let test_accuracy = eval::accuracy(&predictions, data.test_y())?;

        // Metrics against hidden ground truth live here, outside any
        // train-path decision.
        let (threshold, selected_fraction, precision, recall) = match &selection {
            Some(sel) => {
                let (p, r) = eval::selection_precision_recall(
                    &sel.selected_indices,
                    data.unlabeled_hidden_is_ood(),
                )?;
                let threshold = sel.threshold.is_finite().then_some(sel.threshold);
                (threshold, Some(sel.selected_fraction), p, Some(r))
            }
            None => (None, None, None, None),
        };

        if phase == Phase::Multitask {
            self.checkpoints.push_back(Checkpoint {
                epoch,
                params: self.model.clone(),
                test_accuracy,
            });
            while self.checkpoints.len() > self.cfg.checkpoint_window {
                self.checkpoints.pop_front();
            }
        }

        self.history.records.push(EpochRecord {
            epoch,
            phase,
            ood_loss: ood_loss_mean,
            ssl_loss: ssl_loss_mean,
            threshold,
            selected_fraction,
            selection_precision: precision,
            selection_recall: recall,
            test_accuracy,
            labeled_score_max: self.table.labeled_score_max(),
        });
        self.score_snapshots
            .push((epoch, self.table.unlabeled_scores().to_vec()));
        self.epochs_completed += 1;
        Ok(())
    }

    /// Final metrics: checkpoint-window mean accuracy plus the detection
    /// comparison (learned score vs max-softmax vs the perturbed detector)
    /// over the unlabeled pool of the trained model.
    pub fn final_evaluation(&self, data: &OpenSetDataset) -> Result<RunSummary> {
        if data.test_x().is_empty() {
            return Err(Error::EmptyInput("final_evaluation: test set"));
        }
        if self.checkpoints.is_empty() && self.history.records.is_empty() {
            return Err(Error::EmptyInput("final_evaluation: no epochs completed"));
        }

        let checkpoint_window_used = self.checkpoints.len();
        let checkpoint_mean_accuracy = if checkpoint_window_used > 0 {
            self.checkpoints
                .iter()
                .map(|c| c.test_accuracy)
                .sum::<f64>()
                / checkpoint_window_used as f64
        } else {
            self.history.records.last().map_or(0.0, |r| r.test_accuracy)
        };
        let final_test_accuracy = self.history.records.last().map_or(0.0, |r| r.test_accuracy);

        let view = data.train_view();
        let hidden = data.unlabeled_hidden_is_ood();
        let both_classes = hidden.iter().any(|&o| o) && hidden.iter().any(|&o| !o);

        let final_selection = if self.mode == TrainMode::Ours {
            Some(match self.cfg.selection {
                SelectionMode::Otsu => {
                    match otsu_threshold(self.table.unlabeled_scores(), OTSU_BINS) {
                        Ok(t) => select_id_subset(&self.table, t),
                        Err(_) => SelectionResult::empty(f64::NAN),
                    }
                }
                SelectionMode::Fraction { eta } => {
                    select_id_fraction(&self.table, eta).expect("eta validated")
                }
            })
        } else {
            None
        };
        let (final_threshold, selected_count, selection_precision, selection_recall) =
            match &final_selection {
                Some(selection) => {
                    let (p, r) =
                        eval::selection_precision_recall(&selection.selected_indices, hidden)?;
                    (
                        selection
                            .threshold
                            .is_finite()
                            .then_some(selection.threshold),
                        selection.selected_indices.len(),
                        p,
                        Some(r),
                    )
                }
                None => (None, 0, None, None),
            };

        let (auroc_learned, auroc_learned_window_mean, auroc_max_softmax, auroc_odin) =
            if both_classes && !view.unlabeled_x.is_empty() {
                let all: Vec<usize> = (0..view.unlabeled_x.len()).collect();
                let inputs = gather(view.unlabeled_x, &all);
                let (learned, learned_window) = if self.mode == TrainMode::Ours {
                    let outcome = eval::DetectionOutcome {
                        scores: self.table.unlabeled_scores().to_vec(),
                        labels: hidden.to_vec(),
                        selected: final_selection.as_ref().map(|s| s.selected_indices.clone()),
                    };
                    // The checkpoint-window mean uses the per-epoch snapshots
                    // of the same checkpoint epochs the accuracy average uses.
                    let window_epochs: Vec<usize> =
                        self.checkpoints.iter().map(|c| c.epoch).collect();
                    let mut window_aurocs = Vec::new();
                    for (epoch, snapshot) in &self.score_snapshots {
                        if window_epochs.contains(epoch) {
                            window_aurocs.push(eval::auroc(snapshot, hidden)?);
                        }
                    }
                    let window_mean = if window_aurocs.is_empty() {
                        None
                    } else {
                        Some(window_aurocs.iter().sum::<f64>() / window_aurocs.len() as f64)
                    };
                    (Some(outcome.auroc()?), window_mean)
                } else {
                    (None, None)
                };
                let msp = eval::max_softmax_scores(&self.model, &inputs)?;
                let odin =
                    eval::odin_scores(&self.model, &inputs, ODIN_TEMPERATURE, ODIN_PERTURBATION)?;
                (
                    learned,
                    learned_window,
                    Some(eval::auroc(&msp, hidden)?),
                    Some(eval::auroc(&odin, hidden)?),
                )
            } else {
                (None, None, None, None)
            };

        Ok(RunSummary {
            mode: self.mode,
            epochs_completed: self.epochs_completed,
            checkpoint_window_used,
            checkpoint_mean_accuracy,
            final_test_accuracy,
            final_threshold,
            selected_count,
            selection_precision,
            selection_recall,
            auroc_learned,
            auroc_learned_window_mean,
            auroc_max_softmax,
            auroc_odin,
            ssl_evaluations_warmup: self.ssl_evaluations_warmup,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_id_blobs, gen_ood, make_split, OodKind};

    pub(super) fn tiny_dataset(seed: u64, n_ood: usize) -> OpenSetDataset {
        let id = gen_id_blobs(3, 40, 2, 0.12, seed).unwrap();
        let ood = if n_ood > 0 {
            gen_ood(OodKind::Uniform, n_ood, 2, seed.wrapping_add(1)).unwrap()
        } else {
            Vec::new()
        };
        make_split(&id, &ood, 9, 30, seed.wrapping_add(2)).unwrap()
    }

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            warmup_epochs: 6,
            score_update_start_epoch: 3,
            multitask_epochs: 8,
            iterations_per_epoch: 5,
            batch_labeled: 8,
            batch_unlabeled: 8,
            hidden_widths: vec![16, 16],
            ssl: SslConfig {
                unlabeled_weight_rampup_epochs: 2,
                ..SslConfig::default()
            },
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cycler_wraps_with_reshuffle_and_covers_the_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Cycler::new((0..5).collect(), &mut rng);
        // Two full passes in three draws: every index appears exactly twice.
        let mut seen = vec![0usize; 5];
        for _ in 0..2 {
            for i in c.next_batch(5, &mut rng) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&n| n == 2), "{seen:?}");

        // Batches larger than the pool wrap within one call.
        let batch = c.next_batch(12, &mut rng);
        assert_eq!(batch.len(), 12);

        let mut empty = Cycler::new(Vec::new(), &mut rng);
        assert!(empty.next_batch(4, &mut rng).is_empty());
    }

    #[test]
    fn config_validation_catches_bad_schedules() {
        let mut cfg = TrainConfig::default();
        cfg.score_update_start_epoch = cfg.warmup_epochs + 1;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            iterations_per_epoch: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn scores_stay_at_one_until_the_update_start_epoch() {
        let data = tiny_dataset(5, 40);
        let cfg = tiny_config(5);
        let start = cfg.score_update_start_epoch;
        let mut t = Trainer::new(cfg, TrainMode::Ours, &data).unwrap();
        t.run_warmup(&data).unwrap();

        for (epoch, snapshot) in t.score_snapshots() {
            if *epoch < start {
                assert!(
                    snapshot.iter().all(|&s| s == 1.0),
                    "epoch {epoch} has updated scores before the start epoch"
                );
            } else {
                assert!(
                    snapshot.iter().any(|&s| s != 1.0),
                    "epoch {epoch} never updated"
                );
            }
        }
        assert_eq!(t.ssl_evaluations_warmup(), 0);
        for r in &t.history().records {
            assert_eq!(r.labeled_score_max, 0.0);
            assert!(r.ssl_loss.is_none());
        }
    }

    #[test]
    fn update_count_is_warmup_minus_start() {
        let data = tiny_dataset(6, 20);
        let mut cfg = tiny_config(6);
        cfg.score_update_start_epoch = cfg.warmup_epochs;
        let mut t = Trainer::new(cfg, TrainMode::Ours, &data).unwrap();
        t.run_warmup(&data).unwrap();
        assert!(t.score_table().unlabeled_scores().iter().all(|&s| s == 1.0));
        assert_eq!(t.score_table().epoch_last_updated(), None);
    }

    #[test]
    fn warmup_separates_hidden_id_from_ood_scores() {
        let data = tiny_dataset(7, 60);
        let mut cfg = tiny_config(7);
        cfg.warmup_epochs = 25;
        cfg.iterations_per_epoch = 10;
        let mut t = Trainer::new(cfg, TrainMode::Ours, &data).unwrap();
        t.run_warmup(&data).unwrap();

        let hidden = data.unlabeled_hidden_is_ood();
        let scores = t.score_table().unlabeled_scores();
        let mean = |flag: bool| {
            let vals: Vec<f64> = scores
                .iter()
                .zip(hidden)
                .filter(|(_, &o)| o == flag)
                .map(|(&s, _)| s)
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        assert!(
            mean(false) < mean(true),
            "hidden-ID mean {} should sit below hidden-OOD mean {}",
            mean(false),
            mean(true)
        );
    }

    #[test]
    fn multitask_records_varying_thresholds_and_completes_on_empty_selection() {
        let data = tiny_dataset(8, 40);
        let mut cfg = tiny_config(8);
        // Score updates never run during this warmup, so the first multitask
        // selection sees the all-ones histogram and must fall back cleanly.
        cfg.warmup_epochs = 2;
        cfg.score_update_start_epoch = 2;
        let mut t = Trainer::new(cfg, TrainMode::Ours, &data).unwrap();
        t.run(&data).unwrap();

        let multitask: Vec<&EpochRecord> = t
            .history()
            .records
            .iter()
            .filter(|r| r.phase == Phase::Multitask)
            .collect();
        assert_eq!(multitask.len(), 8);
        // First multitask epoch: degenerate histogram, empty selection.
        assert!(multitask[0].threshold.is_none());
        assert_eq!(multitask[0].selected_fraction, Some(0.0));
        assert!(multitask[0].selection_precision.is_none());
        // Later epochs produce real, moving thresholds.
        let thresholds: Vec<f64> = multitask.iter().filter_map(|r| r.threshold).collect();
        assert!(thresholds.len() >= 2);
        assert!(thresholds.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn identical_config_and_seed_reproduce_the_history() {
        let data = tiny_dataset(9, 30);
        let run = || {
            let mut t = Trainer::new(tiny_config(9), TrainMode::Ours, &data).unwrap();
            t.run(&data).unwrap();
            t.history().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn baseline_mode_skips_ood_machinery() {
        let data = tiny_dataset(10, 30);
        let mut t = Trainer::new(tiny_config(10), TrainMode::BaselineNoFilter, &data).unwrap();
        t.run(&data).unwrap();
        assert!(t.score_table().unlabeled_scores().iter().all(|&s| s == 1.0));
        for r in &t.history().records {
            assert_eq!(r.phase, Phase::Multitask);
            assert!(r.ood_loss.is_none());
            assert_eq!(r.selected_fraction, Some(1.0));
        }
        let summary = t.final_evaluation(&data).unwrap();
        assert!(summary.auroc_learned.is_none());
        assert!(summary.auroc_max_softmax.is_some());
    }

    #[test]
    fn supervised_mode_trains_without_unlabeled_data() {
        let data = tiny_dataset(11, 30);
        let mut t = Trainer::new(tiny_config(11), TrainMode::SupervisedOnly, &data).unwrap();
        t.run(&data).unwrap();
        for r in &t.history().records {
            assert!(r.selected_fraction.is_none());
            assert!(r.ssl_loss.is_some());
        }
    }

    #[test]
    fn checkpoint_ring_respects_the_window() {
        let data = tiny_dataset(12, 20);
        let mut cfg = tiny_config(12);
        cfg.checkpoint_window = 3;
        let mut t = Trainer::new(cfg, TrainMode::Ours, &data).unwrap();
        t.run(&data).unwrap();
        assert_eq!(t.checkpoints().len(), 3);
        let epochs: Vec<usize> = t.checkpoints().iter().map(|c| c.epoch).collect();
        // Last three multitask epochs (6 warmup + 8 multitask = epochs 11..14).
        assert_eq!(epochs, vec![11, 12, 13]);
    }

    #[test]
    fn final_evaluation_averages_the_ring() {
        let data = tiny_dataset(13, 20);
        let mut t = Trainer::new(tiny_config(13), TrainMode::Ours, &data).unwrap();
        t.run(&data).unwrap();
        let summary = t.final_evaluation(&data).unwrap();
        let expected: f64 = t.checkpoints().iter().map(|c| c.test_accuracy).sum::<f64>()
            / t.checkpoints().len() as f64;
        assert_eq!(summary.checkpoint_mean_accuracy, expected);
        assert_eq!(summary.ssl_evaluations_warmup, 0);
        assert!(summary.auroc_learned.is_some());
        assert!(summary.auroc_learned_window_mean.is_some());
    }
}
