//! Executes experiment specs: one training run per seed, per-run artifacts
//! (history CSV, per-epoch score snapshots, summary JSON), a cross-seed
//! aggregate, contamination sweeps, and histogram emission.
//!
//! Every artifact is a pure function of (spec, seed): no timestamps, no
//! machine state, so reruns are byte-identical.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use openset_core::curriculum::histogram_bin_of;
use openset_core::trainer::{Phase, RunHistory, RunSummary, TrainMode, Trainer};

use crate::spec::ExperimentSpec;
use crate::{CliError, CliResult};

/// Everything produced by one seeded run, kept in memory for callers that
/// want to inspect results without re-reading the files.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub history: RunHistory,
    pub summary: RunSummary,
}

pub(crate) fn mode_dir_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Ours => "ours",
        TrainMode::BaselineNoFilter => "baseline_no_filter",
        TrainMode::SupervisedOnly => "supervised_only",
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn history_csv(history: &RunHistory) -> String {
    let mut out = String::from(
        "epoch,phase,ood_loss,ssl_loss,threshold,selected_fraction,selection_precision,selection_recall,test_accuracy,labeled_score_max\n",
    );
    for r in &history.records {
        let phase = match r.phase {
            Phase::Warmup => "warmup",
            Phase::Multitask => "multitask",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            phase,
            opt_cell(r.ood_loss),
            opt_cell(r.ssl_loss),
            opt_cell(r.threshold),
            opt_cell(r.selected_fraction),
            opt_cell(r.selection_precision),
            opt_cell(r.selection_recall),
            r.test_accuracy,
            r.labeled_score_max,
        );
    }
    out
}

/// A parsed row of `history.csv`, exposed for histogram emission and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub phase: String,
    pub threshold: Option<f64>,
    pub test_accuracy: f64,
}

pub fn parse_history_csv(text: &str) -> CliResult<Vec<HistoryRow>> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(CliError::Config(format!(
                "history.csv line {}: expected 10 fields, got {}",
                idx + 1,
                fields.len()
            )));
        }
        let parse = |s: &str, what: &str| -> CliResult<f64> {
            s.parse::<f64>().map_err(|e| {
                CliError::Config(format!("history.csv line {}: bad {what}: {e}", idx + 1))
            })
        };
        rows.push(HistoryRow {
            epoch: fields[0].parse().map_err(|e| {
                CliError::Config(format!("history.csv line {}: bad epoch: {e}", idx + 1))
            })?,
            phase: fields[1].to_string(),
            threshold: if fields[4].is_empty() {
                None
            } else {
                Some(parse(fields[4], "threshold")?)
            },
            test_accuracy: parse(fields[8], "test_accuracy")?,
        });
    }
    Ok(rows)
}

fn scores_csv(scores: &[f64], hidden_is_ood: &[bool]) -> String {
    let mut out = String::from("index,score,hidden_is_ood\n");
    for (i, (s, &ood)) in scores.iter().zip(hidden_is_ood).enumerate() {
        let _ = writeln!(out, "{i},{s},{}", ood as u8);
    }
    out
}

fn scores_file_name(epoch: usize) -> String {
    format!("scores_epoch_{epoch:04}.csv")
}

/// Per-run on-disk record: the spec slice that produced it plus the final
/// metrics.
#[derive(Debug, Clone, Serialize)]
struct RunRecord<'a> {
    seed: u64,
    mode: TrainMode,
    dataset: &'a crate::spec::DatasetSpec,
    train: &'a openset_core::trainer::TrainConfig,
    summary: &'a RunSummary,
}

/// Runs one seed of the spec and writes its artifacts under
/// `<out>/<mode>/<seed>/`.
pub fn run_single(spec: &ExperimentSpec, seed: u64) -> CliResult<RunArtifacts> {
    let data = spec.dataset.build(seed)?;
    let mut train_cfg = spec.train.clone();
    train_cfg.seed = seed;

    let mut trainer = Trainer::new(train_cfg.clone(), spec.mode, &data)?;
    trainer.run(&data)?;
    let summary = trainer.final_evaluation(&data)?;

    let run_dir = spec
        .out_dir
        .join(mode_dir_name(spec.mode))
        .join(seed.to_string());
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join("history.csv"), history_csv(trainer.history()))?;
    for (epoch, snapshot) in trainer.score_snapshots() {
        fs::write(
            run_dir.join(scores_file_name(*epoch)),
            scores_csv(snapshot, data.unlabeled_hidden_is_ood()),
        )?;
    }
    let record = RunRecord {
        seed,
        mode: spec.mode,
        dataset: &spec.dataset,
        train: &train_cfg,
        summary: &summary,
    };
    fs::write(
        run_dir.join("summary.json"),
        serde_json::to_string_pretty(&record)?.as_bytes(),
    )?;

    Ok(RunArtifacts {
        seed,
        run_dir,
        history: trainer.history().clone(),
        summary,
    })
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for one trial).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

pub fn aggregate_values(values: &[f64]) -> Option<MetricAggregate> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some(MetricAggregate {
        mean,
        std,
        values: values.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub checkpoint_mean_accuracy: Option<MetricAggregate>,
    pub final_test_accuracy: Option<MetricAggregate>,
    pub selection_precision: Option<MetricAggregate>,
    pub selection_recall: Option<MetricAggregate>,
    pub auroc_learned: Option<MetricAggregate>,
    pub auroc_learned_window_mean: Option<MetricAggregate>,
    pub auroc_max_softmax: Option<MetricAggregate>,
    pub auroc_odin: Option<MetricAggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mode: TrainMode,
    pub seeds: Vec<u64>,
    pub n_trials: usize,
    pub metrics: AggregateMetrics,
}

pub fn aggregate_runs(mode: TrainMode, runs: &[RunArtifacts]) -> AggregateReport {
    let collect = |f: &dyn Fn(&RunSummary) -> Option<f64>| -> Vec<f64> {
        runs.iter().filter_map(|r| f(&r.summary)).collect()
    };
    AggregateReport {
        mode,
        seeds: runs.iter().map(|r| r.seed).collect(),
        n_trials: runs.len(),
        metrics: AggregateMetrics {
            checkpoint_mean_accuracy: aggregate_values(&collect(&|s| {
                Some(s.checkpoint_mean_accuracy)
            })),
            final_test_accuracy: aggregate_values(&collect(&|s| Some(s.final_test_accuracy))),
            selection_precision: aggregate_values(&collect(&|s| s.selection_precision)),
            selection_recall: aggregate_values(&collect(&|s| s.selection_recall)),
            auroc_learned: aggregate_values(&collect(&|s| s.auroc_learned)),
            auroc_learned_window_mean: aggregate_values(&collect(&|s| s.auroc_learned_window_mean)),
            auroc_max_softmax: aggregate_values(&collect(&|s| s.auroc_max_softmax)),
            auroc_odin: aggregate_values(&collect(&|s| s.auroc_odin)),
        },
    }
}

/// Runs every seed of the spec and writes `<out>/aggregate.json`. Seeds run
/// concurrently: each run owns its generator and its output directory, so
/// results and artifacts are identical to a sequential execution.
pub fn run_experiment(spec: &ExperimentSpec) -> CliResult<Vec<RunArtifacts>> {
    spec.validate()?;
    let results: Vec<CliResult<RunArtifacts>> = std::thread::scope(|scope| {
        let handles: Vec<_> = spec
            .seeds
            .iter()
            .map(|&seed| scope.spawn(move || run_single(spec, seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("run thread panicked"))
            .collect()
    });
    let mut runs = Vec::with_capacity(results.len());
    for result in results {
        runs.push(result?);
    }
    let report = aggregate_runs(spec.mode, &runs);
    fs::create_dir_all(&spec.out_dir)?;
    fs::write(
        spec.out_dir.join("aggregate.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    Ok(runs)
}

/// One contamination level of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ood_count: usize,
    pub baseline: Option<MetricAggregate>,
    pub ours: Option<MetricAggregate>,
}

/// Runs baseline and ours at each contamination level and writes a
/// `sweep.csv` table (one row per count) plus `sweep.json` with per-seed
/// values. Each mode is its own experiment, so run artifacts land under
/// `<out>/count_<n>/<mode>/<mode>/<seed>/` with the mode's aggregate one
/// level up.
pub fn sweep_ood_count(spec: &ExperimentSpec, counts: &[usize]) -> CliResult<Vec<SweepRow>> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(counts.len());
    for &count in counts {
        // The two modes get disjoint experiment directories, so they can run
        // side by side like seeds do.
        let run_mode = |mode: TrainMode| -> CliResult<Option<MetricAggregate>> {
            let sub = ExperimentSpec {
                dataset: crate::spec::DatasetSpec {
                    n_ood: count,
                    ..spec.dataset.clone()
                },
                mode,
                out_dir: spec
                    .out_dir
                    .join(format!("count_{count}"))
                    .join(mode_dir_name(mode)),
                ..spec.clone()
            };
            let runs = run_experiment(&sub)?;
            Ok(aggregate_values(
                &runs
                    .iter()
                    .map(|r| r.summary.checkpoint_mean_accuracy)
                    .collect::<Vec<_>>(),
            ))
        };
        let (baseline, ours) = std::thread::scope(|scope| {
            let b = scope.spawn(|| run_mode(TrainMode::BaselineNoFilter));
            let o = scope.spawn(|| run_mode(TrainMode::Ours));
            (
                b.join().expect("sweep thread panicked"),
                o.join().expect("sweep thread panicked"),
            )
        });
        rows.push(SweepRow {
            ood_count: count,
            baseline: baseline?,
            ours: ours?,
        });
    }

    let mut csv = String::from("ood_count,baseline_mean,baseline_std,ours_mean,ours_std\n");
    for row in &rows {
        let cell = |m: &Option<MetricAggregate>, f: &dyn Fn(&MetricAggregate) -> f64| {
            m.as_ref().map(|a| f(a).to_string()).unwrap_or_default()
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            row.ood_count,
            cell(&row.baseline, &|a| a.mean),
            cell(&row.baseline, &|a| a.std),
            cell(&row.ours, &|a| a.mean),
            cell(&row.ours, &|a| a.std),
        );
    }
    fs::create_dir_all(&spec.out_dir)?;
    fs::write(spec.out_dir.join("sweep.csv"), csv)?;
    fs::write(
        spec.out_dir.join("sweep.json"),
        serde_json::to_string_pretty(&rows)?.as_bytes(),
    )?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub id_count: usize,
    pub ood_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramFile {
    pub epoch: usize,
    pub threshold: Option<f64>,
    pub num_bins: usize,
    pub bins: Vec<HistogramBin>,
}

/// Bins one epoch's score snapshot split by hidden ID/OOD, carrying the
/// threshold that epoch logged, and writes
/// `histogram_epoch_<epoch>.json` next to the snapshot.
pub fn emit_histogram(run_dir: &Path, epoch: usize, num_bins: usize) -> CliResult<HistogramFile> {
    if num_bins == 0 {
        return Err(CliError::Config("num_bins must be positive".into()));
    }
    let snapshot_path = run_dir.join(scores_file_name(epoch));
    let text = fs::read_to_string(&snapshot_path).map_err(|e| {
        CliError::Config(format!(
            "missing score snapshot {}: {e}",
            snapshot_path.display()
        ))
    })?;

    let mut bins: Vec<HistogramBin> = (0..num_bins)
        .map(|i| HistogramBin {
            lo: i as f64 / num_bins as f64,
            hi: (i + 1) as f64 / num_bins as f64,
            id_count: 0,
            ood_count: 0,
        })
        .collect();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(CliError::Config(format!(
                "{}: line {}: expected 3 fields",
                snapshot_path.display(),
                idx + 1
            )));
        }
        let score: f64 = fields[1]
            .parse()
            .map_err(|e| CliError::Config(format!("bad score on line {}: {e}", idx + 1)))?;
        let b = histogram_bin_of(score, num_bins);
        match fields[2] {
            "0" => bins[b].id_count += 1,
            "1" => bins[b].ood_count += 1,
            other => {
                return Err(CliError::Config(format!(
                    "bad hidden flag {other:?} on line {}",
                    idx + 1
                )))
            }
        }
    }

    let history_text = fs::read_to_string(run_dir.join("history.csv"))?;
    let threshold = parse_history_csv(&history_text)?
        .into_iter()
        .find(|r| r.epoch == epoch)
        .and_then(|r| r.threshold);

    let file = HistogramFile {
        epoch,
        threshold,
        num_bins,
        bins,
    };
    fs::write(
        run_dir.join(format!("histogram_epoch_{epoch:04}.json")),
        serde_json::to_string_pretty(&file)?.as_bytes(),
    )?;
    Ok(file)
}
