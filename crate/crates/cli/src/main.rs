use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use openset_cli::{emit_histogram, run_experiment, sweep_ood_count, ExperimentSpec, Profile};
use openset_core::trainer::TrainMode;

#[derive(Parser)]
#[command(
    name = "openset",
    about = "Open-set semi-supervised learning experiment runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a spec and aggregate the results.
    Run {
        /// Path to the experiment spec (JSON).
        spec: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run baseline and ours across contamination levels.
    Sweep {
        /// Path to the experiment spec (JSON).
        spec: PathBuf,
        /// OOD sample counts, e.g. --counts 100,500,1000,2000.
        #[arg(long, value_delimiter = ',', required = true)]
        counts: Vec<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Emit binned score-histogram data for one epoch of a finished run.
    Histogram {
        /// A per-run directory (`<out>/<mode>/<seed>`).
        run_dir: PathBuf,
        #[arg(long)]
        epoch: usize,
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
}

#[derive(clap::Args)]
struct Overrides {
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed list override, e.g. --seeds 1,2,3.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Mode override.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    /// Schedule profile: desk or paper-scale.
    #[arg(long)]
    profile: Option<Profile>,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "ours" => Ok(TrainMode::Ours),
        "baseline_no_filter" => Ok(TrainMode::BaselineNoFilter),
        "supervised_only" => Ok(TrainMode::SupervisedOnly),
        other => Err(format!(
            "unknown mode {other:?} (expected ours, baseline_no_filter, or supervised_only)"
        )),
    }
}

fn apply_overrides(mut spec: ExperimentSpec, o: &Overrides) -> ExperimentSpec {
    if let Some(out) = &o.out {
        spec.out_dir = out.clone();
    }
    if let Some(seeds) = &o.seeds {
        spec.seeds = seeds.clone();
    }
    if let Some(mode) = o.mode {
        spec.mode = mode;
    }
    if let Some(profile) = o.profile {
        // A profile replaces the schedule but keeps the spec's seed.
        let seed = spec.train.seed;
        spec.train = profile.train_config();
        spec.train.seed = seed;
    }
    spec
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { spec, overrides } => ExperimentSpec::from_file(&spec)
            .map(|s| apply_overrides(s, &overrides))
            .and_then(|s| {
                s.validate()?;
                let runs = run_experiment(&s)?;
                for run in &runs {
                    println!(
                        "seed {}: checkpoint-mean accuracy {:.4}, dir {}",
                        run.seed,
                        run.summary.checkpoint_mean_accuracy,
                        run.run_dir.display()
                    );
                }
                println!("aggregate: {}", s.out_dir.join("aggregate.json").display());
                Ok(())
            }),
        Command::Sweep {
            spec,
            counts,
            overrides,
        } => ExperimentSpec::from_file(&spec)
            .map(|s| apply_overrides(s, &overrides))
            .and_then(|s| {
                s.validate()?;
                let rows = sweep_ood_count(&s, &counts)?;
                for row in &rows {
                    let fmt = |m: &Option<openset_cli::experiment::MetricAggregate>| {
                        m.as_ref()
                            .map(|a| format!("{:.4} ± {:.4}", a.mean, a.std))
                            .unwrap_or_else(|| "-".into())
                    };
                    println!(
                        "ood_count {}: baseline {}, ours {}",
                        row.ood_count,
                        fmt(&row.baseline),
                        fmt(&row.ours)
                    );
                }
                println!("table: {}", s.out_dir.join("sweep.csv").display());
                Ok(())
            }),
        Command::Histogram {
            run_dir,
            epoch,
            bins,
        } => emit_histogram(&run_dir, epoch, bins).map(|file| {
            println!(
                "epoch {}: {} bins, threshold {}",
                file.epoch,
                file.num_bins,
                file.threshold
                    .map(|t| t.to_string())
                    .unwrap_or_else(|| "none".into())
            );
        }),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
