//! Experiment specification: a flat JSON document with fail-fast parsing
//! (unknown keys are rejected).

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use openset_core::datagen::{gen_id_blobs, gen_ood, make_split, OodKind, OpenSetDataset};
use openset_core::trainer::{TrainConfig, TrainMode};

use crate::{CliError, CliResult};

/// Schedule presets selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Desk-scale defaults; minutes per run.
    Desk,
    /// The full-size schedule (1024 epochs of 1024 iterations).
    PaperScale,
}

impl Profile {
    pub fn train_config(self) -> TrainConfig {
        match self {
            Profile::Desk => TrainConfig::default(),
            Profile::PaperScale => TrainConfig::paper_scale(),
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper-scale" => Ok(Profile::PaperScale),
            other => Err(format!(
                "unknown profile {other:?} (expected desk or paper-scale)"
            )),
        }
    }
}

/// Synthetic task parameters. The per-run seed drives the ID pool, the OOD
/// pool, and the split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub class_count: usize,
    pub dim: usize,
    pub spread: f64,
    pub n_labeled: usize,
    pub n_unlabeled_id: usize,
    pub n_ood: usize,
    pub n_test: usize,
    pub ood_kind: OodKind,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            class_count: 4,
            dim: 2,
            spread: 0.03,
            n_labeled: 24,
            n_unlabeled_id: 2000,
            n_ood: 500,
            n_test: 400,
            ood_kind: OodKind::Uniform,
        }
    }
}

impl DatasetSpec {
    /// Materializes the dataset for one seed. The ID pool is sized so the
    /// unlabeled remainder hits `n_unlabeled_id` (rounded up to keep classes
    /// whole).
    pub fn build(&self, seed: u64) -> CliResult<OpenSetDataset> {
        let total = self.n_labeled + self.n_test + self.n_unlabeled_id;
        let per_class = total.div_ceil(self.class_count);
        let id_pool = gen_id_blobs(self.class_count, per_class, self.dim, self.spread, seed)
            .map_err(CliError::Core)?;
        let ood_pool = if self.n_ood > 0 {
            gen_ood(
                self.ood_kind,
                self.n_ood,
                self.dim,
                derive_seed(seed, "ood"),
            )
            .map_err(CliError::Core)?
        } else {
            Vec::new()
        };
        make_split(
            &id_pool,
            &ood_pool,
            self.n_labeled,
            self.n_test,
            derive_seed(seed, "split"),
        )
        .map_err(CliError::Core)
    }
}

/// One experiment: a dataset family, a schedule, a mode, and the seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub mode: TrainMode,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            mode: TrainMode::Ours,
            seeds: vec![1, 2, 3],
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentSpec {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: ExperimentSpec =
            serde_json::from_str(&text).map_err(|e| CliError::SpecParse {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("at least one seed is required".into()));
        }
        if self.dataset.class_count < 2 {
            return Err(CliError::Config("dataset.class_count must be >= 2".into()));
        }
        self.train.validate().map_err(CliError::Core)
    }
}

/// Stable seed derivation so the dataset, split, and trainer never share a
/// generator stream.
pub fn derive_seed(base: u64, salt: &str) -> u64 {
    // FNV-1a over the salt, mixed with the base.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in salt.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let json = r#"{ "seeds": [1], "bogus_key": 3 }"#;
        let parsed: Result<ExperimentSpec, _> = serde_json::from_str(json);
        assert!(parsed.is_err());
    }

    #[test]
    fn partial_specs_fill_defaults() {
        let json = r#"{ "mode": "baseline_no_filter", "seeds": [7] }"#;
        let spec: ExperimentSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.mode, TrainMode::BaselineNoFilter);
        assert_eq!(spec.seeds, vec![7]);
        assert_eq!(spec.dataset.class_count, 4);
        spec.validate().unwrap();
    }

    #[test]
    fn dataset_build_matches_requested_counts() {
        let ds = DatasetSpec {
            n_labeled: 24,
            n_unlabeled_id: 200,
            n_ood: 50,
            n_test: 40,
            ..DatasetSpec::default()
        };
        let data = ds.build(1).unwrap();
        assert_eq!(data.train_view().labeled_x.len(), 24);
        assert_eq!(data.test_x().len(), 40);
        assert_eq!(data.meta().n_unlabeled_ood, 50);
        // Rounded up to whole classes: remainder may exceed the request by < K.
        assert!(data.meta().n_unlabeled_id >= 200);
        assert!(data.meta().n_unlabeled_id < 200 + 4);
    }

    #[test]
    fn empty_seed_list_fails_validation() {
        let spec = ExperimentSpec {
            seeds: vec![],
            ..ExperimentSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ_by_salt() {
        assert_ne!(derive_seed(1, "ood"), derive_seed(1, "split"));
        assert_eq!(derive_seed(1, "ood"), derive_seed(1, "ood"));
    }
}
