//! Synthetic open-set datasets: Gaussian ID blobs on the unit sphere, noise
//! OOD pools sharing the same coordinate box, class-balanced splits, and the
//! additive jitter used as the stochastic augmentation.
//!
//! Hidden ID/OOD ground truth exists for evaluation only. Training code goes
//! through [`TrainView`], which exposes inputs and labeled targets and
//! nothing else.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Minimum pairwise distance enforced between blob centers so no two classes
/// collapse onto each other under an unlucky seed.
const MIN_CENTER_SEPARATION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    /// Coordinates i.i.d. uniform on [0, 1].
    Uniform,
    /// Coordinates i.i.d. normal with mean 0.5 and unit variance, clipped to [0, 1].
    Gaussian,
    /// A Gaussian blob displaced well outside the ID sphere.
    ShiftedCluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub dim: usize,
    pub class_count: usize,
    pub n_labeled: usize,
    pub n_unlabeled_id: usize,
    pub n_unlabeled_ood: usize,
    pub n_test: usize,
    pub split_seed: u64,
}

/// A materialized open-set task. Immutable once generated.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetDataset {
    labeled_x: Vec<Vec<f64>>,
    labeled_y: Vec<usize>,
    unlabeled_x: Vec<Vec<f64>>,
    unlabeled_hidden_is_ood: Vec<bool>,
    unlabeled_hidden_y: Vec<Option<usize>>,
    test_x: Vec<Vec<f64>>,
    test_y: Vec<usize>,
    meta: DatasetMeta,
}

/// What training is allowed to see: inputs everywhere, targets only on the
/// labeled split.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    pub labeled_x: &'a [Vec<f64>],
    pub labeled_y: &'a [usize],
    pub unlabeled_x: &'a [Vec<f64>],
}

impl OpenSetDataset {
    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            labeled_x: &self.labeled_x,
            labeled_y: &self.labeled_y,
            unlabeled_x: &self.unlabeled_x,
        }
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    /// Evaluation-only ground truth for the unlabeled pool.
    pub fn unlabeled_hidden_is_ood(&self) -> &[bool] {
        &self.unlabeled_hidden_is_ood
    }

    pub fn unlabeled_hidden_y(&self) -> &[Option<usize>] {
        &self.unlabeled_hidden_y
    }

    pub fn test_x(&self) -> &[Vec<f64>] {
        &self.test_x
    }

    pub fn test_y(&self) -> &[usize] {
        &self.test_y
    }

    /// Serializes the dataset as CSV: split, coordinates, class label
    /// (labeled and test rows), hidden OOD flag (unlabeled rows).
    pub fn to_csv(&self) -> String {
        let d = self.meta.dim;
        let mut out = String::from("split");
        for j in 0..d {
            let _ = write!(out, ",x_{j}");
        }
        out.push_str(",y,hidden_is_ood\n");
        let mut row = |split: &str, x: &[f64], y: Option<usize>, ood: Option<bool>| {
            out.push_str(split);
            for v in x {
                let _ = write!(out, ",{v}");
            }
            match y {
                Some(y) => {
                    let _ = write!(out, ",{y}");
                }
                None => out.push(','),
            }
            match ood {
                Some(flag) => {
                    let _ = write!(out, ",{}", flag as u8);
                }
                None => out.push(','),
            }
            out.push('\n');
        };
        for (x, &y) in self.labeled_x.iter().zip(&self.labeled_y) {
            row("labeled", x, Some(y), None);
        }
        for (x, &ood) in self.unlabeled_x.iter().zip(&self.unlabeled_hidden_is_ood) {
            row("unlabeled", x, None, Some(ood));
        }
        for (x, &y) in self.test_x.iter().zip(&self.test_y) {
            row("test", x, Some(y), None);
        }
        out
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Rebuilds a dataset from [`OpenSetDataset::to_csv`] output. Hidden class
    /// labels of unlabeled ID rows are not part of the format and come back as
    /// `None`; `meta` counts are reconstructed, `split_seed` is not.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::EmptyInput("csv"))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[0] != "split" {
            return Err(Error::CsvParse {
                line: 1,
                detail: "expected header starting with 'split'".into(),
            });
        }
        let d = cols.len() - 3;
        let mut ds = OpenSetDataset {
            labeled_x: Vec::new(),
            labeled_y: Vec::new(),
            unlabeled_x: Vec::new(),
            unlabeled_hidden_is_ood: Vec::new(),
            unlabeled_hidden_y: Vec::new(),
            test_x: Vec::new(),
            test_y: Vec::new(),
            meta: DatasetMeta {
                dim: d,
                class_count: 0,
                n_labeled: 0,
                n_unlabeled_id: 0,
                n_unlabeled_ood: 0,
                n_test: 0,
                split_seed: 0,
            },
        };
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 3 {
                return Err(Error::CsvParse {
                    line: lineno,
                    detail: format!("expected {} fields, got {}", d + 3, fields.len()),
                });
            }
            let parse_err = |detail: String| Error::CsvParse {
                line: lineno,
                detail,
            };
            let mut x = Vec::with_capacity(d);
            for f in &fields[1..=d] {
                x.push(
                    f.parse::<f64>()
                        .map_err(|e| parse_err(format!("bad coordinate {f:?}: {e}")))?,
                );
            }
            match fields[0] {
                "labeled" | "test" => {
                    let y = fields[d + 1]
                        .parse::<usize>()
                        .map_err(|e| parse_err(format!("bad label {:?}: {e}", fields[d + 1])))?;
                    ds.meta.class_count = ds.meta.class_count.max(y + 1);
                    if fields[0] == "labeled" {
                        ds.labeled_x.push(x);
                        ds.labeled_y.push(y);
                    } else {
                        ds.test_x.push(x);
                        ds.test_y.push(y);
                    }
                }
                "unlabeled" => {
                    let ood = match fields[d + 2] {
                        "0" => false,
                        "1" => true,
                        other => return Err(parse_err(format!("bad hidden flag {other:?}"))),
                    };
                    ds.unlabeled_x.push(x);
                    ds.unlabeled_hidden_is_ood.push(ood);
                    ds.unlabeled_hidden_y.push(None);
                }
                other => return Err(parse_err(format!("unknown split {other:?}"))),
            }
        }
        ds.meta.n_labeled = ds.labeled_x.len();
        ds.meta.n_unlabeled_ood = ds.unlabeled_hidden_is_ood.iter().filter(|&&o| o).count();
        ds.meta.n_unlabeled_id = ds.unlabeled_x.len() - ds.meta.n_unlabeled_ood;
        ds.meta.n_test = ds.test_x.len();
        Ok(ds)
    }
}

fn unit_vector(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid params");
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Seeded class centers on the unit sphere, rejection-sampled to keep a
/// minimum pairwise separation. The separation requirement halves whenever a
/// center fails to place after 1000 draws, so generation always terminates.
fn blob_centers(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut min_sep = MIN_CENTER_SEPARATION;
    while centers.len() < k {
        let mut attempts = 0;
        loop {
            let c = unit_vector(d, rng);
            if centers.iter().all(|prev| distance(prev, &c) >= min_sep) {
                centers.push(c);
                break;
            }
            attempts += 1;
            if attempts >= 1000 {
                min_sep /= 2.0;
                attempts = 0;
            }
        }
    }
    centers
}

/// K Gaussian clusters with means on the seeded unit sphere and per-coordinate
/// standard deviation `spread`. Deterministic in `seed`.
pub fn gen_id_blobs(
    k: usize,
    n_per_class: usize,
    d: usize,
    spread: f64,
    seed: u64,
) -> Result<Vec<(Vec<f64>, usize)>> {
    if k < 2 {
        return Err(Error::Config(format!("class count must be >= 2, got {k}")));
    }
    if d < 2 {
        return Err(Error::Config(format!("dimension must be >= 2, got {d}")));
    }
    if !spread.is_finite() || spread <= 0.0 {
        return Err(Error::Config(format!("spread must be > 0, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = blob_centers(k, d, &mut rng);
    let normal = Normal::new(0.0, spread).expect("spread checked above");
    let mut out = Vec::with_capacity(k * n_per_class);
    for (y, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            let x: Vec<f64> = center
                .iter()
                .map(|&c| c + normal.sample(&mut rng))
                .collect();
            out.push((x, y));
        }
    }
    Ok(out)
}

/// OOD pool of the requested kind. Uniform and Gaussian noise live in the
/// [0, 1] coordinate box; the shifted cluster sits at distance 3 from the
/// origin with spread 0.3.
pub fn gen_ood(kind: OodKind, n: usize, d: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n < 1 {
        return Err(Error::Config(format!("ood count must be >= 1, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = match kind {
        OodKind::Uniform => (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(0.0..=1.0)).collect())
            .collect(),
        OodKind::Gaussian => {
            let normal = Normal::new(0.5, 1.0).expect("valid params");
            (0..n)
                .map(|_| {
                    (0..d)
                        .map(|_| {
                            let v: f64 = normal.sample(&mut rng);
                            v.clamp(0.0, 1.0)
                        })
                        .collect()
                })
                .collect()
        }
        OodKind::ShiftedCluster => {
            let center: Vec<f64> = unit_vector(d, &mut rng)
                .into_iter()
                .map(|v| v * 3.0)
                .collect();
            let normal = Normal::new(0.0, 0.3).expect("valid params");
            (0..n)
                .map(|_| {
                    center
                        .iter()
                        .map(|&c| c + normal.sample(&mut rng))
                        .collect()
                })
                .collect()
        }
    };
    Ok(samples)
}

/// Splits an ID pool into class-balanced labeled and test sets; everything
/// left over plus the whole OOD pool becomes the shuffled unlabeled pool.
pub fn make_split(
    id_pool: &[(Vec<f64>, usize)],
    ood_pool: &[Vec<f64>],
    n_labeled: usize,
    n_test: usize,
    seed: u64,
) -> Result<OpenSetDataset> {
    if id_pool.is_empty() {
        return Err(Error::EmptyInput("id_pool"));
    }
    let k = id_pool.iter().map(|(_, y)| y + 1).max().unwrap_or(0);
    let d = id_pool[0].0.len();
    if id_pool.len() <= n_labeled + n_test {
        return Err(Error::Config(format!(
            "id pool of {} cannot provide {n_labeled} labeled + {n_test} test with a nonempty unlabeled remainder",
            id_pool.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, (_, y)) in id_pool.iter().enumerate() {
        by_class[*y].push(i);
    }
    for class in by_class.iter_mut() {
        shuffle(class, &mut rng);
    }

    // Per-class quotas differ by at most one; earlier classes take the remainder.
    let quota = |total: usize, class: usize| total / k + usize::from(class < total % k);

    let mut cursors = vec![0usize; k];
    let take =
        |count_of: &dyn Fn(usize) -> usize, cursors: &mut Vec<usize>| -> Result<Vec<usize>> {
            let mut taken = Vec::new();
            for (class, indices) in by_class.iter().enumerate() {
                let want = count_of(class);
                let available = indices.len() - cursors[class];
                if available < want {
                    return Err(Error::Config(format!(
                        "class {class}: need {want} more samples, only {available} available"
                    )));
                }
                taken.extend_from_slice(&indices[cursors[class]..cursors[class] + want]);
                cursors[class] += want;
            }
            Ok(taken)
        };

    let labeled_idx = take(&|c| quota(n_labeled, c), &mut cursors)?;
    let test_idx = take(&|c| quota(n_test, c), &mut cursors)?;

    let mut labeled_x = Vec::with_capacity(n_labeled);
    let mut labeled_y = Vec::with_capacity(n_labeled);
    for &i in &labeled_idx {
        labeled_x.push(id_pool[i].0.clone());
        labeled_y.push(id_pool[i].1);
    }
    let mut test_x = Vec::with_capacity(n_test);
    let mut test_y = Vec::with_capacity(n_test);
    for &i in &test_idx {
        test_x.push(id_pool[i].0.clone());
        test_y.push(id_pool[i].1);
    }

    // Remaining ID samples plus the whole OOD pool, shuffled together.
    let mut unlabeled: Vec<(Vec<f64>, bool, Option<usize>)> = Vec::new();
    for (class, indices) in by_class.iter().enumerate() {
        for &i in &indices[cursors[class]..] {
            unlabeled.push((id_pool[i].0.clone(), false, Some(id_pool[i].1)));
        }
    }
    for x in ood_pool {
        unlabeled.push((x.clone(), true, None));
    }
    shuffle(&mut unlabeled, &mut rng);

    let n_unlabeled_ood = ood_pool.len();
    let n_unlabeled_id = unlabeled.len() - n_unlabeled_ood;
    let mut unlabeled_x = Vec::with_capacity(unlabeled.len());
    let mut unlabeled_hidden_is_ood = Vec::with_capacity(unlabeled.len());
    let mut unlabeled_hidden_y = Vec::with_capacity(unlabeled.len());
    for (x, ood, y) in unlabeled {
        unlabeled_x.push(x);
        unlabeled_hidden_is_ood.push(ood);
        unlabeled_hidden_y.push(y);
    }

    Ok(OpenSetDataset {
        labeled_x,
        labeled_y,
        unlabeled_x,
        unlabeled_hidden_is_ood,
        unlabeled_hidden_y,
        test_x,
        test_y,
        meta: DatasetMeta {
            dim: d,
            class_count: k,
            n_labeled,
            n_unlabeled_id,
            n_unlabeled_ood,
            n_test,
            split_seed: seed,
        },
    })
}

/// Fisher-Yates with the caller's generator, so shuffles are seed-stable.
fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Additive Gaussian jitter with per-coordinate standard deviation `strength`.
pub fn augment<R: Rng>(x: &[f64], strength: f64, rng: &mut R) -> Vec<f64> {
    if strength == 0.0 {
        return x.to_vec();
    }
    let normal = Normal::new(0.0, strength).expect("strength >= 0");
    x.iter().map(|&v| v + normal.sample(rng)).collect()
}
