//! Rating datasets: MovieLens-style parsers, synthetic low-rank generators and
//! seeded train/validation splits.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single observed rating, with dense 0-based ids.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub user: u32,
    pub item: u32,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

/// Closed interval of admissible rating values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    pub min: f64,
    pub max: f64,
}

impl RatingScale {
    pub const MOVIELENS: RatingScale = RatingScale { min: 1.0, max: 5.0 };
    pub const MOVIELENS_HALF_STAR: RatingScale = RatingScale { min: 0.5, max: 5.0 };

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    pub fn contains(&self, r: f64) -> bool {
        r >= self.min && r <= self.max
    }

    pub fn clamp(&self, r: f64) -> f64 {
        r.clamp(self.min, self.max)
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }
}

/// A validated set of ratings over `num_users × num_items`.
///
/// `user_ids[u]` / `item_ids[i]` hold the original (file) id of dense id `u` / `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<RatingRecord>,
    pub num_users: usize,
    pub num_items: usize,
    pub scale: RatingScale,
    pub mean_rating: f64,
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
}

impl Dataset {
    /// Builds a dataset and checks every invariant: ids in range, ratings
    /// finite and on the scale, and no repeated `(user, item)` pair.
    pub fn new(
        records: Vec<RatingRecord>,
        scale: RatingScale,
        user_ids: Vec<u64>,
        item_ids: Vec<u64>,
    ) -> Result<Self> {
        let num_users = user_ids.len();
        let num_items = item_ids.len();
        if !(scale.min.is_finite() && scale.max.is_finite() && scale.min < scale.max) {
            return Err(Error::InvalidDataset(format!("bad rating scale {scale:?}")));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for (n, r) in records.iter().enumerate() {
            if r.user as usize >= num_users || r.item as usize >= num_items {
                return Err(Error::InvalidDataset(format!(
                    "record {n}: ({}, {}) outside {num_users}x{num_items}",
                    r.user, r.item
                )));
            }
            if !r.rating.is_finite() || !scale.contains(r.rating) {
                return Err(Error::InvalidDataset(format!(
                    "record {n}: rating {} outside [{}, {}]",
                    r.rating, scale.min, scale.max
                )));
            }
            if !seen.insert((r.user, r.item)) {
                return Err(Error::InvalidDataset(format!(
                    "record {n}: duplicate rating for ({}, {})",
                    r.user, r.item
                )));
            }
        }
        let mean_rating = mean_of(&records, &scale);
        Ok(Dataset {
            records,
            num_users,
            num_items,
            scale,
            mean_rating,
            user_ids,
            item_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sub-dataset holding `indices` (in the given order) with the parent's
    /// dimensions, scale and id maps. The mean is recomputed on the subset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let records: Vec<RatingRecord> = indices.iter().map(|&i| self.records[i]).collect();
        let mean_rating = mean_of(&records, &self.scale);
        Dataset {
            records,
            num_users: self.num_users,
            num_items: self.num_items,
            scale: self.scale,
            mean_rating,
            user_ids: self.user_ids.clone(),
            item_ids: self.item_ids.clone(),
        }
    }

    /// Same dimensions and id maps, different records. Used by the
    /// experiment protocols that rewrite a split.
    pub fn with_records(&self, records: Vec<RatingRecord>) -> Dataset {
        let mean_rating = mean_of(&records, &self.scale);
        Dataset {
            records,
            mean_rating,
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> Dataset {
        Dataset {
            records: Vec::new(),
            num_users: self.num_users,
            num_items: self.num_items,
            scale: self.scale,
            mean_rating: self.scale.midpoint(),
            user_ids: self.user_ids.clone(),
            item_ids: self.item_ids.clone(),
        }
    }

    /// Every rating as a dense row-major matrix, `NaN` where unobserved.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![f64::NAN; self.num_items]; self.num_users];
        for r in &self.records {
            m[r.user as usize][r.item as usize] = r.rating;
        }
        m
    }
}

/// Arithmetic mean of the ratings; the scale midpoint for an empty set.
fn mean_of(records: &[RatingRecord], scale: &RatingScale) -> f64 {
    if records.is_empty() {
        return scale.midpoint();
    }
    records.iter().map(|r| r.rating).sum::<f64>() / records.len() as f64
}

/// Parses the ML-100K layout: `user<TAB>item<TAB>rating<TAB>timestamp`.
pub fn parse_tab_format(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_delimited(path.as_ref(), "\t", RatingScale::MOVIELENS)
}

/// Parses the ML-1M / ML-10M layout: `user::item::rating::timestamp`.
///
/// The declared scale is `[0.5, 5]` so that ML-10M half-star ratings validate.
pub fn parse_double_colon_format(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_delimited(path.as_ref(), "::", RatingScale::MOVIELENS_HALF_STAR)
}

/// Shared parser. Original ids are densified in order of first appearance.
/// Blank lines are skipped; an empty timestamp field parses as `None`.
pub fn parse_delimited(path: &Path, sep: &str, scale: RatingScale) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut user_map: HashMap<u64, u32> = HashMap::new();
    let mut item_map: HashMap<u64, u32> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut records = Vec::new();
    let mut seen = HashSet::new();

    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(sep).collect();
        if fields.len() != 4 {
            return Err(parse_err(
                lineno,
                format!("expected 4 fields separated by {sep:?}, found {}", fields.len()),
            ));
        }
        let user: u64 = fields[0]
            .trim()
            .parse()
            .map_err(|e| parse_err(lineno, format!("bad user id {:?}: {e}", fields[0])))?;
        let item: u64 = fields[1]
            .trim()
            .parse()
            .map_err(|e| parse_err(lineno, format!("bad item id {:?}: {e}", fields[1])))?;
        let rating: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|e| parse_err(lineno, format!("bad rating {:?}: {e}", fields[2])))?;
        if !rating.is_finite() || !scale.contains(rating) {
            return Err(parse_err(
                lineno,
                format!("rating {rating} outside [{}, {}]", scale.min, scale.max),
            ));
        }
        let ts = fields[3].trim();
        let timestamp = if ts.is_empty() {
            None
        } else {
            Some(
                ts.parse::<i64>()
                    .map_err(|e| parse_err(lineno, format!("bad timestamp {ts:?}: {e}")))?,
            )
        };

        let u = *user_map.entry(user).or_insert_with(|| {
            user_ids.push(user);
            (user_ids.len() - 1) as u32
        });
        let i = *item_map.entry(item).or_insert_with(|| {
            item_ids.push(item);
            (item_ids.len() - 1) as u32
        });
        if !seen.insert((u, i)) {
            return Err(parse_err(
                lineno,
                format!("duplicate rating for user {user} item {item}"),
            ));
        }
        records.push(RatingRecord {
            user: u,
            item: i,
            rating,
            timestamp,
        });
    }

    if records.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    Dataset::new(records, scale, user_ids, item_ids)
}

/// Writes `dataset` with its original ids, one record per line.
pub fn write_delimited(dataset: &Dataset, path: impl AsRef<Path>, sep: &str) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(dataset.len() * 24);
    for r in &dataset.records {
        let _ = write!(
            out,
            "{}{sep}{}{sep}{}{sep}",
            dataset.user_ids[r.user as usize],
            dataset.item_ids[r.item as usize],
            r.rating
        );
        if let Some(ts) = r.timestamp {
            let _ = write!(out, "{ts}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

const CONNECTIVITY_RETRIES: usize = 100;

/// Samples a rank-`true_rank` matrix `A Bᵀ + noise` with unit-normal factors
/// and observes each entry independently with probability `density`.
///
/// Every row and column is guaranteed at least one observation; the mask is
/// redrawn up to a fixed budget otherwise. The declared scale is the
/// symmetric integer bound `[-c, c]` covering every entry of the full matrix,
/// so clipping never alters an entry and the low-rank structure is exact when
/// `noise_sd == 0`. Items are labelled in order of first appearance so that
/// the dataset round-trips through [`write_delimited`] and the parsers.
pub fn generate_synthetic(
    m: usize,
    n: usize,
    true_rank: usize,
    density: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<Dataset> {
    if m == 0 || n == 0 || true_rank == 0 || true_rank > m.min(n) {
        return Err(Error::Synthetic(format!(
            "need 1 <= rank <= min(m, n); got m={m}, n={n}, rank={true_rank}"
        )));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Synthetic(format!("density {density} not in (0, 1]")));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::Synthetic(format!("noise_sd {noise_sd} must be >= 0")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let a: Vec<f64> = (0..m * true_rank).map(|_| normal(&mut rng)).collect();
    let b: Vec<f64> = (0..n * true_rank).map(|_| normal(&mut rng)).collect();
    let mut full = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let dot: f64 = (0..true_rank)
                .map(|t| a[i * true_rank + t] * b[j * true_rank + t])
                .sum();
            let eps = if noise_sd > 0.0 {
                noise_sd * normal(&mut rng)
            } else {
                0.0
            };
            full[i * n + j] = dot + eps;
        }
    }
    let bound = full.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).ceil().max(1.0);
    let scale = RatingScale {
        min: -bound,
        max: bound,
    };

    let mut mask = None;
    for _ in 0..CONNECTIVITY_RETRIES {
        let candidate: Vec<bool> = (0..m * n).map(|_| rng.gen::<f64>() < density).collect();
        let rows_ok = (0..m).all(|i| (0..n).any(|j| candidate[i * n + j]));
        let cols_ok = (0..n).all(|j| (0..m).any(|i| candidate[i * n + j]));
        if rows_ok && cols_ok {
            mask = Some(candidate);
            break;
        }
    }
    let mask = mask.ok_or_else(|| {
        Error::Synthetic(format!(
            "density {density} left an empty row or column after {CONNECTIVITY_RETRIES} draws"
        ))
    })?;

    let mut item_label: Vec<Option<u32>> = vec![None; n];
    let mut next_item = 0u32;
    let mut records = Vec::new();
    for i in 0..m {
        for j in 0..n {
            if !mask[i * n + j] {
                continue;
            }
            let label = *item_label[j].get_or_insert_with(|| {
                next_item += 1;
                next_item - 1
            });
            records.push(RatingRecord {
                user: i as u32,
                item: label,
                rating: scale.clamp(full[i * n + j]),
                timestamp: None,
            });
        }
    }
    let user_ids = (1..=m as u64).collect();
    let item_ids = (1..=n as u64).collect();
    Dataset::new(records, scale, user_ids, item_ids)
}

/// Parameters of a seeded uniform split by rating record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction {train_fraction} not in (0, 1)"
            )));
        }
        Ok(SplitSpec {
            train_fraction,
            seed,
        })
    }
}

/// Record indices of a split, each half sorted ascending.
pub fn split_indices(len: usize, spec: SplitSpec) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let n_train = (spec.train_fraction * len as f64).round() as usize;
    let mut train = order[..n_train].to_vec();
    let mut valid = order[n_train..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    (train, valid)
}

/// Uniform random partition of the records into train and validation halves.
pub fn split(dataset: &Dataset, spec: SplitSpec) -> (Dataset, Dataset) {
    let (train, valid) = split_indices(dataset.len(), spec);
    (dataset.subset(&train), dataset.subset(&valid))
}

/// Rebuilds a split from a list of validation record indices.
pub fn split_from_valid_indices(dataset: &Dataset, valid: &[usize]) -> Result<(Dataset, Dataset)> {
    let mut is_valid = vec![false; dataset.len()];
    for &v in valid {
        if v >= dataset.len() {
            return Err(Error::InvalidDataset(format!(
                "validation index {v} out of range for {} records",
                dataset.len()
            )));
        }
        is_valid[v] = true;
    }
    let train: Vec<usize> = (0..dataset.len()).filter(|&i| !is_valid[i]).collect();
    let mut valid = valid.to_vec();
    valid.sort_unstable();
    valid.dedup();
    Ok((dataset.subset(&train), dataset.subset(&valid)))
}

/// Writes the validation-set record indices, one per line.
pub fn write_split_sidecar(path: impl AsRef<Path>, valid: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for v in valid {
        let _ = writeln!(out, "{v}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_split_sidecar(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim().parse().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("bad index {l:?}: {e}"),
            })
        })
        .collect()
}
