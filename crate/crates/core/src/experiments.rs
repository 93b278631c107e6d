//! Experiment protocols behind the `rec` command line: standard training,
//! the PMF convergence race, the online growth curve, the cold-start grid
//! and the complexity-control ablation. Every protocol writes
//! self-describing CSV whose `#` header lines hold the resolved config.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::ParamStore;
use crate::data::{
    generate_synthetic, parse_double_colon_format, parse_tab_format, read_split_sidecar, split_indices,
    split_from_valid_indices, write_split_sidecar, Dataset, RatingRecord, SplitSpec,
};
use crate::engine::{stream_rng, EngineConfig, GenCounters, Rec, RecModel};
use crate::error::{Error, Result};
use crate::store::{select_prototypes, PrototypeSet, RatingsStore};
use crate::training::{
    evaluate_rec, mean_predictor_rmse, pretrain_prototype_block, sample_batch, train, train_pmf,
    Checkpoint, MetricsRow, MetricsSink, TrainConfig, TrainReport,
};

/// Column list shared by every per-iteration metrics file.
pub const METRICS_HEADER: &str =
    "iteration,train_rmse,valid_rmse,embeddings_generated,cache_hits,failed_requests,elapsed_seconds";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// Tab-separated `user item rating timestamp` (ML-100K `u.data`).
    Ml100k,
    /// `user::item::rating::timestamp` (ML-1M / ML-10M `ratings.dat`).
    Mldelim,
    /// Generated low-rank matrix; no file is read.
    Synthetic,
}

/// Shape of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub rank: usize,
    pub density: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 100,
            items: 100,
            rank: 2,
            density: 0.3,
            noise_sd: 0.0,
            seed: 0,
        }
    }
}

/// Everything a protocol run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub format: DataFormat,
    pub synthetic: SyntheticSpec,
    pub train_fraction: f64,
    pub split_seed: u64,
    /// Reuse this validation-index file instead of drawing a split.
    pub split_file: Option<PathBuf>,
    pub train: TrainConfig,
    /// Iterations of the PMF convergence race.
    pub compare_iterations: usize,
    pub online_initial_fraction: f64,
    pub online_increment: f64,
    pub online_seed: u64,
    pub coldstart_nc: Vec<usize>,
    pub coldstart_nr: Vec<usize>,
    pub coldstart_seed: u64,
    pub ablation_batch: usize,
    pub ablation_max_depth: usize,
    pub ablation_evidence_limit: usize,
    pub ablation_seeds: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: None,
            format: DataFormat::Ml100k,
            synthetic: SyntheticSpec::default(),
            train_fraction: 0.8,
            split_seed: 0,
            split_file: None,
            train: TrainConfig::default(),
            compare_iterations: 250,
            online_initial_fraction: 0.2,
            online_increment: 0.2,
            online_seed: 3,
            coldstart_nc: vec![0, 50, 100, 150],
            coldstart_nr: vec![1, 5, 10],
            coldstart_seed: 4,
            ablation_batch: 10,
            ablation_max_depth: 2,
            ablation_evidence_limit: 80,
            ablation_seeds: 20,
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        for (name, f) in [
            ("train_fraction", self.train_fraction),
            ("online_initial_fraction", self.online_initial_fraction),
            ("online_increment", self.online_increment),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {f}")));
            }
        }
        if self.train_fraction >= 1.0 {
            return Err(Error::Config("train_fraction must leave a validation set".into()));
        }
        if self.format != DataFormat::Synthetic && self.dataset.is_none() {
            return Err(Error::Config("a dataset path is required for file formats".into()));
        }
        if self.ablation_seeds == 0 || self.ablation_batch == 0 {
            return Err(Error::Config("ablation needs at least one seed and one prediction".into()));
        }
        Ok(())
    }

    /// `# key = value` lines for every leaf of the configuration.
    pub fn header_lines(&self, command: &str) -> Vec<String> {
        let mut lines = vec![format!("# command = {command}")];
        let value = serde_json::to_value(self).expect("config serialises");
        flatten("", &value, &mut lines);
        lines
    }

    fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        Value::String(s) => out.push(format!("# {prefix} = {s}")),
        other => out.push(format!("# {prefix} = {other}")),
    }
}

/// Line-buffered CSV file with a config header.
pub struct CsvWriter {
    path: PathBuf,
    inner: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: impl AsRef<Path>, header: &[String], columns: &str) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = CsvWriter {
            path,
            inner: BufWriter::new(file),
        };
        for line in header {
            w.line(line)?;
        }
        w.line(columns)?;
        Ok(w)
    }

    pub fn line(&mut self, line: &str) -> Result<()> {
        writeln!(self.inner, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.path)
    }
}

impl MetricsSink for CsvWriter {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        let valid = row.valid_rmse.map(|v| v.to_string()).unwrap_or_default();
        let line = format!(
            "{},{},{},{},{},{},{:.6}",
            row.iteration,
            row.train_rmse,
            valid,
            row.embeddings_generated,
            row.cache_hits,
            row.failed_requests,
            row.elapsed_seconds
        );
        self.line(&line)?;
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads or generates the dataset named by `cfg`.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let path = || {
        cfg.dataset
            .clone()
            .ok_or_else(|| Error::Config("a dataset path is required for file formats".into()))
    };
    match cfg.format {
        DataFormat::Ml100k => parse_tab_format(path()?),
        DataFormat::Mldelim => parse_double_colon_format(path()?),
        DataFormat::Synthetic => {
            let s = &cfg.synthetic;
            generate_synthetic(s.users, s.items, s.rank, s.density, s.noise_sd, s.seed)
        }
    }
}

/// The train / validation halves of a run.
pub struct Prepared {
    pub dataset: Dataset,
    pub train: Dataset,
    pub valid: Dataset,
    pub store: RatingsStore,
}

/// Loads the data, splits it (replaying `split_file` when given) and writes
/// the validation indices to `split.txt` in the output directory.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let dataset = load_dataset(cfg)?;
    let valid_idx = match &cfg.split_file {
        Some(p) => read_split_sidecar(p)?,
        None => split_indices(dataset.len(), SplitSpec::new(cfg.train_fraction, cfg.split_seed)?).1,
    };
    write_split_sidecar(cfg.out("split.txt"), &valid_idx)?;
    let (train, valid) = split_from_valid_indices(&dataset, &valid_idx)?;
    if train.is_empty() {
        return Err(Error::EmptyDataset(cfg.dataset.clone().unwrap_or_default()));
    }
    let store = RatingsStore::build(&train);
    tracing::info!(
        users = dataset.num_users,
        items = dataset.num_items,
        train = train.len(),
        valid = valid.len(),
        "data ready"
    );
    Ok(Prepared {
        dataset,
        train,
        valid,
        store,
    })
}

fn fresh_model(cfg: &TrainConfig, store: &RatingsStore, protos: &PrototypeSet) -> Result<RecModel> {
    RecModel::for_store(cfg.k, store, protos, cfg.engine, cfg.init_seed)
}

fn log_seeds(cfg: &ExperimentConfig) {
    tracing::info!(
        split_seed = cfg.split_seed,
        init_seed = cfg.train.init_seed,
        sampling_seed = cfg.train.sampling_seed,
        eval_seed = cfg.train.eval_seed,
        "seeds"
    );
}

// ---------------------------------------------------------------------------
// train

pub struct TrainOutcome {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub report: TrainReport,
    pub final_valid_rmse: f64,
    pub model: RecModel,
}

/// Split, store, prototypes, pretraining, training, final validation RMSE.
///
/// Writes `train_metrics.csv`, `split.txt` and `model.json`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let p = prepare(cfg)?;
    log_seeds(cfg);
    let protos = select_prototypes(&p.store, cfg.train.num_proto_users, cfg.train.num_proto_items)?;
    let mut model = fresh_model(&cfg.train, &p.store, &protos)?;
    pretrain_prototype_block(&mut model, &p.store, &cfg.train)?;

    let mut train_cfg = cfg.train.clone();
    if train_cfg.checkpoint_every > 0 && train_cfg.checkpoint_path.is_none() {
        train_cfg.checkpoint_path = Some(cfg.out("model.json"));
    }
    let mut csv = CsvWriter::create(cfg.out("train_metrics.csv"), &cfg.header_lines("train"), METRICS_HEADER)?;
    let report = train(&mut model, &p.store, &train_cfg, Some(&p.valid.records), &mut csv)?;
    let metrics = csv.finish()?;

    let final_valid_rmse = final_rmse(&model, &p.store, &protos, &p.valid.records, &cfg.train)?;
    let checkpoint = cfg.out("model.json");
    Checkpoint::new(&model, None, cfg.train.iterations).save(&checkpoint)?;
    tracing::info!(final_valid_rmse, "train done");
    Ok(TrainOutcome {
        metrics,
        checkpoint,
        report,
        final_valid_rmse,
        model,
    })
}

fn final_rmse(
    model: &RecModel,
    store: &RatingsStore,
    protos: &PrototypeSet,
    eval: &[RatingRecord],
    cfg: &TrainConfig,
) -> Result<f64> {
    let rec = Rec::new(model, store, protos)?;
    Ok(evaluate_rec(&rec, eval, cfg.batch_size, cfg.eval_seed)?.0)
}

// ---------------------------------------------------------------------------
// compare-pmf

pub struct CompareOutcome {
    pub rec_metrics: PathBuf,
    pub pmf_metrics: PathBuf,
    pub rec: TrainReport,
    pub pmf: TrainReport,
}

/// REC and PMF on the same split, prototypes, pretraining and batch
/// schedule, validated after every iteration.
///
/// Writes `rec_metrics.csv` and `pmf_metrics.csv`; both share the metrics
/// schema (the generation counters are zero for PMF).
pub fn cmd_compare_pmf(cfg: &ExperimentConfig) -> Result<CompareOutcome> {
    let p = prepare(cfg)?;
    log_seeds(cfg);
    let tc = TrainConfig {
        iterations: cfg.compare_iterations,
        eval_every: 1,
        checkpoint_every: 0,
        ..cfg.train.clone()
    };
    let protos = select_prototypes(&p.store, tc.num_proto_users, tc.num_proto_items)?;
    let header = cfg.header_lines("compare-pmf");

    let mut model = fresh_model(&tc, &p.store, &protos)?;
    pretrain_prototype_block(&mut model, &p.store, &tc)?;
    let mut csv = CsvWriter::create(cfg.out("rec_metrics.csv"), &header, METRICS_HEADER)?;
    let rec = train(&mut model, &p.store, &tc, Some(&p.valid.records), &mut csv)?;
    let rec_metrics = csv.finish()?;

    let mut csv = CsvWriter::create(cfg.out("pmf_metrics.csv"), &header, METRICS_HEADER)?;
    let (_, pmf) = train_pmf(&p.store, &protos, &tc, Some(&p.valid.records), &mut csv)?;
    let pmf_metrics = csv.finish()?;
    Ok(CompareOutcome {
        rec_metrics,
        pmf_metrics,
        rec,
        pmf,
    })
}

// ---------------------------------------------------------------------------
// online

/// Columns of `online.csv`. The last row has `stage = novel`.
pub const ONLINE_HEADER: &str =
    "stage,fraction,train_ratings,test_ratings,rmse,embeddings_generated,cache_hits,failed_requests,elapsed_seconds";

pub struct OnlineStage {
    pub fraction: f64,
    pub train_ratings: usize,
    pub test_ratings: usize,
    pub rmse: f64,
    pub counters: GenCounters,
}

pub struct OnlineOutcome {
    pub csv: PathBuf,
    pub stages: Vec<OnlineStage>,
    pub novel_rmse: f64,
    pub num_parameters: usize,
    /// Share of all ratings that took part in gradient updates, in percent.
    pub percent_seen_in_training: f64,
    /// Parameters right after the initial training phase.
    pub trained_params: ParamStore,
    /// Parameters after the last evaluation.
    pub final_params: ParamStore,
}

/// Cumulative fractions `initial, initial + step, ...` ending at exactly 1.
pub fn online_schedule(initial: f64, step: f64) -> Vec<f64> {
    let mut out = vec![initial.min(1.0)];
    let mut k = 1;
    while *out.last().expect("non-empty") < 1.0 - 1e-9 {
        out.push((initial + step * k as f64).min(1.0));
        k += 1;
    }
    out
}

/// Rows ordered prototypes first, then a seeded shuffle of the rest.
fn reveal_order(n: usize, protos: &[u32], seed: u64, stream: u64) -> Vec<u32> {
    let mut is_proto = vec![false; n];
    for &p in protos {
        is_proto[p as usize] = true;
    }
    let mut rest: Vec<u32> = (0..n as u32).filter(|&i| !is_proto[i as usize]).collect();
    rest.shuffle(&mut stream_rng(seed, stream));
    protos.iter().copied().chain(rest).collect()
}

/// The stage at which each row becomes visible.
fn reveal_stage(order: &[u32], schedule: &[f64], floor: usize) -> Vec<usize> {
    let n = order.len();
    let mut stage = vec![usize::MAX; n];
    let mut shown = 0;
    for (s, &f) in schedule.iter().enumerate() {
        let upto = ((f * n as f64).ceil() as usize).max(floor).min(n);
        for &id in &order[shown.min(upto)..upto] {
            stage[id as usize] = s;
        }
        shown = shown.max(upto);
    }
    stage
}

/// Train on the first slice of rows and columns, then reveal the rest in
/// increments and evaluate with no further updates.
///
/// A rating belongs to the stage at which both its user and its item are
/// visible. Each stage's ratings are split `train_fraction` / rest: the first
/// part is added to the evidence store, the second to the cumulative test
/// set. Only the initial stage's train part drives gradient updates. The
/// final `novel` row is the RMSE over every test rating from stages after
/// the first. Writes `online.csv` and `online_train_metrics.csv`.
pub fn cmd_online(cfg: &ExperimentConfig) -> Result<OnlineOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    log_seeds(cfg);
    let clock = Instant::now();
    let data = load_dataset(cfg)?;
    let full = RatingsStore::build(&data);
    let protos = select_prototypes(&full, cfg.train.num_proto_users, cfg.train.num_proto_items)?;

    let schedule = online_schedule(cfg.online_initial_fraction, cfg.online_increment);
    let user_stage = reveal_stage(
        &reveal_order(data.num_users, protos.users(), cfg.online_seed, 0),
        &schedule,
        protos.users().len(),
    );
    let item_stage = reveal_stage(
        &reveal_order(data.num_items, protos.items(), cfg.online_seed, 1),
        &schedule,
        protos.items().len(),
    );

    let mut by_stage: Vec<Vec<usize>> = vec![Vec::new(); schedule.len()];
    for (idx, r) in data.records.iter().enumerate() {
        let s = user_stage[r.user as usize].max(item_stage[r.item as usize]);
        by_stage[s].push(idx);
    }
    let mut stage_train = Vec::with_capacity(schedule.len());
    let mut stage_test = Vec::with_capacity(schedule.len());
    for (s, idx) in by_stage.iter().enumerate() {
        let spec = SplitSpec::new(cfg.train_fraction, cfg.split_seed.wrapping_add(s as u64))?;
        let (tr, te) = split_indices(idx.len(), spec);
        stage_train.push(tr.iter().map(|&k| data.records[idx[k]]).collect::<Vec<_>>());
        stage_test.push(te.iter().map(|&k| data.records[idx[k]]).collect::<Vec<_>>());
    }

    let initial = data.with_records(stage_train[0].clone());
    let store0 = RatingsStore::build(&initial);
    let mut model = fresh_model(&cfg.train, &store0, &protos)?;
    let num_parameters = model.num_parameters();
    tracing::info!(num_parameters, "online model");
    pretrain_prototype_block(&mut model, &store0, &cfg.train)?;
    let header = cfg.header_lines("online");
    let mut csv = CsvWriter::create(cfg.out("online_train_metrics.csv"), &header, METRICS_HEADER)?;
    let valid0 = (!stage_test[0].is_empty()).then_some(stage_test[0].as_slice());
    train(&mut model, &store0, &cfg.train, valid0, &mut csv)?;
    csv.finish()?;
    let trained_params = model.params.clone();
    let percent_seen_in_training = 100.0 * stage_train[0].len() as f64 / data.len().max(1) as f64;
    tracing::info!(percent_seen_in_training, "initial phase trained");

    let model = model;
    let mut csv = CsvWriter::create(cfg.out("online.csv"), &header, ONLINE_HEADER)?;
    let mut stages = Vec::with_capacity(schedule.len());
    let mut train_acc: Vec<RatingRecord> = Vec::new();
    let mut test_acc: Vec<RatingRecord> = Vec::new();
    let mut last_store = store0;
    for (s, &fraction) in schedule.iter().enumerate() {
        train_acc.extend_from_slice(&stage_train[s]);
        test_acc.extend_from_slice(&stage_test[s]);
        let store = RatingsStore::build(&data.with_records(train_acc.clone()));
        let (rmse, counters) = online_eval(&model, &store, &protos, &test_acc, &cfg.train)?;
        csv.line(&format!(
            "{s},{fraction},{},{},{},{},{},{},{:.6}",
            train_acc.len(),
            test_acc.len(),
            fmt_opt(rmse),
            counters.embeddings_generated,
            counters.cache_hits,
            counters.failed_requests,
            clock.elapsed().as_secs_f64()
        ))?;
        stages.push(OnlineStage {
            fraction,
            train_ratings: train_acc.len(),
            test_ratings: test_acc.len(),
            rmse: rmse.unwrap_or(f64::NAN),
            counters,
        });
        last_store = store;
    }

    let novel: Vec<RatingRecord> = stage_test[1..].iter().flatten().copied().collect();
    let (novel_rmse, counters) = online_eval(&model, &last_store, &protos, &novel, &cfg.train)?;
    csv.line(&format!(
        "novel,1,{},{},{},{},{},{},{:.6}",
        train_acc.len(),
        novel.len(),
        fmt_opt(novel_rmse),
        counters.embeddings_generated,
        counters.cache_hits,
        counters.failed_requests,
        clock.elapsed().as_secs_f64()
    ))?;
    let path = csv.finish()?;
    Ok(OnlineOutcome {
        csv: path,
        stages,
        novel_rmse: novel_rmse.unwrap_or(f64::NAN),
        num_parameters,
        percent_seen_in_training,
        trained_params,
        final_params: model.params.clone(),
    })
}

fn online_eval(
    model: &RecModel,
    store: &RatingsStore,
    protos: &PrototypeSet,
    eval: &[RatingRecord],
    cfg: &TrainConfig,
) -> Result<(Option<f64>, GenCounters)> {
    if eval.is_empty() {
        return Ok((None, GenCounters::default()));
    }
    let rec = Rec::new(model, store, protos)?;
    let (r, c) = evaluate_rec(&rec, eval, cfg.batch_size, cfg.eval_seed)?;
    Ok((Some(r), c))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// cold-start

/// Columns of `cold_start.csv`.
pub const COLD_START_HEADER: &str =
    "n_c,n_r,valid_rmse,mean_predictor_rmse,train_ratings,failed_requests,elapsed_seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct ColdStartCell {
    pub n_c: usize,
    pub n_r: usize,
    pub valid_rmse: f64,
    pub train_ratings: usize,
}

pub struct ColdStartOutcome {
    pub csv: PathBuf,
    pub cells: Vec<ColdStartCell>,
    pub mean_predictor_rmse: f64,
}

/// Non-prototype users with at least one training rating.
pub fn cold_start_candidates(store: &RatingsStore, protos: &PrototypeSet) -> Vec<u32> {
    (0..store.num_users() as u32)
        .filter(|&u| !protos.is_user(u) && !store.user_ratings(u).is_empty())
        .collect()
}

/// Drops all but `n_r` training ratings of `n_c` sampled users.
///
/// The users depend only on `(seed, n_c)`, so a larger `n_c` at the same
/// seed does not reshuffle unrelated cells; the kept ratings depend on
/// `(seed, n_c, n_r)`.
pub fn thin_users(
    train: &Dataset,
    candidates: &[u32],
    n_c: usize,
    n_r: usize,
    seed: u64,
) -> Result<(Dataset, Vec<u32>)> {
    if n_c > candidates.len() {
        return Err(Error::Config(format!(
            "cold start asks for {n_c} users but only {} are eligible",
            candidates.len()
        )));
    }
    let mut rng = stream_rng(seed, n_c as u64);
    let mut cold: Vec<u32> = sample(&mut rng, candidates.len(), n_c)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    cold.sort_unstable();

    let mut keep_rng = stream_rng(seed, (1 << 32) | ((n_c as u64) << 16) | n_r as u64);
    let mut drop = vec![false; train.len()];
    for &u in &cold {
        let idx: Vec<usize> = (0..train.len()).filter(|&k| train.records[k].user == u).collect();
        if idx.len() <= n_r {
            continue;
        }
        let kept = sample(&mut keep_rng, idx.len(), n_r).into_vec();
        let mut keep = vec![false; idx.len()];
        for k in kept {
            keep[k] = true;
        }
        for (k, &i) in idx.iter().enumerate() {
            drop[i] = !keep[k];
        }
    }
    let records = train
        .records
        .iter()
        .zip(&drop)
        .filter(|(_, &d)| !d)
        .map(|(r, _)| *r)
        .collect();
    Ok((train.with_records(records), cold))
}

/// Retrains from scratch on every `(N_c, n_r)` thinning of the training
/// split and evaluates on the full validation set. Prototypes are chosen
/// once from the untouched training split, so `N_c = 0` is a regular run.
pub fn cmd_cold_start(cfg: &ExperimentConfig) -> Result<ColdStartOutcome> {
    let p = prepare(cfg)?;
    log_seeds(cfg);
    let clock = Instant::now();
    let protos = select_prototypes(&p.store, cfg.train.num_proto_users, cfg.train.num_proto_items)?;
    let candidates = cold_start_candidates(&p.store, &protos);
    if let Some(&worst) = cfg.coldstart_nc.iter().max() {
        if worst > candidates.len() {
            return Err(Error::Config(format!(
                "cold start asks for {worst} users but only {} are eligible",
                candidates.len()
            )));
        }
    }
    let mean_rmse = mean_predictor_rmse(p.store.mean_rating(), &p.valid.records)?;
    let header = cfg.header_lines("cold-start");
    let mut csv = CsvWriter::create(cfg.out("cold_start.csv"), &header, COLD_START_HEADER)?;
    let mut cells = Vec::new();
    for &n_c in &cfg.coldstart_nc {
        for &n_r in &cfg.coldstart_nr {
            let (thinned, _) = thin_users(&p.train, &candidates, n_c, n_r, cfg.coldstart_seed)?;
            let store = RatingsStore::build(&thinned);
            let mut model = fresh_model(&cfg.train, &store, &protos)?;
            pretrain_prototype_block(&mut model, &store, &cfg.train)?;
            let tc = TrainConfig {
                eval_every: 0,
                checkpoint_every: 0,
                ..cfg.train.clone()
            };
            train(&mut model, &store, &tc, None, &mut crate::training::NullSink)?;
            let rec = Rec::new(&model, &store, &protos)?;
            let (valid_rmse, counters) = evaluate_rec(&rec, &p.valid.records, tc.batch_size, tc.eval_seed)?;
            tracing::info!(n_c, n_r, valid_rmse, "cold-start cell");
            csv.line(&format!(
                "{n_c},{n_r},{valid_rmse},{mean_rmse},{},{},{:.6}",
                thinned.len(),
                counters.failed_requests,
                clock.elapsed().as_secs_f64()
            ))?;
            cells.push(ColdStartCell {
                n_c,
                n_r,
                valid_rmse,
                train_ratings: thinned.len(),
            });
        }
    }
    Ok(ColdStartOutcome {
        csv: csv.finish()?,
        cells,
        mean_predictor_rmse: mean_rmse,
    })
}

// ---------------------------------------------------------------------------
// ablation

/// Columns of `ablation.csv`. Counter columns are means over seeds;
/// `max_evidence_per_depth` is the largest selection seen at each depth
/// over all seeds, `;`-separated.
pub const ABLATION_HEADER: &str =
    "controls,caching,embeddings_generated,failed_requests,cache_hits,max_depth_seen,max_evidence_per_depth,elapsed_seconds";

/// The cumulative control ladder, each rung without its cache.
pub fn ablation_ladder(max_depth: usize, evidence_limit: usize) -> Vec<(&'static str, EngineConfig)> {
    let md = EngineConfig::max_depth_only(max_depth);
    let cb = EngineConfig {
        cycle_blocking: true,
        ..md
    };
    let el = EngineConfig {
        evidence_limit: Some(evidence_limit),
        ..cb
    };
    let pp = EngineConfig {
        prototype_prioritization: true,
        ..el
    };
    let tel = EngineConfig {
        telescoping: true,
        ..pp
    };
    vec![("md", md), ("md+cb", cb), ("md+cb+el", el), ("md+cb+el+pp", pp), ("md+cb+el+pp+tel", tel)]
}

pub fn with_cache(cfg: EngineConfig, on: bool) -> EngineConfig {
    EngineConfig {
        caching: on,
        negative_caching: on,
        ..cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub controls: &'static str,
    pub caching: bool,
    pub mean_embeddings_generated: f64,
    pub mean_failed_requests: f64,
    pub mean_cache_hits: f64,
    pub counters: GenCounters,
}

/// Counters of one control setting over `seeds` workloads.
///
/// Seed `s` draws the parameters from init seed `base_seed + s` and a batch
/// of `batch` observed pairs, then predicts them on one fresh context.
pub fn ablation_counters(
    store: &RatingsStore,
    protos: &PrototypeSet,
    k: usize,
    engine: EngineConfig,
    batch: usize,
    seeds: usize,
    base_seed: u64,
) -> Result<Vec<GenCounters>> {
    (0..seeds as u64)
        .map(|s| {
            let seed = base_seed.wrapping_add(s);
            let model = RecModel::for_store(k, store, protos, engine, seed)?;
            let rec = Rec::new(&model, store, protos)?;
            let pairs: Vec<(u32, u32)> = sample_batch(store, batch, seed, 0)
                .into_iter()
                .map(|(u, i, _)| (u, i))
                .collect();
            let mut ctx = rec.context(seed, 1);
            for &(u, i) in &pairs {
                rec.predict(&mut ctx, u, i)?;
            }
            Ok(ctx.counters)
        })
        .collect()
}

/// Runs the fixed prediction workload under every control combination.
pub fn cmd_ablation(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let p = prepare(cfg)?;
    log_seeds(cfg);
    let clock = Instant::now();
    let protos = select_prototypes(&p.store, cfg.train.num_proto_users, cfg.train.num_proto_items)?;
    let header = cfg.header_lines("ablation");
    let mut csv = CsvWriter::create(cfg.out("ablation.csv"), &header, ABLATION_HEADER)?;
    let mut rows = Vec::new();
    for (name, base) in ablation_ladder(cfg.ablation_max_depth, cfg.ablation_evidence_limit) {
        for caching in [false, true] {
            let runs = ablation_counters(
                &p.store,
                &protos,
                cfg.train.k,
                with_cache(base, caching),
                cfg.ablation_batch,
                cfg.ablation_seeds,
                cfg.train.init_seed,
            )?;
            let n = runs.len() as f64;
            let mean = |f: fn(&GenCounters) -> u64| runs.iter().map(f).sum::<u64>() as f64 / n;
            let mut total = GenCounters::default();
            for r in &runs {
                total.merge(r);
            }
            let row = AblationRow {
                controls: name,
                caching,
                mean_embeddings_generated: mean(|c| c.embeddings_generated),
                mean_failed_requests: mean(|c| c.failed_requests),
                mean_cache_hits: mean(|c| c.cache_hits),
                counters: total,
            };
            let mut per_depth = String::new();
            for (d, m) in row.counters.max_evidence_per_depth.iter().enumerate() {
                if d > 0 {
                    per_depth.push(';');
                }
                let _ = write!(per_depth, "{m}");
            }
            csv.line(&format!(
                "{name},{caching},{},{},{},{},{per_depth},{:.6}",
                row.mean_embeddings_generated,
                row.mean_failed_requests,
                row.mean_cache_hits,
                row.counters.max_depth_seen,
                clock.elapsed().as_secs_f64()
            ))?;
            rows.push(row);
        }
    }
    csv.finish()?;
    Ok(rows)
}

/// Validation RMSE of `model` on `eval`, clamped to the store's scale.
pub fn validation_rmse(model: &RecModel, store: &RatingsStore, eval: &[RatingRecord], cfg: &TrainConfig) -> Result<f64> {
    final_rmse(model, store, &model.prototypes(), eval, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_counts_five_stages() {
        assert_eq!(online_schedule(0.2, 0.2).len(), 5);
        assert_eq!(*online_schedule(0.2, 0.2).last().unwrap(), 1.0);
        assert_eq!(online_schedule(1.0, 0.5), vec![1.0]);
        assert_eq!(online_schedule(0.5, 0.3), vec![0.5, 0.8, 1.0]);
    }

    #[test]
    fn reveal_puts_prototypes_in_the_first_stage() {
        let order = reveal_order(10, &[7, 3], 1, 0);
        assert_eq!(&order[..2], &[7, 3]);
        let stage = reveal_stage(&order, &online_schedule(0.2, 0.2), 2);
        assert_eq!(stage[7], 0);
        assert_eq!(stage[3], 0);
        assert!(stage.iter().all(|&s| s < 5));
        assert_eq!(stage.iter().filter(|&&s| s == 0).count(), 2);
        assert_eq!(stage.iter().filter(|&&s| s == 4).count(), 2);
    }

    #[test]
    fn ladder_adds_one_control_per_rung() {
        let ladder = ablation_ladder(2, 80);
        assert_eq!(ladder.len(), 5);
        assert_eq!(ladder[0].1, EngineConfig::max_depth_only(2));
        let last = with_cache(ladder[4].1, true);
        assert_eq!(last, EngineConfig { max_depth: 2, ..EngineConfig::standard() });
    }

    #[test]
    fn thinning_keeps_exactly_n_r_ratings_per_cold_user() {
        let d = generate_synthetic(30, 20, 2, 0.5, 0.0, 3).unwrap();
        let s = RatingsStore::build(&d);
        let protos = select_prototypes(&s, 3, 3).unwrap();
        let cands = cold_start_candidates(&s, &protos);
        let (thin, cold) = thin_users(&d, &cands, 5, 2, 9).unwrap();
        assert_eq!(cold.len(), 5);
        for u in 0..30u32 {
            let before = d.records.iter().filter(|r| r.user == u).count();
            let after = thin.records.iter().filter(|r| r.user == u).count();
            if cold.contains(&u) {
                assert_eq!(after, before.min(2));
                assert!(!protos.is_user(u));
            } else {
                assert_eq!(after, before);
            }
        }
        assert!(thin_users(&d, &cands, cands.len() + 1, 1, 0).is_err());
        let (same, none) = thin_users(&d, &cands, 0, 1, 9).unwrap();
        assert!(none.is_empty());
        assert_eq!(same.records, d.records);
    }

    #[test]
    fn header_lists_every_leaf() {
        let cfg = ExperimentConfig::default();
        let lines = cfg.header_lines("train");
        assert_eq!(lines[0], "# command = train");
        assert!(lines.contains(&"# train.k = 100".to_string()));
        assert!(lines.contains(&"# train.engine.max_depth = 4".to_string()));
        assert!(lines.contains(&"# split_seed = 0".to_string()));
        assert!(lines.iter().all(|l| l.starts_with("# ")));
    }

    #[test]
    fn invalid_fractions_are_rejected() {
        let mut cfg = ExperimentConfig {
            format: DataFormat::Synthetic,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_ok());
        cfg.online_increment = 0.0;
        assert!(cfg.validate().is_err());
        cfg.online_increment = 0.2;
        cfg.online_initial_fraction = 1.5;
        assert!(cfg.validate().is_err());
        let file_cfg = ExperimentConfig::default();
        assert!(file_cfg.validate().is_err(), "file format without a path");
    }
}
