//! Optimisation of the prototype tables and generator nets, prototype-block
//! pretraining, and the dense PMF baseline.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, Adam, AdamConfig, Gradients, ParamStore, Tensor};
use crate::data::{RatingRecord, RatingScale};
use crate::engine::{
    init_table, stream_rng, EngineConfig, EvidenceContext, GenCounters, Prediction, Rec, RecModel,
    ITEM_TABLE_STREAM, USER_TABLE_STREAM,
};
use crate::error::{Error, Result};
use crate::store::{prototype_block, PrototypeSet, RatingsStore, Triple};

/// Hyperparameters shared by REC training and the PMF baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub num_proto_users: usize,
    pub num_proto_items: usize,
    pub engine: EngineConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub pretrain_iterations: usize,
    pub pretrain_lr: f64,
    /// Validation cadence in iterations; 0 disables periodic evaluation.
    pub eval_every: usize,
    pub init_seed: u64,
    pub sampling_seed: u64,
    pub eval_seed: u64,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 100,
            num_proto_users: 50,
            num_proto_items: 50,
            engine: EngineConfig::standard(),
            batch_size: 1000,
            lr: 1e-3,
            lambda: 1e-5,
            iterations: 2000,
            pretrain_iterations: 500,
            pretrain_lr: 1e-3,
            eval_every: 10,
            init_seed: 0,
            sampling_seed: 1,
            eval_seed: 2,
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.engine.evidence_limit == Some(0) {
            return Err(Error::Config("evidence limit must be positive".into()));
        }
        for (name, v) in [("lr", self.lr), ("pretrain_lr", self.pretrain_lr), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// The parts of the squared-error objective for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub squared_error: f64,
    pub reg_protos: f64,
    pub reg_nets: f64,
    pub total: f64,
    /// Predictions in the batch that fell back to the dataset mean.
    pub fallbacks: usize,
    pub count: usize,
}

impl LossTerms {
    pub fn rmse(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        (self.squared_error / self.count as f64).sqrt()
    }
}

/// A batch loss recorded on the context's tape.
pub struct BatchLoss {
    pub terms: LossTerms,
    pub node: crate::autodiff::NodeId,
    pub predictions: Vec<f64>,
}

/// `Σ (r - Û_i V̂_jᵀ)² + λ‖u‖² + λ‖v‖² + λ(‖φ‖² + ‖ψ‖²)` over `batch`.
///
/// Predictions that fall back to the dataset mean add their squared error to
/// the reported terms as a constant: no gradient path exists through them.
pub fn loss<'a>(
    rec: &Rec<'a>,
    ctx: &mut EvidenceContext<'a>,
    batch: &[Triple],
    lambda: f64,
) -> Result<BatchLoss> {
    let mut pred_nodes = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut predictions = Vec::with_capacity(batch.len());
    let mut fallback_se = 0.0;
    let mut fallbacks = 0;
    for &(u, i, r) in batch {
        let p = rec.predict(ctx, u, i)?;
        predictions.push(p.value(ctx));
        match p {
            Prediction::Generated(n) => {
                pred_nodes.push(n);
                targets.push(r);
            }
            Prediction::Fallback(m) => {
                fallback_se += (r - m) * (r - m);
                fallbacks += 1;
            }
        }
    }

    let g = &mut ctx.graph;
    let se_node = if pred_nodes.is_empty() {
        None
    } else {
        let preds = g.stack_rows(&pred_nodes)?;
        let t = g.constant(Tensor::column_vector(targets))?;
        let resid = g.sub(t, preds)?;
        let sq = g.square(resid)?;
        Some(g.sum(sq)?)
    };

    let model = rec.model;
    let u = g.param(model.user_table());
    let v = g.param(model.item_table());
    let su = g.square(u)?;
    let su = g.sum(su)?;
    let sv = g.square(v)?;
    let sv = g.sum(sv)?;
    let sp = g.add(su, sv)?;
    let reg_protos = g.scale(sp, lambda)?;

    let mut net_sum = None;
    for id in model.net_param_ids() {
        let p = g.param(id);
        let sq = g.square(p)?;
        let s = g.sum(sq)?;
        net_sum = Some(match net_sum {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let net_sum = net_sum.expect("generator nets have parameters");
    let reg_nets = g.scale(net_sum, lambda)?;

    let regs = g.add(reg_protos, reg_nets)?;
    let node = match se_node {
        Some(se) => g.add(se, regs)?,
        None => regs,
    };

    let model_se = se_node.map(|n| g.value(n).item()).unwrap_or(0.0);
    let terms = LossTerms {
        squared_error: model_se + fallback_se,
        reg_protos: g.value(reg_protos).item(),
        reg_nets: g.value(reg_nets).item(),
        total: g.value(node).item() + fallback_se,
        fallbacks,
        count: batch.len(),
    };
    Ok(BatchLoss {
        terms,
        node,
        predictions,
    })
}

/// `batch_size` observed ratings drawn uniformly with replacement.
pub fn sample_batch(store: &RatingsStore, batch_size: usize, seed: u64, iteration: usize) -> Vec<Triple> {
    let triples = store.triples();
    if triples.is_empty() {
        return Vec::new();
    }
    let mut rng = stream_rng(seed, 2 * iteration as u64);
    (0..batch_size)
        .map(|_| triples[rng.gen_range(0..triples.len())])
        .collect()
}

fn evidence_stream(iteration: usize) -> u64 {
    2 * iteration as u64 + 1
}

/// One row of the per-iteration metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub train_rmse: f64,
    pub valid_rmse: Option<f64>,
    pub embeddings_generated: u64,
    pub cache_hits: u64,
    pub failed_requests: u64,
    pub elapsed_seconds: f64,
}

pub trait MetricsSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRow> {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// Discards every row.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
}

/// Loss and metrics history of a training run.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub losses: Vec<LossTerms>,
    pub rows: Vec<MetricsRow>,
}

impl TrainReport {
    pub fn last_valid_rmse(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.valid_rmse)
    }
}

fn should_eval(cfg: &TrainConfig, iteration: usize) -> bool {
    (cfg.eval_every > 0 && iteration.is_multiple_of(cfg.eval_every)) || iteration == cfg.iterations
}

/// Trains every parameter of `model` with Adam on batches from `store`.
///
/// Each iteration samples a batch, builds the loss on a fresh tape (so the
/// embedding cache is wiped after every update), backpropagates, and steps.
pub fn train(
    model: &mut RecModel,
    store: &RatingsStore,
    cfg: &TrainConfig,
    valid: Option<&[RatingRecord]>,
    sink: &mut dyn MetricsSink,
) -> Result<TrainReport> {
    let mut adam = Adam::new(&model.params, AdamConfig::with_lr(cfg.lr));
    train_from(model, &mut adam, 0, store, cfg, valid, sink)
}

/// Continues training from iteration `start` with existing optimizer state.
pub fn train_from(
    model: &mut RecModel,
    adam: &mut Adam,
    start: usize,
    store: &RatingsStore,
    cfg: &TrainConfig,
    valid: Option<&[RatingRecord]>,
    sink: &mut dyn MetricsSink,
) -> Result<TrainReport> {
    cfg.validate()?;
    let protos = model.prototypes();
    let clock = Instant::now();
    let mut report = TrainReport::default();
    for it in start..cfg.iterations {
        let iteration = it + 1;
        let batch = sample_batch(store, cfg.batch_size, cfg.sampling_seed, it);
        let (terms, grads, counters) = {
            let rec = Rec::new(model, store, &protos)?;
            let mut ctx = rec.context(cfg.sampling_seed, evidence_stream(it));
            let bl = loss(&rec, &mut ctx, &batch, cfg.lambda).map_err(|e| diverged(iteration, e))?;
            if !bl.terms.total.is_finite() {
                return Err(Error::Diverged {
                    iteration,
                    reason: format!("loss is {}", bl.terms.total),
                });
            }
            let grads = ctx.graph.backward(bl.node).map_err(|e| diverged(iteration, e))?;
            (bl.terms, grads, ctx.counters)
        };
        adam.step(&mut model.params, &grads);

        let valid_rmse = match valid {
            Some(v) if should_eval(cfg, iteration) && !v.is_empty() => {
                let rec = Rec::new(model, store, &protos)?;
                Some(evaluate_rec(&rec, v, cfg.batch_size, cfg.eval_seed)?.0)
            }
            _ => None,
        };
        let row = MetricsRow {
            iteration,
            train_rmse: terms.rmse(),
            valid_rmse,
            embeddings_generated: counters.embeddings_generated,
            cache_hits: counters.cache_hits,
            failed_requests: counters.failed_requests,
            elapsed_seconds: clock.elapsed().as_secs_f64(),
        };
        tracing::debug!(iteration, train_rmse = row.train_rmse, valid_rmse = ?row.valid_rmse, "rec");
        sink.record(&row)?;
        report.rows.push(row);
        report.losses.push(terms);

        if cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every == 0 {
            if let Some(path) = &cfg.checkpoint_path {
                Checkpoint::new(model, Some(adam), iteration).save(path)?;
            }
        }
    }
    Ok(report)
}

fn diverged(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Diverged {
            iteration,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// RMSE of REC predictions on `eval`, clamped to the store's rating scale.
///
/// Predictions run in chunks of `chunk` with one cache per chunk; the
/// evidence sampling stream is reseeded from `seed` on every call.
pub fn evaluate_rec(rec: &Rec<'_>, eval: &[RatingRecord], chunk: usize, seed: u64) -> Result<(f64, GenCounters)> {
    if eval.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let pairs: Vec<(u32, u32)> = eval.iter().map(|r| (r.user, r.item)).collect();
    let (preds, counters) = rec.predict_many(&pairs, chunk, seed)?;
    let scale = rec.store.scale();
    let clamped: Vec<f64> = preds.iter().map(|&p| scale.clamp(p)).collect();
    Ok((rmse(&clamped, eval)?, counters))
}

/// `sqrt(mean((r - p)²))`.
pub fn rmse(predictions: &[f64], eval: &[RatingRecord]) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    debug_assert_eq!(predictions.len(), eval.len());
    let se: f64 = predictions
        .iter()
        .zip(eval)
        .map(|(p, r)| (r.rating - p) * (r.rating - p))
        .sum();
    Ok((se / eval.len() as f64).sqrt())
}

/// RMSE of predicting `mean` for every record.
pub fn mean_predictor_rmse(mean: f64, eval: &[RatingRecord]) -> Result<f64> {
    rmse(&vec![mean; eval.len()], eval)
}

// ---------------------------------------------------------------------------
// Dense latent-factor baseline

/// Full `M × K` and `N × K` embedding tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pmf {
    pub params: ParamStore,
}

const PMF_USERS: crate::autodiff::ParamId = crate::autodiff::ParamId(0);
const PMF_ITEMS: crate::autodiff::ParamId = crate::autodiff::ParamId(1);

impl Pmf {
    /// Tables drawn exactly as [`RecModel::new`] draws its prototype tables,
    /// so an all-prototype REC model and a PMF model from the same seed start
    /// from identical values.
    pub fn new(num_users: usize, num_items: usize, k: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        params.add("users", init_table(num_users, k, seed, USER_TABLE_STREAM));
        params.add("items", init_table(num_items, k, seed, ITEM_TABLE_STREAM));
        Pmf { params }
    }

    pub fn users(&self) -> &Tensor {
        self.params.get(PMF_USERS)
    }

    pub fn items(&self) -> &Tensor {
        self.params.get(PMF_ITEMS)
    }

    pub fn predict(&self, user: u32, item: u32) -> f64 {
        dot(self.users().row(user as usize), self.items().row(item as usize))
    }

    pub fn evaluate_rmse(&self, eval: &[RatingRecord], scale: RatingScale) -> Result<f64> {
        let preds: Vec<f64> = eval
            .iter()
            .map(|r| scale.clamp(self.predict(r.user, r.item)))
            .collect();
        rmse(&preds, eval)
    }
}

/// One Adam step of `Σ (r - u_i·v_j)² + λ(‖U‖² + ‖V‖²)` on a two-table store.
///
/// Gradients are accumulated in the same order and with the same arithmetic
/// as the tape does for the equivalent REC graph.
fn pmf_step(params: &mut ParamStore, adam: &mut Adam, batch: &[(usize, usize, f64)], lambda: f64) -> LossTerms {
    let users = params.get(PMF_USERS);
    let items = params.get(PMF_ITEMS);
    let mut se = 0.0;
    let mut resid = Vec::with_capacity(batch.len());
    for &(u, i, r) in batch {
        let e = r - dot(users.row(u), items.row(i));
        resid.push(e);
    }
    for e in &resid {
        se += e * e;
    }
    let reg = |t: &Tensor| {
        let mut acc = 0.0;
        for x in t.data() {
            acc += x * x;
        }
        acc
    };
    let reg_protos = (reg(users) + reg(items)) * lambda;

    let mut grads = Gradients::zeros_like(params);
    let g_reg = 1.0 * lambda;
    for (id, t) in [(PMF_USERS, users), (PMF_ITEMS, items)] {
        let g = grads.get_mut(id);
        for (gv, &x) in g.data_mut().iter_mut().zip(t.data()) {
            *gv = 2.0 * x * g_reg;
        }
    }
    for (n, &(u, i, _)) in batch.iter().enumerate().rev() {
        let g = -(2.0 * resid[n] * 1.0);
        let d_item: Vec<f64> = users.row(u).iter().map(|&a| g * a).collect();
        let d_user: Vec<f64> = items.row(i).iter().map(|&b| g * b).collect();
        for (d, x) in grads.get_mut(PMF_ITEMS).row_mut(i).iter_mut().zip(&d_item) {
            *d += x;
        }
        for (d, x) in grads.get_mut(PMF_USERS).row_mut(u).iter_mut().zip(&d_user) {
            *d += x;
        }
    }
    adam.step(params, &grads);
    LossTerms {
        squared_error: se,
        reg_protos,
        reg_nets: 0.0,
        total: se + reg_protos,
        fallbacks: 0,
        count: batch.len(),
    }
}

/// Mini-batch PMF with Adam on `(row, col, rating)` triples over two tables.
/// Returns the per-iteration loss terms.
#[allow(clippy::too_many_arguments)]
pub fn fit_tables(
    users: &mut Tensor,
    items: &mut Tensor,
    ratings: &[(usize, usize, f64)],
    iterations: usize,
    batch_size: usize,
    lr: f64,
    lambda: f64,
    seed: u64,
) -> Vec<LossTerms> {
    if ratings.is_empty() || iterations == 0 {
        return Vec::new();
    }
    let mut params = ParamStore::new();
    params.add("users", std::mem::replace(users, Tensor::zeros(0, 0)));
    params.add("items", std::mem::replace(items, Tensor::zeros(0, 0)));
    let mut adam = Adam::new(&params, AdamConfig::with_lr(lr));
    let mut losses = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let mut rng = stream_rng(seed, 2 * it as u64);
        let batch: Vec<(usize, usize, f64)> = (0..batch_size)
            .map(|_| ratings[rng.gen_range(0..ratings.len())])
            .collect();
        losses.push(pmf_step(&mut params, &mut adam, &batch, lambda));
    }
    let mut tensors = params.into_tensors();
    *items = tensors.pop().expect("two tables");
    *users = tensors.pop().expect("two tables");
    losses
}

// Pretraining draws its batches from a seed domain disjoint from training.
fn pretrain_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// PMF on the ratings whose user and item are both prototypes, updating only
/// the prototype tables. Returns the per-iteration loss terms.
pub fn pretrain_prototype_block(model: &mut RecModel, store: &RatingsStore, cfg: &TrainConfig) -> Result<Vec<LossTerms>> {
    let protos = model.prototypes();
    let block = prototype_block(store, &protos);
    if block.is_empty() || cfg.pretrain_iterations == 0 {
        if block.is_empty() {
            tracing::warn!("empty prototype block: skipping pretraining");
        }
        return Ok(Vec::new());
    }
    let (ut, it) = (model.user_table(), model.item_table());
    let mut users = model.params.get(ut).clone();
    let mut items = model.params.get(it).clone();
    let losses = fit_tables(
        &mut users,
        &mut items,
        &block.ratings,
        cfg.pretrain_iterations,
        cfg.batch_size,
        cfg.pretrain_lr,
        cfg.lambda,
        pretrain_seed(cfg.sampling_seed),
    );
    *model.params.get_mut(ut) = users;
    *model.params.get_mut(it) = items;
    Ok(losses)
}

/// Pretrains the prototype rows of a dense PMF model on the prototype block.
pub fn pretrain_pmf_block(pmf: &mut Pmf, store: &RatingsStore, protos: &PrototypeSet, cfg: &TrainConfig) -> Vec<LossTerms> {
    let block = prototype_block(store, protos);
    if block.is_empty() || cfg.pretrain_iterations == 0 {
        return Vec::new();
    }
    let gather = |t: &Tensor, ids: &[u32]| {
        let data = ids.iter().flat_map(|&id| t.row(id as usize).to_vec()).collect();
        Tensor::new(ids.len(), t.cols(), data).expect("sized by construction")
    };
    let mut users = gather(pmf.users(), &block.users);
    let mut items = gather(pmf.items(), &block.items);
    let losses = fit_tables(
        &mut users,
        &mut items,
        &block.ratings,
        cfg.pretrain_iterations,
        cfg.batch_size,
        cfg.pretrain_lr,
        cfg.lambda,
        pretrain_seed(cfg.sampling_seed),
    );
    for (slot, &u) in block.users.iter().enumerate() {
        pmf.params.get_mut(PMF_USERS).row_mut(u as usize).copy_from_slice(users.row(slot));
    }
    for (slot, &i) in block.items.iter().enumerate() {
        pmf.params.get_mut(PMF_ITEMS).row_mut(i as usize).copy_from_slice(items.row(slot));
    }
    losses
}

/// Trains the PMF baseline under the same protocol as REC: identical table
/// initialisation, prototype-block pretraining and batch schedule.
pub fn train_pmf(
    store: &RatingsStore,
    protos: &PrototypeSet,
    cfg: &TrainConfig,
    valid: Option<&[RatingRecord]>,
    sink: &mut dyn MetricsSink,
) -> Result<(Pmf, TrainReport)> {
    cfg.validate()?;
    let mut pmf = Pmf::new(store.num_users(), store.num_items(), cfg.k, cfg.init_seed);
    pretrain_pmf_block(&mut pmf, store, protos, cfg);
    let mut adam = Adam::new(&pmf.params, AdamConfig::with_lr(cfg.lr));
    let clock = Instant::now();
    let mut report = TrainReport::default();
    for it in 0..cfg.iterations {
        let iteration = it + 1;
        let batch: Vec<(usize, usize, f64)> = sample_batch(store, cfg.batch_size, cfg.sampling_seed, it)
            .into_iter()
            .map(|(u, i, r)| (u as usize, i as usize, r))
            .collect();
        let terms = pmf_step(&mut pmf.params, &mut adam, &batch, cfg.lambda);
        if !terms.total.is_finite() {
            return Err(Error::Diverged {
                iteration,
                reason: format!("loss is {}", terms.total),
            });
        }
        let valid_rmse = match valid {
            Some(v) if should_eval(cfg, iteration) && !v.is_empty() => {
                Some(pmf.evaluate_rmse(v, store.scale())?)
            }
            _ => None,
        };
        let row = MetricsRow {
            iteration,
            train_rmse: terms.rmse(),
            valid_rmse,
            embeddings_generated: 0,
            cache_hits: 0,
            failed_requests: 0,
            elapsed_seconds: clock.elapsed().as_secs_f64(),
        };
        sink.record(&row)?;
        report.rows.push(row);
        report.losses.push(terms);
    }
    Ok((pmf, report))
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_VERSION: u32 = 1;

/// Model parameters, optimizer state and progress, as versioned JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub iteration: usize,
    pub model: RecModel,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn new(model: &RecModel, adam: Option<&Adam>, iteration: usize) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            iteration,
            model: model.clone(),
            adam: adam.cloned(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn rec_store(m: usize, n: usize, triples: &[(u32, u32, f64)]) -> RatingsStore {
        let recs: Vec<RatingRecord> = triples
            .iter()
            .map(|&(user, item, rating)| RatingRecord {
                user,
                item,
                rating,
                timestamp: None,
            })
            .collect();
        let mean = recs.iter().map(|r| r.rating).sum::<f64>() / recs.len().max(1) as f64;
        RatingsStore::from_records(m, n, &recs, mean, RatingScale::MOVIELENS)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            k: 3,
            num_proto_users: 2,
            num_proto_items: 2,
            batch_size: 8,
            iterations: 5,
            pretrain_iterations: 0,
            eval_every: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn all_prototype_loss_without_regularisation_is_plain_squared_error() {
        let s = rec_store(2, 2, &[(0, 0, 4.0), (0, 1, 2.0), (1, 1, 5.0)]);
        let protos = PrototypeSet::all(2, 2);
        let model = RecModel::for_store(3, &s, &protos, EngineConfig::standard(), 3).unwrap();
        let rec = Rec::new(&model, &s, &protos).unwrap();
        let mut ctx = rec.context(0, 0);
        let batch = s.triples().to_vec();
        let bl = loss(&rec, &mut ctx, &batch, 0.0).unwrap();
        let u = model.params.get(model.user_table());
        let v = model.params.get(model.item_table());
        let expected: f64 = batch
            .iter()
            .map(|&(a, b, r)| {
                let p: f64 = u.row(a as usize).iter().zip(v.row(b as usize)).map(|(x, y)| x * y).sum();
                (r - p) * (r - p)
            })
            .sum();
        assert!((bl.terms.squared_error - expected).abs() < 1e-12);
        assert_eq!(bl.terms.reg_protos, 0.0);
        assert_eq!(bl.terms.reg_nets, 0.0);
        assert_eq!(bl.terms.fallbacks, 0);
    }

    #[test]
    fn zero_parameters_give_zero_regularisers_and_unit_error() {
        let s = rec_store(1, 1, &[(0, 0, 4.0)]);
        let protos = PrototypeSet::all(1, 1);
        let mut model = RecModel::new(2, &protos, EngineConfig::standard(), 3.0, 4.0, 0).unwrap();
        for t in model.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        // u·v = 3 with a single shared coordinate.
        model.params.get_mut(model.user_table()).data_mut()[0] = 1.0;
        model.params.get_mut(model.item_table()).data_mut()[0] = 3.0;
        let rec = Rec::new(&model, &s, &protos).unwrap();
        let mut ctx = rec.context(0, 0);
        let bl = loss(&rec, &mut ctx, &[(0, 0, 4.0)], 0.5).unwrap();
        assert_eq!(bl.terms.squared_error, 1.0);
        assert_eq!(bl.terms.reg_protos, 0.5 * (1.0 + 9.0));
        assert_eq!(bl.terms.reg_nets, 0.0);
        assert_eq!(bl.terms.total, 1.0 + 5.0);
    }

    #[test]
    fn fallback_error_is_reported_but_constant() {
        // User 1 is not a prototype and has no ratings: nothing to generate from.
        let s = rec_store(2, 1, &[(0, 0, 5.0)]);
        let protos = PrototypeSet::new(vec![0], vec![0], 2, 1).unwrap();
        let model = RecModel::for_store(2, &s, &protos, EngineConfig::standard(), 1).unwrap();
        let rec = Rec::new(&model, &s, &protos).unwrap();
        let mut ctx = rec.context(0, 0);
        let bl = loss(&rec, &mut ctx, &[(1, 0, 3.0)], 0.0).unwrap();
        assert_eq!(bl.terms.fallbacks, 1);
        assert_eq!(bl.terms.squared_error, 4.0);
        assert_eq!(bl.predictions, vec![5.0]);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let d = generate_synthetic(12, 10, 2, 0.5, 0.0, 4).unwrap();
        let s = RatingsStore::build(&d);
        let protos = crate::store::select_prototypes(&s, 2, 2).unwrap();
        let mut model = RecModel::for_store(3, &s, &protos, EngineConfig::standard(), 1).unwrap();
        let before = model.params.clone();
        let cfg = TrainConfig { lr: 0.0, ..small_cfg() };
        train(&mut model, &s, &cfg, None, &mut NullSink).unwrap();
        assert_eq!(model.params, before);
    }

    #[test]
    fn training_is_deterministic() {
        let d = generate_synthetic(15, 12, 2, 0.4, 0.1, 9).unwrap();
        let s = RatingsStore::build(&d);
        let protos = crate::store::select_prototypes(&s, 3, 3).unwrap();
        let cfg = TrainConfig { lr: 1e-2, ..small_cfg() };
        let run = || {
            let mut model = RecModel::for_store(3, &s, &protos, EngineConfig::standard(), 2).unwrap();
            let mut rows = Vec::new();
            train(&mut model, &s, &cfg, Some(&d.records), &mut rows).unwrap();
            (model.params, rows.iter().map(|r| (r.train_rmse, r.valid_rmse)).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_pretraining_is_a_no_op() {
        let d = generate_synthetic(10, 10, 1, 0.6, 0.0, 1).unwrap();
        let s = RatingsStore::build(&d);
        let protos = crate::store::select_prototypes(&s, 4, 4).unwrap();
        let mut model = RecModel::for_store(2, &s, &protos, EngineConfig::standard(), 0).unwrap();
        let before = model.params.clone();
        let cfg = TrainConfig { pretrain_iterations: 0, ..small_cfg() };
        assert!(pretrain_prototype_block(&mut model, &s, &cfg).unwrap().is_empty());
        assert_eq!(model.params, before);
    }

    #[test]
    fn pretraining_fits_a_rank_one_block() {
        let d = generate_synthetic(8, 8, 1, 1.0, 0.0, 5).unwrap();
        let s = RatingsStore::build(&d);
        let protos = PrototypeSet::all(8, 8);
        let mut model = RecModel::for_store(2, &s, &protos, EngineConfig::standard(), 0).unwrap();
        let cfg = TrainConfig {
            pretrain_iterations: 3000,
            pretrain_lr: 1e-2,
            batch_size: 64,
            lambda: 0.0,
            ..small_cfg()
        };
        pretrain_prototype_block(&mut model, &s, &cfg).unwrap();
        let rec = Rec::new(&model, &s, &protos).unwrap();
        let mut ctx = rec.context(0, 0);
        let se: f64 = d
            .records
            .iter()
            .map(|r| {
                let p = rec.predict(&mut ctx, r.user, r.item).unwrap().value(&ctx);
                (r.rating - p).powi(2)
            })
            .sum();
        let rmse = (se / d.len() as f64).sqrt();
        assert!(rmse < 0.05, "block rmse {rmse}");
    }

    #[test]
    fn pmf_recovers_rank_two_matrix() {
        let d = generate_synthetic(20, 15, 2, 1.0, 0.0, 8).unwrap();
        let s = RatingsStore::build(&d);
        let cfg = TrainConfig {
            k: 2,
            lr: 2e-2,
            lambda: 0.0,
            batch_size: 100,
            iterations: 3000,
            eval_every: 0,
            ..small_cfg()
        };
        let protos = PrototypeSet::new(vec![], vec![], 20, 15).unwrap();
        let (pmf, _) = train_pmf(&s, &protos, &cfg, None, &mut NullSink).unwrap();
        let fit = pmf.evaluate_rmse(&d.records, d.scale).unwrap();
        assert!(fit < 0.05, "pmf rmse {fit}");
    }

    #[test]
    fn rmse_examples() {
        let rec = |rating| RatingRecord {
            user: 0,
            item: 0,
            rating,
            timestamp: None,
        };
        assert_eq!(rmse(&[3.0], &[rec(5.0)]).unwrap(), 2.0);
        assert_eq!(rmse(&[1.0, 3.0], &[rec(2.0), rec(2.0)]).unwrap(), 1.0);
        assert!(matches!(rmse(&[], &[]), Err(Error::EmptyEvalSet)));
        assert_eq!(mean_predictor_rmse(4.0, &[rec(4.0)]).unwrap(), 0.0);
    }

    #[test]
    fn checkpoint_round_trips() {
        let d = generate_synthetic(10, 9, 2, 0.5, 0.0, 2).unwrap();
        let s = RatingsStore::build(&d);
        let protos = crate::store::select_prototypes(&s, 2, 2).unwrap();
        let mut model = RecModel::for_store(3, &s, &protos, EngineConfig::standard(), 6).unwrap();
        let mut adam = Adam::new(&model.params, AdamConfig::with_lr(1e-2));
        let cfg = TrainConfig { iterations: 2, ..small_cfg() };
        train_from(&mut model, &mut adam, 0, &s, &cfg, None, &mut NullSink).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = Checkpoint::new(&model, Some(&adam), 2);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        back.save(dir.path().join("again.json")).unwrap();
        assert_eq!(
            fs::read(&path).unwrap(),
            fs::read(dir.path().join("again.json")).unwrap()
        );
    }

    #[test]
    fn resumed_training_matches_uninterrupted_run() {
        let d = generate_synthetic(10, 9, 2, 0.5, 0.0, 2).unwrap();
        let s = RatingsStore::build(&d);
        let protos = crate::store::select_prototypes(&s, 2, 2).unwrap();
        let cfg = TrainConfig { iterations: 4, lr: 1e-2, ..small_cfg() };
        let fresh = || RecModel::for_store(3, &s, &protos, EngineConfig::standard(), 6).unwrap();

        let mut full = fresh();
        train(&mut full, &s, &cfg, None, &mut NullSink).unwrap();

        let mut part = fresh();
        let mut adam = Adam::new(&part.params, AdamConfig::with_lr(cfg.lr));
        let half = TrainConfig { iterations: 2, ..cfg.clone() };
        train_from(&mut part, &mut adam, 0, &s, &half, None, &mut NullSink).unwrap();
        let ck: Checkpoint =
            serde_json::from_str(&serde_json::to_string(&Checkpoint::new(&part, Some(&adam), 2)).unwrap()).unwrap();
        let (mut model, mut adam) = (ck.model, ck.adam.unwrap());
        train_from(&mut model, &mut adam, ck.iteration, &s, &cfg, None, &mut NullSink).unwrap();
        assert_eq!(model.params, full.params);
    }

    #[test]
    fn all_prototype_rec_matches_pmf_exactly() {
        let d = generate_synthetic(9, 7, 2, 0.6, 0.1, 3).unwrap();
        let s = RatingsStore::build(&d);
        let protos = PrototypeSet::all(9, 7);
        let cfg = TrainConfig {
            k: 4,
            lr: 1e-2,
            lambda: 1e-3,
            iterations: 20,
            pretrain_iterations: 10,
            batch_size: 16,
            ..small_cfg()
        };
        let mut model = RecModel::for_store(cfg.k, &s, &protos, EngineConfig::standard(), cfg.init_seed).unwrap();
        pretrain_prototype_block(&mut model, &s, &cfg).unwrap();
        let rec_report = train(&mut model, &s, &cfg, None, &mut NullSink).unwrap();
        let (pmf, pmf_report) = train_pmf(&s, &protos, &cfg, None, &mut NullSink).unwrap();
        assert_eq!(model.params.get(model.user_table()), pmf.users());
        assert_eq!(model.params.get(model.item_table()), pmf.items());
        for (a, b) in rec_report.losses.iter().zip(&pmf_report.losses) {
            assert_eq!(a.squared_error, b.squared_error);
            assert_eq!(a.reg_protos, b.reg_protos);
        }
    }
}
