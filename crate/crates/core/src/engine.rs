//! On-demand embedding generation through recursive evidence chains.
//!
//! A user embedding is either a stored prototype row or the mean of
//! `f_φ(rating, item embedding)` over (a sample of) the items that user
//! rated; item embeddings mirror this with `f_ψ`. The recursion is bounded by
//! a max depth, and the complexity controls (cycle blocking, caching, evidence
//! limit, prototype prioritization, telescoping limit) prune the call tree.
//!
//! All state for one mini-batch lives in an [`EvidenceContext`]: the tape, the
//! embedding cache, the ancestor stack, the sampling stream and the counters.

use std::collections::HashMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{normal_table, Graph, Mlp, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::store::{PrototypeSet, RatingsStore};

/// Standard deviation of the initial prototype embeddings.
pub const PROTOTYPE_INIT_SD: f64 = 0.1;

// Independent ChaCha streams per parameter group, so that a table drawn here
// and a table drawn by the PMF baseline from the same seed coincide.
pub(crate) const USER_TABLE_STREAM: u64 = 1;
pub(crate) const ITEM_TABLE_STREAM: u64 = 2;
const PHI_STREAM: u64 = 3;
const PSI_STREAM: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    User,
    Item,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::User => Side::Item,
            Side::Item => Side::User,
        }
    }
}

/// Recursion bound and complexity-control switches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub max_depth: usize,
    /// `None` aggregates every available rating.
    pub evidence_limit: Option<usize>,
    pub cycle_blocking: bool,
    pub caching: bool,
    /// Also cache generations that found no usable evidence.
    pub negative_caching: bool,
    pub prototype_prioritization: bool,
    pub telescoping: bool,
}

impl EngineConfig {
    /// Max depth 4, evidence limit 80, every control on.
    pub fn standard() -> Self {
        EngineConfig {
            max_depth: 4,
            evidence_limit: Some(80),
            cycle_blocking: true,
            caching: true,
            negative_caching: true,
            prototype_prioritization: true,
            telescoping: true,
        }
    }

    /// Only the depth bound; every control off.
    pub fn max_depth_only(max_depth: usize) -> Self {
        EngineConfig {
            max_depth,
            evidence_limit: None,
            cycle_blocking: false,
            caching: false,
            negative_caching: false,
            prototype_prioritization: false,
            telescoping: false,
        }
    }

    /// Evidence budget for a generation at `depth`.
    ///
    /// With telescoping the limit halves per level, floored, but never drops
    /// below one.
    pub fn evidence_budget(&self, depth: usize) -> Option<usize> {
        self.evidence_limit.map(|el| {
            if self.telescoping {
                let shift = depth.min(usize::BITS as usize - 1);
                (el >> shift).max(1)
            } else {
                el
            }
        })
    }
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self::standard()
    }
}

/// Prototype tables, generator nets and the engine settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecModel {
    pub params: ParamStore,
    pub config: EngineConfig,
    k: usize,
    user_table: ParamId,
    item_table: ParamId,
    phi: Mlp,
    psi: Mlp,
    proto_users: Vec<u32>,
    proto_items: Vec<u32>,
    universe: (usize, usize),
    rating_center: f64,
    rating_range: f64,
}

impl RecModel {
    /// Fresh parameters: prototype rows `~ N(0, 0.1²)`, Glorot-uniform net
    /// weights, zero biases. `rating_center` and `rating_range` fix the
    /// rating feature fed to the nets as `(r - center) / range`.
    pub fn new(
        k: usize,
        protos: &PrototypeSet,
        config: EngineConfig,
        rating_center: f64,
        rating_range: f64,
        seed: u64,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("latent dimension must be >= 1".into()));
        }
        if !(rating_range > 0.0 && rating_range.is_finite() && rating_center.is_finite()) {
            return Err(Error::Config(format!(
                "bad rating normalisation ({rating_center}, {rating_range})"
            )));
        }
        let mut params = ParamStore::new();
        let user_table = params.add(
            "user_prototypes",
            init_table(protos.users().len(), k, seed, USER_TABLE_STREAM),
        );
        let item_table = params.add(
            "item_prototypes",
            init_table(protos.items().len(), k, seed, ITEM_TABLE_STREAM),
        );
        let phi = Mlp::generator(&mut params, "phi", k, &mut stream_rng(seed, PHI_STREAM));
        let psi = Mlp::generator(&mut params, "psi", k, &mut stream_rng(seed, PSI_STREAM));
        Ok(RecModel {
            params,
            config,
            k,
            user_table,
            item_table,
            phi,
            psi,
            proto_users: protos.users().to_vec(),
            proto_items: protos.items().to_vec(),
            universe: protos.universe(),
            rating_center,
            rating_range,
        })
    }

    /// Builds a model whose rating feature is normalised by `store`'s mean and scale.
    pub fn for_store(
        k: usize,
        store: &RatingsStore,
        protos: &PrototypeSet,
        config: EngineConfig,
        seed: u64,
    ) -> Result<Self> {
        Self::new(
            k,
            protos,
            config,
            store.mean_rating(),
            store.scale().range(),
            seed,
        )
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn user_table(&self) -> ParamId {
        self.user_table
    }

    pub fn item_table(&self) -> ParamId {
        self.item_table
    }

    pub fn table(&self, side: Side) -> ParamId {
        match side {
            Side::User => self.user_table,
            Side::Item => self.item_table,
        }
    }

    /// `f_φ` (item evidence → user) for `Side::User`, `f_ψ` for `Side::Item`.
    pub fn net(&self, side: Side) -> &Mlp {
        match side {
            Side::User => &self.phi,
            Side::Item => &self.psi,
        }
    }

    pub fn prototypes(&self) -> PrototypeSet {
        PrototypeSet::new(
            self.proto_users.clone(),
            self.proto_items.clone(),
            self.universe.0,
            self.universe.1,
        )
        .expect("validated at construction")
    }

    pub fn rating_feature(&self, rating: f64) -> f64 {
        (rating - self.rating_center) / self.rating_range
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    /// Parameters of the two nets (everything except the prototype tables).
    pub fn net_param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.phi.param_ids().chain(self.psi.param_ids())
    }
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn init_table(rows: usize, k: usize, seed: u64, stream: u64) -> Tensor {
    normal_table(rows, k, PROTOTYPE_INIT_SD, &mut stream_rng(seed, stream))
}

/// Work and outcome tallies for one context.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenCounters {
    /// Non-prototype embeddings whose evidence loop actually ran.
    pub embeddings_generated: u64,
    pub cache_hits: u64,
    /// Requests that hit the depth cap or whose generation found no usable
    /// evidence. Cache hits, including cached failures, are not counted.
    pub failed_requests: u64,
    /// Total evidence rows selected at each depth.
    pub evidence_per_depth: Vec<u64>,
    /// Largest single evidence selection at each depth.
    pub max_evidence_per_depth: Vec<usize>,
    pub max_depth_seen: usize,
    /// Generations entered for a `(side, id)` already on the ancestor stack.
    pub stack_reentries: u64,
}

impl GenCounters {
    fn record_evidence(&mut self, depth: usize, n: usize) {
        if self.evidence_per_depth.len() <= depth {
            self.evidence_per_depth.resize(depth + 1, 0);
            self.max_evidence_per_depth.resize(depth + 1, 0);
        }
        self.evidence_per_depth[depth] += n as u64;
        self.max_evidence_per_depth[depth] = self.max_evidence_per_depth[depth].max(n);
    }

    pub fn merge(&mut self, other: &GenCounters) {
        self.embeddings_generated += other.embeddings_generated;
        self.cache_hits += other.cache_hits;
        self.failed_requests += other.failed_requests;
        self.stack_reentries += other.stack_reentries;
        self.max_depth_seen = self.max_depth_seen.max(other.max_depth_seen);
        for (d, (&n, &m)) in other
            .evidence_per_depth
            .iter()
            .zip(&other.max_evidence_per_depth)
            .enumerate()
        {
            if self.evidence_per_depth.len() <= d {
                self.evidence_per_depth.resize(d + 1, 0);
                self.max_evidence_per_depth.resize(d + 1, 0);
            }
            self.evidence_per_depth[d] += n;
            self.max_evidence_per_depth[d] = self.max_evidence_per_depth[d].max(m);
        }
    }
}

/// Per-batch generation state.
pub struct EvidenceContext<'p> {
    pub graph: Graph<'p>,
    cache: HashMap<(Side, u32), Option<NodeId>>,
    active: HashMap<(Side, u32), u32>,
    rng: ChaCha8Rng,
    pub counters: GenCounters,
}

impl<'p> EvidenceContext<'p> {
    pub fn new(params: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        EvidenceContext {
            graph: Graph::new(params),
            cache: HashMap::new(),
            active: HashMap::new(),
            rng,
            counters: GenCounters::default(),
        }
    }

    /// Drops every cached embedding; counters are kept.
    pub fn clear_cache(&mut self) {
        self.cache.clear();
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    /// Number of `(side, id)` generations currently on the call stack.
    pub fn active_len(&self) -> usize {
        self.active.values().map(|&c| c as usize).sum()
    }

    fn is_active(&self, key: (Side, u32)) -> bool {
        self.active.contains_key(&key)
    }

    fn enter(&mut self, key: (Side, u32)) -> bool {
        let c = self.active.entry(key).or_insert(0);
        *c += 1;
        *c > 1
    }

    fn leave(&mut self, key: (Side, u32)) {
        if let Some(c) = self.active.get_mut(&key) {
            *c -= 1;
            if *c == 0 {
                self.active.remove(&key);
            }
        }
    }
}

/// Chooses which `(counterpart, rating)` pairs feed one generation step.
///
/// With no budget every candidate is used. With prototype prioritization,
/// prototype candidates are taken first (a uniform subset of them if they
/// alone exceed the budget) and the remainder is filled uniformly without
/// replacement from the other candidates. The result keeps candidate order.
pub fn select_evidence<R: Rng>(
    candidates: &[(u32, f64)],
    budget: Option<usize>,
    is_prototype: Option<&dyn Fn(u32) -> bool>,
    rng: &mut R,
) -> Vec<(u32, f64)> {
    let Some(budget) = budget else {
        return candidates.to_vec();
    };
    if candidates.len() <= budget {
        return candidates.to_vec();
    }
    let mut chosen: Vec<usize> = match is_prototype {
        Some(is_proto) => {
            let (protos, rest): (Vec<usize>, Vec<usize>) =
                (0..candidates.len()).partition(|&n| is_proto(candidates[n].0));
            if protos.len() >= budget {
                index::sample(rng, protos.len(), budget)
                    .into_iter()
                    .map(|n| protos[n])
                    .collect()
            } else {
                let fill = budget - protos.len();
                let mut picked = protos;
                picked.extend(
                    index::sample(rng, rest.len(), fill)
                        .into_iter()
                        .map(|n| rest[n]),
                );
                picked
            }
        }
        None => index::sample(rng, candidates.len(), budget).into_vec(),
    };
    chosen.sort_unstable();
    chosen.into_iter().map(|n| candidates[n]).collect()
}

/// Result of a rating prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Prediction {
    /// `Û_i V̂_jᵀ` as a `1 × 1` tape node.
    Generated(NodeId),
    /// One endpoint resolved to `None`; the dataset mean.
    Fallback(f64),
}

impl Prediction {
    pub fn value(&self, ctx: &EvidenceContext<'_>) -> f64 {
        match *self {
            Prediction::Generated(n) => ctx.graph.value(n).item(),
            Prediction::Fallback(m) => m,
        }
    }

    pub fn is_fallback(&self) -> bool {
        matches!(self, Prediction::Fallback(_))
    }
}

/// A model paired with the ratings it draws evidence from.
#[derive(Clone, Copy)]
pub struct Rec<'a> {
    pub model: &'a RecModel,
    pub store: &'a RatingsStore,
    protos: &'a PrototypeSet,
}

impl<'a> Rec<'a> {
    pub fn new(model: &'a RecModel, store: &'a RatingsStore, protos: &'a PrototypeSet) -> Result<Self> {
        if protos.universe() != (store.num_users(), store.num_items()) {
            return Err(Error::Config(format!(
                "prototype universe {:?} does not match store {}x{}",
                protos.universe(),
                store.num_users(),
                store.num_items()
            )));
        }
        if protos.users() != model.proto_users.as_slice()
            || protos.items() != model.proto_items.as_slice()
        {
            return Err(Error::Config(
                "prototype set differs from the one the model was built with".into(),
            ));
        }
        Ok(Rec {
            model,
            store,
            protos,
        })
    }

    /// A fresh context whose evidence sampling is driven by `(seed, stream)`.
    pub fn context(&self, seed: u64, stream: u64) -> EvidenceContext<'a> {
        EvidenceContext::new(&self.model.params, stream_rng(seed, stream))
    }

    fn slot(&self, side: Side, id: u32) -> Option<usize> {
        match side {
            Side::User => self.protos.user_slot(id),
            Side::Item => self.protos.item_slot(id),
        }
    }

    fn evidence(&self, side: Side, id: u32) -> &'a [(u32, f64)] {
        match side {
            Side::User => self.store.user_ratings(id),
            Side::Item => self.store.item_ratings(id),
        }
    }

    pub fn user_vector(&self, ctx: &mut EvidenceContext<'a>, user: u32, depth: usize) -> Result<Option<NodeId>> {
        self.vector(ctx, Side::User, user, depth)
    }

    pub fn item_vector(&self, ctx: &mut EvidenceContext<'a>, item: u32, depth: usize) -> Result<Option<NodeId>> {
        self.vector(ctx, Side::Item, item, depth)
    }

    /// The embedding of `(side, id)` requested at recursion depth `depth`.
    ///
    /// Resolution order: prototype row, cache, depth bound, generation.
    pub fn vector(
        &self,
        ctx: &mut EvidenceContext<'a>,
        side: Side,
        id: u32,
        depth: usize,
    ) -> Result<Option<NodeId>> {
        let cfg = &self.model.config;
        assert!(depth <= cfg.max_depth, "request at depth {depth} beyond max depth");
        ctx.counters.max_depth_seen = ctx.counters.max_depth_seen.max(depth);

        if let Some(slot) = self.slot(side, id) {
            let table = ctx.graph.param(self.model.table(side));
            return ctx.graph.row(table, slot).map(Some);
        }
        if depth >= cfg.max_depth {
            ctx.counters.failed_requests += 1;
            return Ok(None);
        }
        let key = (side, id);
        if cfg.caching {
            if let Some(&hit) = ctx.cache.get(&key) {
                ctx.counters.cache_hits += 1;
                return Ok(hit);
            }
        }

        let reentered = ctx.enter(key);
        if reentered {
            ctx.counters.stack_reentries += 1;
            assert!(!cfg.cycle_blocking, "cycle blocking let {key:?} re-enter the stack");
        }
        let result = self.generate(ctx, side, id, depth);
        ctx.leave(key);
        let result = result?;

        if result.is_none() {
            ctx.counters.failed_requests += 1;
        }
        if cfg.caching && (result.is_some() || cfg.negative_caching) {
            ctx.cache.entry(key).or_insert(result);
        }
        Ok(result)
    }

    fn generate(
        &self,
        ctx: &mut EvidenceContext<'a>,
        side: Side,
        id: u32,
        depth: usize,
    ) -> Result<Option<NodeId>> {
        let cfg = &self.model.config;
        let other = side.other();
        let all = self.evidence(side, id);
        let blocked: Vec<(u32, f64)>;
        let candidates = if cfg.cycle_blocking {
            blocked = all
                .iter()
                .copied()
                .filter(|&(c, _)| !ctx.is_active((other, c)))
                .collect();
            &blocked[..]
        } else {
            all
        };

        let budget = cfg.evidence_budget(depth);
        let is_proto = |c: u32| self.slot(other, c).is_some();
        let prioritize: Option<&dyn Fn(u32) -> bool> = if cfg.prototype_prioritization {
            Some(&is_proto)
        } else {
            None
        };
        let selected = select_evidence(candidates, budget, prioritize, &mut ctx.rng);

        ctx.counters.embeddings_generated += 1;
        ctx.counters.record_evidence(depth, selected.len());

        let mut embeddings = Vec::with_capacity(selected.len());
        let mut features = Vec::with_capacity(selected.len());
        for &(c, r) in &selected {
            if let Some(e) = self.vector(ctx, other, c, depth + 1)? {
                embeddings.push(e);
                features.push(self.model.rating_feature(r));
            }
        }
        if embeddings.is_empty() {
            return Ok(None);
        }
        let g = &mut ctx.graph;
        let stacked = g.stack_rows(&embeddings)?;
        let ratings = g.constant(Tensor::column_vector(features))?;
        let input = g.concat_cols(stacked, ratings)?;
        let out = self.model.net(side).apply(g, input)?;
        g.mean_rows(out).map(Some)
    }

    /// `Û_i V̂_jᵀ`, or the store mean when either embedding is unavailable.
    pub fn predict(&self, ctx: &mut EvidenceContext<'a>, user: u32, item: u32) -> Result<Prediction> {
        let u = self.user_vector(ctx, user, 0)?;
        let v = self.item_vector(ctx, item, 0)?;
        debug_assert_eq!(ctx.active_len(), 0);
        match (u, v) {
            (Some(u), Some(v)) => Ok(Prediction::Generated(ctx.graph.matmul_nt(u, v)?)),
            _ => Ok(Prediction::Fallback(self.store.mean_rating())),
        }
    }

    /// Predicts a list of `(user, item)` pairs in chunks of `chunk`, with one
    /// fresh context (and cache) per chunk. Unclamped.
    pub fn predict_many(&self, pairs: &[(u32, u32)], chunk: usize, seed: u64) -> Result<(Vec<f64>, GenCounters)> {
        let mut out = Vec::with_capacity(pairs.len());
        let mut counters = GenCounters::default();
        for (n, block) in pairs.chunks(chunk.max(1)).enumerate() {
            let mut ctx = self.context(seed, n as u64);
            for &(u, i) in block {
                let p = self.predict(&mut ctx, u, i)?;
                out.push(p.value(&ctx));
            }
            counters.merge(&ctx.counters);
        }
        Ok((out, counters))
    }
}
