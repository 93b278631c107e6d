#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rec::autodiff::ParamId;
use rec::data::{RatingRecord, RatingScale};
use rec::engine::{EngineConfig, Rec, RecModel};
use rec::store::{PrototypeSet, RatingsStore, Triple};
use rec::training::loss;

pub fn record(user: u32, item: u32, rating: f64) -> RatingRecord {
    RatingRecord {
        user,
        item,
        rating,
        timestamp: None,
    }
}

pub fn store_from(m: usize, n: usize, triples: &[Triple]) -> RatingsStore {
    let recs: Vec<RatingRecord> = triples.iter().map(|&(u, i, r)| record(u, i, r)).collect();
    let mean = if recs.is_empty() {
        RatingScale::MOVIELENS.midpoint()
    } else {
        recs.iter().map(|r| r.rating).sum::<f64>() / recs.len() as f64
    };
    RatingsStore::from_records(m, n, &recs, mean, RatingScale::MOVIELENS)
}

/// A random sparse store, optionally with pathological structure: users
/// with a single rating, empty rows and columns, and two disconnected blocks.
pub fn random_store(seed: u64, pathological: bool) -> RatingsStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(4..30);
    let n = rng.gen_range(4..30);
    let density = rng.gen_range(0.02..0.5);
    let mut triples = Vec::new();
    for u in 0..m as u32 {
        for i in 0..n as u32 {
            let disconnected = pathological && ((u as usize) < m / 2) != ((i as usize) < n / 2);
            if !disconnected && rng.gen_bool(density) {
                triples.push((u, i, rng.gen_range(1..=5) as f64));
            }
        }
    }
    if pathological {
        // One user with exactly one rating, one untouched user and item.
        let lone = (m - 1) as u32;
        triples.retain(|t| t.0 != lone && t.1 != (n - 1) as u32);
        triples.push((lone, 0, 3.0));
    }
    store_from(m, n, &triples)
}

/// Random prototype subset of roughly a quarter of each side.
pub fn random_protos(store: &RatingsStore, seed: u64) -> PrototypeSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let pick = |n: usize, rng: &mut ChaCha8Rng| -> Vec<u32> {
        (0..n as u32).filter(|_| rng.gen_bool(0.25)).collect()
    };
    let users = pick(store.num_users(), &mut rng);
    let items = pick(store.num_items(), &mut rng);
    PrototypeSet::new(users, items, store.num_users(), store.num_items()).unwrap()
}

pub fn model(k: usize, store: &RatingsStore, protos: &PrototypeSet, cfg: EngineConfig, seed: u64) -> RecModel {
    RecModel::for_store(k, store, protos, cfg, seed).unwrap()
}

/// Total loss of `batch` with a fixed evidence stream.
pub fn loss_value(model: &RecModel, store: &RatingsStore, protos: &PrototypeSet, batch: &[Triple], lambda: f64, seed: u64) -> f64 {
    let rec = Rec::new(model, store, protos).unwrap();
    let mut ctx = rec.context(seed, 1);
    loss(&rec, &mut ctx, batch, lambda).unwrap().terms.total
}

/// Largest relative disagreement between analytic and finite-difference
/// gradients over `coords` sampled coordinates of every parameter.
pub fn max_fd_error(
    model: &RecModel,
    store: &RatingsStore,
    protos: &PrototypeSet,
    batch: &[Triple],
    lambda: f64,
    seed: u64,
    coords: usize,
) -> f64 {
    let analytic = {
        let rec = Rec::new(model, store, protos).unwrap();
        let mut ctx = rec.context(seed, 1);
        let bl = loss(&rec, &mut ctx, batch, lambda).unwrap();
        ctx.graph.backward(bl.node).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for p in 0..model.params.len() {
        let id = ParamId(p);
        let len = model.params.get(id).len();
        for _ in 0..coords.min(len) {
            let k = rng.gen_range(0..len);
            let a = analytic.get(id).data()[k];
            // A ReLU kink inside the stencil spoils the central difference;
            // the backpropagated value then matches the one-sided slope on
            // the smooth side. Round-off dominates at the smallest step.
            let f = |delta: f64| {
                let mut shifted = model.clone();
                shifted.params.get_mut(id).data_mut()[k] += delta;
                loss_value(&shifted, store, protos, batch, lambda, seed)
            };
            let base = f(0.0);
            let rel = |fd: f64| (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            let err = [1e-5, 1e-6, 1e-7]
                .iter()
                .flat_map(|&h| {
                    let (up, down) = (f(h), f(-h));
                    [rel((up - down) / (2.0 * h)), rel((up - base) / h), rel((base - down) / h)]
                })
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(err);
        }
    }
    worst
}
