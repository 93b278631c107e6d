mod common;

use common::{max_fd_error, model, random_protos, store_from};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rec::autodiff::{Graph, Mlp, NodeId, ParamId, ParamStore, Tensor};
use rec::data::generate_synthetic;
use rec::engine::EngineConfig;
use rec::store::RatingsStore;

/// Worst relative error over every coordinate; each coordinate takes the
/// best agreement over `steps` so that a single ReLU kink inside one stencil
/// is not mistaken for a wrong derivative.
fn fd_check(params: &ParamStore, steps: &[f64], f: &dyn Fn(&mut Graph<'_>) -> NodeId) -> f64 {
    let analytic = {
        let mut g = Graph::new(params);
        let out = f(&mut g);
        g.backward(out).unwrap()
    };
    let eval = |p: &ParamStore| {
        let mut g = Graph::new(p);
        let out = f(&mut g);
        g.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for id in params.ids() {
        for k in 0..params.get(id).len() {
            let a = analytic.get(id).data()[k];
            let err = steps
                .iter()
                .map(|&h| {
                    let mut plus = params.clone();
                    plus.get_mut(id).data_mut()[k] += h;
                    let mut minus = params.clone();
                    minus.get_mut(id).data_mut()[k] -= h;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6)
                })
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(err);
        }
    }
    worst
}

fn tensor(rows: usize, cols: usize, vals: &[f64]) -> Tensor {
    Tensor::new(rows, cols, vals[..rows * cols].to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn composite_ops_match_finite_differences(
        vals in prop::collection::vec(-2.0f64..2.0, 64),
        shift in 0.05f64..0.5,
    ) {
        let mut params = ParamStore::new();
        let a = params.add("a", tensor(3, 4, &vals));
        let b = params.add("b", tensor(4, 2, &vals[12..]));
        let c = params.add("c", tensor(1, 2, &vals[20..]));
        let d = params.add("d", tensor(3, 2, &vals[30..]));
        let f = |g: &mut Graph<'_>| {
            let (a, b, c, d) = (g.param(a), g.param(b), g.param(c), g.param(d));
            let ab = g.matmul(a, b).unwrap();
            let z = g.add_row(ab, c).unwrap();
            let z = g.sub(z, d).unwrap();
            let r = g.relu(z).unwrap();
            let lin = g.scale(z, shift).unwrap();
            let mix = g.add(r, lin).unwrap();
            let row = g.row(a, 1).unwrap();
            let rows = g.stack_rows(&[row, row]).unwrap();
            let wide = g.concat_cols(mix, d).unwrap();
            let m = g.mean_rows(wide).unwrap();
            let nt = g.matmul_nt(rows, rows).unwrap();
            let s1 = g.square(m).unwrap();
            let s1 = g.sum(s1).unwrap();
            let s2 = g.sum(nt).unwrap();
            g.add(s1, s2).unwrap()
        };
        let err = fd_check(&params, &[1e-5, 1e-7], &f);
        prop_assert!(err < 1e-4, "relative error {}", err);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences(seed in 0u64..1000, rows in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = Mlp::register(&mut params, "net", &[3, 6, 5, 2], &mut rng);
        for &(_, b) in net.layers() {
            for v in params.get_mut(b).data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let x: Vec<f64> = (0..rows * 3).map(|k| ((k as f64 + seed as f64) * 0.7).sin()).collect();
        let x = Tensor::new(rows, 3, x).unwrap();
        let f = |g: &mut Graph<'_>| {
            let xin = g.constant(x.clone()).unwrap();
            let y = net.apply(g, xin).unwrap();
            let y = g.square(y).unwrap();
            g.sum(y).unwrap()
        };
        prop_assert!(fd_check(&params, &[1e-5], &f) < 1e-4);
    }
}

#[test]
fn loss_gradient_through_recursion_matches_finite_differences() {
    for seed in 0..4u64 {
        let d = generate_synthetic(20, 20, 2, 0.3, 0.1, seed).unwrap();
        let store = RatingsStore::build(&d);
        let protos = random_protos(&store, seed);
        for md in [1, 2] {
            let cfg = EngineConfig {
                max_depth: md,
                evidence_limit: Some(6),
                ..EngineConfig::standard()
            };
            let m = model(3, &store, &protos, cfg, seed);
            let batch: Vec<_> = store.triples().iter().step_by(7).take(5).copied().collect();
            let err = max_fd_error(&m, &store, &protos, &batch, 1e-3, seed, 6);
            assert!(err < 1e-3, "seed {seed} md {md}: {err}");
        }
    }
}

#[test]
fn table_gradient_of_a_single_prototype_pair() {
    // d/du (r - u·v)² = -2 (r - u·v) v
    let store = store_from(1, 1, &[(0, 0, 4.0)]);
    let protos = rec::store::PrototypeSet::all(1, 1);
    let m = model(2, &store, &protos, EngineConfig::standard(), 0);
    let rec = rec::engine::Rec::new(&m, &store, &protos).unwrap();
    let mut ctx = rec.context(0, 0);
    let bl = rec::training::loss(&rec, &mut ctx, &[(0, 0, 4.0)], 0.0).unwrap();
    let grads = ctx.graph.backward(bl.node).unwrap();
    let u = m.params.get(m.user_table()).row(0).to_vec();
    let v = m.params.get(m.item_table()).row(0).to_vec();
    let e = 4.0 - (u[0] * v[0] + u[1] * v[1]);
    let gu = grads.get(m.user_table()).row(0);
    for k in 0..2 {
        assert!((gu[k] + 2.0 * e * v[k]).abs() < 1e-12);
    }
    assert!(grads.get(ParamId(2)).data().iter().all(|&x| x == 0.0), "nets are unused");
}
