use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use super::glorot_uniform;
use crate::error::{Error, Result};

/// Width of both hidden layers of a generator net.
pub const HIDDEN_WIDTH: usize = 200;

/// A 3-layer feed-forward net: two ReLU hidden layers and a linear output.
///
/// Generator nets take `[embedding ; rating feature]` (width `K + 1`) and
/// produce an embedding of width `K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    input: usize,
    output: usize,
}

impl Mlp {
    /// Registers the layer tensors in `params`: Glorot-uniform weights, zero biases.
    pub fn register<R: Rng>(
        params: &mut ParamStore,
        name: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs an input and an output width");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let weight = params.add(format!("{name}.w{l}"), glorot_uniform(w[0], w[1], rng));
                let bias = params.add(format!("{name}.b{l}"), Tensor::zeros(1, w[1]));
                (weight, bias)
            })
            .collect();
        Mlp {
            layers,
            input: widths[0],
            output: widths[widths.len() - 1],
        }
    }

    /// The generator shape for latent dimension `k`.
    pub fn generator<R: Rng>(params: &mut ParamStore, name: &str, k: usize, rng: &mut R) -> Self {
        Self::register(params, name, &[k + 1, HIDDEN_WIDTH, HIDDEN_WIDTH, k], rng)
    }

    /// `(K+1)·200 + 200 + 200·200 + 200 + 200·K + K`.
    pub fn generator_param_count(k: usize) -> usize {
        (k + 1) * HIDDEN_WIDTH + HIDDEN_WIDTH + HIDDEN_WIDTH * HIDDEN_WIDTH + HIDDEN_WIDTH
            + HIDDEN_WIDTH * k
            + k
    }

    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.input
    }

    pub fn output_width(&self) -> usize {
        self.output
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Applies the net to every row of `x` (`E × input`), giving `E × output`.
    pub fn apply(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let wn = g.param(w);
            let bn = g.param(b);
            let z = g.matmul(h, wn)?;
            let z = g.add_row(z, bn)?;
            h = if l < last { g.relu(z)? } else { z };
        }
        Ok(h)
    }

    /// `f(rating, embedding)` for a single `1 × K` embedding.
    pub fn apply_pair(&self, g: &mut Graph<'_>, rating: f64, embedding: NodeId) -> Result<NodeId> {
        let (rows, cols) = g.shape(embedding);
        if rows != 1 || cols + 1 != self.input {
            return Err(Error::Shape {
                op: "mlp_apply",
                lhs: (rows, cols),
                rhs: (1, self.input - 1),
            });
        }
        let r = g.constant(Tensor::scalar(rating))?;
        let x = g.concat_cols(embedding, r)?;
        self.apply(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_outputs_zero() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::generator(&mut ps, "f", 4, &mut rng);
        for t in ps.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut g = Graph::new(&ps);
        let e = g.constant(Tensor::row_vector(vec![1.0, -2.0, 3.0, 0.5])).unwrap();
        let y = net.apply_pair(&mut g, 4.0, e).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn hand_built_passthrough() {
        // Route each input coordinate through +x and -x ReLU channels, then
        // recombine: relu(x) - relu(-x) = x.
        let k = 3;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::register(&mut ps, "id", &[k + 1, 2 * k, 2 * k, k], &mut rng);
        for t in ps.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let [(w0, _), (w1, _), (w2, _)] = net.layers() else { unreachable!() };
        for c in 0..k {
            ps.get_mut(*w0).row_mut(c)[2 * c] = 1.0;
            ps.get_mut(*w0).row_mut(c)[2 * c + 1] = -1.0;
            ps.get_mut(*w1).row_mut(2 * c)[2 * c] = 1.0;
            ps.get_mut(*w1).row_mut(2 * c + 1)[2 * c + 1] = 1.0;
            ps.get_mut(*w2).row_mut(2 * c)[c] = 1.0;
            ps.get_mut(*w2).row_mut(2 * c + 1)[c] = -1.0;
        }
        let mut g = Graph::new(&ps);
        let e = g.constant(Tensor::row_vector(vec![0.7, -1.25, 3.0])).unwrap();
        let y = net.apply_pair(&mut g, 5.0, e).unwrap();
        assert_eq!(g.value(y).data(), &[0.7, -1.25, 3.0]);
    }

    #[test]
    fn seeded_output_is_bit_identical() {
        let run = || {
            let mut ps = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let net = Mlp::generator(&mut ps, "f", 6, &mut rng);
            let mut g = Graph::new(&ps);
            let e = g.constant(Tensor::row_vector(vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6])).unwrap();
            let y = net.apply_pair(&mut g, 0.25, e).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn init_is_bounded_with_zero_biases() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::generator(&mut ps, "f", 10, &mut rng);
        for &(w, b) in net.layers() {
            let (fan_in, fan_out) = ps.get(w).shape();
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            assert!(ps.get(w).max_abs() <= s);
            assert!(ps.get(b).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn param_count_formula_matches_allocation() {
        for k in [1, 8, 100] {
            let mut ps = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            Mlp::generator(&mut ps, "f", k, &mut rng);
            assert_eq!(ps.num_values(), Mlp::generator_param_count(k));
        }
    }

    #[test]
    fn wrong_embedding_width_is_a_shape_error() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::generator(&mut ps, "f", 4, &mut rng);
        let mut g = Graph::new(&ps);
        let e = g.constant(Tensor::row_vector(vec![1.0; 3])).unwrap();
        assert!(matches!(
            net.apply_pair(&mut g, 1.0, e),
            Err(Error::Shape { op: "mlp_apply", .. })
        ));
    }
}
