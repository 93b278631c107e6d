//! Dense tensors, a reverse-mode tape, the generator MLPs and Adam.

mod adam;
mod graph;
mod mlp;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Graph, NodeId};
pub use mlp::{Mlp, HIDDEN_WIDTH};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{dot, Tensor};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Glorot-uniform `fan_in × fan_out` weights.
pub fn glorot_uniform<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-s, s);
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::new(fan_in, fan_out, data).expect("sized by construction")
}

/// `rows × cols` entries drawn from `N(0, sd²)`.
pub fn normal_table<R: Rng>(rows: usize, cols: usize, sd: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, sd).expect("sd is finite and positive");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(rows, cols, data).expect("sized by construction")
}
