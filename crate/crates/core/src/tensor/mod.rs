//! Minimal differentiable numerics: arrays, a recording graph with
//! reverse-mode gradients, layers and the Adam optimizer.

mod adam;
mod array;
pub mod gradcheck;
mod graph;
mod layers;
mod params;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use array::Array;
pub use graph::{Grads, Graph, Mode, Var, GROUP_NORM_EPS};
pub use layers::{forward_seq, one_hot, Init, Layer, LayerSpec, LEAKY_SLOPE};
pub use params::{ModelFile, ParamId, ParamRecord, ParamStore, FORMAT_VERSION};

use crate::rng::{self, Rng};

/// Standard-normal array drawn from an explicit stream.
pub fn sample_gaussian(shape: &[usize], rng: &mut Rng) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), rng::normal_vec(rng, n)).expect("shape matches count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn gaussian_draws_are_reproducible_and_standard() {
        let a = sample_gaussian(&[100_000], &mut stream(5, "g"));
        let b = sample_gaussian(&[100_000], &mut stream(5, "g"));
        assert_eq!(a, b);
        let n = a.len() as f64;
        let mean = a.data().iter().sum::<f64>() / n;
        let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((0.97..=1.03).contains(&var), "var {var}");
        assert_eq!(sample_gaussian(&[2, 3, 4], &mut stream(0, "s")).shape(), &[2, 3, 4]);
    }

    #[test]
    fn linear_sum_gradient_is_input_structure() {
        // loss = sum(x · W) → ∂/∂W[i, j] = Σ_b x[b, i]
        let mut store = ParamStore::new();
        let w = store.add("w", Array::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap());
        let b = store.add("b", Array::zeros(&[3]));
        let unused = store.add("unused", Array::full(&[2], 1.0));
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, -1.0]).unwrap());
        let (wv, bv) = (g.param(w), g.param(b));
        let y = g.linear(x, wv, bv).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(w).unwrap().data(), &[4.0, 4.0, 4.0, 1.0, 1.0, 1.0]);
        assert_eq!(grads.param(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert!(grads.param(unused).is_none());
        assert_eq!(grads.param_or_zero(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.tracked_input(Array::zeros(&[3]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn reused_parameter_accumulates() {
        let mut store = ParamStore::new();
        let p = store.add("p", Array::scalar(3.0));
        let mut g = Graph::new(&store, Mode::Eval);
        let a = g.param(p);
        let b = g.param(p);
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(p).unwrap().item(), 6.0);
    }
}
