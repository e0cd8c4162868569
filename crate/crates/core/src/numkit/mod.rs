//! Dense tensors, reverse-mode autodiff, Adam and the learning-rate schedule.

mod adam;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState, LrSchedule};
pub use graph::{apply_unary, dpe_matrix, Gradients, Graph, Padding, Unary, Var};
pub use params::{uniform_init, Bound, ParamSet};
pub use tensor::{matmul, matmul_nt, matmul_tn, softmax_rows, Tensor};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, purpose, counter)`.
///
/// Every random draw in training is keyed this way, so any step can be
/// replayed without carrying generator state.
pub fn derive_rng(seed: u64, purpose: u64, counter: u64) -> ChaCha8Rng {
    let key = splitmix(seed ^ splitmix(purpose ^ splitmix(counter)));
    ChaCha8Rng::seed_from_u64(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::from_rows(&[[1.0, -2.0], [3.0, 0.5]]));
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn squared_norm_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::vector(vec![1.0, 2.0]));
        let q = g.param(Tensor::vector(vec![3.0]));
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(q).is_none());
        assert_eq!(grads.get_or_zero(&g, q).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn pointwise_examples() {
        for (kind, x, y) in [
            (Unary::Sigmoid, 0.0, 0.5),
            (Unary::Gelu, 0.0, 0.0),
            (Unary::SqrtSigned, -4.0, -2.0),
            (Unary::Abs, -3.0, 3.0),
            (Unary::Exp, 0.0, 1.0),
        ] {
            assert_eq!(apply_unary::<f64>(kind, x), y, "{kind:?}");
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]));
        let k = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        for pad in [Padding::Same, Padding::Causal, Padding::Valid] {
            let y = g.conv1d(x, k, pad).unwrap();
            assert_eq!(g.value(y), g.value(x));
        }
    }

    #[test]
    fn causal_impulse_response() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![6, 1], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let k = g.constant(Tensor::full(&[3, 1, 1], 1.0));
        let y = g.conv1d(x, k, Padding::Causal).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn valid_conv_rejects_long_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 1]));
        let k = g.constant(Tensor::zeros(&[3, 1, 1]));
        assert!(g.conv1d(x, k, Padding::Valid).is_err());
        assert!(g.conv1d(x, k, Padding::Causal).is_ok());
    }

    #[test]
    fn dropout_modes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[100_000], 1.0));
        let mut rng = derive_rng(7, 0, 0);
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.1, false, &mut rng).unwrap(), x);
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        let v = g.value(y);
        let survivors = v.data().iter().filter(|&&e| e != 0.0).count() as f64 / v.len() as f64;
        assert!((survivors - 0.5).abs() < 0.01, "{survivors}");
        assert!(v.data().iter().all(|&e| e == 0.0 || e == 2.0));
    }

    #[test]
    fn derive_rng_is_keyed() {
        let a: u64 = derive_rng(1, 2, 3).random();
        let b: u64 = derive_rng(1, 2, 3).random();
        let c: u64 = derive_rng(1, 2, 4).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
