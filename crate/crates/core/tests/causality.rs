use proptest::prelude::*;
use rand::Rng;
use tcape_core::head::{self, HeadConfig};
use tcape_core::numkit::{derive_rng, Graph, ParamSet, Tensor};

fn scores(params: &ParamSet<f64>, cfg: &HeadConfig, x: &Tensor<f64>) -> Vec<f64> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let xv = g.constant(x.clone());
    let (_, xs) = head::mlp_forward(&mut g, xv, &p, cfg, false, &mut derive_rng(0, 0, 0)).unwrap();
    let s = head::score(&mut g, xs, &p).unwrap();
    g.value(s).data().to_vec()
}

fn check(seed: u64, kernel: usize, len: usize, t: usize) -> Result<(), TestCaseError> {
    let cfg = HeadConfig {
        hidden1: 6,
        hidden2: 5,
        kernel,
        dropout: 0.1,
    };
    let d = 4;
    let mut rng = derive_rng(seed, 12, 0);
    let mut params = ParamSet::<f64>::new();
    head::init_params(&cfg, d, &mut rng, &mut params);
    let x: Vec<f64> = (0..len * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let base = scores(&params, &cfg, &Tensor::from_f64(&[len, d], &x).unwrap());
    let mut y = x.clone();
    for v in &mut y[(t + 1) * d..] {
        *v += rng.random_range(-5.0..5.0);
    }
    let moved = scores(&params, &cfg, &Tensor::from_f64(&[len, d], &y).unwrap());
    for i in 0..=t {
        prop_assert!((base[i] - moved[i]).abs() <= 1e-12, "index {} moved: {} vs {}", i, base[i], moved[i]);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn scores_ignore_the_future_kernel3(seed in any::<u64>(), len in 2usize..40, frac in 0.0f64..1.0) {
        let t = ((len - 1) as f64 * frac) as usize;
        check(seed, 3, len, t.min(len - 2))?;
    }

    #[test]
    fn scores_ignore_the_future_kernel9(seed in any::<u64>(), len in 2usize..40, frac in 0.0f64..1.0) {
        let t = ((len - 1) as f64 * frac) as usize;
        check(seed, 9, len, t.min(len - 2))?;
    }
}
