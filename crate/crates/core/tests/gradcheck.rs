mod common;

use common::{numeric_grads, pick, rel_error, tiny_trainer};
use rand::Rng;
use tcape_core::numkit::{derive_rng, ParamSet};
use tcape_core::tca;

const TOL: f64 = 1e-4;
/// The signed square root has unbounded curvature near zero, so the
/// truncation error needs both a small step and extrapolation.
const STEP: f64 = 1e-6;

/// Moves the DPE offset off zero. At `β = 0` the diagonal entry
/// `exp(-|β|)` has a kink and only the symmetric derivative exists.
fn generic_point(p: &ParamSet<f64>, seed: u64) -> ParamSet<f64> {
    let mut p = p.clone();
    let mut rng = derive_rng(seed, 99, 0);
    p.get_mut(tca::GAMMA).unwrap().data_mut()[0] = rng.random_range(0.5..1.5);
    p.get_mut(tca::BETA).unwrap().data_mut()[0] = rng.random_range(0.05..0.5) * if rng.random::<bool>() { 1.0 } else { -1.0 };
    p
}

fn check_full_model(seed: u64) {
    let dir = tempfile::tempdir().unwrap();
    let t = tiny_trainer(seed, dir.path());
    let batch = [0, 1];
    let params = generic_point(&t.model.params, seed);
    let analytic = t.gradients(&params, &batch, 7).unwrap().grads;
    let numeric = numeric_grads(&params, STEP, None, &|p| t.gradients(p, &batch, 7).unwrap().loss);
    for (name, idx, n) in numeric {
        let a = pick(analytic.get(&name).unwrap(), &idx);
        let e = rel_error(&a, &n);
        assert!(e < TOL, "seed {seed} {name}: rel err {e:.3e}\nanalytic {a:?}\nnumeric  {n:?}");
    }
}

#[test]
fn full_model_gradients() {
    for seed in 0..40 {
        check_full_model(seed);
    }
}

