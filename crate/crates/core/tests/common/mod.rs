#![allow(dead_code)]

use std::path::Path;

use tcape_core::featio::Manifest;
use tcape_core::numkit::{ParamSet, Tensor};
use tcape_core::prompt::PromptBank;
use tcape_core::trainer::{generate_synthetic, Preset, SyntheticSpec, TrainConfig, Trainer};

/// Gradients smaller than this are compared in absolute terms. The key
/// bias, for one, has an exactly zero gradient since a per-row constant
/// cancels in the softmax.
pub const GRAD_FLOOR: f64 = 1e-5;

/// `‖a − n‖ / max(‖a‖, ‖n‖, GRAD_FLOOR)`.
pub fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / norm(a).max(norm(n)).max(GRAD_FLOOR)
}

/// Richardson-extrapolated central differences of `f` at every entry of every tensor in `params`
/// (or the listed entries when `entries` is given).
pub fn numeric_grads(
    params: &ParamSet<f64>,
    h: f64,
    entries: Option<&dyn Fn(&str, usize) -> Vec<usize>>,
    f: &dyn Fn(&ParamSet<f64>) -> f64,
) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        if params.is_frozen(&name) {
            continue;
        }
        let len = params.get(&name).unwrap().len();
        let idx = match entries {
            Some(pick) => pick(&name, len),
            None => (0..len).collect(),
        };
        let mut g = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut p = params.clone();
            let orig = p.get(&name).unwrap().data()[i];
            let mut central = |step: f64| {
                p.get_mut(&name).unwrap().data_mut()[i] = orig + step;
                let up = f(&p);
                p.get_mut(&name).unwrap().data_mut()[i] = orig - step;
                let down = f(&p);
                (up - down) / (2.0 * step)
            };
            // Richardson step cancels the h² term of the central difference
            let (fine, coarse) = (central(h), central(2.0 * h));
            g.push((4.0 * fine - coarse) / 3.0);
        }
        out.push((name, idx, g));
    }
    out
}

pub fn pick(t: &Tensor<f64>, idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| t.data()[i]).collect()
}

/// Generates a synthetic dataset and loads its manifest and prompts.
pub fn synthetic(spec: &SyntheticSpec, dir: &Path) -> (Manifest, PromptBank) {
    let out = generate_synthetic(spec, dir).unwrap();
    (Manifest::load(&out.manifest).unwrap(), PromptBank::load(&out.prompts).unwrap())
}

/// Narrow config for exhaustive gradient checks.
pub fn tiny_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::preset(Preset::Synthetic);
    c.seed = seed;
    c.batch_size = 2;
    c.epochs = 2;
    c.tca.hidden = 3;
    c.tca.window = 3;
    c.head.hidden1 = 5;
    c.head.hidden2 = 4;
    c.head.kernel = 3;
    c
}

pub fn tiny_spec(seed: u64, dim: usize, prompt_dim: usize) -> SyntheticSpec {
    SyntheticSpec {
        classes: 1,
        train_videos: 2,
        test_videos: 0,
        dim,
        min_len: 18,
        max_len: 24,
        segments: (1, 1),
        segment_len: (4, 8),
        magnitude: 2.0,
        prompt_dim,
        seed,
        ..Default::default()
    }
}

pub fn tiny_trainer(seed: u64, dir: &Path) -> Trainer<f64> {
    let cfg = tiny_config(seed);
    let (m, bank) = synthetic(&tiny_spec(seed, 6, cfg.head.hidden1), dir);
    Trainer::new(cfg, &m, Some(&bank)).unwrap()
}
