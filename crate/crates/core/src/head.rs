//! Feature-reduction MLP, causal anomaly scorer, top-k bag pooling and the
//! MIL classification loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{uniform_init, Bound, Graph, Padding, ParamSet, Tensor, Var};
use crate::scalar::Scalar;

pub const CONV1_W: &str = "head.conv1.weight";
pub const CONV1_B: &str = "head.conv1.bias";
pub const CONV2_W: &str = "head.conv2.weight";
pub const CONV2_B: &str = "head.conv2.bias";
pub const CLS_W: &str = "head.cls.weight";
pub const CLS_B: &str = "head.cls.bias";

/// Lower bound applied to the arguments of both logarithms in the BCE.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Width of `X^e`; must match the prompt dimension when alignment is on.
    pub hidden1: usize,
    pub hidden2: usize,
    /// Causal classifier kernel `Δt`.
    pub kernel: usize,
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden1: 512,
            hidden2: 300,
            kernel: 9,
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `-[y·log p + (1-y)·log(1-p)]`.
    Bce,
    /// Only the `-y·log p` term.
    PosOnly,
}

pub fn init_params<S: Scalar, R: Rng + ?Sized>(
    cfg: &HeadConfig,
    d: usize,
    rng: &mut R,
    params: &mut ParamSet<S>,
) {
    params.insert(CONV1_W, uniform_init(&[1, d, cfg.hidden1], d, rng));
    params.insert(CONV1_B, Tensor::zeros(&[cfg.hidden1]));
    params.insert(CONV2_W, uniform_init(&[1, cfg.hidden1, cfg.hidden2], cfg.hidden1, rng));
    params.insert(CONV2_B, Tensor::zeros(&[cfg.hidden2]));
    params.insert(
        CLS_W,
        uniform_init(&[cfg.kernel, cfg.hidden2, 1], cfg.kernel * cfg.hidden2, rng),
    );
    params.insert(CLS_B, Tensor::zeros(&[1]));
}

fn conv_block<S: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    x: Var,
    w: Var,
    b: Var,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let c = g.conv1d(x, w, Padding::Same)?;
    let c = g.add_bias(c, b)?;
    let a = g.gelu(c)?;
    g.dropout(a, rate, training, rng)
}

/// Returns `(X^e, X^s)`; each layer is `dropout(gelu(conv1d(·)))`.
pub fn mlp_forward<S: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    xc: Var,
    p: &Bound,
    cfg: &HeadConfig,
    training: bool,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let xe = conv_block(g, xc, p.var(CONV1_W)?, p.var(CONV1_B)?, cfg.dropout, training, rng)?;
    let xs = conv_block(g, xe, p.var(CONV2_W)?, p.var(CONV2_B)?, cfg.dropout, training, rng)?;
    Ok((xe, xs))
}

/// Snippet scores `σ(f_t(X^s))` as a length-`T` vector.
pub fn score<S: Scalar>(g: &mut Graph<S>, xs: Var, p: &Bound) -> Result<Var> {
    let logits = g.conv1d(xs, p.var(CLS_W)?, Padding::Causal)?;
    let logits = g.add_bias(logits, p.var(CLS_B)?)?;
    let s = g.sigmoid(logits)?;
    let len = g.value(s).rows();
    g.reshape(s, &[len])
}

/// `⌊T/16⌋ + 1` for abnormal bags, 1 for normal ones.
pub fn topk_count(len: usize, label: u8) -> usize {
    if label == 1 {
        len / 16 + 1
    } else {
        1
    }
}

/// Indices of the `k` largest scores; ties go to the lower index.
pub fn topk_indices<S: Scalar>(scores: &[S], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k.min(scores.len()));
    idx
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BagPrediction<S> {
    pub p: S,
    pub k: usize,
    pub y: u8,
}

/// Video-level prediction: mean of the top-k scores. Returns the graph node
/// and the plain prediction.
pub fn topk_pool<S: Scalar>(g: &mut Graph<S>, s: Var, y: u8) -> Result<(Var, BagPrediction<S>)> {
    let len = g.value(s).len();
    if len == 0 {
        return Err(Error::InvalidArgument("empty score sequence".into()));
    }
    let k = topk_count(len, y);
    let idx = topk_indices(g.value(s).data(), k);
    let top = g.gather(s, idx)?;
    let p = g.mean(top)?;
    let pv = g.value(p).item();
    Ok((p, BagPrediction { p: pv, k, y }))
}

/// Plain top-k pooling on a score slice.
pub fn topk_mean<S: Scalar>(scores: &[S], y: u8) -> S {
    let k = topk_count(scores.len(), y);
    let idx = topk_indices(scores, k);
    idx.iter().map(|&i| scores[i]).sum::<S>() / S::lit(idx.len() as f64)
}

/// Batch-mean BCE over bag probabilities.
pub fn mil_loss<S: Scalar>(g: &mut Graph<S>, bags: &[(Var, u8)], mode: LossMode) -> Result<Var> {
    if bags.is_empty() {
        return Err(Error::EmptyBatch("mil_loss"));
    }
    let eps = S::lit(PROB_EPS);
    let mut terms = Vec::with_capacity(bags.len());
    for &(p, y) in bags {
        let term = if y == 1 {
            let c = g.clamp(p, eps, S::one())?;
            g.log(c)?
        } else {
            match mode {
                LossMode::Bce => {
                    let q = g.affine(p, -S::one(), S::one())?;
                    let c = g.clamp(q, eps, S::one())?;
                    g.log(c)?
                }
                LossMode::PosOnly => {
                    // contributes nothing but keeps the batch mean over B bags
                    g.scale(p, S::zero())?
                }
            }
        };
        terms.push(term);
    }
    let stacked = g.concat_rows(&terms)?;
    let mean = g.mean(stacked)?;
    g.scale(mean, -S::one())
}

/// Closed-form per-bag BCE used for reporting and checks.
pub fn bce(p: f64, y: u8) -> f64 {
    if y == 1 {
        -p.max(PROB_EPS).ln()
    } else {
        -(1.0 - p).max(PROB_EPS).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::derive_rng;

    fn bag_loss(p: f64, y: u8) -> f64 {
        let mut g = Graph::<f64>::new();
        let pv = g.constant(Tensor::scalar(p));
        let l = mil_loss(&mut g, &[(pv, y)], LossMode::Bce).unwrap();
        g.value(l).item()
    }

    #[test]
    fn bce_spot_values() {
        assert_eq!(bag_loss(1.0, 1), 0.0);
        assert_eq!(bag_loss(0.0, 0), 0.0);
        assert!((bag_loss(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bag_loss(0.0, 1).is_finite());
    }

    #[test]
    fn empty_batch_errors() {
        let mut g = Graph::<f64>::new();
        assert!(mil_loss(&mut g, &[], LossMode::Bce).is_err());
    }

    #[test]
    fn pos_only_ignores_normals() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(0.5));
        let b = g.constant(Tensor::scalar(0.9));
        let l = mil_loss(&mut g, &[(a, 1), (b, 0)], LossMode::PosOnly).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_count(32, 1), 3);
        assert_eq!(topk_count(15, 1), 1);
        assert_eq!(topk_count(16, 1), 2);
        assert_eq!(topk_count(100, 0), 1);
        assert_eq!(topk_mean(&[0.1f64, 0.8, 0.3], 0), 0.8);
        let mut s = vec![0.1f64; 16];
        s[3] = 0.9;
        s[10] = 0.5;
        assert!((topk_mean(&s, 1) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_score_half() {
        let cfg = HeadConfig {
            hidden1: 8,
            hidden2: 6,
            kernel: 3,
            dropout: 0.1,
        };
        let mut p = ParamSet::<f64>::new();
        init_params(&cfg, 4, &mut derive_rng(0, 0, 0), &mut p);
        *p.get_mut(CLS_W).unwrap() = Tensor::zeros(&[3, 6, 1]);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let xs = g.constant(Tensor::full(&[5, 6], 0.3));
        let s = score(&mut g, xs, &b).unwrap();
        assert_eq!(g.value(s).data(), &[0.5; 5]);
    }

    #[test]
    fn zero_input_zero_mlp_output() {
        let cfg = HeadConfig {
            hidden1: 8,
            hidden2: 6,
            kernel: 3,
            dropout: 0.1,
        };
        let mut p = ParamSet::<f64>::new();
        init_params(&cfg, 4, &mut derive_rng(0, 0, 0), &mut p);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[5, 4]));
        let mut rng = derive_rng(1, 0, 0);
        let (xe, xs) = mlp_forward(&mut g, x, &b, &cfg, true, &mut rng).unwrap();
        assert!(g.value(xe).data().iter().all(|&v| v == 0.0));
        assert!(g.value(xs).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let cfg = HeadConfig {
            hidden1: 8,
            hidden2: 6,
            kernel: 3,
            dropout: 0.5,
        };
        let mut p = ParamSet::<f64>::new();
        init_params(&cfg, 4, &mut derive_rng(0, 0, 0), &mut p);
        let run = |seed| {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let x = g.constant(Tensor::full(&[3, 4], 0.7));
            let (_, xs) = mlp_forward(&mut g, x, &b, &cfg, false, &mut derive_rng(seed, 0, 0)).unwrap();
            g.value(xs).clone()
        };
        assert_eq!(run(1), run(2));
    }
}
