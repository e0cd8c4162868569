//! Prompt-enhanced learning: foreground/background context separation and
//! the cross-modal alignment loss against frozen class prompts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Guards the denominator of the context-separation weights.
pub const CONTEXT_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PelConfig {
    /// Score scaling `μ`.
    pub mu: f64,
    /// Softmax temperature `τ`.
    pub tau: f64,
    /// When false, foreground and background are both the plain mean of `X^e`.
    pub separation: bool,
    /// Block gradients from the alignment loss into the snippet scores.
    pub detach_scores: bool,
}

impl Default for PelConfig {
    fn default() -> Self {
        PelConfig {
            mu: 10.0,
            tau: 0.09,
            separation: true,
            detach_scores: false,
        }
    }
}

/// Which prompt a visual vector is pulled towards.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Foreground of an abnormal video: its own class.
    AbnormalFg,
    /// Background of an abnormal video: the normal prompt.
    AbnormalBg,
    /// Foreground of a normal video: the normal prompt.
    NormalFg,
}

/// Attention weights `(exp(μ·s)-1) / (Σ(exp(μ·s)-1) + ε)` over a length-`T`
/// score vector; `complement` uses `1-s`. Falls back to uniform weights when
/// every activation is zero.
pub fn context_weights<S: Scalar>(g: &mut Graph<S>, s: Var, mu: f64, complement: bool) -> Result<Var> {
    if mu <= 0.0 {
        return Err(Error::InvalidArgument(format!("μ must be positive, got {mu}")));
    }
    let base = if complement {
        g.affine(s, -S::one(), S::one())?
    } else {
        s
    };
    let scaled = g.scale(base, S::lit(mu))?;
    let e = g.exp(scaled)?;
    let act = g.affine(e, S::one(), -S::one())?;
    let total = g.sum(act)?;
    if g.value(total).item() <= S::zero() {
        let len = g.value(s).len();
        log::warn!("context separation: all activations are zero, using uniform weights");
        return Ok(g.constant(Tensor::full(&[len], S::one() / S::lit(len as f64))));
    }
    let denom = g.affine(total, S::one(), S::lit(CONTEXT_EPS))?;
    g.div_by(act, denom)
}

/// Weighted sum `wᵀ·X` of a length-`T` weight vector and a `T×D` matrix, as `1×D`.
pub fn pool<S: Scalar>(g: &mut Graph<S>, weights: Var, xe: Var) -> Result<Var> {
    let len = g.value(weights).len();
    let row = g.reshape(weights, &[1, len])?;
    g.matmul(row, xe)
}

/// Returns `(V^fg, V^bg)`, each `1×D`.
pub fn separate_context<S: Scalar>(g: &mut Graph<S>, xe: Var, s: Var, cfg: &PelConfig) -> Result<(Var, Var)> {
    let len = g.value(xe).rows();
    if g.value(s).len() != len {
        return Err(Error::ShapeMismatch {
            op: "separate_context",
            lhs: g.value(xe).dims().to_vec(),
            rhs: g.value(s).dims().to_vec(),
        });
    }
    if !cfg.separation {
        let w = g.constant(Tensor::full(&[len], S::one() / S::lit(len as f64)));
        let v = pool(g, w, xe)?;
        return Ok((v, v));
    }
    let s = if cfg.detach_scores { g.detach(s) } else { s };
    let wf = context_weights(g, s, cfg.mu, false)?;
    let wb = context_weights(g, s, cfg.mu, true)?;
    Ok((pool(g, wf, xe)?, pool(g, wb, xe)?))
}

/// Log of the visual-to-text distribution: `log softmax(cos(v, T_k)/τ)` for
/// each row of `v[n×D]` against `bank[(C+1)×D]`.
pub fn v2t_log_probs<S: Scalar>(g: &mut Graph<S>, v: Var, bank: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("τ must be positive, got {tau}")));
    }
    let vt = g.value(v);
    if (0..vt.rows()).any(|r| vt.row(r).iter().all(|&e| e == S::zero())) {
        return Err(Error::ZeroNorm);
    }
    let vn = g.l2_normalize_rows(v)?;
    let tn = g.l2_normalize_rows(bank)?;
    let cos = g.matmul_nt(vn, tn)?;
    let logits = g.scale(cos, S::lit(1.0 / tau))?;
    g.log_softmax_rows(logits)
}

/// Plain probabilities `p^{v2t}` for a single visual vector.
pub fn v2t_distribution<S: Scalar>(v: &[S], bank: &Tensor<S>, tau: f64) -> Result<Vec<S>> {
    let mut g = Graph::new();
    let vv = g.constant(Tensor::new(vec![1, v.len()], v.to_vec())?);
    let b = g.constant(bank.clone());
    let lp = v2t_log_probs(&mut g, vv, b, tau)?;
    Ok(g.value(lp).data().iter().map(|x| x.exp()).collect())
}

/// Mean of `-log p_positive` over `(visual row, positive class index)` items.
pub fn alignment_loss<S: Scalar>(
    g: &mut Graph<S>,
    items: &[(Var, usize)],
    bank: Var,
    tau: f64,
) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::EmptyBatch("alignment_loss"));
    }
    let classes = g.value(bank).rows();
    if let Some(&(_, bad)) = items.iter().find(|(_, c)| *c >= classes) {
        return Err(Error::InvalidArgument(format!(
            "positive class {bad} outside bank of {classes}"
        )));
    }
    let rows: Vec<Var> = items.iter().map(|&(v, _)| v).collect();
    let v = g.concat_rows(&rows)?;
    let lp = v2t_log_probs(g, v, bank, tau)?;
    let idx: Vec<usize> = items
        .iter()
        .enumerate()
        .map(|(i, &(_, c))| i * classes + c)
        .collect();
    let picked = g.gather(lp, idx)?;
    let mean = g.mean(picked)?;
    g.scale(mean, -S::one())
}

/// `L = L_ce + λ·L_kd`.
pub fn total_loss<S: Scalar>(g: &mut Graph<S>, ce: Var, kd: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("λ must be >= 0, got {lambda}")));
    }
    let weighted = g.scale(kd, S::lit(lambda))?;
    g.add(ce, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_score_selects_row() {
        let mut g = Graph::<f64>::new();
        let xe = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, -4.0]]));
        let s = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let cfg = PelConfig {
            mu: 1.0,
            ..Default::default()
        };
        let wf = context_weights(&mut g, s, 1.0, false).unwrap();
        assert_eq!(g.value(wf).data()[0], 0.0);
        let (fg, _) = separate_context(&mut g, xe, s, &cfg).unwrap();
        let r1 = [3.0, -4.0];
        for (a, b) in g.value(fg).data().iter().zip(r1) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_scores_are_uniform() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::vector(vec![0.3; 5]));
        let w = context_weights(&mut g, s, 10.0, false).unwrap();
        for &v in g.value(w).data() {
            assert!((v - 0.2).abs() < 1e-9);
        }
    }

    #[test]
    fn all_zero_scores_fall_back() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::vector(vec![0.0; 4]));
        let w = context_weights(&mut g, s, 10.0, false).unwrap();
        assert_eq!(g.value(w).data(), &[0.25; 4]);
    }

    #[test]
    fn mean_pooling_when_separation_off() {
        let mut g = Graph::<f64>::new();
        let xe = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 6.0]]));
        let s = g.constant(Tensor::vector(vec![0.9, 0.1]));
        let cfg = PelConfig {
            separation: false,
            ..Default::default()
        };
        let (fg, bg) = separate_context(&mut g, xe, s, &cfg).unwrap();
        assert_eq!(g.value(fg).data(), &[2.0, 4.0]);
        assert_eq!(fg, bg);
    }

    #[test]
    fn identical_prompts_give_uniform() {
        let bank = Tensor::<f64>::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        let p = v2t_distribution(&[0.3, -0.7], &bank, 0.09).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn low_temperature_concentrates() {
        let bank = Tensor::<f64>::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let p = v2t_distribution(&[0.0, 1.0, 0.0], &bank, 0.01).unwrap();
        assert!(p[1] > 0.99);
    }

    #[test]
    fn zero_vector_rejected() {
        let bank = Tensor::<f64>::from_rows(&[[1.0, 0.0]]);
        assert!(matches!(v2t_distribution(&[0.0, 0.0], &bank, 0.1), Err(Error::ZeroNorm)));
    }

    #[test]
    fn loss_closed_forms() {
        let mut g = Graph::<f64>::new();
        let bank = g.constant(Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]));
        let v = g.constant(Tensor::from_rows(&[[0.5, 0.5]]));
        let l = alignment_loss(&mut g, &[(v, 2)], bank, 0.2).unwrap();
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);
        assert!(alignment_loss(&mut g, &[], bank, 0.2).is_err());
        assert!(alignment_loss(&mut g, &[(v, 3)], bank, 0.2).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::<f64>::new();
        let ce = g.constant(Tensor::scalar(0.5));
        let kd = g.constant(Tensor::scalar(0.25));
        let l = total_loss(&mut g, ce, kd, 2.0).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let l = total_loss(&mut g, ce, kd, 0.0).unwrap();
        assert_eq!(g.value(l).item(), 0.5);
    }
}
