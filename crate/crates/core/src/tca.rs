//! Temporal context aggregation.
//!
//! One similarity matrix `M = f_q(X)·f_k(X)ᵀ` (plus the optional dynamic
//! position encoding) feeds both a global attention branch and a local
//! branch that masks `M` to a window around the diagonal. The two context
//! features are blended with a learnable weight `α`, normalised, projected
//! back to the input width and added residually before a layer norm.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numkit::{uniform_init, Bound, Graph, ParamSet, Tensor, Unary, Var};
use crate::scalar::Scalar;

pub const QUERY_W: &str = "tca.query.weight";
pub const QUERY_B: &str = "tca.query.bias";
pub const KEY_W: &str = "tca.key.weight";
pub const KEY_B: &str = "tca.key.bias";
pub const VALUE_W: &str = "tca.value.weight";
pub const VALUE_B: &str = "tca.value.bias";
pub const OUT_W: &str = "tca.out.weight";
pub const OUT_B: &str = "tca.out.bias";
pub const ALPHA: &str = "tca.alpha";
pub const GAMMA: &str = "tca.gamma";
pub const BETA: &str = "tca.beta";
pub const LN_SCALE: &str = "tca.ln.scale";
pub const LN_SHIFT: &str = "tca.ln.shift";

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "power")]
    Power,
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "power+l2")]
    PowerL2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// `α` is trained.
    Learnable,
    /// `α` stays at its initial value.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TcaConfig {
    /// Local window size `w` (snippets).
    pub window: usize,
    pub norm: NormMode,
    pub dpe: bool,
    /// Query/key width `D_h`.
    pub hidden: usize,
    /// Value width `D_v`; `None` means `D/2`.
    pub value_dim: Option<usize>,
    pub fusion: Fusion,
    pub alpha_init: f64,
    pub gamma_init: f64,
    pub beta_init: f64,
}

impl Default for TcaConfig {
    fn default() -> Self {
        TcaConfig {
            window: 9,
            norm: NormMode::PowerL2,
            dpe: true,
            hidden: 128,
            value_dim: None,
            fusion: Fusion::Learnable,
            alpha_init: 0.5,
            gamma_init: 1.0,
            beta_init: 0.0,
        }
    }
}

impl TcaConfig {
    pub fn value_width(&self, d: usize) -> usize {
        self.value_dim.unwrap_or(d / 2).max(1)
    }
}

pub fn init_params<S: Scalar, R: Rng + ?Sized>(
    cfg: &TcaConfig,
    d: usize,
    rng: &mut R,
    params: &mut ParamSet<S>,
) {
    let (dh, dv) = (cfg.hidden, cfg.value_width(d));
    params.insert(QUERY_W, uniform_init(&[d, dh], d, rng));
    params.insert(QUERY_B, Tensor::zeros(&[dh]));
    params.insert(KEY_W, uniform_init(&[d, dh], d, rng));
    params.insert(KEY_B, Tensor::zeros(&[dh]));
    params.insert(VALUE_W, uniform_init(&[d, dv], d, rng));
    params.insert(VALUE_B, Tensor::zeros(&[dv]));
    params.insert(OUT_W, uniform_init(&[dv, d], dv, rng));
    params.insert(OUT_B, Tensor::zeros(&[d]));
    params.insert(ALPHA, Tensor::vector(vec![S::lit(cfg.alpha_init)]));
    if cfg.fusion == Fusion::Fixed {
        params.freeze(ALPHA);
    }
    if cfg.dpe {
        params.insert(GAMMA, Tensor::vector(vec![S::lit(cfg.gamma_init)]));
        params.insert(BETA, Tensor::vector(vec![S::lit(cfg.beta_init)]));
    }
    params.insert(LN_SCALE, Tensor::full(&[d], S::one()));
    params.insert(LN_SHIFT, Tensor::zeros(&[d]));
}

/// `x·W + b`.
pub fn linear<S: Scalar>(g: &mut Graph<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Similarity matrix `M` (with the position encoding added when enabled).
pub fn similarity<S: Scalar>(g: &mut Graph<S>, x: Var, p: &Bound, cfg: &TcaConfig) -> Result<Var> {
    let q = linear(g, x, p.var(QUERY_W)?, p.var(QUERY_B)?)?;
    let k = linear(g, x, p.var(KEY_W)?, p.var(KEY_B)?)?;
    let m = g.matmul_nt(q, k)?;
    if !cfg.dpe {
        return Ok(m);
    }
    let len = g.value(x).rows();
    let pos = g.dpe(len, p.var(GAMMA)?, p.var(BETA)?)?;
    g.add(m, pos)
}

/// Projected values `f_v(x)`.
pub fn values<S: Scalar>(g: &mut Graph<S>, x: Var, p: &Bound) -> Result<Var> {
    linear(g, x, p.var(VALUE_W)?, p.var(VALUE_B)?)
}

/// Global attention: returns `(A^g, X^g)`.
pub fn global_branch<S: Scalar>(g: &mut Graph<S>, m: Var, v: Var, cfg: &TcaConfig) -> Result<(Var, Var)> {
    let scaled = g.scale(m, S::lit(1.0 / (cfg.hidden as f64).sqrt()))?;
    let a = g.softmax_rows(scaled)?;
    let out = g.matmul(a, v)?;
    Ok((a, out))
}

/// Keep-mask of the local window: row `i` keeps columns
/// `max(0, i-⌊w/2⌋) ..= min(i+⌊w/2⌋, T-1)`.
pub fn window_mask(len: usize, window: usize) -> Vec<bool> {
    let half = window / 2;
    let mut keep = vec![false; len * len];
    for i in 0..len {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(len - 1);
        for j in lo..=hi {
            keep[i * len + j] = true;
        }
    }
    keep
}

/// Local attention over the masked, shared similarity: returns `(A^l, X^l)`.
pub fn local_branch<S: Scalar>(g: &mut Graph<S>, m: Var, v: Var, cfg: &TcaConfig) -> Result<(Var, Var)> {
    let len = g.value(m).rows();
    let scaled = g.scale(m, S::lit(1.0 / (cfg.hidden as f64).sqrt()))?;
    let masked = g.mask(scaled, window_mask(len, cfg.window.max(1)))?;
    let a = g.softmax_rows(masked)?;
    let out = g.matmul(a, v)?;
    Ok((a, out))
}

pub fn normalize<S: Scalar>(g: &mut Graph<S>, x: Var, mode: NormMode) -> Result<Var> {
    match mode {
        NormMode::None => Ok(x),
        NormMode::Power => g.unary(x, Unary::SqrtSigned),
        NormMode::L2 => g.l2_normalize_rows(x),
        NormMode::PowerL2 => {
            let p = g.unary(x, Unary::SqrtSigned)?;
            g.l2_normalize_rows(p)
        }
    }
}

/// `X^o = α·X^g + (1-α)·X^l`.
pub fn blend<S: Scalar>(g: &mut Graph<S>, xg: Var, xl: Var, alpha: Var) -> Result<Var> {
    let one_minus = g.affine(alpha, -S::one(), S::one())?;
    let a = g.scale_by(xg, alpha)?;
    let b = g.scale_by(xl, one_minus)?;
    g.add(a, b)
}

/// Returns `(X^o, X^c)` with `X^c = LN(x + f_h(Norm(X^o)))`.
pub fn fuse<S: Scalar>(
    g: &mut Graph<S>,
    xg: Var,
    xl: Var,
    x: Var,
    p: &Bound,
    cfg: &TcaConfig,
) -> Result<(Var, Var)> {
    let xo = blend(g, xg, xl, p.var(ALPHA)?)?;
    let normed = normalize(g, xo, cfg.norm)?;
    let h = linear(g, normed, p.var(OUT_W)?, p.var(OUT_B)?)?;
    let res = g.add(x, h)?;
    let xc = g.layer_norm(res, p.var(LN_SCALE)?, p.var(LN_SHIFT)?, S::lit(LN_EPS))?;
    Ok((xo, xc))
}

/// Intermediate nodes of one TCA forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TcaTrace {
    pub similarity: Var,
    pub values: Var,
    pub global_attn: Var,
    pub local_attn: Var,
    pub global_ctx: Var,
    pub local_ctx: Var,
    pub fused: Var,
    pub output: Var,
}

pub fn forward<S: Scalar>(g: &mut Graph<S>, x: Var, p: &Bound, cfg: &TcaConfig) -> Result<TcaTrace> {
    let m = similarity(g, x, p, cfg)?;
    let v = values(g, x, p)?;
    let (ag, xg) = global_branch(g, m, v, cfg)?;
    let (al, xl) = local_branch(g, m, v, cfg)?;
    let (xo, xc) = fuse(g, xg, xl, x, p, cfg)?;
    Ok(TcaTrace {
        similarity: m,
        values: v,
        global_attn: ag,
        local_attn: al,
        global_ctx: xg,
        local_ctx: xl,
        fused: xo,
        output: xc,
    })
}
