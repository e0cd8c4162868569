//! Full network: optional TCA block followed by the MLP head and scorer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featio::sample_snippets;
use crate::head::{self, HeadConfig};
use crate::numkit::{derive_rng, Bound, Graph, ParamSet, Tensor, Var};
use crate::scalar::Scalar;
use crate::tca::{self, NormMode, TcaConfig, TcaTrace};

/// RNG purpose key for weight initialisation.
pub const PURPOSE_INIT: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width `D`.
    pub input_dim: usize,
    /// `None` feeds features straight into the head.
    pub tca: Option<TcaConfig>,
    pub head: HeadConfig,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub tca: Option<TcaTrace>,
    /// Head input: `X^c`, or the raw features without TCA.
    pub context: Var,
    pub embedding: Var,
    pub hidden: Var,
    /// Length-`T` snippet scores.
    pub scores: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub params: ParamSet<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = derive_rng(seed, PURPOSE_INIT, 0);
        let mut params = ParamSet::new();
        if let Some(t) = &config.tca {
            tca::init_params(t, config.input_dim, &mut rng, &mut params);
        }
        head::init_params(&config.head, config.input_dim, &mut rng, &mut params);
        Model { config, params }
    }

    pub fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.config.input_dim || x.rows() == 0 {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: vec![0, self.config.input_dim],
                rhs: x.dims().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Forward> {
        let (trace, context) = match &self.config.tca {
            Some(cfg) => {
                let t = tca::forward(g, x, p, cfg)?;
                (Some(t), t.output)
            }
            None => (None, x),
        };
        let (embedding, hidden) = head::mlp_forward(g, context, p, &self.config.head, training, rng)?;
        let scores = head::score(g, hidden, p)?;
        Ok(Forward {
            tca: trace,
            context,
            embedding,
            hidden,
            scores,
        })
    }

    /// Eval-mode snippet scores for a `T×D` feature matrix.
    pub fn score(&self, x: &Tensor<S>) -> Result<Vec<S>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let xv = g.constant(x.clone());
        // dropout is inactive in eval mode; the generator is never drawn from
        let f = self.forward(&mut g, &p, xv, false, &mut derive_rng(0, 0, 0))?;
        Ok(g.value(f.scores).data().to_vec())
    }

    /// Scores each crop separately and averages the score sequences.
    pub fn score_crops(&self, crops: &[Tensor<S>]) -> Result<Vec<S>> {
        let mut acc: Option<Vec<S>> = None;
        for c in crops {
            let s = self.score(c)?;
            acc = Some(match acc {
                None => s,
                Some(a) => a.iter().zip(&s).map(|(&u, &v)| u + v).collect(),
            });
        }
        let n = S::lit(crops.len() as f64);
        acc.map(|a| a.into_iter().map(|v| v / n).collect())
            .ok_or(Error::EmptyBatch("score_crops"))
    }

    /// Current fusion weight, if TCA is present.
    pub fn alpha(&self) -> Option<f64> {
        self.params.get(tca::ALPHA).ok().map(|t| t.item().as_f64())
    }

    pub fn param_count(&self) -> usize {
        self.params.count("")
    }
}

/// Subsamples long sequences the way training does.
pub fn training_view<S: Scalar>(x: &Tensor<S>, limit: usize) -> Result<Tensor<S>> {
    if limit == 0 || x.rows() <= limit {
        Ok(x.clone())
    } else {
        sample_snippets(x, limit)
    }
}

/// Operation counts for one TCA forward pass at sequence length `T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcaFlops {
    /// Query, key, value and output projections (linear in `T`).
    pub projections: u64,
    /// Everything on `T×T` matrices: similarity, DPE, masking, both
    /// softmaxes and both context products.
    pub attention: u64,
    /// Fusion, normalisation, residual and layer norm.
    pub elementwise: u64,
}

impl TcaFlops {
    pub fn total(&self) -> u64 {
        self.projections + self.attention + self.elementwise
    }
}

/// Matmuls count `2·m·n·k`; elementwise ops count one per output element
/// (softmax 3, layer norm 8, DPE 5 per entry).
pub fn tca_flops(cfg: &TcaConfig, d: usize, len: usize) -> TcaFlops {
    let (t, d, dh, dv) = (len as u64, d as u64, cfg.hidden as u64, cfg.value_width(d as usize) as u64);
    let mm = |m: u64, n: u64, k: u64| 2 * m * n * k;
    let projections = 2 * (mm(t, d, dh) + t * dh) + mm(t, d, dv) + t * dv + mm(t, dv, d) + t * d;
    let tt = t * t;
    let mut attention = mm(t, dh, t) + tt;
    if cfg.dpe {
        attention += 6 * tt;
    }
    attention += 3 * tt + tt + 3 * tt + 2 * mm(t, t, dv);
    let norm = match cfg.norm {
        NormMode::None => 0,
        NormMode::Power => 2 * t * dv,
        NormMode::L2 => 3 * t * dv,
        NormMode::PowerL2 => 5 * t * dv,
    };
    let elementwise = 3 * t * dv + norm + t * d + 8 * t * d;
    TcaFlops {
        projections,
        attention,
        elementwise,
    }
}

/// Parameter and FLOP summary for the TCA block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Complexity {
    pub input_dim: usize,
    pub hidden: usize,
    pub value_dim: usize,
    pub len: usize,
    pub tca_params: usize,
    pub model_params: usize,
    pub flops: TcaFlops,
    pub flop_count: u64,
}

/// Enumerates TCA parameters by instantiating the block.
pub fn tca_param_count(cfg: &TcaConfig, d: usize) -> usize {
    let mut p = ParamSet::<f32>::new();
    tca::init_params(cfg, d, &mut derive_rng(0, PURPOSE_INIT, 0), &mut p);
    p.count("tca.")
}

pub fn report_complexity<S: Scalar>(model: &Model<S>, len: usize) -> Complexity {
    let d = model.config.input_dim;
    let tca = model.config.tca.clone().unwrap_or_default();
    let flops = tca_flops(&tca, d, len);
    Complexity {
        input_dim: d,
        hidden: tca.hidden,
        value_dim: tca.value_width(d),
        len,
        tca_params: model.params.count("tca."),
        model_params: model.param_count(),
        flops,
        flop_count: flops.total(),
    }
}
