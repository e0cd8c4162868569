//! Training loop, checkpoints, scoring pipeline and the synthetic dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::eval::{self, FarScope, MetricReport, ScoreRecord, SmoothMode, SmoothingConfig, VideoScores};
use crate::featio::{
    decode_tensor, encode_tensor, expand_to_frames, load_crops, load_features, write_atomic, write_tensor, Manifest,
    Split, VideoRecord, NORMAL_CLASS, SNIPPET_FRAMES,
};
use crate::head::{self, BagPrediction, HeadConfig, LossMode};
use crate::model::{training_view, Model, ModelConfig};
use crate::numkit::{derive_rng, AdamConfig, AdamState, Graph, LrSchedule, ParamSet, Tensor};
use crate::pel::{self, PelConfig};
use crate::prompt::{stub_embed, PromptBank, Provenance, TemplateMode};
use crate::scalar::{DType, Scalar};
use crate::tca::TcaConfig;

const PURPOSE_SHUFFLE_ABNORMAL: u64 = 2;
const PURPOSE_SHUFFLE_NORMAL: u64 = 3;
const PURPOSE_DROPOUT: u64 = 4;
const PURPOSE_SYNTH: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Ucf,
    Xd,
    Shtech,
    Synthetic,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidArgument(format!("unknown preset {s:?}; expected ucf, xd, shtech or synthetic")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Preset,
    /// Videos per step, split evenly between abnormal and normal.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Weight `λ` of the alignment loss.
    pub lambda: f64,
    pub seed: u64,
    /// Training sequences longer than this are averaged down to it.
    pub snippet_limit: usize,
    pub use_tca: bool,
    pub use_pel: bool,
    pub loss: LossMode,
    pub tca: TcaConfig,
    pub head: HeadConfig,
    pub pel: PelConfig,
    /// Test-time smoothing; mode `none` disables it.
    pub smoothing: SmoothingConfig,
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let (window, kernel, tau, lambda, smoothing) = match preset {
            Preset::Ucf => (9, 9, 0.09, 1.0, SmoothingConfig::new(SmoothMode::Sliding, 7)),
            Preset::Xd => (9, 3, 0.05, 1.0, SmoothingConfig::new(SmoothMode::Moving, 9)),
            Preset::Shtech => (5, 3, 0.2, 9.0, SmoothingConfig::new(SmoothMode::Sliding, 3)),
            Preset::Synthetic => (9, 3, 0.09, 0.3, SmoothingConfig::new(SmoothMode::Sliding, 3)),
        };
        let mut cfg = TrainConfig {
            preset,
            batch_size: 128,
            epochs: 50,
            lr: 5e-4,
            lambda,
            seed: 0,
            snippet_limit: 200,
            use_tca: true,
            use_pel: true,
            loss: LossMode::Bce,
            tca: TcaConfig {
                window,
                ..Default::default()
            },
            head: HeadConfig {
                kernel,
                ..Default::default()
            },
            pel: PelConfig {
                tau,
                ..Default::default()
            },
            smoothing,
        };
        if preset == Preset::Synthetic {
            cfg.batch_size = 16;
            cfg.epochs = 30;
            cfg.lr = 3e-3;
            cfg.tca.hidden = 32;
            cfg.head.hidden1 = 128;
            cfg.head.hidden2 = 64;
        }
        cfg
    }

    /// Every problem with the configuration, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                out.push(msg);
            }
        };
        check(self.batch_size >= 2, format!("batch_size must be >= 2, got {}", self.batch_size));
        check(self.epochs >= 1, format!("epochs must be >= 1, got {}", self.epochs));
        check(self.lr > 0.0 && self.lr.is_finite(), format!("lr must be positive, got {}", self.lr));
        check(self.lambda >= 0.0, format!("lambda must be >= 0, got {}", self.lambda));
        check(self.snippet_limit >= 1, "snippet_limit must be >= 1".into());
        check(self.tca.window >= 1, "tca.window must be >= 1".into());
        check(self.tca.hidden >= 1, "tca.hidden must be >= 1".into());
        check(
            (0.0..=1.0).contains(&self.tca.alpha_init),
            format!("tca.alpha_init must lie in [0, 1], got {}", self.tca.alpha_init),
        );
        check(self.head.kernel >= 1, "head.kernel must be >= 1".into());
        check(self.head.hidden1 >= 1 && self.head.hidden2 >= 1, "head widths must be >= 1".into());
        check(
            (0.0..1.0).contains(&self.head.dropout),
            format!("head.dropout must lie in [0, 1), got {}", self.head.dropout),
        );
        check(self.pel.tau > 0.0, format!("pel.tau must be positive, got {}", self.pel.tau));
        check(self.pel.mu > 0.0, format!("pel.mu must be positive, got {}", self.pel.mu));
        check(
            self.smoothing.mode == SmoothMode::None || self.smoothing.window >= 1,
            "smoothing.window must be >= 1".into(),
        );
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(p.join("; ")))
        }
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            tca: self.use_tca.then(|| self.tca.clone()),
            head: self.head.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_kd: f64,
    pub alpha: Option<f64>,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_auc: Option<f64>,
}

/// Losses and gradients of one batch.
#[derive(Clone, Debug)]
pub struct StepOutput<S> {
    pub loss: f64,
    pub l_ce: f64,
    pub l_kd: f64,
    pub grads: ParamSet<S>,
    pub bags: Vec<BagPrediction<S>>,
}

#[derive(Clone, Debug)]
pub struct TrainVideo<S> {
    pub id: String,
    pub features: Tensor<S>,
    pub label: u8,
    /// Row of the prompt bank for the video's own class.
    pub class_index: usize,
}

/// Loads the training split, subsampled to `limit` snippets.
pub fn load_training_set<S: Scalar>(manifest: &Manifest, classes: &[String], limit: usize) -> Result<Vec<TrainVideo<S>>> {
    manifest
        .split(Split::Train)
        .map(|r| {
            let x: Tensor<S> = load_features(&manifest.feature_path(r))?;
            let class_index = if r.is_abnormal() {
                classes.iter().position(|c| *c == r.class).expect("class list built from manifest")
            } else {
                classes.len()
            };
            Ok(TrainVideo {
                id: r.id.clone(),
                features: training_view(&x, limit)?,
                label: r.label,
                class_index,
            })
        })
        .collect()
}

pub struct Trainer<S> {
    pub config: TrainConfig,
    pub model: Model<S>,
    pub adam: AdamState<S>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub classes: Vec<String>,
    bank: Option<Tensor<S>>,
    data: Vec<TrainVideo<S>>,
    abnormal: Vec<usize>,
    normal: Vec<usize>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: TrainConfig, manifest: &Manifest, bank: Option<&PromptBank>) -> Result<Self> {
        config.validate()?;
        let classes = manifest.anomaly_classes();
        let data = load_training_set(manifest, &classes, config.snippet_limit)?;
        let dim = data
            .first()
            .map(|v| v.features.cols())
            .ok_or_else(|| Error::InvalidArgument("manifest has no training videos".into()))?;
        if let Some(v) = data.iter().find(|v| v.features.cols() != dim) {
            return Err(Error::ShapeMismatch {
                op: "training features",
                lhs: vec![0, dim],
                rhs: v.features.dims().to_vec(),
            });
        }
        let model = Model::new(config.model_config(dim), config.seed);
        Self::assemble(config, model, classes, data, bank)
    }

    fn assemble(
        config: TrainConfig,
        model: Model<S>,
        classes: Vec<String>,
        data: Vec<TrainVideo<S>>,
        bank: Option<&PromptBank>,
    ) -> Result<Self> {
        let bank = if config.use_pel {
            let bank = bank.ok_or_else(|| {
                Error::MissingPrompt(classes.iter().cloned().chain([NORMAL_CLASS.to_string()]).collect())
            })?;
            let m: Tensor<S> = bank.matrix(&classes)?;
            if m.cols() != config.head.hidden1 {
                return Err(Error::ShapeMismatch {
                    op: "prompt bank vs head.hidden1",
                    lhs: m.dims().to_vec(),
                    rhs: vec![classes.len() + 1, config.head.hidden1],
                });
            }
            Some(m)
        } else {
            None
        };
        let abnormal: Vec<usize> = (0..data.len()).filter(|&i| data[i].label == 1).collect();
        let normal: Vec<usize> = (0..data.len()).filter(|&i| data[i].label == 0).collect();
        if abnormal.is_empty() || normal.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "training split needs both labels ({} abnormal, {} normal)",
                abnormal.len(),
                normal.len()
            )));
        }
        let adam = AdamState::new(AdamConfig::new(
            config.lr,
            LrSchedule::Cosine {
                total_steps: (config.epochs * abnormal.len().div_ceil(config.batch_size / 2)) as u64,
            },
        ));
        Ok(Trainer {
            config,
            model,
            adam,
            epoch: 0,
            step: 0,
            classes,
            bank,
            data,
            abnormal,
            normal,
        })
    }

    /// Rebuilds a trainer from a checkpoint over the same data.
    pub fn resume(ckpt: Checkpoint<S>, manifest: &Manifest, bank: Option<&PromptBank>) -> Result<Self> {
        let data = load_training_set(manifest, &ckpt.classes, ckpt.config.snippet_limit)?;
        if let Some(v) = data.iter().find(|v| v.features.cols() != ckpt.model.input_dim) {
            return Err(Error::ShapeMismatch {
                op: "checkpoint vs features",
                lhs: vec![0, ckpt.model.input_dim],
                rhs: v.features.dims().to_vec(),
            });
        }
        let model = Model {
            config: ckpt.model,
            params: ckpt.params,
        };
        let mut t = Self::assemble(ckpt.config, model, ckpt.classes, data, bank)?;
        t.adam = ckpt.adam;
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn videos(&self) -> &[TrainVideo<S>] {
        &self.data
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.abnormal.len().div_ceil(self.config.batch_size / 2)
    }

    /// Video indices of every batch in `epoch`: abnormal videos in a seeded
    /// order, each paired with the next normal video of a seeded order.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let half = self.config.batch_size / 2;
        let mut abn = self.abnormal.clone();
        abn.shuffle(&mut derive_rng(self.config.seed, PURPOSE_SHUFFLE_ABNORMAL, epoch as u64));
        let mut nor = self.normal.clone();
        nor.shuffle(&mut derive_rng(self.config.seed, PURPOSE_SHUFFLE_NORMAL, epoch as u64));
        abn.chunks(half)
            .enumerate()
            .map(|(b, chunk)| {
                let mut batch = chunk.to_vec();
                batch.extend((0..chunk.len()).map(|j| nor[(b * half + j) % nor.len()]));
                batch
            })
            .collect()
    }

    /// Loss and gradients of `params` on `batch`; `step` keys the dropout masks.
    pub fn gradients(&self, params: &ParamSet<S>, batch: &[usize], step: u64) -> Result<StepOutput<S>> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("training batch"));
        }
        let cfg = &self.config;
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let model = Model {
            config: self.model.config.clone(),
            params: ParamSet::new(),
        };
        let bank = self.bank.as_ref().map(|b| g.constant(b.clone()));
        let mut bags = Vec::with_capacity(batch.len());
        let mut preds = Vec::with_capacity(batch.len());
        let mut items = Vec::new();
        for (slot, &i) in batch.iter().enumerate() {
            let v = &self.data[i];
            let x = g.constant(v.features.clone());
            let mut rng = derive_rng(cfg.seed, PURPOSE_DROPOUT, (step << 16) | slot as u64);
            let f = model.forward(&mut g, &bound, x, true, &mut rng)?;
            let (p, pred) = head::topk_pool(&mut g, f.scores, v.label)?;
            bags.push((p, v.label));
            preds.push(pred);
            if bank.is_some() {
                let (fg, bg) = pel::separate_context(&mut g, f.embedding, f.scores, &cfg.pel)?;
                items.push((fg, v.class_index));
                if v.label == 1 {
                    items.push((bg, self.classes.len()));
                }
            }
        }
        let ce = head::mil_loss(&mut g, &bags, cfg.loss)?;
        let (loss, kd) = match bank {
            Some(b) => {
                let kd = pel::alignment_loss(&mut g, &items, b, cfg.pel.tau)?;
                // λ = 0 leaves the alignment branch out of the backward pass entirely
                let loss = if cfg.lambda == 0.0 {
                    ce
                } else {
                    pel::total_loss(&mut g, ce, kd, cfg.lambda)?
                };
                (loss, Some(kd))
            }
            None => (ce, None),
        };
        let grads = g.backward(loss)?;
        Ok(StepOutput {
            loss: g.value(loss).item().as_f64(),
            l_ce: g.value(ce).item().as_f64(),
            l_kd: kd.map_or(0.0, |k| g.value(k).item().as_f64()),
            grads: bound.gradients(&g, &grads),
            bags: preds,
        })
    }

    fn diverged(&self, detail: String) -> Error {
        Error::Diverged {
            epoch: self.epoch + 1,
            step: self.step + 1,
            detail,
        }
    }

    /// One optimizer step on `batch`; returns the output and the learning rate used.
    pub fn step(&mut self, batch: &[usize]) -> Result<(StepOutput<S>, f64)> {
        let out = match self.gradients(&self.model.params, batch, self.step) {
            Err(Error::NonFinite(d)) => return Err(self.diverged(d)),
            other => other?,
        };
        if !out.loss.is_finite() {
            return Err(self.diverged(format!("loss {} (l_ce {}, l_kd {})", out.loss, out.l_ce, out.l_kd)));
        }
        if let Some((name, _)) = out.grads.iter().find(|(_, t)| !t.all_finite()) {
            return Err(self.diverged(format!("non-finite gradient for {name}")));
        }
        let lr = self.adam.step(&mut self.model.params, &out.grads)?;
        if let Some((name, _)) = self.model.params.iter().find(|(_, t)| !t.all_finite()) {
            return Err(self.diverged(format!("non-finite parameter {name} after update")));
        }
        self.step += 1;
        Ok((out, lr))
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let batches = self.epoch_batches(self.epoch);
        let (mut ce, mut kd, mut lr) = (0.0, 0.0, 0.0);
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for b in &batches {
            let (out, used) = self.step(b)?;
            ce += out.l_ce;
            kd += out.l_kd;
            lr = used;
            for p in out.bags {
                scores.push(p.p.as_f64());
                labels.push(p.y);
            }
        }
        self.epoch += 1;
        let n = batches.len() as f64;
        let log = EpochLog {
            epoch: self.epoch,
            l_ce: ce / n,
            l_kd: kd / n,
            alpha: self.model.alpha(),
            lr,
            train_auc: eval::roc_auc(&scores, &labels).ok(),
        };
        log::info!(
            "epoch {} l_ce {:.4} l_kd {:.4} lr {:.2e}",
            log.epoch,
            log.l_ce,
            log.l_kd,
            log.lr
        );
        Ok(log)
    }

    /// Runs the remaining epochs up to `until` (or the configured count).
    pub fn train(&mut self, until: Option<usize>, mut on_epoch: impl FnMut(&EpochLog) -> Result<()>) -> Result<()> {
        let end = until.unwrap_or(self.config.epochs).min(self.config.epochs);
        while self.epoch < end {
            let log = self.run_epoch()?;
            on_epoch(&log)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.config.clone(),
            classes: self.classes.clone(),
            epoch: self.epoch,
            step: self.step,
            params: self.model.params.clone(),
            adam: self.adam.clone(),
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TCKP";

/// Everything needed to score with, or resume, a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub classes: Vec<String>,
    pub epoch: usize,
    pub step: u64,
    pub params: ParamSet<S>,
    pub adam: AdamState<S>,
}

#[derive(Serialize, Deserialize)]
struct RngDescriptor {
    seed: u64,
    /// Dropout masks and shuffles are derived from `(seed, step)` and
    /// `(seed, epoch)`, so these counters are the whole generator state.
    step: u64,
    epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointIndex {
    dtype: DType,
    config: TrainConfig,
    model: ModelConfig,
    classes: Vec<String>,
    epoch: usize,
    step: u64,
    rng: RngDescriptor,
    alpha: Option<f64>,
    adam: AdamConfig,
    adam_step: u64,
    frozen: Vec<String>,
    tensors: Vec<BlobEntry>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn model(&self) -> Model<S> {
        Model {
            config: self.model.clone(),
            params: self.params.clone(),
        }
    }

    /// `TCKP`, u32 LE index length, JSON index, then one TFV1 blob per tensor.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = Vec::new();
        let mut entries = Vec::new();
        let mut push = |name: String, t: &Tensor<S>| {
            let b = encode_tensor(t);
            entries.push(BlobEntry {
                name,
                offset: blobs.len() as u64,
                len: b.len() as u64,
            });
            blobs.extend(b);
        };
        for (n, t) in self.params.iter() {
            push(format!("param/{n}"), t);
        }
        for (n, t) in &self.adam.first {
            push(format!("adam.m/{n}"), t);
        }
        for (n, t) in &self.adam.second {
            push(format!("adam.v/{n}"), t);
        }
        let index = CheckpointIndex {
            dtype: S::DTYPE,
            config: self.config.clone(),
            model: self.model.clone(),
            classes: self.classes.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: RngDescriptor {
                seed: self.config.seed,
                step: self.step,
                epoch: self.epoch,
            },
            alpha: self.params.get(crate::tca::ALPHA).ok().map(|t| t.item().as_f64()),
            adam: self.adam.config,
            adam_step: self.adam.step,
            frozen: self.params.frozen_names().map(str::to_string).collect(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&index)?;
        let mut out = Vec::with_capacity(8 + json.len() + blobs.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(8..8 + n).ok_or_else(|| bad("truncated index"))?;
        let index: CheckpointIndex = serde_json::from_slice(json)?;
        let data = &bytes[8 + n..];
        let mut params = ParamSet::new();
        let mut adam = AdamState::new(index.adam);
        adam.step = index.adam_step;
        for e in &index.tensors {
            let (lo, hi) = (e.offset as usize, (e.offset + e.len) as usize);
            let blob = data.get(lo..hi).ok_or_else(|| bad(&format!("tensor {} out of range", e.name)))?;
            let t: Tensor<S> = decode_tensor(blob, path)?;
            match e.name.split_once('/') {
                Some(("param", n)) => params.insert(n, t),
                Some(("adam.m", n)) => {
                    adam.first.insert(n.to_string(), t);
                }
                Some(("adam.v", n)) => {
                    adam.second.insert(n.to_string(), t);
                }
                _ => return Err(bad(&format!("unknown entry {}", e.name))),
            }
        }
        for f in &index.frozen {
            params.freeze(f);
        }
        Ok(Checkpoint {
            config: index.config,
            model: index.model,
            classes: index.classes,
            epoch: index.epoch,
            step: index.step,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Self::from_bytes(&bytes, path)
    }
}

/// Element type a checkpoint was written in.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let bytes = fs::read(path).at(path)?;
    let bad = || Error::Checkpoint(format!("{}: not a checkpoint archive", path.display()));
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad());
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(8..8 + n).ok_or_else(bad)?;
    let v: serde_json::Value = serde_json::from_slice(json)?;
    serde_json::from_value(v["dtype"].clone()).map_err(|_| bad())
}

/// How multi-crop feature files are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Average the crops, then score.
    #[default]
    FeatureMean,
    /// Score every crop, then average the scores.
    ScoreMean,
}

/// Scores, smooths and frame-expands one video.
pub fn score_video<S: Scalar>(
    model: &Model<S>,
    path: &Path,
    frame_count: Option<usize>,
    smoothing: &SmoothingConfig,
    crops: CropMode,
) -> Result<ScoreRecord> {
    let raw = match crops {
        CropMode::FeatureMean => {
            let x: Tensor<S> = load_features(path)?;
            model.check_input(&x).map_err(|_| Error::ShapeMismatch {
                op: "checkpoint vs features",
                lhs: vec![0, model.config.input_dim],
                rhs: x.dims().to_vec(),
            })?;
            model.score(&x)?
        }
        CropMode::ScoreMean => model.score_crops(&load_crops(path)?)?,
    };
    let smoothed = eval::smooth(&raw, smoothing);
    let frames = expand_to_frames(&smoothed, frame_count.unwrap_or(raw.len() * SNIPPET_FRAMES))?;
    Ok(ScoreRecord {
        raw: raw.iter().map(|v| v.as_f64()).collect(),
        smoothed: smoothed.iter().map(|v| v.as_f64()).collect(),
        frames: frames.iter().map(|v| v.as_f64()).collect(),
    })
}

pub fn score_split<S: Scalar>(
    model: &Model<S>,
    manifest: &Manifest,
    split: Split,
    smoothing: &SmoothingConfig,
    crops: CropMode,
) -> Result<Vec<(VideoRecord, ScoreRecord)>> {
    manifest
        .split(split)
        .map(|r| {
            let frames = r.frames.as_ref().map(Vec::len);
            let rec = score_video(model, &manifest.feature_path(r), frames, smoothing, crops)?;
            Ok((r.clone(), rec))
        })
        .collect()
}

/// Pairs frame scores with ground truth; errors list every video without scores.
pub fn collect_scores(
    manifest: &Manifest,
    mut lookup: impl FnMut(&VideoRecord) -> Result<Option<Vec<f64>>>,
) -> Result<Vec<VideoScores>> {
    let mut out = Vec::new();
    let mut missing = Vec::new();
    for r in manifest.split(Split::Test) {
        let frames = r
            .frames
            .clone()
            .ok_or_else(|| Error::Metric(format!("test video {} has no frame labels", r.id)))?;
        match lookup(r)? {
            Some(scores) => out.push(VideoScores {
                id: r.id.clone(),
                class: r.class.clone(),
                label: r.label,
                scores,
                frames,
            }),
            None => missing.push(r.id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Metric(format!("missing scores for videos: {}", missing.join(", "))));
    }
    Ok(out)
}

/// Scores the test split in memory and evaluates it.
pub fn evaluate_model<S: Scalar>(
    model: &Model<S>,
    manifest: &Manifest,
    smoothing: &SmoothingConfig,
    scope: FarScope,
) -> Result<MetricReport> {
    let scored: BTreeMap<String, ScoreRecord> = score_split(model, manifest, Split::Test, smoothing, CropMode::FeatureMean)?
        .into_iter()
        .map(|(r, s)| (r.id, s))
        .collect();
    let videos = collect_scores(manifest, |r| Ok(scored.get(&r.id).map(|s| s.frames.clone())))?;
    eval::evaluate(&videos, scope)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    pub dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Inclusive range of injected segments per abnormal video.
    pub segments: (usize, usize),
    /// Inclusive range of segment lengths in snippets.
    pub segment_len: (usize, usize),
    /// Size of the class-direction bump.
    pub magnitude: f64,
    /// Per-snippet white noise.
    pub noise: f64,
    /// Spread of the constant per-video offset.
    pub offset: f64,
    /// Scale of the slowly drifting background.
    pub drift: f64,
    /// Lag-one autocorrelation of the drift.
    pub drift_corr: f64,
    pub prompt_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 3,
            train_videos: 40,
            test_videos: 20,
            dim: 64,
            min_len: 40,
            max_len: 120,
            segments: (1, 2),
            segment_len: (6, 16),
            magnitude: 2.5,
            noise: 0.6,
            offset: 0.0,
            drift: 0.1,
            drift_corr: 0.9,
            prompt_dim: 128,
            seed: 0,
        }
    }
}

const CLASS_NAMES: [&str; 6] = ["fighting", "explosion", "stealing", "arson", "shooting", "vandalism"];

pub fn synthetic_class_name(i: usize) -> String {
    CLASS_NAMES.get(i).map_or_else(|| format!("class{i}"), |s| s.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub id: String,
    pub class: String,
    pub split: Split,
    pub len: usize,
    /// Half-open snippet ranges of the injected anomalies.
    pub segments: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct SyntheticOutput {
    pub manifest: PathBuf,
    pub prompts: PathBuf,
    pub ground_truth: PathBuf,
    pub videos: Vec<SyntheticVideo>,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * sd
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gram-Schmidt basis of the span of `vs`.
fn orthonormal(vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vs {
        let mut w = v.clone();
        project_out(&mut w, &basis);
        if dot(&w, &w) > 1e-12 {
            basis.push(unit(w));
        }
    }
    basis
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let c = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Writes `manifest.jsonl`, `features/*.tfv`, `prompts.json` and
/// `ground_truth.json` under `dir`.
///
/// Normal videos are a per-video offset plus an AR(1) drift plus white noise;
/// abnormal videos add `magnitude` along a class direction on their segments.
/// An abnormal draw with zero segments is emitted as a normal video.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<SyntheticOutput> {
    if spec.classes == 0 || spec.dim == 0 || spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::InvalidArgument(format!(
            "synthetic spec needs classes >= 1, dim >= 1 and 1 <= min_len <= max_len, got {spec:?}"
        )));
    }
    let mut rng = derive_rng(spec.seed, PURPOSE_SYNTH, 0);
    let directions: Vec<Vec<f64>> = (0..spec.classes).map(|_| unit(gaussian(&mut rng, spec.dim, 1.0))).collect();
    let basis = orthonormal(&directions);
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).at(&feat_dir)?;
    let mut records = Vec::new();
    let mut videos = Vec::new();
    let rho = spec.drift_corr;
    for (split, count) in [(Split::Train, spec.train_videos), (Split::Test, spec.test_videos)] {
        for i in 0..count {
            let mut vr = derive_rng(spec.seed, PURPOSE_SYNTH, 1 + records.len() as u64);
            let len = vr.random_range(spec.min_len..=spec.max_len);
            let abnormal_draw = i % 2 == 0;
            let class_idx = (i / 2) % spec.classes;
            let n_seg = if abnormal_draw {
                vr.random_range(spec.segments.0..=spec.segments.1)
            } else {
                0
            };
            let mut segments = Vec::new();
            for _ in 0..n_seg {
                let sl = vr.random_range(spec.segment_len.0..=spec.segment_len.1).min(len);
                let start = vr.random_range(0..=len - sl);
                segments.push((start, start + sl));
            }
            segments.sort();
            let mut snippet_labels = vec![0u8; len];
            for &(a, b) in &segments {
                snippet_labels[a..b].iter_mut().for_each(|l| *l = 1);
            }
            let abnormal = snippet_labels.contains(&1);
            let class = if abnormal {
                synthetic_class_name(class_idx)
            } else {
                NORMAL_CLASS.to_string()
            };
            let offset = gaussian(&mut vr, spec.dim, spec.offset);
            let mut drift = gaussian(&mut vr, spec.dim, spec.drift);
            project_out(&mut drift, &basis);
            let mut data = Vec::with_capacity(len * spec.dim);
            for (t, &lab) in snippet_labels.iter().enumerate() {
                let mut step = gaussian(&mut vr, spec.dim, spec.drift * (1.0 - rho * rho).sqrt());
                project_out(&mut step, &basis);
                let white = gaussian(&mut vr, spec.dim, spec.noise);
                for k in 0..spec.dim {
                    if t > 0 {
                        drift[k] = rho * drift[k] + step[k];
                    }
                    let bump = if lab == 1 {
                        spec.magnitude * directions[class_idx][k]
                    } else {
                        0.0
                    };
                    data.push(offset[k] + drift[k] + white[k] + bump);
                }
            }
            let split_name = if split == Split::Train { "train" } else { "test" };
            let id = format!("{split_name}_{i:03}");
            let rel = PathBuf::from("features").join(format!("{id}.tfv"));
            let t = Tensor::<f32>::from_f64(&[len, spec.dim], &data)?;
            write_tensor(&dir.join(&rel), &t)?;
            let frames = (split == Split::Test).then(|| {
                snippet_labels
                    .iter()
                    .flat_map(|&l| std::iter::repeat_n(l, SNIPPET_FRAMES))
                    .collect()
            });
            records.push(VideoRecord {
                id: id.clone(),
                features: rel,
                label: u8::from(abnormal),
                class: class.clone(),
                frames,
                split,
            });
            videos.push(SyntheticVideo {
                id,
                class,
                split,
                len,
                segments,
            });
        }
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        records,
    };
    let manifest_path = dir.join("manifest.jsonl");
    write_atomic(&manifest_path, manifest.to_jsonl()?.as_bytes())?;

    let mut classes: BTreeMap<String, Vec<f64>> = (0..spec.classes)
        .map(|c| {
            let name = synthetic_class_name(c);
            let v = stub_embed(&name, spec.prompt_dim, spec.seed);
            (name, v)
        })
        .collect();
    classes.insert(NORMAL_CLASS.into(), stub_embed(NORMAL_CLASS, spec.prompt_dim, spec.seed));
    let bank = PromptBank {
        dim: spec.prompt_dim,
        provenance: Provenance::Synthetic,
        template: TemplateMode::Label,
        classes,
    };
    let prompts = dir.join("prompts.json");
    bank.save(&prompts)?;
    let ground_truth = dir.join("ground_truth.json");
    let mut gt = serde_json::to_string_pretty(&videos)?;
    gt.push('\n');
    write_atomic(&ground_truth, gt.as_bytes())?;
    Ok(SyntheticOutput {
        manifest: manifest_path,
        prompts,
        ground_truth,
        videos,
    })
}

/// The three rows of the component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// MLP head and MIL loss only.
    Baseline,
    /// Baseline plus TCA.
    TcaOnly,
    /// TCA, PEL and score smoothing.
    Full,
}

impl Ablation {
    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Ablation::Baseline => {
                cfg.use_tca = false;
                cfg.use_pel = false;
                cfg.smoothing.mode = SmoothMode::None;
            }
            Ablation::TcaOnly => {
                cfg.use_tca = true;
                cfg.use_pel = false;
                cfg.smoothing.mode = SmoothMode::None;
            }
            Ablation::Full => {}
        }
    }
}

/// Trains on `manifest` and evaluates the test split.
pub fn fit_and_evaluate<S: Scalar>(
    cfg: TrainConfig,
    manifest: &Manifest,
    bank: Option<&PromptBank>,
) -> Result<(Trainer<S>, Vec<EpochLog>, MetricReport)> {
    let mut t = Trainer::<S>::new(cfg, manifest, bank)?;
    let mut logs = Vec::new();
    t.train(None, |l| {
        logs.push(l.clone());
        Ok(())
    })?;
    let report = evaluate_model(&t.model, manifest, &t.config.smoothing, FarScope::NormalVideos)?;
    Ok((t, logs, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_follow_reported_values() {
        let u = TrainConfig::preset(Preset::Ucf);
        assert_eq!((u.tca.window, u.head.kernel, u.pel.tau, u.lambda), (9, 9, 0.09, 1.0));
        assert_eq!((u.batch_size, u.epochs, u.lr, u.snippet_limit), (128, 50, 5e-4, 200));
        assert_eq!((u.smoothing.mode, u.smoothing.window), (SmoothMode::Sliding, 7));
        let x = TrainConfig::preset(Preset::Xd);
        assert_eq!((x.tca.window, x.head.kernel, x.pel.tau, x.lambda), (9, 3, 0.05, 1.0));
        assert_eq!((x.smoothing.mode, x.smoothing.window), (SmoothMode::Moving, 9));
        let s = TrainConfig::preset(Preset::Shtech);
        assert_eq!((s.tca.window, s.head.kernel, s.pel.tau, s.lambda), (5, 3, 0.2, 9.0));
        assert_eq!((s.smoothing.mode, s.smoothing.window), (SmoothMode::Sliding, 3));
        assert_eq!(s.pel.mu, 10.0);
        let syn = TrainConfig::preset(Preset::Synthetic);
        assert_eq!((syn.batch_size, syn.epochs), (16, 30));
    }

    #[test]
    fn all_problems_reported() {
        let mut c = TrainConfig::preset(Preset::Ucf);
        c.batch_size = 0;
        c.lr = -1.0;
        c.pel.tau = 0.0;
        let p = c.problems();
        assert_eq!(p.len(), 3, "{p:?}");
    }

    #[test]
    fn zero_segments_give_normal_videos() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            segments: (0, 0),
            train_videos: 4,
            test_videos: 4,
            ..Default::default()
        };
        let out = generate_synthetic(&spec, dir.path()).unwrap();
        let m = Manifest::load(&out.manifest).unwrap();
        for r in &m.records {
            assert_eq!(r.label, 0);
            if let Some(f) = &r.frames {
                assert!(f.iter().all(|&v| v == 0));
            }
        }
    }

    #[test]
    fn frame_labels_match_segments() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate_synthetic(&SyntheticSpec::default(), dir.path()).unwrap();
        let m = Manifest::load(&out.manifest).unwrap();
        for (r, v) in m.records.iter().zip(&out.videos) {
            let x: Tensor<f32> = load_features(&m.feature_path(r)).unwrap();
            assert_eq!(x.dims(), &[v.len, 64]);
            if let Some(f) = &r.frames {
                assert_eq!(f.len(), v.len * SNIPPET_FRAMES);
                for t in 0..v.len {
                    let inside = v.segments.iter().any(|&(a, b)| a <= t && t < b);
                    assert_eq!(f[t * SNIPPET_FRAMES] == 1, inside);
                }
            }
            assert_eq!(r.label == 1, !v.segments.is_empty());
        }
    }
}
