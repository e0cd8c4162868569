mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use tcape_core::eval::{self, FarScope, MetricReport, SmoothMode, Tail};
use tcape_core::featio::{write_atomic, Manifest, Split};
use tcape_core::model::{self, Model};
use tcape_core::prompt::{
    build_prompt_bank, BankOptions, ConceptDictionary, EdgeSource, Embedder, FileEmbedder, FilterMode, FixtureSource,
    LiveSource, PromptBank, StubEmbedder, TemplateMode, DEFAULT_TOP_RELATIONS,
};
use tcape_core::trainer::{
    self, checkpoint_dtype, Checkpoint, CropMode, EpochLog, Preset, SyntheticSpec, TrainConfig, Trainer,
};
use tcape_core::{DType, Scalar};

use config::Resolved;

/// Parameter count reported for the TCA block in the original comparison table.
const REFERENCE_TCA_PARAMS: usize = 1_210_000;

#[derive(Parser)]
#[command(name = "tcape", version, about = "Temporal context aggregation and prompt-enhanced learning for video anomaly detection")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a prompt bank from ConceptNet edges and a text embedder.
    PromptBuild(PromptBuildArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score videos with a checkpoint.
    Score(ScoreArgs),
    /// Compute metrics from score files.
    Eval(EvalArgs),
    /// Print parameter and FLOP counts.
    Report(ReportArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceKind {
    Fixture,
    Live,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedderKind {
    Stub,
    File,
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SmoothArg {
    None,
    Moving,
    Sliding,
}

#[derive(Clone, Copy, ValueEnum)]
enum TailArg {
    Zero,
    Shrink,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum CropArg {
    FeatureMean,
    ScoreMean,
}

#[derive(Clone, Copy, ValueEnum)]
enum FarScopeArg {
    NormalVideos,
    AllNegatives,
}

#[derive(Args)]
struct PromptBuildArgs {
    /// Comma-separated anomaly classes.
    #[arg(long, value_delimiter = ',', required_unless_present = "manifest")]
    classes: Vec<String>,
    /// Take the anomaly classes from a manifest instead.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "fixture")]
    source: SourceKind,
    /// Recorded responses (fixture source) or response cache (live source).
    #[arg(long, env = "TCAPE_FIXTURES", default_value = "fixtures")]
    fixtures: PathBuf,
    /// none, step1, step1+fixed:<theta> or step1+dynamic.
    #[arg(long, default_value = "step1+dynamic")]
    filter: FilterMode,
    /// label, prefix, label+wordnet, learnable or label+conceptnet.
    #[arg(long, default_value = "label+conceptnet")]
    template: TemplateMode,
    #[arg(long, value_enum, default_value = "stub")]
    embedder: EmbedderKind,
    /// Embedding file for `--embedder file`.
    #[arg(long, required_if_eq("embedder", "file"))]
    embeddings: Option<PathBuf>,
    /// Stub embedding width.
    #[arg(long, default_value_t = 512)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOP_RELATIONS)]
    top_relations: usize,
    /// JSON map class -> definition for `label+wordnet`.
    #[arg(long)]
    definitions: Option<PathBuf>,
    /// Prompt bank to write; the dictionary listing goes next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML or JSON file; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Drop prompt-enhanced learning.
    #[arg(long)]
    no_pel: bool,
    /// Drop the temporal context block.
    #[arg(long)]
    no_tca: bool,
    /// Drop test-time score smoothing.
    #[arg(long)]
    no_ss: bool,
    #[arg(long, value_enum)]
    dtype: Option<DTypeArg>,
    /// Continue from a checkpoint; its configuration is reused.
    #[arg(long, conflicts_with_all = ["config", "preset"])]
    resume: Option<PathBuf>,
    /// Stop once this many epochs are complete.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the checkpoint's smoothing.
    #[arg(long, value_enum)]
    smooth: Option<SmoothArg>,
    /// Smoothing window.
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long, value_enum)]
    tail: Option<TailArg>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "feature-mean")]
    crop_mode: CropArg,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `score`.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "normal-videos")]
    far_scope: FarScopeArg,
}

#[derive(Args)]
struct ReportArgs {
    /// Report on a trained model instead of a preset.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "ucf")]
    preset: Preset,
    /// Feature width when no checkpoint is given.
    #[arg(long, default_value_t = 1024)]
    dim: usize,
    /// Sequence length for FLOP counts.
    #[arg(long, default_value_t = 200)]
    len: usize,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON spec; individual flags override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    train_videos: Option<usize>,
    #[arg(long)]
    test_videos: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    magnitude: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    prompt_dim: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::PromptBuild(a) => prompt_build(a),
        Command::Train(a) => train(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn prompt_build(a: PromptBuildArgs) -> Result<()> {
    let classes = match &a.manifest {
        Some(m) => Manifest::load(m)?.anomaly_classes(),
        None => a.classes.clone(),
    };
    if classes.is_empty() {
        bail!("no anomaly classes given");
    }
    let embedder: Box<dyn Embedder> = match a.embedder {
        EmbedderKind::Stub => Box::new(StubEmbedder { dim: a.dim, seed: a.seed }),
        EmbedderKind::File => Box::new(FileEmbedder::load(a.embeddings.as_deref().expect("required by clap"))?),
    };
    let definitions: Option<BTreeMap<String, String>> = match &a.definitions {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => None,
    };
    let dict = if a.template == TemplateMode::LabelConceptnet {
        let source: Box<dyn EdgeSource> = match a.source {
            SourceKind::Fixture => Box::new(FixtureSource { dir: a.fixtures.clone() }),
            SourceKind::Live => Box::new(LiveSource::new(a.fixtures.clone())),
        };
        let mut wanted = classes.clone();
        if !wanted.iter().any(|c| c == tcape_core::featio::NORMAL_CLASS) {
            wanted.push(tcape_core::featio::NORMAL_CLASS.to_string());
        }
        let full = ConceptDictionary::build(source.as_ref(), &wanted, a.top_relations)?;
        let kept = full.filtered(a.filter);
        let listing = format!("filter: {}\n{}", a.filter, full.dump(&kept));
        write_atomic(&a.out.with_extension("dictionary.txt"), listing.as_bytes())?;
        Some(kept)
    } else {
        None
    };
    let opts = BankOptions {
        template: a.template,
        definitions: definitions.as_ref(),
        seed: a.seed,
    };
    let bank = build_prompt_bank(dict.as_ref(), &classes, embedder.as_ref(), &opts)?;
    bank.save(&a.out)?;
    println!("wrote {} prompts ({}-d) to {}", bank.classes.len(), bank.dim, a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut overrides: Vec<(&str, Value)> = Vec::new();
    if let Some(s) = a.seed {
        overrides.push(("seed", json!(s)));
    }
    if let Some(e) = a.epochs {
        overrides.push(("epochs", json!(e)));
    }
    if let Some(v) = a.lr {
        overrides.push(("lr", json!(v)));
    }
    if let Some(v) = a.lambda {
        overrides.push(("lambda", json!(v)));
    }
    if let Some(v) = a.batch_size {
        overrides.push(("batch_size", json!(v)));
    }
    if a.no_pel {
        overrides.push(("use_pel", json!(false)));
    }
    if a.no_tca {
        overrides.push(("use_tca", json!(false)));
    }
    if a.no_ss {
        overrides.push(("smoothing.mode", json!("none")));
    }

    let (mut resolved, file_dtype) = match &a.resume {
        Some(ckpt) => {
            let base = match checkpoint_dtype(ckpt)? {
                DType::F32 => Checkpoint::<f32>::load(ckpt)?.config,
                DType::F64 => Checkpoint::<f64>::load(ckpt)?.config,
            };
            let base = serde_json::to_value(base)?;
            let r = config::resolve(Some((Path::new(""), base)), None, &overrides)?;
            (r, Some(checkpoint_dtype(ckpt)?))
        }
        None => {
            let mut file = match &a.config {
                Some(p) => Some((p.as_path(), config::read_file(p)?)),
                None => None,
            };
            let file_dtype = match file.as_mut().and_then(|(_, v)| v.as_object_mut()).and_then(|m| m.remove("dtype")) {
                Some(v) => Some(serde_json::from_value::<DType>(v).context("config key `dtype`")?),
                None => None,
            };
            (config::resolve(file, a.preset, &overrides)?, file_dtype)
        }
    };
    if let Some(p) = a.manifest {
        resolved.paths.manifest = Some(p);
    }
    if let Some(p) = a.prompts {
        resolved.paths.prompts = Some(p);
    }
    if let Some(p) = a.out {
        resolved.paths.output = Some(p);
    }
    let dtype = a.dtype.map(DType::from).or(file_dtype).unwrap_or(DType::F32);
    if a.resume.is_some() && file_dtype != Some(dtype) {
        bail!("--dtype does not match the checkpoint being resumed");
    }
    match dtype {
        DType::F32 => run_train::<f32>(resolved, a.resume.as_deref(), a.stop_after),
        DType::F64 => run_train::<f64>(resolved, a.resume.as_deref(), a.stop_after),
    }
}

fn read_log(path: &Path, keep_through: usize) -> Result<String> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(String::new());
    };
    let mut out = String::new();
    for line in text.lines() {
        let entry: EpochLog = serde_json::from_str(line).with_context(|| format!("parsing {}", path.display()))?;
        if entry.epoch <= keep_through {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn run_train<S: Scalar>(resolved: Resolved, resume: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let paths = &resolved.paths;
    let manifest_path = paths.manifest.as_ref().ok_or_else(|| anyhow!("no manifest (use --manifest or [paths] manifest)"))?;
    let out = paths.output.clone().ok_or_else(|| anyhow!("no output directory (use --out or [paths] output)"))?;
    let manifest = Manifest::load(manifest_path)?;
    let bank = match &paths.prompts {
        Some(p) => Some(PromptBank::load(p)?),
        None => None,
    };
    if resolved.train.use_pel && bank.is_none() {
        bail!("prompt-enhanced learning needs a prompt bank (use --prompts or --no-pel)");
    }
    create_dir(&out)?;
    let mut echoed = serde_json::to_value(&resolved)?;
    echoed["dtype"] = serde_json::to_value(S::DTYPE)?;
    write_json(&out.join("config.resolved.json"), &echoed)?;

    let mut trainer = match resume {
        Some(ckpt) => {
            let mut c = Checkpoint::<S>::load(ckpt)?;
            c.config = resolved.train.clone();
            Trainer::<S>::resume(c, &manifest, bank.as_ref())?
        }
        None => Trainer::<S>::new(resolved.train.clone(), &manifest, bank.as_ref())?,
    };
    let log_path = out.join("train_log.jsonl");
    let mut log = if resume.is_some() {
        read_log(&log_path, trainer.epoch)?
    } else {
        String::new()
    };
    write_atomic(&log_path, log.as_bytes())?;
    trainer.train(stop_after, |e| {
        log.push_str(&serde_json::to_string(e)?);
        log.push('\n');
        log::info!("epoch {} l_ce {:.5} l_kd {:.5}", e.epoch, e.l_ce, e.l_kd);
        write_atomic(&log_path, log.as_bytes())
    })?;
    let ckpt_path = out.join("checkpoint.tckp");
    trainer.checkpoint().save(&ckpt_path)?;
    println!("epoch {}/{}: checkpoint {}", trainer.epoch, trainer.config.epochs, ckpt_path.display());

    let has_labels = manifest.split(Split::Test).next().is_some()
        && manifest.split(Split::Test).all(|r| r.frames.is_some());
    if trainer.epoch == trainer.config.epochs && has_labels {
        let report =
            trainer::evaluate_model(&trainer.model, &manifest, &trainer.config.smoothing, FarScope::NormalVideos)?;
        report.write_json(&out.join("metrics.json"))?;
        report.write_csv(&out.join("metrics.csv"))?;
        print_metrics(&report);
    }
    Ok(())
}

fn print_metrics(r: &MetricReport) {
    println!("auc {:.6}  ap {:.6}  far {:.6}", r.auc, r.ap, r.far);
}

fn score(a: ScoreArgs) -> Result<()> {
    match checkpoint_dtype(&a.checkpoint)? {
        DType::F32 => run_score::<f32>(a),
        DType::F64 => run_score::<f64>(a),
    }
}

fn run_score<S: Scalar>(a: ScoreArgs) -> Result<()> {
    let ckpt = Checkpoint::<S>::load(&a.checkpoint)?;
    let mut smoothing = ckpt.config.smoothing;
    if let Some(m) = a.smooth {
        smoothing.mode = match m {
            SmoothArg::None => SmoothMode::None,
            SmoothArg::Moving => SmoothMode::Moving,
            SmoothArg::Sliding => SmoothMode::Sliding,
        };
    }
    if let Some(k) = a.kappa {
        if k == 0 {
            bail!("--kappa must be at least 1");
        }
        smoothing.window = k;
    }
    if let Some(t) = a.tail {
        smoothing.tail = match t {
            TailArg::Zero => Tail::Zero,
            TailArg::Shrink => Tail::Shrink,
        };
    }
    let crops = match a.crop_mode {
        CropArg::FeatureMean => CropMode::FeatureMean,
        CropArg::ScoreMean => CropMode::ScoreMean,
    };
    let manifest = Manifest::load(&a.manifest)?;
    let model: Model<S> = ckpt.model();
    create_dir(&a.out)?;
    let splits: &[Split] = match a.split {
        SplitArg::Train => &[Split::Train],
        SplitArg::Test => &[Split::Test],
        SplitArg::All => &[Split::Train, Split::Test],
    };
    let mut n = 0;
    for &split in splits {
        for (r, rec) in trainer::score_split(&model, &manifest, split, &smoothing, crops)? {
            eval::write_scores(&a.out, &r.id, &rec)?;
            n += 1;
        }
    }
    write_json(&a.out.join("smoothing.json"), &smoothing)?;
    println!("scored {n} videos into {}", a.out.display());
    Ok(())
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let videos = trainer::collect_scores(&manifest, |r| {
        if a.scores.join(format!("{}.csv", r.id)).exists() {
            eval::read_frame_scores(&a.scores, &r.id).map(Some)
        } else {
            Ok(None)
        }
    })?;
    let scope = match a.far_scope {
        FarScopeArg::NormalVideos => FarScope::NormalVideos,
        FarScopeArg::AllNegatives => FarScope::AllNegatives,
    };
    let report = eval::evaluate(&videos, scope)?;
    create_dir(&a.out)?;
    report.write_json(&a.out.join("report.json"))?;
    report.write_csv(&a.out.join("report.csv"))?;
    print_metrics(&report);
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let model: Model<f64> = match &a.checkpoint {
        Some(p) => match checkpoint_dtype(p)? {
            DType::F32 => {
                let m = Checkpoint::<f32>::load(p)?.model();
                Model::new(m.config, 0)
            }
            DType::F64 => Checkpoint::<f64>::load(p)?.model(),
        },
        None => Model::new(TrainConfig::preset(a.preset).model_config(a.dim), 0),
    };
    if model.config.tca.is_none() {
        bail!("model has no temporal context block to report on");
    }
    let at = model::report_complexity(&model, a.len);
    let doubled = model::report_complexity(&model, 2 * a.len);
    let ratio = doubled.flops.attention as f64 / at.flops.attention as f64;
    println!("input width D        {}", at.input_dim);
    println!("query/key width Dh   {}", at.hidden);
    println!("value width Dv       {}", at.value_dim);
    println!("TCA parameters       {}", at.tca_params);
    println!("reference            {REFERENCE_TCA_PARAMS} (1.21M, assuming Dh = 128 and Dv = D/2)");
    println!("model parameters     {}", at.model_params);
    println!("TCA FLOPs at T={:<5}  {}", a.len, at.flop_count);
    println!("TCA FLOPs at T={:<5}  {}", 2 * a.len, doubled.flop_count);
    println!("attention FLOP ratio {ratio:.4}");
    if let Some(out) = &a.out {
        let doc = json!({
            "complexity": at,
            "doubled": doubled,
            "attention_ratio": ratio,
            "reference_tca_params": REFERENCE_TCA_PARAMS,
            "assumption": "query/key width 128, value width D/2",
        });
        write_json(out, &doc)?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SyntheticSpec::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { spec.$f = v; })* };
    }
    set!(seed, classes, train_videos, test_videos, dim, magnitude, noise, prompt_dim);
    create_dir(&a.out)?;
    let out = trainer::generate_synthetic(&spec, &a.out)?;
    write_json(&a.out.join("spec.json"), &spec)?;
    println!("wrote {} videos to {}", out.videos.len(), out.manifest.display());
    Ok(())
}
