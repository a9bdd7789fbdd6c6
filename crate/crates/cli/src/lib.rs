//! Argument parsing and command dispatch for the `avgzsl` binary.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use avgzsl_core::ablation::{ablate, format_table};
use avgzsl_core::data::{gen_synthetic, load_dataset, save_dataset, Dataset, FeatureDims, FeatureRecord, SyntheticConfig};
use avgzsl_core::eval::{eval_classification, export_embeddings, gzsl_retrieval_eval, EvalReport, ModalityCondition};
use avgzsl_core::gradcheck::{run_grad_check, GRAD_CHECK_TOL};
use avgzsl_core::io_util::atomic_write;
use avgzsl_core::losses::LossTerm;
use avgzsl_core::model::{load_checkpoint, save_checkpoint, ArchitectureSpec, ModelParams};
use avgzsl_core::train::{train, Optimizer, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "avgzsl", version, about = "Audio-visual generalized zero-shot learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Generalized zero-shot classification on a split.
    EvalCls(EvalArgs),
    /// Text-to-modality retrieval on a split.
    EvalRet(EvalArgs),
    /// Compare loss gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Write audio, video and class text embeddings.
    ExportEmb(ExportArgs),
    /// Train and evaluate the loss-term ablation grid.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    pub seen: usize,
    #[arg(long, default_value_t = 4)]
    pub unseen: usize,
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 1024)]
    pub audio_dim: usize,
    #[arg(long, default_value_t = 1024)]
    pub video_dim: usize,
    #[arg(long, default_value_t = 300)]
    pub text_dim: usize,
    /// Output stem; writes `<stem>.avzm` and `<stem>.{train,val,test}.avzf`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Training options. Unset flags fall back to the config file, then to the
/// defaults.
#[derive(Debug, Args, Default, Clone)]
pub struct TrainOpts {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// plain-sgd | momentum-sgd | adaptive-moment
    #[arg(long)]
    pub optimizer: Option<Optimizer>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// Disable a loss term; repeatable.
    #[arg(long = "drop", value_name = "TERM")]
    pub drop: Vec<LossTerm>,
    /// Flat `key=value` file.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the training log here.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Save the checkpoint every N epochs during training.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "both")]
    pub modality: ModalityCondition,
    /// train | val | test
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Write the full per-class report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub batches: usize,
    #[arg(long, default_value_t = 8)]
    pub pairs: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "both")]
    pub modality: ModalityCondition,
    /// Run rows on separate threads.
    #[arg(long)]
    pub parallel: bool,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub opts: TrainOpts,
}

/// Reads a flat `key=value` file. Blank lines and `#` comments are skipped.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected key=value, got {raw:?}", i + 1);
        };
        out.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| anyhow::anyhow!("config key {key}: invalid value {v:?}: {e}"))
}

impl TrainOpts {
    /// Flags over config file over defaults.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (k, v) in parse_config_file(&text)? {
                match k.as_str() {
                    "seed" => cfg.seed = parse_value(&k, &v)?,
                    "epochs" => cfg.epochs = parse_value(&k, &v)?,
                    "batch_size" => cfg.batch_size = parse_value(&k, &v)?,
                    "steps_per_epoch" => cfg.steps_per_epoch = Some(parse_value(&k, &v)?),
                    "lr" | "learning_rate" => cfg.learning_rate = parse_value(&k, &v)?,
                    "optimizer" => cfg.optimizer = parse_value(&k, &v)?,
                    "margin" => cfg.loss.margin = parse_value(&k, &v)?,
                    "drop" => {
                        for t in v.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                            cfg.loss.set(parse_value::<LossTerm>(&k, t)?, false);
                        }
                    }
                    other => bail!("config file {}: unknown key {other:?}", path.display()),
                }
            }
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.steps_per_epoch {
            cfg.steps_per_epoch = Some(v);
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.optimizer {
            cfg.optimizer = v;
        }
        if let Some(v) = self.margin {
            cfg.loss.margin = v;
        }
        for &t in &self.drop {
            cfg.loss.set(t, false);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_data(stem: &Path) -> Result<Dataset> {
    load_dataset(stem).with_context(|| format!("loading dataset {}", stem.display()))
}

fn arch_for(data: &Dataset) -> ArchitectureSpec {
    let d = data.dims();
    ArchitectureSpec::for_features(d.audio, d.video, d.text)
}

fn split<'d>(data: &'d Dataset, name: &str) -> Result<&'d [FeatureRecord]> {
    Ok(match name {
        "train" => &data.splits.train,
        "val" => &data.splits.validation,
        "test" => &data.splits.test,
        other => bail!("unknown split {other:?} (expected train|val|test)"),
    })
}

fn load_model(path: &Path, data: &Dataset) -> Result<ModelParams> {
    let params = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let d = data.dims();
    let a = params.arch;
    if (a.dim_audio_in, a.dim_video_in, a.dim_text_in) != (d.audio, d.video, d.text) {
        bail!(
            "checkpoint inputs {}/{}/{} do not match dataset dims {}/{}/{}",
            a.dim_audio_in,
            a.dim_video_in,
            a.dim_text_in,
            d.audio,
            d.video,
            d.text
        );
    }
    Ok(params)
}

fn write_report(report: &EvalReport, out: &mut dyn Write, path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        atomic_write::<std::io::Error, _>(p, |w| report.write_to(w))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    writeln!(out, "{}", report.summary_line())?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write::<std::io::Error, _>(path, |w| w.write_all(text.as_bytes()))
        .with_context(|| format!("writing {}", path.display()))
}

/// Runs one parsed command, writing user-facing output to `out`. Returns
/// the process exit status.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::GenData(a) => {
            let cfg = SyntheticConfig {
                n_seen: a.seen,
                n_unseen: a.unseen,
                per_class: a.per_class,
                dims: FeatureDims {
                    audio: a.audio_dim,
                    video: a.video_dim,
                    text: a.text_dim,
                },
                noise_sigma: a.sigma,
                seed: a.seed,
            };
            let data = gen_synthetic(&cfg)?;
            save_dataset(&data, &a.out).with_context(|| format!("writing dataset {}", a.out.display()))?;
            writeln!(
                out,
                "wrote {} classes, {}/{}/{} train/val/test records to {}",
                data.manifest.len(),
                data.splits.train.len(),
                data.splits.validation.len(),
                data.splits.test.len(),
                a.out.display()
            )?;
        }
        Command::Train(a) => {
            let data = load_data(&a.data)?;
            let mut cfg = a.opts.resolve()?;
            if let Some(every) = a.checkpoint_every {
                cfg.checkpoint_every = Some(every);
                cfg.checkpoint_path = Some(a.out.clone());
            }
            let (params, log) = train(&data, arch_for(&data), &cfg)?;
            save_checkpoint(&params, &a.out).with_context(|| format!("writing checkpoint {}", a.out.display()))?;
            if let Some(p) = &a.log {
                atomic_write::<std::io::Error, _>(p, |w| log.write_to(w))
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            if let Some(last) = log.steps.last() {
                let mut line = Vec::new();
                last.write_to(&mut line)?;
                out.write_all(&line)?;
            }
        }
        Command::EvalCls(a) => {
            let data = load_data(&a.data)?;
            let params = load_model(&a.ckpt, &data)?;
            let report = eval_classification(&params, &data.manifest, split(&data, &a.split)?, a.modality)?;
            write_report(&report, out, a.out.as_deref())?;
        }
        Command::EvalRet(a) => {
            let data = load_data(&a.data)?;
            let params = load_model(&a.ckpt, &data)?;
            let report = gzsl_retrieval_eval(&params, &data.manifest, split(&data, &a.split)?, a.modality)?;
            write_report(&report, out, a.out.as_deref())?;
        }
        Command::GradCheck(a) => {
            let rows = run_grad_check(a.seed, a.batches, a.pairs)?;
            let mut worst: f64 = 0.0;
            for r in &rows {
                writeln!(out, "config={} max_rel_err={:e}", r.label, r.max_rel_err)?;
                worst = worst.max(r.max_rel_err);
            }
            writeln!(out, "max_rel_err={worst:e}")?;
            if !(worst < GRAD_CHECK_TOL) {
                eprintln!("error: gradient check failed: {worst:e} >= {GRAD_CHECK_TOL:e}");
                return Ok(1);
            }
        }
        Command::ExportEmb(a) => {
            let data = load_data(&a.data)?;
            let params = load_model(&a.ckpt, &data)?;
            let records = split(&data, &a.split)?;
            export_embeddings(&params, records, &data.manifest, &a.out)
                .with_context(|| format!("writing {}", a.out.display()))?;
            writeln!(
                out,
                "wrote {} rows to {}",
                2 * records.len() + data.manifest.len(),
                a.out.display()
            )?;
        }
        Command::Ablate(a) => {
            let data = load_data(&a.data)?;
            let cfg = a.opts.resolve()?;
            let results = ablate(&data, arch_for(&data), &cfg, a.modality, a.parallel)?;
            let table = format_table(&results);
            if let Some(p) = &a.out {
                write_text(p, &table)?;
            }
            out.write_all(table.as_bytes())?;
        }
    }
    Ok(0)
}

fn init_logging() {
    let level = match std::env::var("AVGZSL_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
}

/// Parses `argv`, runs the command and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging();
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(cli, &mut lock) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
