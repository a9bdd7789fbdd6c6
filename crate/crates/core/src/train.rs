//! Training loop: pair sampling, taped loss, gradient step and logging.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{DataError, Dataset, PairSampler};
use crate::eval::{eval_classification, EvalError, ModalityCondition};
use crate::losses::{total_loss, total_loss_and_grad, LossConfig, LossError, LossReport};
use crate::model::{init_params, save_checkpoint, ArchitectureSpec, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite loss at step {step} in {term}")]
    NonFinite { step: usize, term: &'static str },
    #[error("gradient shape {actual:?} does not match parameter shape {expected:?} in layer {layer}")]
    ShapeMismatch {
        layer: usize,
        expected: (usize, usize),
        actual: (usize, usize),
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    /// Classical momentum, beta = 0.9.
    Momentum,
    /// Bias-corrected first/second moment update.
    Adam,
}

pub const MOMENTUM_BETA: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn name(self) -> &'static str {
        match self {
            Optimizer::Sgd => "plain-sgd",
            Optimizer::Momentum => "momentum-sgd",
            Optimizer::Adam => "adaptive-moment",
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "plain-sgd" | "sgd" => Ok(Optimizer::Sgd),
            "momentum-sgd" | "momentum" => Ok(Optimizer::Momentum),
            "adaptive-moment" | "adam" => Ok(Optimizer::Adam),
            other => Err(format!(
                "unknown optimizer {other:?} (expected plain-sgd|momentum-sgd|adaptive-moment)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` means `ceil(n_train / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub loss: LossConfig,
    /// Save the current params every this many epochs to `checkpoint_path`.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            steps_per_epoch: None,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            seed: 0,
            loss: LossConfig::default(),
            checkpoint_every: None,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if self.steps_per_epoch == Some(0) {
            problems.push("steps_per_epoch must be >= 1".to_string());
        }
        // lr = 0 is accepted for frozen-parameter runs.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.checkpoint_every == Some(0) {
            problems.push("checkpoint_every must be >= 1".to_string());
        }
        if self.checkpoint_every.is_some() && self.checkpoint_path.is_none() {
            problems.push("checkpoint_every needs checkpoint_path".to_string());
        }
        if let Err(e) = self.loss.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(problems.join("; ")))
        }
    }

    pub fn steps_for(&self, n_train: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| n_train.div_ceil(self.batch_size).max(1))
    }
}

/// Per-buffer optimizer memory, allocated on the first step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

fn check_shapes(params: &ModelParams, grads: &ModelParams) -> Result<()> {
    for (i, (p, g)) in params.layers().iter().zip(grads.layers()).enumerate() {
        let expected = p.weight.shape();
        let actual = g.weight.shape();
        if expected != actual || p.bias.len() != g.bias.len() {
            return Err(TrainError::ShapeMismatch { layer: i, expected, actual });
        }
    }
    Ok(())
}

/// One in-place update of `params` from `grads`.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    optimizer: Optimizer,
    learning_rate: f64,
) -> Result<()> {
    check_shapes(params, grads)?;
    let grad_buffers: Vec<&[f64]> = grads
        .layers()
        .into_iter()
        .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
        .collect();
    let mut param_buffers: Vec<&mut [f64]> = params
        .layers_mut()
        .into_iter()
        .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
        .collect();
    if state.first.is_empty() && optimizer != Optimizer::Sgd {
        state.first = grad_buffers.iter().map(|g| vec![0.0; g.len()]).collect();
        if optimizer == Optimizer::Adam {
            state.second = state.first.clone();
        }
    }
    state.t += 1;
    let lr = learning_rate;
    match optimizer {
        Optimizer::Sgd => {
            for (p, g) in param_buffers.iter_mut().zip(&grad_buffers) {
                for (pi, gi) in p.iter_mut().zip(g.iter()) {
                    *pi -= lr * gi;
                }
            }
        }
        Optimizer::Momentum => {
            for ((p, g), m) in param_buffers.iter_mut().zip(&grad_buffers).zip(&mut state.first) {
                for ((pi, gi), mi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()) {
                    *mi = MOMENTUM_BETA * *mi + gi;
                    *pi -= lr * *mi;
                }
            }
        }
        Optimizer::Adam => {
            let t = state.t as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            let buffers = param_buffers
                .iter_mut()
                .zip(&grad_buffers)
                .zip(state.first.iter_mut().zip(&mut state.second));
            for ((p, g), (m, v)) in buffers {
                for (((pi, gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                    *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                    let m_hat = *mi / c1;
                    let v_hat = *vi / c2;
                    *pi -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub report: LossReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Loss on a fixed validation batch; `None` when the validation split
    /// has fewer than two classes.
    pub val_loss: Option<LossReport>,
    /// Seen-class mAcc on the validation split (both modalities).
    pub val_seen: f64,
    pub val_hm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn write_report<W: Write>(w: &mut W, prefix: &str, r: &LossReport) -> std::io::Result<()> {
    for (name, v) in r.fields() {
        write!(w, " {prefix}{name}={v}")?;
    }
    Ok(())
}

impl StepRecord {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "step={}", self.step)?;
        write_report(w, "", &self.report)?;
        writeln!(w)
    }
}

impl EpochRecord {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "epoch={}", self.epoch)?;
        if let Some(r) = &self.val_loss {
            write_report(w, "val_", r)?;
        }
        writeln!(w, " val_S={} val_HM={}", self.val_seen, self.val_hm)
    }
}

impl TrainLog {
    /// Step lines in order, each epoch line after the last step of its epoch.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let per_epoch = if self.epochs.is_empty() {
            self.steps.len()
        } else {
            self.steps.len() / self.epochs.len()
        };
        let mut steps = self.steps.iter();
        for e in &self.epochs {
            for s in steps.by_ref().take(per_epoch) {
                s.write_to(&mut w)?;
            }
            e.write_to(&mut w)?;
        }
        for s in steps {
            s.write_to(&mut w)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec");
        String::from_utf8(out).expect("ascii log")
    }
}

/// Seeds for the independent random streams of one run.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const SAMPLING_STREAM: u64 = 1;
const VALIDATION_STREAM: u64 = 2;

fn first_non_finite(r: &LossReport) -> Option<&'static str> {
    r.fields().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
}

pub fn train(dataset: &Dataset, arch: ArchitectureSpec, config: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    let params = init_params(arch, config.seed)?;
    train_from(dataset, params, config)
}

/// Same as [`train`] starting from the given parameters.
pub fn train_from(dataset: &Dataset, mut params: ModelParams, config: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    let dims = dataset.dims();
    let arch = params.arch;
    if (arch.dim_audio_in, arch.dim_video_in, arch.dim_text_in) != (dims.audio, dims.video, dims.text) {
        return Err(TrainError::Config(format!(
            "architecture inputs {}/{}/{} do not match dataset dims {}/{}/{}",
            arch.dim_audio_in, arch.dim_video_in, arch.dim_text_in, dims.audio, dims.video, dims.text
        )));
    }
    let manifest = &dataset.manifest;
    let train_split = &dataset.splits.train;
    let sampler = PairSampler::new(train_split, manifest)?;
    let val_batch = match PairSampler::new(&dataset.splits.validation, manifest) {
        Ok(s) => Some(s.sample(config.batch_size, &mut stream(config.seed, VALIDATION_STREAM))?),
        Err(DataError::TooFewClasses { .. }) => None,
        Err(e) => return Err(e.into()),
    };

    let mut rng = stream(config.seed, SAMPLING_STREAM);
    let mut state = OptimizerState::default();
    let mut log = TrainLog::default();
    let steps_per_epoch = config.steps_for(train_split.len());
    let mut step = 0;
    for epoch in 1..=config.epochs {
        for _ in 0..steps_per_epoch {
            let batch = sampler.sample(config.batch_size, &mut rng)?;
            let (report, grads) = total_loss_and_grad(&batch, &params, &config.loss).map_err(|e| match e {
                LossError::NonFinite { term } => TrainError::NonFinite { step, term },
                other => other.into(),
            })?;
            if let Some(term) = first_non_finite(&report) {
                return Err(TrainError::NonFinite { step, term });
            }
            optimizer_step(&mut params, &grads, &mut state, config.optimizer, config.learning_rate)?;
            let record = StepRecord { step, report };
            if log::log_enabled!(log::Level::Debug) {
                let mut line = Vec::new();
                record.write_to(&mut line).expect("writing to a Vec");
                log::debug!("{}", String::from_utf8_lossy(&line).trim_end());
            }
            log.steps.push(record);
            step += 1;
        }

        let val_loss = match &val_batch {
            Some(b) => Some(total_loss(b, &params, &config.loss)?.1),
            None => None,
        };
        let (val_seen, val_hm) = if dataset.splits.validation.is_empty() {
            (0.0, 0.0)
        } else {
            let r = eval_classification(&params, manifest, &dataset.splits.validation, ModalityCondition::Both)?;
            (r.seen, r.hm)
        };
        let record = EpochRecord {
            epoch,
            val_loss,
            val_seen,
            val_hm,
        };
        log::info!(
            "epoch {epoch}: train total {:.6}, val S {val_seen:.2}",
            log.steps.last().map_or(0.0, |s| s.report.total)
        );
        log.epochs.push(record);

        if let (Some(every), Some(path)) = (config.checkpoint_every, &config.checkpoint_path) {
            if epoch % every == 0 {
                save_checkpoint(&params, path)?;
            }
        }
    }
    Ok((params, log))
}
