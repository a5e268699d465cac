//! Joint instruction tuning: paired VL/LM micro-steps, gradient
//! accumulation over simulated devices, AdamW under a cosine schedule, and
//! evaluation of the resulting model.

mod eval;
mod examples;
mod optim;

pub use eval::{evaluate, first_number, token_overlap, EvalReport};
pub use examples::{build_examples, corpus_texts, Example};
pub use optim::{cosine_lr, AdamW};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataops::{DataError, PairedIterator};
use crate::model::{Model, ModelError};
use crate::numerics::{NumericsError, Real, Tape};
use crate::templates::TemplateError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("non-finite {stream} loss at update {update}; stopping")]
    Diverged { update: usize, stream: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Every parameter trainable; adapters must not be present.
    Pretrain,
    /// Only adapter factors trainable; adapters must be injected.
    LoraFinetune,
}

fn d_lr() -> f64 {
    1e-5
}
fn d_accum() -> usize {
    16
}
fn d_devices() -> usize {
    8
}
fn d_epochs() -> usize {
    1
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_wd() -> f64 {
    0.01
}
fn d_clip() -> Option<f64> {
    Some(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub base_lr: f64,
    #[serde(default = "d_accum")]
    pub accumulation_steps: usize,
    #[serde(default = "d_devices")]
    pub simulated_devices: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    /// Global gradient-norm clip; `null` disables clipping.
    #[serde(default = "d_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    pub mode: TrainMode,
    /// Stop after this many optimizer updates even mid-epoch.
    #[serde(default)]
    pub max_updates: Option<usize>,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    pub fn new(mode: TrainMode) -> Self {
        Self {
            base_lr: d_lr(),
            accumulation_steps: d_accum(),
            simulated_devices: d_devices(),
            epochs: d_epochs(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: d_wd(),
            clip_norm: d_clip(),
            seed: 0,
            mode,
            max_updates: None,
            checkpoint_every: None,
        }
    }

    /// Micro-steps (one VL and one LM sample each) per optimizer update.
    pub fn micro_steps_per_update(&self) -> usize {
        self.accumulation_steps * self.simulated_devices
    }

    /// Samples contributing to one optimizer update.
    pub fn effective_batch(&self) -> usize {
        self.micro_steps_per_update() * 2
    }

    pub fn total_updates(&self, epoch_len: usize) -> usize {
        let full = (self.epochs * epoch_len).div_ceil(self.micro_steps_per_update());
        self.max_updates.map_or(full, |m| m.min(full))
    }

    pub fn validate(&self) -> Result<()> {
        if self.accumulation_steps == 0 || self.simulated_devices == 0 || self.epochs == 0 {
            return Err(TrainError::Config(
                "accumulation_steps, simulated_devices and epochs must be at least 1".into(),
            ));
        }
        if !(self.base_lr > 0.0) {
            return Err(TrainError::Config("base_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Losses of one micro-step; `None` for a sample skipped for an empty mask.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub vl: Option<f64>,
    pub lm: Option<f64>,
}

/// Forward and backward of one sample, adding its gradient into the
/// trainable parameters. Samples without any masked target are skipped.
/// Non-finite activations surface as a NaN loss.
pub fn accumulate_sample<T: Real>(model: &mut Model<T>, ex: &Example) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let loss = match model.sample_loss(&mut tape, &ex.sample, ex.image.as_deref()) {
        Ok(l) => l,
        Err(ModelError::Numerics(NumericsError::EmptyLoss)) => {
            log::warn!("skipping sample from `{}` with no masked targets", ex.source);
            return Ok(None);
        }
        Err(ModelError::Numerics(NumericsError::NonFinite { .. })) => return Ok(Some(f64::NAN)),
        Err(e) => return Err(e.into()),
    };
    let value = tape.value(loss).item().as_f64();
    if value.is_finite() {
        tape.backward(loss).accumulate_into(&mut model.store);
    }
    Ok(Some(value))
}

/// The VL sample is conditioned on its image, the LM sample is text-only;
/// their gradients add. No optimizer update happens here.
pub fn joint_step<T: Real>(model: &mut Model<T>, vl: &Example, lm: &Example) -> Result<StepLoss> {
    Ok(StepLoss {
        vl: accumulate_sample(model, vl)?,
        lm: accumulate_sample(model, lm)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub update: usize,
    pub lr: f64,
    pub loss_vl: f64,
    pub loss_lm: f64,
    pub wall_ms: u128,
}

impl MetricRow {
    pub const CSV_HEADER: &'static str = "update,lr,loss_vl,loss_lm,wall_ms";

    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{},{},{}",
            self.update, self.lr, self.loss_vl, self.loss_lm, self.wall_ms
        )
    }
}

/// Where the run writes its outputs. Everything is optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub metrics_csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Adapter-only checkpoint, written in LoRA mode.
    pub adapters: Option<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub metrics: Vec<MetricRow>,
    pub updates: usize,
    pub micro_steps: usize,
}

struct Csv {
    file: Option<(PathBuf, std::fs::File)>,
}

impl Csv {
    fn open(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self { file: None }) };
        let io = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let fresh = !path.exists() || std::fs::metadata(path).map_err(io)?.len() == 0;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        if fresh {
            writeln!(f, "{}", MetricRow::CSV_HEADER).map_err(io)?;
        }
        Ok(Self {
            file: Some((path.to_path_buf(), f)),
        })
    }

    fn push(&mut self, row: &MetricRow) -> Result<()> {
        if let Some((path, f)) = &mut self.file {
            writeln!(f, "{}", row.csv()).map_err(|source| TrainError::Io {
                path: path.clone(),
                source,
            })?;
        }
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Runs the configured epochs over the paired stream, one optimizer update
/// per `accumulation_steps × simulated_devices` micro-steps (the last update
/// of a run may average fewer).
pub fn train(
    model: &mut Model<f32>,
    vl: &[Example],
    lm: &[Example],
    cfg: &TrainConfig,
    out: &TrainOutputs,
) -> Result<TrainReport> {
    cfg.validate()?;
    if vl.is_empty() || lm.is_empty() {
        return Err(TrainError::Config("both vision-language and language sets must be non-empty".into()));
    }
    match (cfg.mode, model.has_lora()) {
        (TrainMode::LoraFinetune, false) => {
            return Err(TrainError::Config("lora_finetune mode needs injected adapters".into()))
        }
        (TrainMode::Pretrain, true) => {
            return Err(TrainError::Config("pretrain mode cannot run on a model with adapters".into()))
        }
        (TrainMode::Pretrain, false) => model.set_all_trainable(true),
        _ => {}
    }
    let mut pairs = PairedIterator::new((0..vl.len()).collect(), (0..lm.len()).collect::<Vec<_>>(), cfg.seed);
    let per_update = cfg.micro_steps_per_update();
    let total_micro = cfg.epochs * pairs.epoch_len();
    let total_updates = cfg.total_updates(pairs.epoch_len());
    let mut opt = AdamW::new(cfg);
    let mut csv = Csv::open(out.metrics_csv.as_deref())?;
    let mut report = TrainReport::default();
    model.store.zero_grads();
    let started = Instant::now();
    'updates: for update in 0..total_updates {
        let steps = per_update.min(total_micro - update * per_update);
        let (mut lv, mut ll) = (Vec::new(), Vec::new());
        let mut contributions = 0usize;
        for _ in 0..steps {
            let (i, j) = pairs.next_indices();
            let loss = joint_step(model, &vl[i], &lm[j])?;
            report.micro_steps += 1;
            for (l, bucket, stream) in [(loss.vl, &mut lv, "vision-language"), (loss.lm, &mut ll, "language")] {
                if let Some(l) = l {
                    if !l.is_finite() {
                        model.store.zero_grads();
                        return Err(TrainError::Diverged { update, stream });
                    }
                    bucket.push(l);
                }
            }
            contributions += (loss.vl.is_some() || loss.lm.is_some()) as usize;
        }
        let lr = cosine_lr(update, total_updates, cfg.base_lr);
        if contributions > 0 {
            opt.step(&mut model.store, lr, 1.0 / contributions as f64);
        }
        model.store.zero_grads();
        let row = MetricRow {
            update,
            lr,
            loss_vl: mean(&lv),
            loss_lm: mean(&ll),
            wall_ms: started.elapsed().as_millis(),
        };
        csv.push(&row)?;
        report.metrics.push(row);
        report.updates += 1;
        if let (Some(every), Some(path)) = (cfg.checkpoint_every, &out.checkpoint) {
            if every > 0 && (update + 1) % every == 0 && update + 1 < total_updates {
                model.save(path)?;
            }
        }
        if report.micro_steps >= total_micro {
            break 'updates;
        }
    }
    if let Some(path) = &out.checkpoint {
        model.save(path)?;
    }
    if let (Some(path), TrainMode::LoraFinetune) = (&out.adapters, cfg.mode) {
        model.save_adapters(path)?;
    }
    Ok(report)
}
