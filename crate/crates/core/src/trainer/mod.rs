//! Pre-training loop: AdamW, warmup plus cosine schedule, logging and
//! bit-exact checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use optim::{adamw_step, clip_global_norm, effective_lr, lr_schedule, AdamWConfig, OptimState};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{MimModel, TargetMode};
use crate::nn::Graph;
use crate::report::{Provenance, Table};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Scaled by `batch_size / 256` to give the peak rate.
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub log_interval: u64,
    /// Overrides `epochs · steps_per_epoch` as the schedule length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_steps: Option<u64>,
    /// Global gradient-norm bound; off by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_grad: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 20,
            base_lr: 6e-3,
            min_lr: 0.0,
            warmup_fraction: 0.05,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            log_interval: 10,
            total_steps: None,
            clip_grad: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("train.{key}"), msg));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.epochs == 0 && self.total_steps.is_none() {
            return bad("epochs", "must be positive");
        }
        if self.total_steps == Some(0) {
            return bad("total_steps", "must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", "must be positive");
        }
        if !(self.min_lr >= 0.0 && self.min_lr.is_finite()) {
            return bad("min_lr", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction", "must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if self.log_interval == 0 {
            return bad("log_interval", "must be positive");
        }
        if self.clip_grad.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_grad", "must be positive");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: self.eps,
        }
    }

    pub fn peak_lr(&self) -> f64 {
        effective_lr(self.base_lr, self.batch_size)
    }
}

/// Run-length arithmetic for a dataset of `n` images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub steps_per_epoch: u64,
    pub total: u64,
    pub warmup: u64,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, n: usize) -> Result<Self> {
        let steps_per_epoch = (n / cfg.batch_size) as u64;
        if steps_per_epoch == 0 {
            return Err(Error::config(
                "train.batch_size",
                format!("batch {} exceeds dataset size {n}", cfg.batch_size),
            ));
        }
        let total = cfg.total_steps.unwrap_or(cfg.epochs as u64 * steps_per_epoch);
        let warmup = ((cfg.warmup_fraction * total as f64).round() as u64).min(total - 1);
        Ok(Self {
            steps_per_epoch,
            total,
            warmup,
        })
    }
}

/// Stream ids for the independent generators derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_TEACHER: u64 = 1;
const STREAM_MASK: u64 = 2;
const STREAM_EPOCH: u64 = 1 << 32;

/// Visiting order of epoch `epoch`; a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::stream(seed, STREAM_EPOCH + epoch).shuffle(&mut order);
    order
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: ExperimentConfig,
    pub model: MimModel,
    /// Frozen target network for feature regression.
    pub teacher: Option<MimModel>,
    pub opt: OptimState,
    /// Mask-sampling generator.
    pub rng: Rng,
}

impl TrainState {
    /// Fresh state. A configured teacher checkpoint is read from disk.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let mut state = Self::skeleton(config)?;
        if let (Some(teacher), Some(path)) = (
            state.teacher.as_mut(),
            state.config.teacher.as_ref().and_then(|t| t.checkpoint.as_ref()),
        ) {
            let source = load_checkpoint(path)?;
            for id in teacher.encoder_param_ids() {
                let name = teacher.params.entry(id).name.clone();
                let src =
                    source.model.params.find(&name).ok_or_else(|| {
                        Error::config("teacher.checkpoint", format!("checkpoint lacks tensor `{name}`"))
                    })?;
                let value = source.model.params.get(src);
                if value.shape() != teacher.params.get(id).shape() {
                    return Err(Error::config(
                        "teacher.checkpoint",
                        format!("tensor `{name}` has shape {:?}", value.shape()),
                    ));
                }
                *teacher.params.get_mut(id) = value.clone();
            }
        }
        Ok(state)
    }

    /// Fresh state without reading any file.
    pub(crate) fn skeleton(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let model = MimModel::new(config.model.clone(), &mut Rng::stream(seed, STREAM_INIT))?;
        let teacher = match config.model.target_mode {
            TargetMode::FeatureRegression => {
                let mut tcfg = config.model.clone();
                tcfg.target_mode = TargetMode::RawPixelsNormalized;
                tcfg.mff = None;
                Some(MimModel::new(tcfg, &mut Rng::stream(seed, STREAM_TEACHER))?)
            }
            _ => None,
        };
        let opt = OptimState::new(&model.params, config.train.adamw());
        Ok(Self {
            model,
            teacher,
            opt,
            rng: Rng::stream(seed, STREAM_MASK),
            config,
        })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(self.config.hash(), self.config.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRecord {
    /// Zero-based index of the update whose forward pass produced `loss`.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub alpha: Vec<f64>,
    pub wall_ms: f64,
}

pub trait Callback {
    fn on_log(&mut self, state: &TrainState, record: &TrainLogRecord) -> Result<()>;
}

impl<F: FnMut(&TrainState, &TrainLogRecord) -> Result<()>> Callback for F {
    fn on_log(&mut self, state: &TrainState, record: &TrainLogRecord) -> Result<()> {
        self(state, record)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<TrainLogRecord>,
    /// Loss of every step run in this call, in order.
    pub losses: Vec<f64>,
}

fn check_dataset(cfg: &ExperimentConfig, data: &Dataset) -> Result<()> {
    let m = &cfg.model;
    if data.is_empty() {
        return Err(Error::invalid("train_loop", "empty dataset"));
    }
    if data.height != m.image_size || data.width != m.image_size || data.channels != m.channels {
        return Err(Error::config(
            "model.image_size",
            format!(
                "dataset holds {}x{}x{} images, model expects {}x{}x{}",
                data.channels, data.height, data.width, m.channels, m.image_size, m.image_size
            ),
        ));
    }
    Ok(())
}

/// Trains until the schedule ends or `stop_at` updates have been applied in
/// total, whichever comes first.
pub fn train_loop(
    state: &mut TrainState,
    data: &Dataset,
    callbacks: &mut [&mut dyn Callback],
    stop_at: Option<u64>,
) -> Result<TrainOutcome> {
    check_dataset(&state.config, data)?;
    let tc = state.config.train.clone();
    let sched = Schedule::new(&tc, data.len())?;
    let end = stop_at.map_or(sched.total, |s| s.min(sched.total));
    let peak = tc.peak_lr();
    let started = Instant::now();
    let mut outcome = TrainOutcome::default();
    let mut order: Option<(u64, Vec<usize>)> = None;
    while state.step() < end {
        let t = state.step();
        let epoch = t / sched.steps_per_epoch;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(state.config.seed, epoch, data.len())));
        }
        let i = (t % sched.steps_per_epoch) as usize * tc.batch_size;
        let indices = &order.as_ref().unwrap().1[i..i + tc.batch_size];
        let images = data.batch(indices);

        let (loss, alpha, mut grads) = {
            let mut g = Graph::new(&state.model.params);
            let fwd = state
                .model
                .forward_train(&mut g, &images, state.teacher.as_ref(), &mut state.rng)?;
            let loss = g.value(fwd.loss).item();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: t, loss });
            }
            let grads = g.backward(fwd.loss)?;
            (loss, fwd.alpha.unwrap_or_default(), g.param_grads(&grads))
        };
        if let Some(c) = tc.clip_grad {
            clip_global_norm(&mut grads, c);
        }
        let lr = lr_schedule(t + 1, sched.total, sched.warmup, peak, tc.min_lr)?;
        adamw_step(&mut state.opt, &mut state.model.params, &grads, lr)?;
        outcome.losses.push(loss);

        if t.is_multiple_of(tc.log_interval) || t + 1 == sched.total {
            let record = TrainLogRecord {
                step: t,
                loss,
                lr,
                alpha,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            };
            for cb in callbacks.iter_mut() {
                cb.on_log(state, &record)?;
            }
            outcome.records.push(record);
        }
    }
    Ok(outcome)
}

/// Training log as `step,loss,lr,alpha_0,...,alpha_k,wall_ms`.
pub fn log_table(records: &[TrainLogRecord], provenance: Option<Provenance>) -> Table {
    let k = records.first().map_or(0, |r| r.alpha.len());
    let mut header = vec!["step".to_string(), "loss".into(), "lr".into()];
    header.extend((0..k).map(|i| format!("alpha_{i}")));
    header.push("wall_ms".into());
    let mut table = Table::new(provenance, header);
    for r in records {
        let mut row = vec![r.step as f64, r.loss, r.lr];
        row.extend(&r.alpha);
        row.push(r.wall_ms);
        table.push(row);
    }
    table
}
