//! Training: loss, optimizer, plateau schedule and the epoch loop.

pub mod loss;
pub mod optim;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tasnet_autodiff::{Graph, Tensor, Var};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::models::{Bound, ForwardOptions, ModelRegistry, ParamStore, SeparationModel, UNet};
use crate::rng::{item_seed, substream, DROPOUT, SHUFFLE};

pub use loss::{pit_loss, pit_loss_value, si_snr_loss, si_snr_loss_value, Permutation, IDENTITY, SI_SNR_EPS, SWAPPED};
pub use optim::{clip_global_norm, Adam, Schedule, ScheduleEvent, ADAM_EPS, BETA1, BETA2};

fn empty_object() -> serde_json::Value {
    serde_json::json!({})
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: String,
    #[serde(default = "empty_object")]
    pub config: serde_json::Value,
}

fn default_batch() -> usize {
    8
}
fn default_halve() -> usize {
    2
}
fn default_stop() -> usize {
    5
}
fn default_clip() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    /// Initial learning rate; defaults by model kind.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_halve")]
    pub lr_halve_patience: usize,
    #[serde(default = "default_stop")]
    pub early_stop_patience: usize,
    /// Defaults by model kind.
    #[serde(default)]
    pub max_epochs: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Global gradient-norm ceiling.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

impl TrainConfig {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Self {
            model: ModelSpec {
                kind: kind.to_string(),
                config,
            },
            lr: None,
            batch_size: default_batch(),
            lr_halve_patience: default_halve(),
            early_stop_patience: default_stop(),
            max_epochs: None,
            seed: 0,
            clip_norm: default_clip(),
        }
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(v.clone()).map_err(|e| Error::json("train config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(if self.model.kind == UNet::KIND { 1e-4 } else { 1e-3 })
    }

    pub fn max_epochs(&self) -> usize {
        self.max_epochs.unwrap_or(if self.model.kind == UNet::KIND { 200 } else { 100 })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.lr() > 0.0 && self.lr().is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr()));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("lr_halve_patience", self.lr_halve_patience),
            ("early_stop_patience", self.early_stop_patience),
            ("max_epochs", self.max_epochs()),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        Ok(())
    }
}

fn to_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

/// Loss of one example on a recorded graph.
fn example_loss(g: &mut Graph<f32>, outs: &[Var], ex: &Example) -> Result<Var> {
    if outs.len() != ex.sources.len() {
        return Err(Error::Data(format!(
            "model estimates {} sources, example has {}",
            outs.len(),
            ex.sources.len()
        )));
    }
    let refs: Vec<Vec<f32>> = ex.sources.iter().map(|s| to_f32(&s.samples)).collect();
    match outs.len() {
        1 => si_snr_loss(g, outs[0], &refs[0]),
        2 => Ok(pit_loss(g, outs, &[&refs[0], &refs[1]])?.0),
        n => Err(Error::Data(format!("no loss for {n} sources"))),
    }
}

/// Loss of one example without gradients.
pub fn example_loss_value(model: &dyn SeparationModel, ex: &Example) -> Result<f64> {
    let outs = crate::models::infer(model, &ex.mixture.samples, &ForwardOptions::default())?;
    if outs.len() != ex.sources.len() {
        return Err(Error::Data(format!(
            "model estimates {} sources, example has {}",
            outs.len(),
            ex.sources.len()
        )));
    }
    let est: Vec<Vec<f32>> = outs.iter().map(|o| to_f32(o)).collect();
    let refs: Vec<Vec<f32>> = ex.sources.iter().map(|s| to_f32(&s.samples)).collect();
    match est.len() {
        1 => si_snr_loss_value(&est[0], &refs[0]),
        _ => Ok(pit_loss_value(&[&est[0], &est[1]], &[&refs[0], &refs[1]])?.0),
    }
}

/// A model together with its optimizer state.
pub struct Trainer {
    model: Box<dyn SeparationModel>,
    opt: Adam,
    clip_norm: f64,
    seed: u64,
    clipped_steps: u64,
}

impl Trainer {
    pub fn new(model: Box<dyn SeparationModel>, lr: f64, clip_norm: f64, seed: u64) -> Self {
        let opt = Adam::new(model.params(), lr);
        Self {
            model,
            opt,
            clip_norm,
            seed,
            clipped_steps: 0,
        }
    }

    pub fn model(&self) -> &dyn SeparationModel {
        self.model.as_ref()
    }

    pub fn into_model(self) -> Box<dyn SeparationModel> {
        self.model
    }

    pub fn lr(&self) -> f64 {
        self.opt.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.opt.steps()
    }

    /// Steps on which the gradient norm exceeded the clipping ceiling.
    pub fn clipped_steps(&self) -> u64 {
        self.clipped_steps
    }

    /// Gradient of the mean batch loss, accumulated one example at a time,
    /// and the mean loss itself.
    pub fn batch_gradient(&self, batch: &[&Example]) -> Result<(f64, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let params = self.model.params();
        let mut acc: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for (j, ex) in batch.iter().enumerate() {
            let mut g = Graph::<f32>::new();
            g.set_training(true);
            let p = Bound::new(&mut g, params, true);
            let x = g.constant(Tensor::signal(to_f32(&ex.mixture.samples)));
            let opts = ForwardOptions {
                mask_override: None,
                dropout_seed: item_seed(self.seed, DROPOUT, (self.opt.steps() << 16) + j as u64),
            };
            let outs = self.model.forward_f32(&mut g, &p, x, &opts)?;
            let loss = example_loss(&mut g, &outs, ex)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Diverged(format!("loss is {value} at step {}", self.opt.steps() + 1)));
            }
            total += value;
            let grads = g.backward(loss)?;
            for (a, (_, v)) in acc.iter_mut().zip(p.iter()) {
                if let Some(gv) = grads.get(v) {
                    a.iter_mut().zip(gv).for_each(|(s, &d)| *s += scale * d as f64);
                }
            }
        }
        Ok((total * scale, acc))
    }

    /// One optimizer step on the mean loss of `batch`; returns that loss.
    pub fn step(&mut self, batch: &[&Example]) -> Result<f64> {
        let (loss, mut grads) = self.batch_gradient(batch)?;
        let norm = clip_global_norm(&mut grads, self.clip_norm);
        if norm > self.clip_norm {
            self.clipped_steps += 1;
            log::debug!("step {}: gradient norm {norm:.3} clipped to {}", self.opt.steps() + 1, self.clip_norm);
        }
        self.opt.step(self.model.params_mut(), &grads)?;
        Ok(loss)
    }

    /// Mean loss over `examples`, in inference mode.
    pub fn evaluate(&self, examples: &[Example]) -> Result<f64> {
        mean_loss(self.model.as_ref(), examples)
    }
}

pub fn mean_loss(model: &dyn SeparationModel, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let losses = examples
        .par_iter()
        .map(|ex| example_loss_value(model, ex))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used during the epoch.
    pub lr: f64,
    pub stopped: bool,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_loss,lr,stopped";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.train_loss, self.val_loss, self.lr, self.stopped)
    }
}

pub fn write_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    /// Model holding the parameters of the best validation epoch.
    pub model: Box<dyn SeparationModel>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub log: Vec<EpochLog>,
    pub steps: u64,
    pub clipped_steps: u64,
}

/// Called after every epoch with the log row, the current model and
/// whether this epoch is the new best.
pub type EpochHook<'a> = dyn FnMut(&EpochLog, &dyn SeparationModel, bool) -> Result<()> + 'a;

pub fn train(
    cfg: &TrainConfig,
    registry: &ModelRegistry,
    train_set: &[Example],
    val_set: &[Example],
    on_epoch: &mut EpochHook<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let model = registry.build(&cfg.model.kind, &cfg.model.config, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.lr(), cfg.clip_norm, cfg.seed);
    let mut sched = Schedule::new(cfg.lr(), cfg.lr_halve_patience, cfg.early_stop_patience, cfg.max_epochs());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = substream(cfg.seed, SHUFFLE);
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    loop {
        let epoch = sched.epoch + 1;
        let lr = sched.lr;
        trainer.set_lr(lr);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let l = trainer.step(&batch).map_err(|e| match e {
                Error::Diverged(m) => Error::Diverged(format!("epoch {epoch}: {m}")),
                e => e,
            })?;
            sum += l * chunk.len() as f64;
        }
        let train_loss = sum / train_set.len() as f64;
        let val_loss = trainer.evaluate(val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: validation loss is {val_loss}")));
        }
        let ev = sched.update(val_loss);
        if ev.improved {
            best = Some((epoch, val_loss, trainer.model().params().clone()));
        }
        if ev.halved {
            log::info!("epoch {epoch}: learning rate halved to {}", sched.lr);
        }
        let row = EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
            stopped: ev.stop,
        };
        log::info!("epoch {epoch}: train {train_loss:.4} val {val_loss:.4} lr {lr}");
        on_epoch(&row, trainer.model(), ev.improved)?;
        log.push(row);
        if ev.stop {
            break;
        }
    }
    let (best_epoch, best_val_loss, params) = best.expect("first epoch always improves on infinity");
    let steps = trainer.steps();
    let clipped_steps = trainer.clipped_steps();
    let mut model = trainer.into_model();
    *model.params_mut() = params;
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_val_loss,
        log,
        steps,
        clipped_steps,
    })
}
