//! Mini-batch momentum SGD on the mean per-example negative log-likelihood,
//! with per-epoch validation and separate best checkpoints per metric.
//!
//! All randomness is derived from `(seed, epoch)` for shuffling and
//! `(seed, step, example)` for augmentation and dropout. Per-example
//! gradients are summed in batch order, so results do not depend on the
//! number of worker threads, and a run resumed from a [`TrainState`]
//! checkpoint reproduces the uninterrupted run exactly.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::PreparedDataset;
use crate::error::{Error, Result};
use crate::eval::{coverage_at_accuracy, evaluate, sequence_accuracy};
use crate::network::{read_container, write_container, Gradients, Model};
use crate::nn::Mode;
use crate::sequence::SequenceLabel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Multiply the rate by `lr_decay` every `lr_decay_steps` steps
    /// (0 disables decay).
    pub lr_decay: f64,
    pub lr_decay_steps: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    /// Wall-clock budget in seconds, checked after every step.
    pub time_limit: Option<f64>,
    /// Stop after the first epoch whose validation accuracy reaches this.
    pub target_accuracy: Option<f64>,
    pub dropout: bool,
    pub augment: bool,
    pub val_fraction: f64,
    /// Accuracy level for the coverage metric.
    pub coverage_target: f64,
    pub seed: u64,
    /// Worker threads for the per-example passes; 1 is strictly
    /// single-threaded.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay: 0.5,
            lr_decay_steps: 0,
            epochs: 10,
            max_steps: None,
            time_limit: None,
            target_accuracy: None,
            dropout: true,
            augment: true,
            val_fraction: 0.1,
            coverage_target: 0.98,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidArgument("lr_decay must be in (0, 1]".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidArgument("val_fraction must be in (0, 1)".into()));
        }
        if !(self.coverage_target > 0.0 && self.coverage_target <= 1.0) {
            return Err(Error::InvalidArgument("coverage_target must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if self.lr_decay_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * self.lr_decay.powi((step / self.lr_decay_steps) as i32)
        }
    }
}

/// Model plus optimizer state; everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub velocity: Vec<Tensor>,
    pub step: usize,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let velocity = model.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { model, velocity, step: 0, epoch: 0 }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.model.named_tensors();
        let names: Vec<String> = (0..self.velocity.len()).map(|i| format!("velocity.{i}")).collect();
        tensors.extend(names.into_iter().zip(self.velocity.iter()));
        let meta = json!({ "config": self.model.config(), "step": self.step, "epoch": self.epoch });
        write_container(path, meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = read_container(path)?;
        let field = |k: &str| {
            c.meta.get(k).and_then(Value::as_u64).ok_or_else(|| Error::Checkpoint(format!("missing {k}")))
        };
        let (step, epoch) = (field("step")? as usize, field("epoch")? as usize);
        let model = Model::from_container(&mut c)?;
        let velocity = (0..model.tensors().len())
            .map(|i| c.take(&format!("velocity.{i}")))
            .collect::<Result<Vec<_>>>()?;
        for (v, p) in velocity.iter().zip(model.tensors()) {
            if v.shape() != p.shape() {
                return Err(Error::Checkpoint("velocity shape does not match parameters".into()));
            }
        }
        Ok(Self { model, velocity, step, epoch })
    }
}

fn example_rng(seed: u64, step: usize, example: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(example as u64);
    rng
}

/// One momentum SGD update on the mean loss over `batch`:
/// `v ← μ·v − η·∇`, `θ ← θ + v`. Returns the mean loss. A non-finite loss
/// or gradient aborts the step with [`Error::Diverged`] and leaves the state
/// untouched.
pub fn sgd_step(state: &mut TrainState, batch: &[(Tensor, SequenceLabel)], cfg: &TrainConfig, lr: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("sgd_step: empty batch"));
    }
    let step = state.step;
    let model = &state.model;
    let mode = if cfg.dropout { Mode::Train } else { Mode::Eval };
    let per_example = |(j, (x, y)): (usize, &(Tensor, SequenceLabel))| {
        let mut rng = example_rng(cfg.seed, step, j + (1 << 32));
        model.loss_and_grad(x, y, mode, &mut rng)
    };
    let results: Vec<Result<(f64, Gradients)>> = if cfg.threads > 1 {
        batch.par_iter().enumerate().map(per_example).collect()
    } else {
        batch.iter().enumerate().map(per_example).collect()
    };

    let mut total = Gradients::zeros_for(model);
    let mut loss = 0.0;
    for r in results {
        // finite weights can still overflow the activations
        let (l, g) = r.map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { step: step as u64, loss: f64::INFINITY },
            e => e,
        })?;
        loss += l;
        total.add_assign(&g);
    }
    let n = batch.len() as f64;
    loss /= n;
    total.scale(1.0 / n);
    if !loss.is_finite() || !total.is_finite() {
        return Err(Error::Diverged { step: step as u64, loss });
    }

    let grads = total.tensors();
    let mut next_v = state.velocity.clone();
    let mut next_model = state.model.clone();
    for ((v, p), g) in next_v.iter_mut().zip(next_model.tensors_mut()).zip(grads) {
        for ((vi, pi), gi) in v.data_mut().iter_mut().zip(p.data_mut()).zip(g.data()) {
            *vi = cfg.momentum * *vi - lr * gi;
            *pi += *vi;
        }
    }
    if !next_model.is_finite() {
        return Err(Error::Diverged { step: step as u64, loss });
    }
    state.model = next_model;
    state.velocity = next_v;
    state.step += 1;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    /// Coverage at the configured accuracy target; 0 when unattainable.
    pub val_coverage: f64,
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    /// Mean batch loss of every step, in order.
    pub step_losses: Vec<f64>,
    pub wall_clock: f64,
    pub best_accuracy: f64,
    pub best_accuracy_epoch: Option<usize>,
    pub best_coverage: f64,
    pub best_coverage_epoch: Option<usize>,
    pub train_size: usize,
    pub val_size: usize,
    /// Set when the run ended on the step or time budget.
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,steps,train_loss,val_accuracy,val_coverage,elapsed\n");
        for e in &self.epochs {
            s += &format!("{},{},{},{},{},{:.3}\n", e.epoch, e.steps, e.train_loss, e.val_accuracy, e.val_coverage, e.elapsed);
        }
        s
    }
}

/// Where [`train`] writes checkpoints. Each file is only written when the
/// corresponding path is set.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPaths {
    pub best_accuracy: Option<PathBuf>,
    pub best_coverage: Option<PathBuf>,
    /// Resumable state, rewritten after every epoch.
    pub state: Option<PathBuf>,
    /// Extra fields stored in the best-model checkpoints' metadata.
    pub meta: serde_json::Map<String, Value>,
}

impl CheckpointPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            best_accuracy: Some(dir.join("best_accuracy.ckpt")),
            best_coverage: Some(dir.join("best_coverage.ckpt")),
            state: Some(dir.join("state.ckpt")),
            meta: Default::default(),
        }
    }
}

/// Runs training from `state` until `cfg.epochs` epochs, `cfg.max_steps`
/// steps or the time limit, whichever comes first. Training uses the
/// samples outside the validation split; validation runs after each epoch
/// (including a truncated final one).
pub fn train(state: &mut TrainState, data: &PreparedDataset, cfg: &TrainConfig, ckpt: &CheckpointPaths) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("train: dataset has no samples"));
    }
    let (train_idx, val_idx) = data.split(cfg.val_fraction);
    if val_idx.is_empty() {
        return Err(Error::Empty("train: validation split is empty"));
    }
    if train_idx.is_empty() {
        return Err(Error::Empty("train: training split is empty"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let start = Instant::now();
    let mut report = TrainReport {
        epochs: Vec::new(),
        step_losses: Vec::new(),
        wall_clock: 0.0,
        best_accuracy: f64::NEG_INFINITY,
        best_accuracy_epoch: None,
        best_coverage: f64::NEG_INFINITY,
        best_coverage_epoch: None,
        train_size: train_idx.len(),
        val_size: val_idx.len(),
        stopped_early: false,
    };
    let out_of_budget = |state: &TrainState| {
        cfg.max_steps.is_some_and(|m| state.step >= m) || cfg.time_limit.is_some_and(|t| start.elapsed().as_secs_f64() >= t)
    };

    while state.epoch < cfg.epochs && !out_of_budget(state) {
        let mut order = train_idx.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(state.epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut losses = Vec::new();
        let mut finished = true;
        for chunk in order.chunks(cfg.batch_size) {
            if out_of_budget(state) {
                finished = false;
                break;
            }
            let batch = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let x = if cfg.augment {
                        data.input(i, Some(&mut example_rng(cfg.seed, state.step, j)))?
                    } else {
                        data.input::<ChaCha8Rng>(i, None)?
                    };
                    Ok((x, data.labels[i].clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            let lr = cfg.learning_rate_at(state.step);
            let loss = pool.install(|| sgd_step(state, &batch, cfg, lr))?;
            losses.push(loss);
        }
        if losses.is_empty() {
            break;
        }
        if finished {
            state.epoch += 1;
        }
        report.step_losses.extend(&losses);

        let records = pool.install(|| evaluate(&state.model, data, &val_idx))?;
        let val_accuracy = sequence_accuracy(&records)?;
        let val_coverage = coverage_at_accuracy(&records, cfg.coverage_target).map_or(0.0, |p| p.coverage);
        let epoch = report.epochs.len();
        report.epochs.push(EpochReport {
            epoch,
            steps: state.step,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_accuracy,
            val_coverage,
            elapsed: start.elapsed().as_secs_f64(),
        });
        let meta = |metric: &str, value: f64| {
            let mut m = ckpt.meta.clone();
            m.insert("metric".into(), json!(metric));
            m.insert("value".into(), json!(value));
            m.insert("epoch".into(), json!(epoch));
            m.insert("step".into(), json!(state.step));
            Value::Object(m)
        };
        if val_accuracy > report.best_accuracy {
            report.best_accuracy = val_accuracy;
            report.best_accuracy_epoch = Some(epoch);
            if let Some(p) = &ckpt.best_accuracy {
                state.model.save_with_meta(p, meta("sequence_accuracy", val_accuracy))?;
            }
        }
        if val_coverage > report.best_coverage {
            report.best_coverage = val_coverage;
            report.best_coverage_epoch = Some(epoch);
            if let Some(p) = &ckpt.best_coverage {
                state.model.save_with_meta(p, meta("coverage", val_coverage))?;
            }
        }
        if let Some(p) = &ckpt.state {
            state.save(p)?;
        }
        if !finished || cfg.target_accuracy.is_some_and(|t| val_accuracy >= t) {
            break;
        }
    }
    report.stopped_early = state.epoch < cfg.epochs;
    report.best_accuracy = report.best_accuracy.max(0.0);
    report.best_coverage = report.best_coverage.max(0.0);
    report.wall_clock = start.elapsed().as_secs_f64();
    Ok(report)
}
