//! Optimization loop: batching, Adam, schedule, validation and early stop.

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState};
use super::config::TrainConfig;
use super::eval::evaluate_model;
use crate::autograd::{BatchStats, Graph};
use crate::error::{Error, Result};
use crate::losses::{total_loss_on_graph, LossBreakdown, LossWeights, PerceptualExtractor, Supervision};
use crate::maps::ValidMask;
use crate::metrics::MetricReport;
use crate::net::{Mode, Model};
use crate::synthdata::{Dataset, Sample, Split};
use crate::tensor::Tensor;

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rgb: Tensor,
    pub gt: Tensor,
    pub masks: Vec<ValidMask>,
}

impl Batch {
    pub fn new(samples: &[&Sample]) -> Result<Self> {
        let rgb: Vec<_> = samples.iter().map(|s| &s.rgb).collect();
        let gt: Vec<_> = samples.iter().map(|s| s.normal.as_feature_map()).collect();
        Ok(Self {
            rgb: Tensor::stack(&rgb)?,
            gt: Tensor::stack(&gt)?,
            masks: samples.iter().map(|s| s.mask.clone()).collect(),
        })
    }
}

/// Loss terms, per-parameter gradients and normalization batch statistics
/// of one forward/backward pass. Coarse predictions are bilinearly
/// upsampled to input size before the loss.
pub fn loss_and_grads(
    model: &Model,
    batch: &Batch,
    weights: &LossWeights,
    phi: &PerceptualExtractor,
    supervision: Supervision,
) -> Result<(LossBreakdown, Vec<Tensor>, Vec<BatchStats>)> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let x = g.constant(batch.rgb.clone());
    let out = model.forward_graph(&mut g, &p, x, Mode::Train, false)?;
    let (h, w) = (model.config().height, model.config().width);
    let mut preds = Vec::with_capacity(out.maps.len());
    for &m in &out.maps {
        let (_, _, mh, mw) = g.value(m).dims4();
        preds.push(if (mh, mw) == (h, w) { m } else { g.resize_bilinear(m, h, w) });
    }
    let (loss, breakdown) = total_loss_on_graph(&mut g, &preds, &batch.gt, &batch.masks, weights, phi, supervision)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite { layer: "loss".into(), position: format!("{breakdown:?}") });
    }
    let mut grads = g.backward(loss);
    let tensors = p
        .vars()
        .iter()
        .zip(model.params().iter())
        .map(|(&v, param)| grads.take(v).unwrap_or_else(|| Tensor::zeros(param.value.shape())))
        .collect();
    Ok((breakdown, tensors, out.batch_stats))
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let params = model.params_mut().value_mut(i).data_mut();
            for j in 0..params.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                params[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.loss;
        write!(
            f,
            "step={} epoch={} lr={:.6e} L_m={:.6} L_q={:.6} L_p={:.6} L_s={:.6} total={:.6}",
            self.step, self.epoch, self.lr, l.mse, l.quaternion, l.perceptual, l.smooth, l.total
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val: MetricReport,
    pub improved: bool,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.val;
        let d = r.delta;
        write!(
            f,
            "epoch={} val_mean={:.4} val_median={:.4} val_mse={:.4} d5={:.4} d7.5={:.4} d11.5={:.4} d22.5={:.4} d30={:.4}{}",
            self.epoch,
            r.mean_deg,
            r.median_deg,
            r.mse_deg2,
            d[0],
            d[1],
            d[2],
            d[3],
            d[4],
            if self.improved { " best" } else { "" }
        )
    }
}

/// Deterministic visiting order of the training set for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    best: Model,
    adam: Adam,
    phi: PerceptualExtractor,
    train: Vec<Sample>,
    val: Vec<Sample>,
    state: TrainState,
    steps: Vec<StepRecord>,
    epochs: Vec<EpochRecord>,
    log: Option<File>,
}

/// Why [`Trainer::run`] returned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    MaxSteps,
    EarlyStop,
}

impl Trainer {
    /// Reads the train and val splits of `cfg.data`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let ds = Dataset::open(&cfg.data)?;
        let train = ds.load_split(Split::Train)?;
        let val = ds.load_split(Split::Val)?;
        Self::from_samples(cfg, train, val)
    }

    pub fn from_samples(cfg: TrainConfig, train: Vec<Sample>, val: Vec<Sample>) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::InvalidInput("train and val splits must both be non-empty".into()));
        }
        let (h, w) = (cfg.model.height, cfg.model.width);
        if let Some(s) = train.iter().chain(&val).find(|s| (s.rgb.height(), s.rgb.width()) != (h, w)) {
            return Err(Error::Shape(format!(
                "sample {} is {}x{}, model expects {h}x{w}",
                s.name,
                s.rgb.height(),
                s.rgb.width()
            )));
        }
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let log = match &cfg.out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join("train.log");
                Some(File::create(&p).map_err(|e| Error::io(&p, e))?)
            }
            None => None,
        };
        Ok(Self {
            phi: PerceptualExtractor::new(cfg.perceptual_seed),
            adam: Adam::new(&model),
            best: model.clone(),
            model,
            cfg,
            train,
            val,
            state: TrainState::default(),
            steps: Vec::new(),
            epochs: Vec::new(),
            log,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(cfg: TrainConfig, train: Vec<Sample>, val: Vec<Sample>, path: &Path) -> Result<Self> {
        let mut t = Self::from_samples(cfg, train, val)?;
        let ck = load_checkpoint(path)?;
        if ck.model.config() != &t.cfg.model {
            return Err(Error::Config("checkpoint model config differs from the run config".into()));
        }
        let state = ck.train.ok_or_else(|| Error::format(path, "checkpoint has no optimizer state"))?;
        t.model = ck.model;
        t.best = t.model.clone();
        t.adam = state.0;
        t.state = state.1;
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Parameters with the best validation mean error so far.
    pub fn best_model(&self) -> &Model {
        &self.best
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn epochs(&self) -> &[EpochRecord] {
        &self.epochs
    }

    pub fn train_samples(&self) -> &[Sample] {
        &self.train
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            &Checkpoint { model: self.model.clone(), train: Some((self.adam.clone(), self.state.clone())) },
        )
    }

    fn log_line(&mut self, line: &str) -> Result<()> {
        if let Some(f) = &mut self.log {
            writeln!(f, "{line}").map_err(|e| Error::io("train.log", e))?;
        }
        Ok(())
    }

    fn batches_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    /// One optimizer step on the next batch, closing the current epoch
    /// first when its batches are used up.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.state.epoch_step >= self.batches_per_epoch() {
            self.end_epoch()?;
        }
        let order = epoch_order(self.cfg.seed, self.state.epoch, self.train.len());
        let bs = self.cfg.batch_size;
        let start = self.state.epoch_step * bs;
        let idx = &order[start..(start + bs).min(order.len())];
        let refs: Vec<&Sample> = idx.iter().map(|&i| &self.train[i]).collect();
        let batch = Batch::new(&refs)?;
        let lr = self.cfg.learning_rate(self.state.epoch);
        let (loss, grads, stats) = loss_and_grads(&self.model, &batch, &self.cfg.loss, &self.phi, self.cfg.supervision)
            .map_err(|e| match e {
                Error::NonFinite { layer, position } => Error::NonFinite {
                    layer,
                    position: format!("{position} (step {}, samples {idx:?})", self.state.step),
                },
                other => other,
            })?;
        self.adam.step(&mut self.model, &grads, lr);
        self.model.update_running_stats(&stats, self.cfg.bn_momentum);
        let rec = StepRecord { step: self.state.step, epoch: self.state.epoch, lr, loss };
        self.state.step += 1;
        self.state.epoch_step += 1;
        self.steps.push(rec);
        self.log_line(&rec.to_string())?;
        Ok(rec)
    }

    fn step_cap_reached(&self) -> bool {
        self.cfg.max_steps > 0 && self.state.step >= self.cfg.max_steps
    }

    /// Validates, updates the best model and the patience counter, and moves
    /// to the next epoch.
    fn end_epoch(&mut self) -> Result<EpochRecord> {
        let (val, _) = evaluate_model(&self.model, &self.val)?;
        let improved = self.state.best_val.is_none_or(|b| val.mean_deg < b);
        if improved {
            self.state.best_val = Some(val.mean_deg);
            self.state.since_best = 0;
            self.best = self.model.clone();
            if let Some(dir) = self.cfg.out.clone() {
                save_checkpoint(&dir.join("best.ckpt"), &Checkpoint { model: self.best.clone(), train: None })?;
            }
        } else {
            self.state.since_best += 1;
        }
        let rec = EpochRecord { epoch: self.state.epoch, val, improved };
        self.state.epoch += 1;
        self.state.epoch_step = 0;
        self.epochs.push(rec.clone());
        self.log_line(&rec.to_string())?;
        Ok(rec)
    }

    /// Trains until the epoch budget, the step cap, or `patience` epochs
    /// without strict improvement of validation mean error.
    pub fn run(&mut self) -> Result<StopReason> {
        let reason = loop {
            if self.state.since_best >= self.cfg.patience {
                break StopReason::EarlyStop;
            }
            if self.state.epoch >= self.cfg.max_epochs {
                break StopReason::MaxEpochs;
            }
            if self.step_cap_reached() {
                break StopReason::MaxSteps;
            }
            while self.state.epoch_step < self.batches_per_epoch() && !self.step_cap_reached() {
                self.step()?;
            }
            // a step cap inside an epoch leaves it open so a resumed run continues it
            if self.state.epoch_step >= self.batches_per_epoch() {
                self.end_epoch()?;
            }
        };
        if let Some(dir) = self.cfg.out.clone() {
            self.save(&dir.join("last.ckpt"))?;
        }
        Ok(reason)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(3, 0, 10);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(3, 0, 10));
        assert_ne!(a, epoch_order(3, 1, 10));
    }

    #[test]
    fn step_record_format() {
        let r = StepRecord {
            step: 3,
            epoch: 1,
            lr: 1e-4,
            loss: LossBreakdown { mse: 0.5, quaternion: 0.25, perceptual: 0.0, smooth: 1.0, total: 3.5 },
        };
        assert_eq!(
            r.to_string(),
            "step=3 epoch=1 lr=1.000000e-4 L_m=0.500000 L_q=0.250000 L_p=0.000000 L_s=1.000000 total=3.500000"
        );
    }
}
