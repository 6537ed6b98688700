//! Diffusion pre-training: sample a level and a noise draw per item, minimize
//! the noise-prediction error, checkpoint at a fixed cadence.
//!
//! Determinism contract: all randomness for epoch `e` comes from substreams
//! derived from `(seed, e)`, so resuming from an epoch-boundary checkpoint
//! reproduces continued training bitwise.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::DDAENetwork;
use crate::corruption::{eps_loss, noise, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::harness::records::{Phase, RecordSink};
use crate::nn::{substream, Adam, AdamOpts, LrSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    HorizontalFlip,
    PadCrop,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub augmentations: BTreeSet<Augmentation>,
}

impl TrainOpts {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::parameter("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) && self.epochs > 0 {
            return Err(Error::parameter(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            epochs: 20,
            batch_size: 64,
            learning_rate: 3e-4,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            checkpoint_every: 0,
            augmentations: [Augmentation::HorizontalFlip].into_iter().collect(),
        }
    }
}

/// Losses from a single update: the optimized objective and its clean-image
/// counterpart reweighted by `(sigma_t/alpha_t)^2`, which is comparable
/// across schedules.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss_eps: f64,
    pub loss_x0: f64,
    pub grad_norm: f64,
}

/// Uniform per-item level draw over `[1, T]`.
pub fn sample_levels(rng: &mut impl Rng, n: usize, t_max: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=t_max)).collect()
}

fn sample_noise(rng: &mut impl Rng, shape: (usize, usize, usize, usize)) -> Array4<f32> {
    Array4::from_shape_simple_fn(shape, || {
        let v: f32 = StandardNormal.sample(rng);
        v
    })
}

/// Applies the configured augmentations to a copy of `batch`.
pub fn augment(
    batch: &Array4<f32>,
    augs: &BTreeSet<Augmentation>,
    rng: &mut impl Rng,
) -> Array4<f32> {
    let mut out = batch.clone();
    let (n, c, h, w) = out.dim();
    if augs.contains(&Augmentation::HorizontalFlip) {
        for i in 0..n {
            if rng.random_bool(0.5) {
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w / 2 {
                            let a = out[[i, ch, y, x]];
                            out[[i, ch, y, x]] = out[[i, ch, y, w - 1 - x]];
                            out[[i, ch, y, w - 1 - x]] = a;
                        }
                    }
                }
            }
        }
    }
    if augs.contains(&Augmentation::PadCrop) {
        // pad 4 with the background value (-1), crop back to size
        let pad = 4usize;
        for i in 0..n {
            let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
            let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
            if dy == 0 && dx == 0 {
                continue;
            }
            let src = out.index_axis(Axis(0), i).to_owned();
            let mut dst = out.index_axis_mut(Axis(0), i);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as isize + dy;
                        let sx = x as isize + dx;
                        dst[[ch, y, x]] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize
                        {
                            src[[ch, sy as usize, sx as usize]]
                        } else {
                            -1.0
                        };
                    }
                }
            }
        }
    }
    out
}

/// Owns the optimizer state for a pre-training run.
pub struct Trainer {
    pub net: DDAENetwork,
    pub sched: NoiseSchedule,
    pub opts: TrainOpts,
    adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    global_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainState {
    epoch: usize,
    adam_step: u64,
    global_step: u64,
}

impl Trainer {
    pub fn new(net: DDAENetwork, sched: NoiseSchedule, opts: TrainOpts, total_steps: usize) -> Result<Self> {
        opts.validate()?;
        let adam_opts = match opts.lr_schedule {
            LrSchedule::Constant => AdamOpts::with_lr(opts.learning_rate),
            LrSchedule::Cosine => AdamOpts::cosine(opts.learning_rate, total_steps),
        };
        let adam = Adam::new(net.store(), adam_opts);
        Ok(Trainer { net, sched, opts, adam, epoch: 0, global_step: 0 })
    }

    /// Swap in a differently configured optimizer (tests only).
    #[cfg(test)]
    pub(crate) fn set_optimizer(&mut self, adam: Adam) {
        self.adam = adam;
    }

    /// One gradient update on a batch: per-item uniform level draw, fresh
    /// noise, noise-prediction MSE. Returns pre-update losses.
    pub fn pretrain_step(&mut self, batch: &Array4<f32>, rng: &mut impl Rng) -> Result<StepStats> {
        let n = batch.dim().0;
        let t = sample_levels(rng, n, self.sched.levels());
        let eps = sample_noise(rng, batch.dim());
        let x_t = noise(batch, &t, &eps, &self.sched)?;
        let (pred, cache) = self.net.forward_train(&x_t, &t)?;
        let loss = eps_loss(&pred, &eps)? as f64;

        // per-item losses for the schedule-comparable clean-image objective
        let mut loss_x0 = 0.0f64;
        let item_len = (pred.len() / n) as f64;
        for i in 0..n {
            let mut acc = 0.0f64;
            for (p, e) in pred
                .index_axis(Axis(0), i)
                .iter()
                .zip(eps.index_axis(Axis(0), i).iter())
            {
                let d = (p - e) as f64;
                acc += d * d;
            }
            let ratio = match self.sched.kind() {
                ScheduleKind::Vp => {
                    let a = self.sched.alpha_f64(t[i])?;
                    let s = self.sched.sigma_f64(t[i])?;
                    (s / a).powi(2)
                }
                ScheduleKind::Ve => self.sched.sigma_f64(t[i])?.powi(2),
            };
            loss_x0 += ratio * acc / item_len;
        }
        loss_x0 /= n as f64;

        let m = pred.len() as f32;
        let d_eps = (&pred - &eps).mapv(|v| 2.0 * v / m);
        let (grads, _) = self.net.backward_from_eps(&cache, &d_eps, false);
        let grad_norm = grads.global_norm();

        if !loss.is_finite() || !grad_norm.is_finite() {
            let mut hist = [0usize; 10];
            for &ti in &t {
                hist[((ti - 1) * 10) / self.sched.levels()] += 1;
            }
            return Err(Error::numerical(format!(
                "non-finite training state at step {}: loss={loss}, grad_norm={grad_norm}, t decile histogram {hist:?}",
                self.global_step
            )));
        }
        self.adam.step(self.net.store_mut(), &grads);
        self.global_step += 1;
        Ok(StepStats { loss_eps: loss, loss_x0, grad_norm })
    }

    /// Runs one epoch over `images` with the epoch-derived RNG substreams.
    /// Returns `(mean loss_eps, mean loss_x0)`.
    pub fn run_epoch(&mut self, images: &Array4<f32>) -> Result<(f64, f64)> {
        let e = self.epoch;
        let seed = self.opts.seed;
        let mut order_rng = substream(seed, &format!("order.{e}"));
        let mut aug_rng = substream(seed, &format!("augment.{e}"));
        let mut noise_rng = substream(seed, &format!("noising.{e}"));

        let n = images.dim().0;
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = order_rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let mut sum = 0.0f64;
        let mut sum_x0 = 0.0f64;
        let mut batches = 0usize;
        for chunk in idx.chunks(self.opts.batch_size) {
            let (_, c, h, w) = images.dim();
            let mut batch = Array4::zeros((chunk.len(), c, h, w));
            for (row, &i) in chunk.iter().enumerate() {
                batch
                    .index_axis_mut(Axis(0), row)
                    .assign(&images.index_axis(Axis(0), i));
            }
            let batch = augment(&batch, &self.opts.augmentations, &mut aug_rng);
            let stats = self.pretrain_step(&batch, &mut noise_rng)?;
            sum += stats.loss_eps;
            sum_x0 += stats.loss_x0;
            batches += 1;
        }
        if batches == 0 {
            batches = 1;
        }
        self.epoch += 1;
        Ok((sum / batches as f64, sum_x0 / batches as f64))
    }

    /// Checkpoint path under `dir` for a completed-epoch count.
    pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
        dir.join(format!("ckpt_epoch{epoch:04}.ckpt"))
    }

    /// Highest-epoch checkpoint in a run directory.
    pub fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
        let mut best: Option<PathBuf> = None;
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(e, dir))? {
            let path = entry.map_err(|e| Error::io(e, dir))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.starts_with("ckpt_epoch") && name.ends_with(".ckpt") {
                if best.as_ref().map(|b| path > *b).unwrap_or(true) {
                    best = Some(path);
                }
            }
        }
        best.ok_or_else(|| Error::data(format!("no checkpoints under {}", dir.display())))
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(e, dir))?;
        let path = Self::checkpoint_path(dir, self.epoch);
        self.net.save(&path)?;
        let opt_path = path.with_extension("opt");
        self.adam.state_to_tensor_map(self.net.store()).save(&opt_path)?;
        let state = TrainState {
            epoch: self.epoch,
            adam_step: self.adam.step_count(),
            global_step: self.global_step,
        };
        let state_path = path.with_extension("state.json");
        std::fs::write(&state_path, serde_json::to_string_pretty(&state)?)
            .map_err(|e| Error::io(e, state_path))?;
        Ok(path)
    }

    /// Restores a trainer from an epoch-boundary checkpoint; continuing from
    /// it reproduces uninterrupted training bitwise.
    pub fn resume(
        ckpt: &Path,
        sched: NoiseSchedule,
        opts: TrainOpts,
        total_steps: usize,
    ) -> Result<Self> {
        let net = DDAENetwork::load(ckpt)?;
        let mut trainer = Self::new(net, sched, opts, total_steps)?;
        let state_path = ckpt.with_extension("state.json");
        let raw = std::fs::read_to_string(&state_path).map_err(|e| Error::io(e, state_path))?;
        let state: TrainState = serde_json::from_str(&raw)?;
        let opt_map = crate::container::TensorMap::load(ckpt.with_extension("opt"))?;
        trainer
            .adam
            .load_state(trainer.net.store(), &opt_map, state.adam_step)?;
        trainer.epoch = state.epoch;
        trainer.global_step = state.global_step;
        Ok(trainer)
    }
}

/// Full pre-training loop: epochs over `images`, per-epoch loss records,
/// checkpoints at the configured cadence plus the final epoch. Returns the
/// trained network.
pub fn pretrain(
    net: DDAENetwork,
    images: &Array4<f32>,
    sched: &NoiseSchedule,
    opts: &TrainOpts,
    out_dir: Option<&Path>,
    sink: &mut dyn RecordSink,
) -> Result<DDAENetwork> {
    if images.dim().0 == 0 {
        return Err(Error::contract("pretrain: dataset is empty"));
    }
    let steps_per_epoch = images.dim().0.div_ceil(opts.batch_size);
    let mut trainer = Trainer::new(net, sched.clone(), opts.clone(), steps_per_epoch * opts.epochs)?;
    for _ in 0..opts.epochs {
        let (loss_eps, loss_x0) = trainer.run_epoch(images)?;
        let e = trainer.epoch as u64;
        sink.emit(Phase::Pretrain, "loss_eps", e, loss_eps)?;
        sink.emit(Phase::Pretrain, "loss_x0", e, loss_x0)?;
        if let Some(dir) = out_dir {
            let cadence = opts.checkpoint_every;
            if (cadence > 0 && trainer.epoch % cadence == 0) || trainer.epoch == opts.epochs {
                trainer.save_checkpoint(dir)?;
            }
        }
    }
    Ok(trainer.net)
}
