//! Training by recursive denoising.
//!
//! For every sample the estimate starts as pure noise and walks
//! `t = T..=1`. At each step it is re-noised with `t/T`, the network predicts
//! the total noise, the parameters take one update, and the denoised
//! prediction becomes the next step's estimate. The estimate is plain data:
//! no gradient flows from one step into the next. With `M > 1` scales every
//! step visits the resolutions `W / 2^(m-1)` from coarse to fine, carrying
//! the same running estimate through all of them.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::parameter_checksum;
use crate::dataset::{
    augment, check_one_hot, one_hot_encode, resize_image, resize_labels, AugmentConfig, Sample,
};
use crate::denoiser::{DenoiserConfig, DenoiserNetwork};
use crate::diffusion::{diffuse, mse_loss, recover_clean, standard_normal, total_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::optim::{optimizer_step, AdamWConfig, OptimizerState};
use crate::sampler::{argmax_decode, scale_ladder};
use crate::tensor::{Image, Real, SegMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of diffusion time steps `T`.
    pub time_steps: usize,
    /// Number of resolutions `M` visited per time step.
    pub scales: usize,
    pub lr: f64,
    /// Learning-rate multiplier applied after every epoch.
    pub lr_decay_gamma: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            time_steps: 25,
            scales: 1,
            lr: 5e-5,
            lr_decay_gamma: 0.95,
            weight_decay: 1e-3,
            clip_norm: 1.0,
            epochs: 70,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.time_steps < 1 {
            return bad("time_steps must be at least 1".into());
        }
        if self.scales < 1 {
            return bad("scales must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_gamma > 0.0 && self.lr_decay_gamma <= 1.0) {
            return bad(format!(
                "lr_decay_gamma must lie in (0, 1], got {}",
                self.lr_decay_gamma
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        self.augment.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            ..AdamWConfig::default()
        }
    }

    /// Learning rate used during epoch `epoch` (0-based): `lr * gamma^epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_gamma.powi(epoch as i32)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.time_steps)
    }
}

/// One parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    /// Update index within the epoch.
    pub step: usize,
    /// Position of the sample in the epoch's order.
    pub sample: usize,
    /// Scale index `m` (1 is full resolution).
    pub scale: usize,
    pub t: usize,
    pub loss: f64,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} step={} sample={} scale={} t={} loss={:.6e}",
            self.epoch, self.step, self.sample, self.scale, self.t, self.loss
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss of every epoch run, in order.
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<StepRecord>,
    pub updates: u64,
    pub wall_clock_secs: f64,
    /// SHA-256 of the final parameters, hex encoded.
    pub checksum: String,
}

/// Everything one update needs besides the network.
struct Update<'a, F: Real> {
    opt: &'a mut OptimizerState<F>,
    adamw: AdamWConfig,
    schedule: &'a NoiseSchedule,
}

/// The shared core of both training algorithms: `scales == 1` is the
/// recursive algorithm, larger values add the coarse-to-fine loop.
fn train_sample_core<F: Real, R: Rng + ?Sized>(
    net: &mut DenoiserNetwork<F>,
    image: &Image<F>,
    labels: &SegMap<F>,
    scales: usize,
    up: Update<'_, F>,
    rng: &mut R,
    mut on_step: impl FnMut(usize, usize, f64),
) -> Result<Vec<f64>> {
    check_one_hot(labels)?;
    if labels.channels() != net.config().num_classes {
        return Err(Error::Shape(format!(
            "{} label channels for a {}-class network",
            labels.channels(),
            net.config().num_classes
        )));
    }
    if (image.width(), image.height()) != (labels.width(), labels.height()) {
        return Err(Error::Shape(format!(
            "image is {}x{} but labels are {}x{}",
            image.width(),
            image.height(),
            labels.width(),
            labels.height()
        )));
    }
    let ladder = scale_ladder(image.width(), image.height(), scales)?;
    let classes = labels.channels();
    let index_map = argmax_decode(labels);
    let mut levels = Vec::with_capacity(ladder.len());
    for &(w, h) in &ladder {
        let img = resize_image(image, w, h)?;
        let clean = one_hot_encode::<F>(&resize_labels(&index_map, w, h)?, classes)?;
        net.check_input(&clean, &img)?;
        levels.push((img, clean));
    }

    let (c, h, w) = labels.shape();
    let mut estimate: SegMap<F> = standard_normal(c, h, w, rng);
    let mut losses = Vec::with_capacity(up.schedule.steps() * scales);
    for t in (1..=up.schedule.steps()).rev() {
        for (level, (img, clean)) in levels.iter().enumerate() {
            let current = resize_image(&estimate, clean.width(), clean.height())?;
            let (noisy, _) = diffuse(&current, t, up.schedule, rng)?;
            let predicted = net.forward(&noisy, img, t)?;
            let target = total_noise(&noisy, clean)?;
            let (loss, grad) = mse_loss(&predicted, &target)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("loss {loss} at t={t}")));
            }
            let mut grads = net.backward(&grad)?;
            optimizer_step(net.params_mut().values_mut(), &mut grads, up.opt, &up.adamw)?;
            estimate = recover_clean(&noisy, &predicted)?;
            on_step(scales - level, t, loss);
            losses.push(loss);
        }
    }
    Ok(losses)
}

/// One pass of the recursive algorithm over a single sample: exactly `T`
/// updates. Returns the losses in execution order.
pub fn train_sample_recursive<F: Real, R: Rng + ?Sized>(
    net: &mut DenoiserNetwork<F>,
    image: &Image<F>,
    labels: &SegMap<F>,
    cfg: &TrainConfig,
    opt: &mut OptimizerState<F>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let schedule = cfg.schedule()?;
    let up = Update {
        opt,
        adamw: cfg.adamw(),
        schedule: &schedule,
    };
    train_sample_core(net, image, labels, 1, up, rng, |_, _, _| {})
}

/// One pass of the multi-scale algorithm over a single sample: exactly
/// `T * M` updates ordered `t = T..=1`, and within each `m = M..=1`.
pub fn train_sample_multiscale<F: Real, R: Rng + ?Sized>(
    net: &mut DenoiserNetwork<F>,
    image: &Image<F>,
    labels: &SegMap<F>,
    cfg: &TrainConfig,
    opt: &mut OptimizerState<F>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let schedule = cfg.schedule()?;
    let up = Update {
        opt,
        adamw: cfg.adamw(),
        schedule: &schedule,
    };
    train_sample_core(net, image, labels, cfg.scales, up, rng, |_, _, _| {})
}

/// Per-epoch random stream: shuffling, augmentation and noise of epoch `e`
/// depend only on the seed and `e`, so training can resume at any epoch
/// boundary.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Network, optimizer state and progress of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: DenoiserNetwork<f32>,
    pub opt: OptimizerState<f32>,
    pub cfg: TrainConfig,
    /// Epochs completed so far.
    pub epoch: usize,
}

impl Trainer {
    /// Fresh network initialized from `cfg.seed`.
    pub fn new(net_cfg: DenoiserConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = DenoiserNetwork::new(net_cfg, cfg.seed)?;
        let opt = OptimizerState::new(net.parameter_count(), cfg.lr_at(0));
        Ok(Self {
            net,
            opt,
            cfg,
            epoch: 0,
        })
    }

    /// Continues from saved state.
    pub fn resume(
        net: DenoiserNetwork<f32>,
        opt: OptimizerState<f32>,
        cfg: TrainConfig,
        epoch: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if opt.first_moment.len() != net.parameter_count()
            || opt.second_moment.len() != net.parameter_count()
        {
            return Err(Error::Shape(format!(
                "optimizer state for {} parameters, network has {}",
                opt.first_moment.len(),
                net.parameter_count()
            )));
        }
        Ok(Self {
            net,
            opt,
            cfg,
            epoch,
        })
    }

    pub fn checksum(&self) -> String {
        parameter_checksum(self.net.params().values())
    }

    /// Runs one epoch over `data` and returns its mean loss.
    pub fn run_epoch(
        &mut self,
        data: &[Sample],
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidParameter("training needs at least one sample".into()));
        }
        let epoch = self.epoch;
        self.opt.lr = self.cfg.lr_at(epoch);
        let schedule = self.cfg.schedule()?;
        let adamw = self.cfg.adamw();
        let classes = self.net.config().num_classes;
        let mut rng = epoch_rng(self.cfg.seed, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        let mut step = 0;
        for (pos, &i) in order.iter().enumerate() {
            let sample = augment(&data[i], &self.cfg.augment, &mut rng);
            let labels = one_hot_encode::<f32>(&sample.labels, classes)?;
            let up = Update {
                opt: &mut self.opt,
                adamw,
                schedule: &schedule,
            };
            let losses = train_sample_core(
                &mut self.net,
                &sample.image,
                &labels,
                self.cfg.scales,
                up,
                &mut rng,
                |scale, t, loss| {
                    on_step(&StepRecord {
                        epoch,
                        step,
                        sample: pos,
                        scale,
                        t,
                        loss,
                    });
                    step += 1;
                },
            )?;
            sum += losses.iter().sum::<f64>();
            count += losses.len();
        }
        self.epoch += 1;
        Ok(sum / count as f64)
    }

    /// Runs epochs until `self.epoch == self.cfg.epochs`.
    pub fn run(
        &mut self,
        data: &[Sample],
        mut on_step: impl FnMut(&StepRecord),
        mut on_epoch: impl FnMut(&Trainer, f64) -> Result<()>,
    ) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::InvalidParameter("training needs at least one sample".into()));
        }
        let start = Instant::now();
        let mut epoch_losses = Vec::new();
        let mut step_losses = Vec::new();
        while self.epoch < self.cfg.epochs {
            let mean = self.run_epoch(data, |r| {
                step_losses.push(*r);
                on_step(r);
            })?;
            epoch_losses.push(mean);
            on_epoch(self, mean)?;
        }
        // leave the rate the next epoch would use
        self.opt.lr = self.cfg.lr_at(self.epoch);
        Ok(TrainReport {
            epoch_losses,
            updates: step_losses.len() as u64,
            step_losses,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            checksum: self.checksum(),
        })
    }
}

/// Trains a fresh network on `data` for `cfg.epochs` epochs.
pub fn train(
    data: &[Sample],
    net_cfg: DenoiserConfig,
    cfg: &TrainConfig,
) -> Result<(DenoiserNetwork<f32>, TrainReport)> {
    let mut trainer = Trainer::new(net_cfg, cfg.clone())?;
    let report = trainer.run(data, |_| {}, |_, _| Ok(()))?;
    Ok((trainer.net, report))
}
