//! Unconditional DDPM: noise schedules, closed-form forward corruption, the
//! reverse-step mean, clean-image prediction, denoiser training and sampling.
//!
//! Conventions: `alpha[t] = 1 - beta[t]` per step and `alpha_bar[t]` is the
//! running product, with `alpha_bar[0] = 1`. Timesteps run `1..=T`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{epoch_order, stack_pixels, Dataset, ImageSample};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Graph, ParamStore, Tensor, UNet, UNetArch};

pub const DENOISER_VERSION: u32 = 1;
const PARAMS_FILE: &str = "params.bin";
const META_FILE: &str = "denoiser.json";

/// Lower clip of the clean-image estimate is `-X0_MARGIN`, upper `1 + X0_MARGIN`.
pub const X0_MARGIN: f32 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 400,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    /// Index 0 is unused padding so that `beta[t]` reads naturally.
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Build a linear or cosine schedule. The cosine variant ignores the
/// endpoints apart from validation and clips each step below 0.999.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::validation("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::validation(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let mut beta = vec![0.0; steps + 1];
    match kind {
        ScheduleKind::Linear => {
            for (t, b) in beta.iter_mut().enumerate().skip(1) {
                *b = if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64
                };
            }
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: usize| {
                let x = (t as f64 / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            for (t, b) in beta.iter_mut().enumerate().skip(1) {
                *b = (1.0 - f(t) / f(t - 1)).clamp(1e-12, 0.999);
            }
        }
    }
    let mut alpha_bar = vec![1.0; steps + 1];
    for t in 1..=steps {
        alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
    }
    Ok(NoiseSchedule {
        config: ScheduleConfig {
            kind,
            steps,
            beta_start,
            beta_end,
        },
        beta,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        build_schedule(c.steps, c.beta_start, c.beta_end, c.kind)
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize, allow_zero: bool) -> Result<()> {
        if t > self.steps() || (t == 0 && !allow_zero) {
            return Err(Error::validation(format!(
                "timestep {t} outside {}..={}",
                if allow_zero { 0 } else { 1 },
                self.steps()
            )));
        }
        Ok(())
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`; `t = 0` returns `x0`.
pub fn forward_noise(x0: &Tensor, t: usize, schedule: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    schedule.check_t(t, true)?;
    check_same_shape(x0, noise)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    Ok(x0.zip_map(noise, |x, n| a * x + b * n))
}

/// Deterministic reverse mean
/// `(z_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)`.
pub fn reverse_step(z: &Tensor, t: usize, eps_hat: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::validation("reverse step at t = 0: image is already clean"));
    }
    schedule.check_t(t, false)?;
    check_same_shape(z, eps_hat)?;
    let coef = (schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt()) as f32;
    let inv = (1.0 / schedule.alpha(t).sqrt()) as f32;
    Ok(z.zip_map(eps_hat, |z, e| inv * (z - coef * e)))
}

/// Clean-image estimate without clipping.
pub fn predict_x0_unclipped(z: &Tensor, t: usize, eps_hat: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t, true)?;
    check_same_shape(z, eps_hat)?;
    let ab = schedule.alpha_bar(t);
    let (s, inv) = ((1.0 - ab).sqrt() as f32, (1.0 / ab.sqrt()) as f32);
    Ok(z.zip_map(eps_hat, |z, e| (z - s * e) * inv))
}

/// Clean-image estimate `(z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`,
/// clipped to `[-X0_MARGIN, 1 + X0_MARGIN]`.
pub fn predict_x0(z: &Tensor, t: usize, eps_hat: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    Ok(predict_x0_unclipped(z, t, eps_hat, schedule)?.map(|v| v.clamp(-X0_MARGIN, 1.0 + X0_MARGIN)))
}

/// Independent noise stream for image `index` of a run seeded with `seed`.
pub fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draw one standard-normal image per stream into a batch `[n, 1, s, s]`.
pub fn normal_batch(rngs: &mut [ChaCha8Rng], side: usize) -> Tensor {
    let data = rngs.iter_mut().flat_map(|r| standard_normal(r, side * side)).collect();
    Tensor::from_vec(&[rngs.len(), 1, side, side], data).expect("noise batch size")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub arch: UNetArch,
    pub schedule: ScheduleConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub ema_decay: f32,
    /// Validation images scored per epoch (0 disables the curve).
    pub val_samples: usize,
    pub rng_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            arch: UNetArch::default(),
            schedule: ScheduleConfig::default(),
            epochs: 60,
            batch_size: 32,
            learning_rate: 2e-3,
            ema_decay: 0.995,
            val_samples: 128,
            rng_seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        NoiseSchedule::from_config(&self.schedule)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::validation("epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::validation("need learning_rate > 0 and ema_decay in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DenoiserMetrics {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DenoiserMeta {
    version: u32,
    config: DenoiserConfig,
    metrics: DenoiserMetrics,
}

/// Trained noise predictor together with the schedule it was trained under.
#[derive(Clone, Debug)]
pub struct DenoiserCheckpoint {
    net: UNet,
    schedule: NoiseSchedule,
    config: DenoiserConfig,
    metrics: DenoiserMetrics,
}

impl DenoiserCheckpoint {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            net: UNet::new(config.arch.clone(), config.rng_seed)?,
            schedule: NoiseSchedule::from_config(&config.schedule)?,
            config,
            metrics: DenoiserMetrics::default(),
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn metrics(&self) -> &DenoiserMetrics {
        &self.metrics
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    pub fn image_side(&self) -> usize {
        self.config.arch.image_side
    }

    /// Noise estimate for a batch at a shared timestep.
    pub fn predict_eps(&self, z: &Tensor, t: usize) -> Result<Tensor> {
        self.schedule.check_t(t, false)?;
        self.net.predict(z, &vec![t; z.shape()[0]])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.net.params().save(&dir.join(PARAMS_FILE))?;
        let meta = DenoiserMeta {
            version: DENOISER_VERSION,
            config: self.config.clone(),
            metrics: self.metrics.clone(),
        };
        let path = dir.join(META_FILE);
        let mut json = serde_json::to_string_pretty(&meta)?;
        json.push('\n');
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: DenoiserMeta = serde_json::from_str(&text)?;
        if meta.version != DENOISER_VERSION {
            return Err(Error::validation(format!(
                "unsupported denoiser version {}",
                meta.version
            )));
        }
        meta.config.validate()?;
        let params = ParamStore::load(&dir.join(PARAMS_FILE))?;
        Ok(Self {
            net: UNet::with_params(meta.config.arch.clone(), params)?,
            schedule: NoiseSchedule::from_config(&meta.config.schedule)?,
            config: meta.config,
            metrics: meta.metrics,
        })
    }

    /// Mean squared noise-prediction error over `samples`, with timesteps and
    /// noise drawn from a fixed stream so the value is comparable across calls.
    pub fn denoising_loss(&self, samples: &[ImageSample], seed: u64) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::validation("no samples to score"));
        }
        let side = self.image_side();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        for chunk in samples.chunks(64) {
            let x0 = stack_pixels(chunk)?;
            let steps: Vec<usize> = (0..chunk.len())
                .map(|_| rng.random_range(1..=self.schedule.steps()))
                .collect();
            let noise = Tensor::from_vec(x0.shape(), standard_normal(&mut rng, x0.len()))?;
            let z = noised_batch(&x0, &steps, &self.schedule, &noise, side);
            let eps = self.net.predict(&z, &steps)?;
            total += eps
                .data()
                .iter()
                .zip(noise.data())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>();
        }
        Ok(total / (samples.len() * side * side) as f64)
    }
}

fn noised_batch(x0: &Tensor, steps: &[usize], schedule: &NoiseSchedule, noise: &Tensor, side: usize) -> Tensor {
    let per = side * side;
    let mut z = x0.clone();
    for (i, &t) in steps.iter().enumerate() {
        let ab = schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let range = i * per..(i + 1) * per;
        for (zv, &n) in z.data_mut()[range.clone()].iter_mut().zip(&noise.data()[range]) {
            *zv = a * *zv + b * n;
        }
    }
    z
}

/// Train the noise predictor with the simple MSE objective and an EMA copy
/// of the weights; the returned checkpoint holds the EMA weights.
pub fn train_denoiser(config: &DenoiserConfig, data: &Dataset) -> Result<DenoiserCheckpoint> {
    config.validate()?;
    let train = &data.train;
    if train.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    let side = config.arch.image_side;
    if let Some(s) = train.iter().find(|s| s.side != side) {
        return Err(Error::Shape {
            expected: vec![side, side],
            got: vec![s.side, s.side],
        });
    }
    let mut ckpt = DenoiserCheckpoint::new(config.clone())?;
    let schedule = ckpt.schedule.clone();
    let mut net = ckpt.net.clone();
    let mut ema = net.params().clone();
    let mut opt = AdamW::new(net.params(), config.learning_rate, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x5eed_d1ff);
    let val: Vec<ImageSample> = data.val.iter().take(config.val_samples).cloned().collect();
    let per = (side * side) as f32;

    for epoch in 0..config.epochs {
        let order = epoch_order(train.len(), Some(config.rng_seed.wrapping_add(epoch as u64)));
        let mut loss_sum = 0.0f64;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let x0 = stack_pixels(idx.iter().map(|&i| &train[i]))?;
            let n = idx.len();
            let steps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.steps())).collect();
            let noise = Tensor::from_vec(x0.shape(), standard_normal(&mut rng, x0.len()))?;
            let z = noised_batch(&x0, &steps, &schedule, &noise, side);

            let mut g = Graph::new();
            let p = net.params().attach(&mut g, true);
            let zv = g.constant(z);
            let out = net.forward(&mut g, &p, zv, &steps);
            let diff = g.value(out).zip_map(&noise, |a, b| a - b);
            let sq: f64 = diff.data().iter().map(|d| (*d as f64).powi(2)).sum();
            if !sq.is_finite() {
                return Err(Error::NonFinite(format!("denoiser loss at epoch {epoch}, step {step}")));
            }
            loss_sum += sq / per as f64;
            let seed = diff.scale(2.0 / (n as f32 * per));
            let grads = g.backward(out, seed);
            opt.step(net.params_mut(), &p, &grads);
            ema.ema_update(net.params(), config.ema_decay);
        }
        ckpt.metrics.train_loss.push(loss_sum / train.len() as f64);
        if !val.is_empty() {
            *ckpt.net.params_mut() = ema.clone();
            ckpt.metrics
                .val_loss
                .push(ckpt.denoising_loss(&val, config.rng_seed ^ 0x7a1)?);
        }
        log::info!(
            "denoiser epoch {epoch}: train {:.4} val {:?}",
            ckpt.metrics.train_loss[epoch],
            ckpt.metrics.val_loss.last()
        );
    }
    *ckpt.net.params_mut() = ema;
    Ok(ckpt)
}

/// Gradient hook for the reverse pass: `(z_t, t, eps_hat) -> gradient`.
pub type Shift<'a> = &'a mut dyn FnMut(&Tensor, usize, &Tensor) -> Result<Tensor>;

/// One ancestral step `z_t -> z_{t-1}`: reverse mean, minus `beta_t` times the
/// optional shift gradient, plus `sqrt(beta_t)` noise when stochastic and `t > 1`.
pub fn reverse_one(
    ckpt: &DenoiserCheckpoint,
    z: &Tensor,
    t: usize,
    rngs: &mut [ChaCha8Rng],
    stochastic: bool,
    shift: Option<Shift<'_>>,
) -> Result<Tensor> {
    let schedule = ckpt.schedule();
    if rngs.len() != z.shape()[0] {
        return Err(Error::validation("one rng stream per image is required"));
    }
    let eps = ckpt.predict_eps(z, t)?;
    let mut next = reverse_step(z, t, &eps, schedule)?;
    if let Some(f) = shift {
        let grad = f(z, t, &eps)?;
        check_same_shape(&next, &grad)?;
        let beta = schedule.beta(t) as f32;
        next = next.zip_map(&grad, |m, g| m - beta * g);
    }
    if stochastic && t > 1 {
        let sigma = schedule.beta(t).sqrt() as f32;
        let noise = normal_batch(rngs, ckpt.image_side());
        next = next.zip_map(&noise, |m, n| m + sigma * n);
    }
    if !next.all_finite() {
        return Err(Error::NonFinite(format!("reverse trajectory at step {t}")));
    }
    Ok(next)
}

/// Ancestral reverse loop from `z` at timestep `t_start` down to a clean
/// estimate. Noise for image `i` comes from `rngs[i]`, so each image's result
/// does not depend on the rest of the batch.
pub fn reverse_loop(
    ckpt: &DenoiserCheckpoint,
    mut z: Tensor,
    t_start: usize,
    rngs: &mut [ChaCha8Rng],
    stochastic: bool,
    mut shift: Option<Shift<'_>>,
) -> Result<Tensor> {
    ckpt.schedule().check_t(t_start, true)?;
    for t in (1..=t_start).rev() {
        let step_shift: Option<Shift<'_>> = match shift {
            Some(ref mut f) => Some(&mut **f),
            None => None,
        };
        z = reverse_one(ckpt, &z, t, rngs, stochastic, step_shift)?;
    }
    Ok(z)
}

/// Draw `n` images from `N(0, I)` at `t = T` and denoise them to `[0, 1]`.
pub fn sample_unconditional(ckpt: &DenoiserCheckpoint, n: usize, rng_seed: u64) -> Result<Tensor> {
    let side = ckpt.image_side();
    let mut rngs: Vec<ChaCha8Rng> = (0..n as u64).map(|i| image_rng(rng_seed, i)).collect();
    let z = normal_batch(&mut rngs, side);
    let out = reverse_loop(ckpt, z, ckpt.schedule().steps(), &mut rngs, true, None)?;
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}
