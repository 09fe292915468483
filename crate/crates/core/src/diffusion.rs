//! Noise schedule, training objective and deterministic DDIM sampling on
//! sketch-conditioned latents.
//!
//! The clean latent, zero-padded reference latent and sketch latent all come
//! from the frozen VAE; the denoiser predicts v (or ε) for a uniformly drawn
//! timestep; sampling runs DDIM over a uniformly strided timestep subset and
//! is fully deterministic at eta = 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::ControlNetBaseline;
use crate::dataset::TrainingExample;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;
use crate::video::{LatentTensor, VideoTensor};
use crate::videovae::{pad_reference, VideoVae};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionType {
    Epsilon,
    V,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
    pub prediction_type: PredictionType,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            kind: ScheduleKind::Cosine,
            prediction_type: PredictionType::V,
        }
    }
}

/// Precomputed ᾱ table plus the prediction-type contract.
#[derive(Clone, Debug)]
pub struct DiffusionSchedule {
    pub cfg: ScheduleConfig,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(cfg: ScheduleConfig) -> Result<Self> {
        if cfg.steps == 0 {
            return Err(Error::Schedule("steps must be ≥ 1".into()));
        }
        if !(0.0 < cfg.beta_start && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "require 0 < betaStart ≤ betaEnd < 1, got {} and {}",
                cfg.beta_start, cfg.beta_end
            )));
        }
        let betas: Vec<f64> = match cfg.kind {
            ScheduleKind::Linear => (0..cfg.steps)
                .map(|i| {
                    if cfg.steps == 1 {
                        cfg.beta_start
                    } else {
                        cfg.beta_start
                            + (cfg.beta_end - cfg.beta_start) * i as f64 / (cfg.steps - 1) as f64
                    }
                })
                .collect(),
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| {
                    let x = ((t / cfg.steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (0..cfg.steps)
                    .map(|i| (1.0 - f((i + 1) as f64) / f(i as f64)).clamp(1e-8, 0.999))
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(cfg.steps);
        let mut acc = 1.0;
        for b in betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { cfg, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.cfg.steps
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Schedule(format!("timestep {t} out of range 0..{}", self.cfg.steps)))
    }
}

/// (√ᾱ, √(1−ᾱ)) for a given ᾱ.
pub fn noise_coefficients(alpha_bar: f64) -> (f64, f64) {
    (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt())
}

/// x_t = √ᾱ·x0 + √(1−ᾱ)·eps for an explicit ᾱ.
pub fn add_noise_with_alpha_bar(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Tensor {
    let (sa, sb) = noise_coefficients(alpha_bar);
    let data = x0
        .data()
        .iter()
        .zip(eps.data().iter())
        .map(|(x, e)| sa * x + sb * e)
        .collect();
    Tensor::from_vec(x0.shape(), data)
}

/// Forward-noises a latent at schedule timestep `t`.
pub fn add_noise(
    x0: &LatentTensor,
    eps: &LatentTensor,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<LatentTensor> {
    if x0.tensor().shape() != eps.tensor().shape() {
        return Err(Error::Dimension("x0 and eps shapes differ".into()));
    }
    let ab = schedule.alpha_bar(t)?;
    LatentTensor::new(add_noise_with_alpha_bar(x0.tensor(), eps.tensor(), ab))
}

/// Training target for an explicit ᾱ: v = √ᾱ·eps − √(1−ᾱ)·x0, or ε itself.
pub fn target_with_alpha_bar(
    x0: &Tensor,
    eps: &Tensor,
    alpha_bar: f64,
    prediction: PredictionType,
) -> Tensor {
    match prediction {
        PredictionType::Epsilon => eps.clone(),
        PredictionType::V => {
            let (sa, sb) = noise_coefficients(alpha_bar);
            let data = eps
                .data()
                .iter()
                .zip(x0.data().iter())
                .map(|(e, x)| sa * e - sb * x)
                .collect();
            Tensor::from_vec(x0.shape(), data)
        }
    }
}

/// Training target at schedule timestep `t`.
pub fn target_for(
    x0: &LatentTensor,
    eps: &LatentTensor,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<LatentTensor> {
    if x0.tensor().shape() != eps.tensor().shape() {
        return Err(Error::Dimension("x0 and eps shapes differ".into()));
    }
    let ab = schedule.alpha_bar(t)?;
    LatentTensor::new(target_with_alpha_bar(
        x0.tensor(),
        eps.tensor(),
        ab,
        schedule.cfg.prediction_type,
    ))
}

/// Recovers (x0, eps) estimates from a model prediction at ᾱ.
pub fn reconstruct_x0_eps(
    x_t: &Tensor,
    pred: &Tensor,
    alpha_bar: f64,
    prediction: PredictionType,
) -> (Tensor, Tensor) {
    let (sa, sb) = noise_coefficients(alpha_bar);
    match prediction {
        PredictionType::V => {
            // x0 = √ᾱ·x_t − √(1−ᾱ)·v ; eps = √(1−ᾱ)·x_t + √ᾱ·v
            let x0 = x_t
                .data()
                .iter()
                .zip(pred.data().iter())
                .map(|(x, v)| sa * x - sb * v)
                .collect();
            let eps = x_t
                .data()
                .iter()
                .zip(pred.data().iter())
                .map(|(x, v)| sb * x + sa * v)
                .collect();
            (Tensor::from_vec(x_t.shape(), x0), Tensor::from_vec(x_t.shape(), eps))
        }
        PredictionType::Epsilon => {
            let x0 = x_t
                .data()
                .iter()
                .zip(pred.data().iter())
                .map(|(x, e)| (x - sb * e) / sa)
                .collect();
            (Tensor::from_vec(x_t.shape(), x0), pred.clone())
        }
    }
}

/// Anything that can denoise a latent under reference + sketch conditioning.
pub trait ConditionalDenoiser {
    fn predict(
        &self,
        noisy: &LatentTensor,
        reference: &LatentTensor,
        sketch: &LatentTensor,
        t: usize,
    ) -> Result<LatentTensor>;
}

impl ConditionalDenoiser for Denoiser {
    fn predict(
        &self,
        noisy: &LatentTensor,
        reference: &LatentTensor,
        sketch: &LatentTensor,
        t: usize,
    ) -> Result<LatentTensor> {
        self.forward(noisy, reference, sketch, t)
    }
}

impl ConditionalDenoiser for ControlNetBaseline {
    fn predict(
        &self,
        noisy: &LatentTensor,
        reference: &LatentTensor,
        sketch: &LatentTensor,
        t: usize,
    ) -> Result<LatentTensor> {
        self.forward(noisy, reference, sketch, t)
    }
}

/// The frozen-VAE latent triplet of a training example, on the diffusion
/// latent scale.
pub struct ExampleLatents {
    pub x0: LatentTensor,
    pub reference: LatentTensor,
    pub sketch: LatentTensor,
}

/// Encodes (ground truth, reference frame, sketches) with the frozen VAE
/// posterior mean and applies the recorded latent scale.
pub fn encode_example(vae: &VideoVae, example: &TrainingExample) -> Result<ExampleLatents> {
    let scale = vae.latent_scale();
    let x0 = vae.encode_mean(&example.ground_truth)?.scale(scale);
    let sketch = vae.encode_mean(&example.sketches)?.scale(scale);
    let ref_single = vae.encode_mean(&example.reference)?.scale(scale);
    let reference = pad_reference(&ref_single, x0.frames())?;
    Ok(ExampleLatents { x0, reference, sketch })
}

/// Draws the (timestep, noise) pair a training step uses, uniformly over
/// [0, steps) and standard normal respectively.
pub fn draw_t_eps(
    schedule: &DiffusionSchedule,
    shape: &[usize],
    seed: u64,
) -> (usize, Tensor) {
    let mut rng = rng_from(seed);
    let t = rng.gen_range(0..schedule.steps());
    let eps = Tensor::randn(shape, &mut rng);
    (t, eps)
}

/// The per-example diffusion objective: encode the triplet through the
/// frozen VAE, noise the clean latent at a seed-drawn (t, ε), and return the
/// mean-squared error between the model prediction and the schedule target.
pub fn training_loss<M: ConditionalDenoiser>(
    model: &M,
    vae: &VideoVae,
    example: &TrainingExample,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<f64> {
    let lat = encode_example(vae, example)?;
    let (t, eps) = draw_t_eps(schedule, lat.x0.tensor().shape(), seed);
    let eps = LatentTensor::new(eps)?;
    let x_t = add_noise(&lat.x0, &eps, t, schedule)?;
    let target = target_for(&lat.x0, &eps, t, schedule)?;
    let pred = model.predict(&x_t, &lat.reference, &lat.sketch, t)?;
    if pred.tensor().shape() != target.tensor().shape() {
        return Err(Error::Dimension("prediction and target shapes differ".into()));
    }
    let diff = pred.tensor().sub(target.tensor());
    Ok(diff.sq_norm() / diff.len() as f64)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SamplerConfig {
    pub num_inference_steps: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_inference_steps: 50, eta: 0.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if self.num_inference_steps == 0 || self.num_inference_steps > schedule.steps() {
            return Err(Error::Config(format!(
                "numInferenceSteps {} must lie in 1..={}",
                self.num_inference_steps,
                schedule.steps()
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} must lie in [0,1]", self.eta)));
        }
        Ok(())
    }
}

/// Uniformly strided descending timesteps from steps−1 to 0 inclusive.
pub fn ddim_timesteps(schedule_steps: usize, num: usize) -> Vec<usize> {
    if num == 1 {
        return vec![schedule_steps - 1];
    }
    (0..num)
        .map(|i| (schedule_steps - 1) * (num - 1 - i) / (num - 1))
        .collect()
}

/// DDIM over an arbitrary latent predictor. The conditioning is baked into
/// `predict`; the walk is deterministic given the seed (always at eta = 0).
pub fn ddim_sample_latent(
    predict: &mut dyn FnMut(&LatentTensor, usize) -> Result<LatentTensor>,
    schedule: &DiffusionSchedule,
    cfg: &SamplerConfig,
    shape: (usize, usize, usize, usize),
) -> Result<LatentTensor> {
    cfg.validate(schedule)?;
    let mut rng = rng_from(derive_seed(cfg.seed, "ddim-init", 0));
    let (t_, h, w, c) = shape;
    let mut x = Tensor::randn(&[t_, h, w, c], &mut rng);
    let timesteps = ddim_timesteps(schedule.steps(), cfg.num_inference_steps);
    for (i, &t) in timesteps.iter().enumerate() {
        let ab_t = schedule.alpha_bar(t)?;
        let ab_prev = if i + 1 < timesteps.len() {
            schedule.alpha_bar(timesteps[i + 1])?
        } else {
            1.0
        };
        let pred = predict(&LatentTensor::new(x.clone())?, t)?;
        if !pred.tensor().all_finite() {
            return Err(Error::Numeric(format!("non-finite prediction at timestep {t}")));
        }
        let (x0, eps) =
            reconstruct_x0_eps(&x, pred.tensor(), ab_t, schedule.cfg.prediction_type);
        let (sa_prev, _) = noise_coefficients(ab_prev);
        let sigma = if cfg.eta > 0.0 {
            let v = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev);
            cfg.eta * v.max(0.0).sqrt()
        } else {
            0.0
        };
        let dir_coeff = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let mut next: Vec<f64> = x0
            .data()
            .iter()
            .zip(eps.data().iter())
            .map(|(x0v, ev)| sa_prev * x0v + dir_coeff * ev)
            .collect();
        if sigma > 0.0 {
            let noise = Tensor::randn(&[t_, h, w, c], &mut rng);
            for (n, z) in next.iter_mut().zip(noise.data().iter()) {
                *n += sigma * z;
            }
        }
        x = Tensor::from_vec(&[t_, h, w, c], next);
    }
    LatentTensor::new(x)
}

/// Full sketch-conditioned sampling: encodes the reference frame and sketch
/// sequence with the frozen VAE, runs DDIM, and decodes the final latent.
pub fn sample<M: ConditionalDenoiser>(
    model: &M,
    vae: &VideoVae,
    reference: &VideoTensor,
    sketches: &VideoTensor,
    schedule: &DiffusionSchedule,
    cfg: &SamplerConfig,
) -> Result<VideoTensor> {
    if reference.frames() != 1 {
        return Err(Error::Contract("reference must be a single coloured frame".into()));
    }
    if reference.height() != sketches.height() || reference.width() != sketches.width() {
        return Err(Error::Dimension(format!(
            "reference {}×{} does not match sketches {}×{}",
            reference.height(),
            reference.width(),
            sketches.height(),
            sketches.width()
        )));
    }
    if !sketches.tensor().data().iter().all(|&v| v == 0.0 || v == 1.0) {
        return Err(Error::Contract("sketches must be binarized (exact 0/1 values)".into()));
    }
    let scale = vae.latent_scale();
    let sketch = vae.encode_mean(sketches)?.scale(scale);
    let ref_latent = pad_reference(
        &vae.encode_mean(reference)?.scale(scale),
        sketch.frames(),
    )?;
    let shape = (sketch.frames(), sketch.height(), sketch.width(), sketch.channels());
    let mut predict = |x: &LatentTensor, t: usize| model.predict(x, &ref_latent, &sketch, t);
    let latent = ddim_sample_latent(&mut predict, schedule, cfg, shape)?;
    vae.decode(&latent.scale(1.0 / scale))
}

/// Reference-only sampling through the two-stream base model (no sketch
/// stream exists in the model; used as the comparison baseline).
pub fn sample_base(
    model: &Denoiser,
    vae: &VideoVae,
    reference: &VideoTensor,
    frames: usize,
    schedule: &DiffusionSchedule,
    cfg: &SamplerConfig,
) -> Result<VideoTensor> {
    if reference.frames() != 1 {
        return Err(Error::Contract("reference must be a single coloured frame".into()));
    }
    let scale = vae.latent_scale();
    let (lt, lh, lw) = vae.cfg.latent_dims(frames, reference.height(), reference.width())?;
    let ref_latent = pad_reference(&vae.encode_mean(reference)?.scale(scale), lt)?;
    let shape = (lt, lh, lw, vae.cfg.latent_channels);
    let mut predict = |x: &LatentTensor, t: usize| model.forward_base(x, &ref_latent, t);
    let latent = ddim_sample_latent(&mut predict, schedule, cfg, shape)?;
    vae.decode(&latent.scale(1.0 / scale))
}
