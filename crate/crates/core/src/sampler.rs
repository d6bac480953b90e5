//! Deterministic accelerated sampling over a strided timestep subsequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserModel, NoiseSchedule};
use crate::embedder::{EncoderCheckpoint, IdentityEmbedding};
use crate::error::{validation, Error, Result};
use crate::image::ImageArray;
use crate::tensor::{Elem, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_steps: usize,
    /// 0 gives the deterministic sampler; 1 matches ancestral sampling variance.
    pub eta: f64,
    pub seed: u64,
    /// Clamp each intermediate `x̂₀` to `[−1, 1]`.
    pub clip_x0: bool,
    /// Samples denoised together per forward pass.
    pub batch_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 20,
            eta: 0.0,
            seed: 0,
            clip_x0: true,
            batch_size: 50,
        }
    }
}

/// `num_steps` timesteps from `T` down to 1, evenly strided, both endpoints included.
pub fn timestep_subsequence(horizon: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 {
        return Err(validation("num_steps must be at least 1"));
    }
    if num_steps > horizon {
        return Err(validation(format!("num_steps {num_steps} exceeds T = {horizon}")));
    }
    if num_steps == 1 {
        return Ok(vec![horizon]);
    }
    let span = (horizon - 1) as f64;
    Ok((0..num_steps)
        .rev()
        .map(|k| 1 + (k as f64 * span / (num_steps - 1) as f64).round() as usize)
        .collect())
}

/// One update `x_prev = a·x_t + b·ε′ + σ·z` written in terms of `x_t` and the
/// predicted noise (no clipping).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DdimCoefficients {
    pub x_t: f64,
    pub eps: f64,
    pub sigma: f64,
}

/// Coefficients of the step `t → t_prev` (`t_prev < t`, `t_prev = 0` is the clean end).
pub fn ddim_coefficients(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> Result<DdimCoefficients> {
    if t == 0 || t > schedule.horizon() || t_prev >= t {
        return Err(Error::Index(format!("invalid step {t} -> {t_prev}")));
    }
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let sigma = ddim_sigma(ab, ab_prev, eta);
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let x_t = ab_prev.sqrt() / ab.sqrt();
    let eps = dir - ab_prev.sqrt() * (1.0 - ab).sqrt() / ab.sqrt();
    Ok(DdimCoefficients { x_t, eps, sigma })
}

fn ddim_sigma(ab: f64, ab_prev: f64, eta: f64) -> f64 {
    eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt()
}

fn check_config(schedule: &NoiseSchedule, config: &SamplerConfig) -> Result<Vec<usize>> {
    if !(config.eta >= 0.0 && config.eta.is_finite()) {
        return Err(validation(format!("eta {} must be finite and >= 0", config.eta)));
    }
    timestep_subsequence(schedule.horizon(), config.num_steps)
}

/// Samples one image per `(embedding, m, seed)` triple; each sample's noise
/// comes only from its own seed, so results do not depend on batching.
pub fn ddim_sample_batch<T: Elem>(
    model: &DenoiserModel<T>,
    schedule: &NoiseSchedule,
    conditions: &[(&IdentityEmbedding, f64)],
    seeds: &[u64],
    config: &SamplerConfig,
) -> Result<Vec<ImageArray>> {
    if conditions.len() != seeds.len() {
        return Err(validation("one seed per condition required"));
    }
    let steps = check_config(schedule, config)?;
    let mut out = Vec::with_capacity(seeds.len());
    let chunk = config.batch_size.max(1);
    for (conds, seeds) in conditions.chunks(chunk).zip(seeds.chunks(chunk)) {
        out.extend(sample_chunk(model, schedule, conds, seeds, &steps, config)?);
    }
    Ok(out)
}

fn sample_chunk<T: Elem>(
    model: &DenoiserModel<T>,
    schedule: &NoiseSchedule,
    conditions: &[(&IdentityEmbedding, f64)],
    seeds: &[u64],
    steps: &[usize],
    config: &SamplerConfig,
) -> Result<Vec<ImageArray>> {
    let cfg = model.config();
    let (c, r) = (cfg.in_channels, cfg.resolution);
    let per = c * r * r;
    let n = seeds.len();
    let c_att = model.condition_rows(conditions)?;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut x: Vec<T> = Vec::with_capacity(n * per);
    for rng in &mut rngs {
        x.extend((0..per).map(|_| T::cast_from(StandardNormal.sample(rng))));
    }
    let shape = vec![n, c, r, r];
    for (k, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(k + 1).copied().unwrap_or(0);
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let sigma = ddim_sigma(ab, ab_prev, config.eta);
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let eps = model.predict_noise(&Tensor::new(shape.clone(), x.clone()), &vec![t; n], &c_att);
        if !eps.all_finite() {
            return Err(Error::Numeric(format!("non-finite noise prediction at step {t}")));
        }
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (i, rng) in rngs.iter_mut().enumerate() {
            #[allow(clippy::needless_range_loop)]
            for j in i * per..(i + 1) * per {
                let xt = x[j].as_f64();
                let e = eps.data()[j].as_f64();
                let mut x0 = (xt - sb * e) / sa;
                let mut e = e;
                if config.clip_x0 {
                    x0 = x0.clamp(-1.0, 1.0);
                    e = (xt - sa * x0) / sb;
                }
                let mut next = ab_prev.sqrt() * x0 + dir * e;
                if sigma > 0.0 && t_prev > 0 {
                    let z: f64 = StandardNormal.sample(rng);
                    next += sigma * z;
                }
                x[j] = T::cast_from(next);
            }
        }
    }
    let out = Tensor::new(shape, x);
    Ok(ImageArray::unbatch(&out)?.into_iter().map(ImageArray::clamped).collect())
}

/// Denoises pure noise from `config.seed` under a fixed `(c_id, m)`.
pub fn ddim_sample<T: Elem>(
    model: &DenoiserModel<T>,
    schedule: &NoiseSchedule,
    c_id: &IdentityEmbedding,
    m: f64,
    config: &SamplerConfig,
) -> Result<ImageArray> {
    Ok(ddim_sample_batch(model, schedule, &[(c_id, m)], &[config.seed], config)?.remove(0))
}

/// `n` samples of one inquiry at similarity `m`, seeded `base_seed..base_seed + n`.
#[allow(clippy::too_many_arguments)]
pub fn generate_group<T: Elem>(
    model: &DenoiserModel<T>,
    schedule: &NoiseSchedule,
    inquiry: &ImageArray,
    encoder: &EncoderCheckpoint<f32>,
    m: f64,
    n: usize,
    base_seed: u64,
    config: &SamplerConfig,
) -> Result<Vec<ImageArray>> {
    if n == 0 {
        return Err(validation("group size must be at least 1"));
    }
    let r = encoder.config().resolution;
    let c_id = encoder.embed(&inquiry.resized(r, r))?;
    let conds = vec![(&c_id, m); n];
    let seeds: Vec<u64> = (0..n as u64).map(|i| base_seed.wrapping_add(i)).collect();
    ddim_sample_batch(model, schedule, &conds, &seeds, config)
}
