use serde::{Deserialize, Serialize};

use crate::checkpoint::Header;
use crate::error::{validation, Error, Result};

/// Variance schedule `β_1..β_T` with `α_t = 1 − β_t` and `ᾱ_t = ∏_{s≤t} α_s`.
///
/// Timesteps are 1-based; `ᾱ_0` is defined as 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas in `[0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(validation("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(validation(format!("beta {b} outside [0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Horizon `T`.
    pub fn horizon(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t` for `t ∈ [0, T]`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.horizon() {
            return Err(Error::Index(format!("timestep {t} outside [1, {}]", self.horizon())));
        }
        Ok(())
    }
}

/// Linearly spaced betas from `beta_start` to `beta_end` over `T` steps.
pub fn make_noise_schedule(horizon: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if horizon == 0 {
        return Err(validation("T must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(validation(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas = (0..horizon)
        .map(|i| {
            if horizon == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (horizon - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// The conventional 1e-4 → 0.02 range, rescaled so a horizon other than 1000
/// still ends near pure noise.
pub fn scaled_linear_bounds(horizon: usize) -> (f64, f64) {
    let k = 1000.0 / horizon as f64;
    ((1e-4 * k).min(0.5), (0.02 * k).min(0.999))
}

/// Parameters of a linear schedule, as stored in denoiser headers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub horizon: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    /// Linear schedule with [`scaled_linear_bounds`].
    pub fn scaled(horizon: usize) -> Self {
        let (beta_start, beta_end) = scaled_linear_bounds(horizon);
        Self {
            horizon,
            beta_start,
            beta_end,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_noise_schedule(self.horizon, self.beta_start, self.beta_end)
    }

    pub fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("T", self.horizon.to_string()),
            ("schedule", "linear".to_string()),
            ("beta_start", self.beta_start.to_string()),
            ("beta_end", self.beta_end.to_string()),
        ]
    }

    pub fn write_header(&self, h: &mut Header) {
        for (k, v) in self.fields() {
            h.set(k, v);
        }
    }

    pub fn from_header(h: &Header) -> Result<Self> {
        if let Some(kind) = h.raw("schedule") {
            if kind != "linear" {
                return Err(Error::Format(format!("unknown schedule kind `{kind}`")));
            }
        }
        Ok(Self {
            horizon: h.get("T")?,
            beta_start: h.get("beta_start")?,
            beta_end: h.get("beta_end")?,
        })
    }
}
