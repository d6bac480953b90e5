//! Forward diffusion, the clean-image estimate, and the training losses.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::embedder::{cosine_similarity, EncoderCheckpoint};
use crate::error::{validation, Error, Result};
use crate::image::ImageArray;
use crate::tensor::{Elem, Tensor};

use super::denoiser::check_m;
use super::schedule::NoiseSchedule;

/// How the scalar distances inside the similarity-matching loss are penalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityPenalty {
    /// `(1 − s)²` and `(m − s)²`.
    #[default]
    Squared,
    /// `|1 − s|` and `|m − s|`.
    Absolute,
}

impl std::str::FromStr for SimilarityPenalty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(Self::Squared),
            "absolute" => Ok(Self::Absolute),
            other => Err(validation(format!("unknown similarity penalty {other:?}"))),
        }
    }
}

impl std::fmt::Display for SimilarityPenalty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Squared => "squared",
            Self::Absolute => "absolute",
        })
    }
}

fn same_dims(a: &ImageArray, b: &ImageArray) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`, unclipped.
pub fn forward_diffuse(x0: &ImageArray, t: usize, eps: &ImageArray, schedule: &NoiseSchedule) -> Result<ImageArray> {
    schedule.check_step(t)?;
    same_dims(x0, eps)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let [c, h, w] = x0.dims();
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
        .collect();
    ImageArray::new(c, h, w, data)
}

/// `x̂₀ = (x_t − √(1−ᾱ_t)·ε′)/√ᾱ_t`.
pub fn estimate_x0(x_t: &ImageArray, eps_hat: &ImageArray, t: usize, schedule: &NoiseSchedule) -> Result<ImageArray> {
    schedule.check_step(t)?;
    same_dims(x_t, eps_hat)?;
    let ab = schedule.alpha_bar(t);
    if ab <= 0.0 {
        return Err(Error::Numeric(format!("alpha_bar({t}) = {ab} is not positive")));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let [c, h, w] = x_t.dims();
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| ((x as f64 - b * e as f64) / a) as f32)
        .collect();
    ImageArray::new(c, h, w, data)
}

/// Mean squared difference.
pub fn mse_loss(eps_hat: &ImageArray, eps: &ImageArray) -> Result<f64> {
    same_dims(eps_hat, eps)?;
    let n = eps.data().len();
    let sum: f64 = eps_hat
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

/// `(1 − t/T)·ρ(1 − s) + (t/T)·ρ(m − s)` for a known similarity `s`.
pub fn simmat_from_similarity(s: f64, m: f64, t: usize, horizon: usize, penalty: SimilarityPenalty) -> Result<f64> {
    if t > horizon {
        return Err(Error::Index(format!("timestep {t} exceeds T = {horizon}")));
    }
    check_m(m)?;
    let gamma = t as f64 / horizon as f64;
    let rho = |d: f64| match penalty {
        SimilarityPenalty::Squared => d * d,
        SimilarityPenalty::Absolute => d.abs(),
    };
    Ok((1.0 - gamma) * rho(1.0 - s) + gamma * rho(m - s))
}

/// Similarity-matching loss between a clean image and its estimate, as seen
/// by a frozen encoder. Both images are resized to the encoder resolution;
/// the estimate is clamped to `[−1, 1]` first.
pub fn simmat_loss(
    x: &ImageArray,
    x0_hat: &ImageArray,
    m: f64,
    t: usize,
    horizon: usize,
    encoder: &EncoderCheckpoint<f32>,
) -> Result<f64> {
    if t > horizon {
        return Err(Error::Index(format!("timestep {t} exceeds T = {horizon}")));
    }
    same_dims(x, x0_hat)?;
    let r = encoder.config().resolution;
    let a = encoder.embed(&x.resized(r, r))?;
    let b = encoder.embed(&x0_hat.clone().clamped().resized(r, r))?;
    let s = cosine_similarity(&a, &b)?;
    simmat_from_similarity(s, m, t, horizon, SimilarityPenalty::Squared)
}

/// `L = L_MSE + λ·L_SimMat`.
pub fn total_loss(mse: f64, simmat: f64, lambda: f64) -> Result<f64> {
    if !(mse.is_finite() && simmat.is_finite() && lambda.is_finite()) {
        return Err(Error::Numeric("loss terms must be finite".into()));
    }
    if lambda < 0.0 {
        return Err(validation(format!("lambda {lambda} is negative")));
    }
    Ok(mse + lambda * simmat)
}

/// Batched `x_t` on the tape from constants `x0`, `eps` (`[N, C, H, W]`).
pub fn forward_diffuse_tensor<T: Elem>(x0: &Tensor<T>, eps: &Tensor<T>, t: &[usize], schedule: &NoiseSchedule) -> Tensor<T> {
    let per = x0.numel() / t.len();
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &step) in t.iter().enumerate() {
        let ab = schedule.alpha_bar(step);
        let (a, b) = (T::cast_from(ab.sqrt()), T::cast_from((1.0 - ab).sqrt()));
        let xs = &x0.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        out.extend(xs.iter().zip(es).map(|(&x, &e)| a * x + b * e));
    }
    Tensor::new(x0.shape().to_vec(), out)
}

/// Batched inverse of [`forward_diffuse_tensor`] given the noise.
pub fn estimate_x0_tensor<T: Elem>(x_t: &Tensor<T>, eps_hat: &Tensor<T>, t: &[usize], schedule: &NoiseSchedule) -> Tensor<T> {
    let per = x_t.numel() / t.len();
    let mut out = Vec::with_capacity(x_t.numel());
    for (i, &step) in t.iter().enumerate() {
        let ab = schedule.alpha_bar(step);
        let (a, b) = (T::cast_from(ab.sqrt()), T::cast_from((1.0 - ab).sqrt()));
        let xs = &x_t.data()[i * per..(i + 1) * per];
        let es = &eps_hat.data()[i * per..(i + 1) * per];
        out.extend(xs.iter().zip(es).map(|(&x, &e)| (x - b * e) / a));
    }
    Tensor::new(x_t.shape().to_vec(), out)
}

/// Per-sample coefficient column `[N, 1, 1, 1]`.
fn per_sample<T: Elem>(g: &mut Graph<T>, values: impl Iterator<Item = f64>) -> Var {
    let v: Vec<T> = values.map(T::cast_from).collect();
    let n = v.len();
    g.constant(Tensor::new(vec![n, 1, 1, 1], v))
}

/// `x̂₀` on the tape, differentiable with respect to `eps_hat`.
pub fn estimate_x0_graph<T: Elem>(g: &mut Graph<T>, x_t: Var, eps_hat: Var, t: &[usize], schedule: &NoiseSchedule) -> Var {
    let inv_a = per_sample(g, t.iter().map(|&s| 1.0 / schedule.alpha_bar(s).sqrt()));
    let b_over_a = per_sample(
        g,
        t.iter().map(|&s| {
            let ab = schedule.alpha_bar(s);
            (1.0 - ab).sqrt() / ab.sqrt()
        }),
    );
    let xa = g.mul(x_t, inv_a);
    let eb = g.mul(eps_hat, b_over_a);
    g.sub(xa, eb)
}

/// Mean over the batch of the similarity-matching loss given cosine similarities `s` (`[N]`).
pub fn simmat_graph<T: Elem>(g: &mut Graph<T>, s: Var, m: &[f64], t: &[usize], horizon: usize, penalty: SimilarityPenalty) -> Var {
    let n = m.len();
    let gamma: Vec<f64> = t.iter().map(|&step| step as f64 / horizon as f64).collect();
    let ones = g.constant(Tensor::full(&[n], T::one()));
    let mv = g.constant(Tensor::new(vec![n], m.iter().map(|&v| T::cast_from(v)).collect()));
    let d_rec = g.sub(ones, s);
    let d_sim = g.sub(mv, s);
    let (p_rec, p_sim) = match penalty {
        SimilarityPenalty::Squared => (g.square(d_rec), g.square(d_sim)),
        SimilarityPenalty::Absolute => (g.abs(d_rec), g.abs(d_sim)),
    };
    let w_rec = g.constant(Tensor::new(vec![n], gamma.iter().map(|&v| T::cast_from(1.0 - v)).collect()));
    let w_sim = g.constant(Tensor::new(vec![n], gamma.iter().map(|&v| T::cast_from(v)).collect()));
    let a = g.mul(p_rec, w_rec);
    let b = g.mul(p_sim, w_sim);
    let sum = g.add(a, b);
    g.mean_all(sum)
}

/// Row-wise dot products of two `[N, D]` unit-row batches, giving `[N]`.
pub fn rowwise_cosine<T: Elem>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let prod = g.mul(a, b);
    g.sum_last(prod)
}
