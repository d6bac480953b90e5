//! Joint training of the denoiser and its condition projections against a frozen encoder.

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::Corpus;
use crate::embedder::{EncoderCheckpoint, IdentityEmbedding};
use crate::error::{validation, Error, Result};
use crate::image::ImageArray;
use crate::nn::{AdamW, Bound, Ema};
use crate::tensor::{Elem, Tensor};

use super::denoiser::{DenoiserConfig, DenoiserModel};
use super::loss::{estimate_x0_graph, forward_diffuse_tensor, rowwise_cosine, simmat_graph, SimilarityPenalty};
use super::schedule::{NoiseSchedule, ScheduleSpec};
use crate::checkpoint::Header;
use std::path::Path;

/// Arithmetic grid `low, low + interval, …` capped at `high`, values rounded to 1e-9.
pub fn m_grid(low: f64, high: f64, interval: f64) -> Result<Vec<f64>> {
    if !(low.is_finite() && high.is_finite() && interval.is_finite()) {
        return Err(validation("grid bounds must be finite"));
    }
    if low > high {
        return Err(validation(format!("grid low {low} exceeds high {high}")));
    }
    if interval <= 0.0 {
        return Err(validation(format!("grid interval {interval} must be positive")));
    }
    let steps = ((high - low) / interval + 1e-9).floor() as usize;
    Ok((0..=steps)
        .map(|i| ((low + interval * i as f64) * 1e9).round() / 1e9)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub denoiser: DenoiserConfig,
    /// Weight of the similarity-matching term.
    pub lambda: f64,
    pub m_range: [f64; 2],
    pub m_interval: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Decay of the weight average returned as the trained model; 0 returns the last iterate.
    pub ema_decay: f64,
    pub seed: u64,
    pub penalty: SimilarityPenalty,
    /// Clamp `x̂₀` to `[−1, 1]` (straight-through) before the encoder sees it.
    pub clip_x0: bool,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            lambda: 0.05,
            m_range: [-1.0, 1.0],
            m_interval: 0.02,
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            ema_decay: 0.999,
            seed: 0,
            penalty: SimilarityPenalty::Squared,
            clip_x0: true,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.m_range;
        if !(-1.0..=1.0).contains(&lo) || !(-1.0..=1.0).contains(&hi) {
            return Err(validation(format!("m range [{lo}, {hi}] not within [-1, 1]")));
        }
        m_grid(lo, hi, self.m_interval)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(validation(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(validation("epochs and batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(validation(format!("ema decay {} outside [0, 1)", self.ema_decay)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(validation("learning rate must be positive"));
        }
        self.denoiser.validate()
    }

    pub fn grid(&self) -> Result<Vec<f64>> {
        m_grid(self.m_range[0], self.m_range[1], self.m_interval)
    }
}

/// Uniform draws over a discrete m grid.
#[derive(Clone, Debug)]
pub struct MSampler {
    grid: Vec<f64>,
}

impl MSampler {
    pub fn new(grid: Vec<f64>) -> Result<Self> {
        if grid.is_empty() {
            return Err(validation("empty m grid"));
        }
        Ok(Self { grid })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn index(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(0..self.grid.len())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        self.grid[self.index(rng)]
    }
}

/// One minibatch of training inputs, all drawn ahead of the forward pass.
#[derive(Clone, Debug)]
pub struct DiffusionBatch<T> {
    /// Clean images at the denoiser resolution, `[N, C, H, W]`.
    pub x0: Tensor<T>,
    /// Identity embeddings `E(x₀)` of the clean images, `[N, D]`.
    pub c_id: Tensor<T>,
    pub eps: Tensor<T>,
    pub t: Vec<usize>,
    pub m: Vec<f64>,
}

/// Loss terms left on the tape by [`diffusion_loss_graph`].
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub mse: Var,
    pub simmat: Var,
    pub total: Var,
}

/// Builds `L_MSE + λ·L_SimMat` for one batch.
///
/// The similarity is between `E(x̂₀)` and the batch's `c_id`; `x̂₀` is resized
/// to the encoder resolution on the tape, so gradients reach the denoiser
/// through the encoder.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss_graph<T: Elem>(
    g: &mut Graph<T>,
    model: &DenoiserModel<T>,
    pm: &Bound,
    encoder: &EncoderCheckpoint<T>,
    pe: &Bound,
    batch: &DiffusionBatch<T>,
    schedule: &NoiseSchedule,
    config: &DiffusionTrainConfig,
) -> LossVars {
    let horizon = schedule.horizon();
    let x_t = g.constant(forward_diffuse_tensor(&batch.x0, &batch.eps, &batch.t, schedule));
    let eps = g.constant(batch.eps.clone());
    let c_id = g.constant(batch.c_id.clone());
    let n = batch.t.len();
    let m = g.constant(Tensor::new(vec![n, 1], batch.m.iter().map(|&v| T::cast_from(v)).collect()));
    let c_att = model.conditions(g, pm, c_id, m);
    let eps_hat = model.forward(g, pm, x_t, &batch.t, c_att);
    let diff = g.sub(eps_hat, eps);
    let sq = g.square(diff);
    let mse = g.mean_all(sq);

    let mut x0_hat = estimate_x0_graph(g, x_t, eps_hat, &batch.t, schedule);
    if config.clip_x0 {
        x0_hat = g.clamp_straight_through(x0_hat, -1.0, 1.0);
    }
    let r = encoder.config().resolution;
    let x0_hat = g.resize_bilinear(x0_hat, r, r);
    let emb = encoder.forward(g, pe, x0_hat);
    let s = rowwise_cosine(g, emb, c_id);
    let simmat = simmat_graph(g, s, &batch.m, &batch.t, horizon, config.penalty);
    let weighted = g.scale(simmat, config.lambda);
    let total = g.add(mse, weighted);
    LossVars { mse, simmat, total }
}

/// Per-epoch means of the loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionEpochLog {
    pub epoch: usize,
    pub mse: f64,
    pub simmat: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedDenoiser {
    pub model: DenoiserModel<f32>,
    pub epochs: Vec<DiffusionEpochLog>,
    /// Total loss of every batch in training order.
    pub batch_losses: Vec<f64>,
}

fn to_tensor<T: Elem>(images: &[&ImageArray]) -> Result<Tensor<T>> {
    ImageArray::batch(images)
}

fn embedding_rows<T: Elem>(embeddings: &[&IdentityEmbedding]) -> Tensor<T> {
    let d = embeddings[0].dim();
    let data = embeddings
        .iter()
        .flat_map(|e| e.as_slice().iter().map(|&v| T::cast_from(v as f64)))
        .collect();
    Tensor::new(vec![embeddings.len(), d], data)
}

/// Trains a fresh denoiser on `corpus`; the encoder stays frozen.
pub fn train_diffusion(
    corpus: &Corpus,
    encoder: &EncoderCheckpoint<f32>,
    config: &DiffusionTrainConfig,
    schedule: &NoiseSchedule,
) -> Result<TrainedDenoiser> {
    train_diffusion_observed(corpus, encoder, config, schedule, &mut |_, _| Ok(()))
}

/// [`train_diffusion`] that hands every finished epoch's log and the model it
/// would return at that point to `observe`, e.g. for periodic snapshots.
pub fn train_diffusion_observed(
    corpus: &Corpus,
    encoder: &EncoderCheckpoint<f32>,
    config: &DiffusionTrainConfig,
    schedule: &NoiseSchedule,
    observe: &mut dyn FnMut(&DiffusionEpochLog, &DenoiserModel<f32>) -> Result<()>,
) -> Result<TrainedDenoiser> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(validation("cannot train on an empty corpus"));
    }
    if config.denoiser.id_dim != encoder.config().dim {
        return Err(Error::Dimension(format!(
            "denoiser expects {}-d identities, encoder produces {}",
            config.denoiser.id_dim,
            encoder.config().dim
        )));
    }
    let sampler = MSampler::new(config.grid()?)?;
    let mut model = DenoiserModel::<f32>::init(config.denoiser.clone(), config.seed)?;
    let enc_images = corpus.resized(encoder.config().resolution);
    let gen_images = corpus.resized(config.denoiser.resolution);
    let identities = encoder.embed_batch(&enc_images)?;
    let mut opt = AdamW::new(model.params(), config.learning_rate, config.weight_decay);
    let mut ema = Ema::new(model.params(), config.ema_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5EED));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let horizon = schedule.horizon();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut batch_losses = Vec::new();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut mse_sum, mut sim_sum, mut tot_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let n = chunk.len();
            let x0_refs: Vec<&ImageArray> = chunk.iter().map(|&i| &gen_images[i]).collect();
            let id_refs: Vec<&IdentityEmbedding> = chunk.iter().map(|&i| &identities[i]).collect();
            let x0 = to_tensor::<f32>(&x0_refs)?;
            let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=horizon)).collect();
            let m: Vec<f64> = (0..n).map(|_| sampler.sample(&mut rng)).collect();
            let eps_data: Vec<f32> = (0..x0.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let batch = DiffusionBatch {
                eps: Tensor::new(x0.shape().to_vec(), eps_data),
                x0,
                c_id: embedding_rows(&id_refs),
                t,
                m,
            };
            let mut g = Graph::<f32>::new();
            let pm = model.params().bind(&mut g, true);
            let pe = encoder.params().bind(&mut g, false);
            let lv = diffusion_loss_graph(&mut g, &model, &pm, encoder, &pe, &batch, schedule, config);
            let (mse, sim, tot) = (
                g.value(lv.mse).item() as f64,
                g.value(lv.simmat).item() as f64,
                g.value(lv.total).item() as f64,
            );
            if !tot.is_finite() {
                return Err(Error::Numeric(format!("non-finite diffusion loss at epoch {epoch}")));
            }
            mse_sum += mse * n as f64;
            sim_sum += sim * n as f64;
            tot_sum += tot * n as f64;
            seen += n;
            batch_losses.push(tot);
            let mut grads = g.backward(lv.total);
            let gm = pm.grads(&g, &mut grads);
            opt.step(model.params_mut(), &gm);
            ema.update(model.params());
        }
        let log = DiffusionEpochLog {
            epoch,
            mse: mse_sum / seen as f64,
            simmat: sim_sum / seen as f64,
            total: tot_sum / seen as f64,
        };
        info!(
            "diffusion epoch {epoch}: mse {:.4} simmat {:.4} total {:.4}",
            log.mse, log.simmat, log.total
        );
        let current = if config.ema_decay > 0.0 {
            DenoiserModel::from_params(config.denoiser.clone(), ema.params().clone())?
        } else {
            model.clone()
        };
        observe(&log, &current)?;
        epochs.push(log);
    }
    if config.ema_decay > 0.0 {
        *model.params_mut() = ema.into_params();
    }
    Ok(TrainedDenoiser {
        model,
        epochs,
        batch_losses,
    })
}

/// Saves `model` with its schedule and training grid in the header.
pub fn save_denoiser(
    path: &Path,
    model: &DenoiserModel<f32>,
    schedule: &ScheduleSpec,
    config: &DiffusionTrainConfig,
    extra: &[(&str, String)],
) -> Result<()> {
    let mut fields = schedule.fields();
    fields.push(("m_low", config.m_range[0].to_string()));
    fields.push(("m_high", config.m_range[1].to_string()));
    fields.push(("m_interval", config.m_interval.to_string()));
    fields.push(("m_grid_size", config.grid()?.len().to_string()));
    fields.push(("lambda", config.lambda.to_string()));
    fields.push(("penalty", config.penalty.to_string()));
    fields.extend(extra.iter().map(|(k, v)| (*k, v.clone())));
    model.save(path, &fields)
}

/// Loads a denoiser saved by [`save_denoiser`] and rebuilds its schedule.
pub fn load_denoiser(path: &Path) -> Result<(DenoiserModel<f32>, NoiseSchedule, Header)> {
    let (model, header) = DenoiserModel::<f32>::load(path)?;
    let schedule = ScheduleSpec::from_header(&header)?.build()?;
    Ok((model, schedule, header))
}
