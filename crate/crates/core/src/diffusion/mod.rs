//! Similarity-conditioned denoising diffusion: schedule, denoiser, losses and training.

mod denoiser;
mod loss;
mod schedule;
mod train;

pub use denoiser::{build_conditions, denoise, timestep_features, ConditioningBundle, DenoiserConfig, DenoiserModel, DENOISER_ARCH};
pub use loss::{
    estimate_x0, estimate_x0_graph, estimate_x0_tensor, forward_diffuse, forward_diffuse_tensor, mse_loss, rowwise_cosine, simmat_from_similarity,
    simmat_graph, simmat_loss, total_loss, SimilarityPenalty,
};
pub use schedule::{make_noise_schedule, scaled_linear_bounds, NoiseSchedule, ScheduleSpec};
pub use train::{
    diffusion_loss_graph, load_denoiser, m_grid, save_denoiser, train_diffusion, train_diffusion_observed, DiffusionBatch, DiffusionEpochLog, DiffusionTrainConfig, LossVars, MSampler,
    TrainedDenoiser,
};

