//! Losses, optimizer plumbing and the training loop.

pub mod config;
pub mod losses;
pub mod trainer;

pub use crate::optim::{clip_gradients, Adam};
pub use config::TrainConfig;
pub use losses::{
    bits_per_dim, dequantize, loss_autoencoder, loss_image_noise, loss_latent_noise, loss_nll, total_loss, LossNoise,
    LossTerms, LossWeights, PIXEL_LEVELS,
};
pub use trainer::{StepMetrics, Trainer};
