//! Latent diffusion components: noise schedule, VAE, text encoder, denoiser and training.

pub mod blocks;
pub mod models;
pub mod schedule;
pub mod text;
pub mod train;
pub mod unet;
pub mod vae;

pub use models::{BaseModel, Conditioning, ControlArch, NoisePredictor, SrModel};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use text::{TextConfig, TextEncoder};
pub use unet::UNetArch;
pub use vae::{Vae, VaeArch};
