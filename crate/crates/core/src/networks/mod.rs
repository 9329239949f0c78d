//! The super-resolution generator and the embedding/discriminator network.

pub mod embed;
mod init;
pub mod layers;
pub mod params;
pub mod sr;

pub use embed::{
    embed_backward, embed_forward, embed_forward_cached, embed_parameter_count, init_embed_parameters,
    refresh_spectral_buffers, EmbedCache, EmbedGrad, EmbedNetConfig,
};
pub use params::ParameterSet;
pub use sr::{init_sr_parameters, sr_backward, sr_forward, sr_forward_cached, sr_parameter_count, SrBackboneConfig, SrCache};
