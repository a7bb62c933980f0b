//! Layers, parameter storage and the time embedding used by the denoiser.

pub mod attention;
mod embedding;
pub(crate) mod layers;
pub mod params;

pub use attention::efficient_attention;
pub use embedding::{time_embed, TimeEmbedding};
pub use layers::group_count;
pub use params::{ParamInfo, ParamKind, ParamStore};
