//! Exemplar-based image editing: an edit demonstrated by a before/after pair
//! is captured as an image-embedding direction plus a VLM-written caption and
//! transferred to a new image through DDIM inversion and decoder
//! feature/self-attention injection in a latent diffusion model.

pub mod backbone;
pub mod dataset;
pub mod edit_embedding;
pub mod encoders;
pub mod error;
pub mod image_ops;
pub mod injection;
pub mod inversion;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod reference;
pub mod schedule;
pub mod suite;
pub mod tensor_file;
pub mod vlm;

pub use backbone::{Autoencoder, Conditioning, DecoderHooks, DenoisingBackbone, Latent, LatentShape};
pub use edit_embedding::{
    build_edit_embedding, compute_edit_direction, AdapterProjection, EditEmbedding, ImageProjector,
    ImageTokens, IMAGE_TOKENS,
};
pub use encoders::{ImageEncoder, TextEncoder, EMBED_DIM, TEXT_TOKENS};
pub use error::{Error, Result};
