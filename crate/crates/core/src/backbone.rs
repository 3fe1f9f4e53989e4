//! Interfaces to the frozen latent diffusion model: the autoencoder, the
//! conditioning format, and the noise-prediction network with decoder hooks.

use std::any::Any;

use image::RgbImage;
use ndarray::{concatenate, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::edit_embedding::IMAGE_TOKENS;
use crate::encoders::{EMBED_DIM, TEXT_TOKENS};
use crate::error::{Error, Result};
use crate::schedule::DdimConfig;

/// Latent tensor, `(channels, height, width)`.
pub type Latent = Array3<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    /// Stable Diffusion 1.x latent for a 512x512 image.
    pub const SD15: LatentShape = LatentShape {
        channels: 4,
        height: 64,
        width: 64,
    };

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn check(&self, latent: &Latent, what: &str) -> Result<()> {
        if latent.dim() != self.dims() {
            return Err(Error::Contract(format!(
                "{what}: expected latent {:?}, got {:?}",
                self.dims(),
                latent.dim()
            )));
        }
        Ok(())
    }
}

pub trait Autoencoder: Send + Sync {
    fn id(&self) -> &str;
    fn latent_shape(&self) -> LatentShape;
    fn encode(&self, image: &RgbImage) -> Result<Latent>;
    fn decode(&self, latent: &Latent) -> Result<RgbImage>;
}

/// Cross-attention conditioning: 77 text tokens routed to the text
/// cross-attention and 4 image tokens routed to the adapter cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub text: Array2<f32>,
    pub image: Array2<f32>,
}

impl Conditioning {
    pub fn new(text: Array2<f32>, image: Array2<f32>) -> Result<Self> {
        if text.dim() != (TEXT_TOKENS, EMBED_DIM) {
            return Err(Error::Contract(format!(
                "text conditioning must be ({TEXT_TOKENS}, {EMBED_DIM}), got {:?}",
                text.dim()
            )));
        }
        if image.dim() != (IMAGE_TOKENS, EMBED_DIM) {
            return Err(Error::Contract(format!(
                "image conditioning must be ({IMAGE_TOKENS}, {EMBED_DIM}), got {:?}",
                image.dim()
            )));
        }
        Ok(Self { text, image })
    }

    /// Total number of conditioning tokens (text + image).
    pub fn len(&self) -> usize {
        self.text.nrows() + self.image.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Text tokens followed by image tokens, `(81, 768)`.
    pub fn concatenated(&self) -> Array2<f32> {
        concatenate(Axis(0), &[self.text.view(), self.image.view()]).expect("matching widths")
    }
}

/// Backbone-specific precomputation for a conditioning (e.g. projected
/// cross-attention keys and values), reused across all denoising steps.
pub struct PreparedConditioning {
    tokens: usize,
    inner: Box<dyn Any + Send + Sync>,
}

impl PreparedConditioning {
    pub fn new<T: Any + Send + Sync>(tokens: usize, inner: T) -> Self {
        Self {
            tokens,
            inner: Box::new(inner),
        }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn downcast<T: Any>(&self) -> Result<&T> {
        self.inner
            .downcast_ref()
            .ok_or_else(|| Error::Contract("conditioning was prepared by a different backbone".into()))
    }
}

/// Observation and replacement points inside the decoder (upsampling path).
///
/// Decoder layers are numbered from 0 in forward-execution order. At each
/// layer the backbone first offers the residual-block output `f`, then the
/// self-attention queries and keys, both `(tokens, channels)`. Whatever the
/// hook leaves in the buffers is what the network uses.
pub trait DecoderHooks {
    fn feature(&mut self, _layer: usize, _f: &mut Array2<f32>) -> Result<()> {
        Ok(())
    }

    fn self_attention(
        &mut self,
        _layer: usize,
        _q: &mut Array2<f32>,
        _k: &mut Array2<f32>,
    ) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl DecoderHooks for NoHooks {}

pub trait DenoisingBackbone: Send + Sync {
    fn id(&self) -> &str;

    fn latent_shape(&self) -> LatentShape;

    /// Number of hookable decoder layers.
    fn decoder_layers(&self) -> usize;

    /// Training noise schedule of the model.
    fn schedule_config(&self) -> DdimConfig;

    fn prepare(&self, conditioning: &Conditioning) -> Result<PreparedConditioning>;

    /// Predicts the noise in `latent` at `timestep`.
    fn predict_noise(
        &self,
        latent: &Latent,
        timestep: usize,
        conditioning: &PreparedConditioning,
        hooks: &mut dyn DecoderHooks,
    ) -> Result<Latent>;
}
