//! Frozen encoder interfaces: the image encoder feeding both the adapter
//! projection and the evaluation metrics, and the text encoder producing the
//! 77-token conditioning sequence.

use image::RgbImage;
use ndarray::{Array1, Array2};

use crate::error::Result;

/// Hidden width shared by the text encoder and the adapter image tokens.
pub const EMBED_DIM: usize = 768;
/// Text encoder context window, including start and end tokens.
pub const TEXT_TOKENS: usize = 77;

pub trait ImageEncoder: Send + Sync {
    fn id(&self) -> &str;

    /// Global image embedding of length [`EMBED_DIM`].
    fn embed(&self, image: &RgbImage) -> Result<Array1<f32>>;
}

#[derive(Debug, Clone)]
pub struct TextEmbedding {
    /// `(TEXT_TOKENS, EMBED_DIM)` per-token hidden states.
    pub tokens: Array2<f32>,
    /// Pooled embedding in the joint image-text space, used by the metrics.
    pub pooled: Array1<f32>,
    /// Number of content tokens kept (excluding start/end/padding).
    pub content_tokens: usize,
    /// Whether content was cut to fit the context window.
    pub truncated: bool,
}

pub trait TextEncoder: Send + Sync {
    fn id(&self) -> &str;

    fn encode(&self, text: &str) -> Result<TextEmbedding>;
}
