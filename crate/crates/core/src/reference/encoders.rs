use std::sync::Arc;

use image::RgbImage;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{image_descriptor, lexicon_shift, EmbeddingSpace, DESCRIPTOR_DIM, IMAGE_ANCHOR_SCALE};
use crate::edit_embedding::{AdapterProjection, IMAGE_TOKENS};
use crate::encoders::{ImageEncoder, TextEmbedding, TextEncoder, EMBED_DIM, TEXT_TOKENS};
use crate::error::Result;
use crate::nn::{random_vector, LayerNorm, Linear};

const TEXT_ANCHOR_SCALE: f32 = 2.0;
const POSITION_NORM: f32 = 0.1;
const CONTEXT_WEIGHT: f32 = 0.5;

pub struct ReferenceImageEncoder {
    space: Arc<EmbeddingSpace>,
}

impl ReferenceImageEncoder {
    pub fn new(space: Arc<EmbeddingSpace>) -> Self {
        Self { space }
    }
}

impl ImageEncoder for ReferenceImageEncoder {
    fn id(&self) -> &str {
        "reference-image-encoder/v1"
    }

    fn embed(&self, image: &RgbImage) -> Result<Array1<f32>> {
        let d = image_descriptor(image);
        Ok(self.space.embed(IMAGE_ANCHOR_SCALE, d.view()))
    }
}

/// Word-level text encoder over the reference embedding space.
pub struct ReferenceTextEncoder {
    space: Arc<EmbeddingSpace>,
    seed: u64,
    start: Array1<f32>,
    end: Array1<f32>,
    positions: Array2<f32>,
}

impl ReferenceTextEncoder {
    pub fn new(space: Arc<EmbeddingSpace>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit_off_space = |rng: &mut ChaCha8Rng, norm: f32| {
            let v = space.project_out(&random_vector(rng, EMBED_DIM, 1.0));
            let n = v.dot(&v).sqrt();
            v * (norm / n)
        };
        let start = unit_off_space(&mut rng, 1.0);
        let end = unit_off_space(&mut rng, 1.0);
        let mut positions = Array2::zeros((TEXT_TOKENS, EMBED_DIM));
        for i in 0..TEXT_TOKENS {
            positions.row_mut(i).assign(&unit_off_space(&mut rng, POSITION_NORM));
        }
        Self {
            space,
            seed,
            start,
            end,
            positions,
        }
    }

    /// Lowercase alphanumeric words.
    pub fn tokenize(text: &str) -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_owned)
            .collect()
    }

    /// Content part of a word's embedding: a hashed unit vector outside the
    /// descriptor subspace.
    fn word_vector(&self, word: &str) -> Array1<f32> {
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(word.as_bytes())
            .finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let v = self.space.project_out(&random_vector(&mut rng, EMBED_DIM, 1.0));
        let n = v.dot(&v).sqrt();
        v / n
    }
}

impl TextEncoder for ReferenceTextEncoder {
    fn id(&self) -> &str {
        "reference-text-encoder/v1"
    }

    fn encode(&self, text: &str) -> Result<TextEmbedding> {
        let mut words = Self::tokenize(text);
        let max_content = TEXT_TOKENS - 2;
        let truncated = words.len() > max_content;
        words.truncate(max_content);

        let mut descriptor_sum = Array1::<f32>::zeros(DESCRIPTOR_DIM);
        let mut content_sum = Array1::<f32>::zeros(EMBED_DIM);
        let mut rows = Vec::with_capacity(words.len());
        for word in &words {
            let mut v = self.word_vector(word);
            content_sum += &v;
            if let Some(shift) = lexicon_shift(word) {
                v += &self.space.basis.dot(&shift);
                descriptor_sum += &shift;
            }
            rows.push(v);
        }

        let context = if words.is_empty() {
            Array1::zeros(EMBED_DIM)
        } else {
            &content_sum / words.len() as f32
        };
        let mut tokens = Array2::zeros((TEXT_TOKENS, EMBED_DIM));
        tokens.row_mut(0).assign(&self.start);
        for (i, v) in rows.iter().enumerate() {
            let mut row = tokens.row_mut(i + 1);
            row.assign(v);
            row.scaled_add(CONTEXT_WEIGHT, &context);
        }
        for i in words.len() + 1..TEXT_TOKENS {
            let mut row = tokens.row_mut(i);
            row.assign(&self.end);
            row.scaled_add(CONTEXT_WEIGHT, &context);
        }
        tokens += &self.positions;

        let mut pooled = self.space.embed(TEXT_ANCHOR_SCALE, descriptor_sum.view());
        let content_norm = content_sum.dot(&content_sum).sqrt();
        if content_norm > 0.0 {
            pooled.scaled_add(0.5 / content_norm, &content_sum);
        }

        Ok(TextEmbedding {
            tokens,
            pooled,
            content_tokens: words.len(),
            truncated,
        })
    }
}

/// Builds the reference adapter projection. Returns the projection and the
/// shared orthogonal mixing matrix `Q`; token `k` is `LN(Q · R_k · e)` where
/// `R_k` is a reflection that leaves the descriptor subspace fixed, so
/// `basisᵀ · Qᵀ` recovers the descriptor from every token.
pub(super) fn reference_projection(
    space: &EmbeddingSpace,
    seed: u64,
) -> (AdapterProjection, Array2<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reflect = |m: &Array2<f32>, v: &Array1<f32>| -> Array2<f32> {
        // m · (I - 2 v vᵀ)
        let mv = m.dot(v);
        let outer = mv
            .view()
            .insert_axis(ndarray::Axis(1))
            .dot(&v.view().insert_axis(ndarray::Axis(0)));
        m - &(outer * 2.0)
    };
    let unit = |v: Array1<f32>| {
        let n = v.dot(&v).sqrt();
        v / n
    };

    let mut mixing = Array2::<f32>::eye(EMBED_DIM);
    for _ in 0..4 {
        let v = unit(random_vector(&mut rng, EMBED_DIM, 1.0));
        mixing = reflect(&mixing, &v);
    }

    let mut weight = Array2::zeros((EMBED_DIM, IMAGE_TOKENS * EMBED_DIM));
    for k in 0..IMAGE_TOKENS {
        let raw = random_vector(&mut rng, EMBED_DIM, 1.0);
        let coords = space.basis.t().dot(&raw);
        let v = unit(&raw - &space.basis.dot(&coords));
        let p_k = reflect(&mixing, &v);
        weight
            .slice_mut(ndarray::s![.., k * EMBED_DIM..(k + 1) * EMBED_DIM])
            .assign(&p_k.t());
    }
    let projection = AdapterProjection::new(
        Linear::new(weight, Some(Array1::zeros(IMAGE_TOKENS * EMBED_DIM))),
        LayerNorm::new(EMBED_DIM),
        "reference-adapter-projection/v1",
    )
    .expect("reference projection has valid shapes");
    (projection, mixing)
}
