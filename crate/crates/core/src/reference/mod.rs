//! Compact reference models standing in for the frozen pretrained networks.
//!
//! Everything here is deterministic and built from a seed, so the full
//! editing pipeline runs on a CPU with no weight downloads. The models are
//! small but structurally faithful where the editing algorithm cares:
//!
//! * the image encoder maps an image to a 768-d embedding whose informative
//!   part is a low-dimensional colour/texture descriptor laid out along an
//!   orthonormal basis, on top of a large shared anchor component;
//! * the text encoder embeds words into the same space, with a small colour
//!   vocabulary carrying descriptor directions;
//! * the adapter projection is a linear layer plus layer norm producing four
//!   tokens, constructed so that a single value projection can read the
//!   descriptor back out of every token;
//! * the denoiser is a small U-Net over 16x16 latent tokens with residual
//!   blocks, self-attention, and decoupled text/image cross-attention, wrapped
//!   around the closed-form noise predictor of a Gaussian latent prior;
//! * the autoencoder is an orthonormal 8x8 block DCT in opponent colour space,
//!   which is lossless up to 8-bit quantisation.

mod codec;
mod encoders;
mod lexicon;
mod unet;

use std::sync::Arc;

use image::RgbImage;
use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use codec::{BlockDctCodec, DCT_BLOCK};
pub use encoders::{ReferenceImageEncoder, ReferenceTextEncoder};
pub use lexicon::{lexicon_shift, LEXICON};
pub use unet::{ReferenceUnet, UnetConfig};

use crate::edit_embedding::AdapterProjection;
use crate::encoders::EMBED_DIM;
use crate::image_ops::opponent_planes;
use crate::nn::random_vector;

/// Cells of the coarse spatial grid used by the descriptor (2x2).
pub const GRID: usize = 2;
/// Per-cell opponent colour means.
pub const CELL_MEAN_DIMS: usize = GRID * GRID * 3;
/// Cell means, global opponent standard deviations, per-cell luma gradient
/// energy.
pub const DESCRIPTOR_DIM: usize = CELL_MEAN_DIMS + 3 + GRID * GRID;

pub(crate) const MEAN_SCALE: [f32; 3] = [2.0, 4.0, 4.0];
const STD_SCALE: f32 = 4.0;
const GRAD_SCALE: f32 = 8.0;

/// Index of the descriptor entry holding the mean of opponent channel
/// `channel` in grid cell `(row, col)`.
pub fn cell_mean_index(row: usize, col: usize, channel: usize) -> usize {
    (row * GRID + col) * 3 + channel
}

/// Normalised colour/texture descriptor of an image.
pub fn image_descriptor(img: &RgbImage) -> Array1<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planes = opponent_planes(img);
    let mut d = Array1::zeros(DESCRIPTOR_DIM);

    let cell_bounds = |i: usize, n: usize| (i * n / GRID, (i + 1) * n / GRID);
    for row in 0..GRID {
        let (y0, y1) = cell_bounds(row, h);
        for col in 0..GRID {
            let (x0, x1) = cell_bounds(col, w);
            let count = ((y1 - y0) * (x1 - x0)).max(1) as f64;
            let mut sums = [0f64; 3];
            let mut grad = 0f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    let i = y * w + x;
                    for c in 0..3 {
                        sums[c] += planes[c][i] as f64;
                    }
                    let l = planes[0][i];
                    if x + 1 < w {
                        grad += (planes[0][i + 1] - l).abs() as f64;
                    }
                    if y + 1 < h {
                        grad += (planes[0][i + w] - l).abs() as f64;
                    }
                }
            }
            for c in 0..3 {
                d[cell_mean_index(row, col, c)] = (sums[c] / count) as f32 * MEAN_SCALE[c];
            }
            d[CELL_MEAN_DIMS + 3 + row * GRID + col] = (grad / count) as f32 * GRAD_SCALE;
        }
    }

    let n = (w * h).max(1) as f64;
    for c in 0..3 {
        let mean = planes[c].iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = planes[c]
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        d[CELL_MEAN_DIMS + c] = var.sqrt() as f32 * STD_SCALE;
    }
    d
}

/// The joint embedding space: a unit anchor direction shared by every
/// embedding plus an orthonormal basis carrying the descriptor.
#[derive(Debug, Clone)]
pub struct EmbeddingSpace {
    pub anchor: Array1<f32>,
    /// `(EMBED_DIM, DESCRIPTOR_DIM)`, orthonormal columns orthogonal to the anchor.
    pub basis: Array2<f32>,
}

impl EmbeddingSpace {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vectors: Vec<Array1<f32>> = Vec::with_capacity(DESCRIPTOR_DIM + 1);
        while vectors.len() < DESCRIPTOR_DIM + 1 {
            let mut v = random_vector(&mut rng, EMBED_DIM, 1.0);
            for u in &vectors {
                let dot = v.dot(u);
                v.scaled_add(-dot, u);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-3 {
                vectors.push(v / norm);
            }
        }
        let anchor = vectors.remove(0);
        let mut basis = Array2::zeros((EMBED_DIM, DESCRIPTOR_DIM));
        for (j, v) in vectors.iter().enumerate() {
            basis.column_mut(j).assign(v);
        }
        Self { anchor, basis }
    }

    /// `anchor_scale * anchor + basis · descriptor`.
    pub fn embed(&self, anchor_scale: f32, descriptor: ArrayView1<f32>) -> Array1<f32> {
        let mut e = self.basis.dot(&descriptor);
        e.scaled_add(anchor_scale, &self.anchor);
        e
    }

    /// Coordinates of `v` along the descriptor basis.
    pub fn descriptor_of(&self, v: ArrayView1<f32>) -> Array1<f32> {
        self.basis.t().dot(&v)
    }

    /// Removes the anchor and descriptor components.
    pub fn project_out(&self, v: &Array1<f32>) -> Array1<f32> {
        let mut out = v.clone();
        out.scaled_add(-self.anchor.dot(v), &self.anchor);
        let coords = self.basis.t().dot(v);
        out -= &self.basis.dot(&coords);
        out
    }
}

/// Default seed for the reference model set.
pub const DEFAULT_SEED: u64 = 0x5eed_ed17;

/// Image embeddings carry the anchor at this scale.
pub const IMAGE_ANCHOR_SCALE: f32 = 8.0;

/// All reference models, built consistently from one seed.
pub struct ReferenceModels {
    pub space: Arc<EmbeddingSpace>,
    pub image_encoder: Arc<ReferenceImageEncoder>,
    pub text_encoder: Arc<ReferenceTextEncoder>,
    pub projection: Arc<AdapterProjection>,
    pub codec: Arc<BlockDctCodec>,
    pub unet: Arc<ReferenceUnet>,
}

impl ReferenceModels {
    pub fn new(seed: u64) -> Self {
        Self::with_config(seed, UnetConfig::default())
    }

    pub fn with_config(seed: u64, unet_config: UnetConfig) -> Self {
        let space = Arc::new(EmbeddingSpace::new(seed));
        let image_encoder = Arc::new(ReferenceImageEncoder::new(space.clone()));
        let text_encoder = Arc::new(ReferenceTextEncoder::new(space.clone(), seed ^ 0x7e47));
        let (projection, mixing) = encoders::reference_projection(&space, seed ^ 0xada9);
        let codec = Arc::new(BlockDctCodec::new());
        // the adapter cross-attention reads the descriptor back out of the
        // projected tokens: basisᵀ · mixingᵀ, rescaled by the typical token std
        let token_std = IMAGE_ANCHOR_SCALE / (EMBED_DIM as f32).sqrt();
        let image_readout = space.basis.t().dot(&mixing.t()) * token_std;
        let text_readout = space.basis.t().to_owned();
        let unet = Arc::new(ReferenceUnet::new(
            unet_config,
            seed ^ 0x0e7,
            image_readout,
            text_readout,
            codec.dc_normalizers(),
        ));
        Self {
            space,
            image_encoder,
            text_encoder,
            projection: Arc::new(projection),
            codec,
            unet,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn space_is_orthonormal() {
        let space = EmbeddingSpace::new(3);
        let gram = space.basis.t().dot(&space.basis);
        for i in 0..DESCRIPTOR_DIM {
            for j in 0..DESCRIPTOR_DIM {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-5);
            }
            assert!(space.basis.column(i).dot(&space.anchor).abs() < 1e-5);
        }
    }

    #[test]
    fn descriptor_of_embed_roundtrips() {
        let space = EmbeddingSpace::new(9);
        let d = Array1::from_shape_fn(DESCRIPTOR_DIM, |i| i as f32 * 0.1 - 0.7);
        let e = space.embed(3.0, d.view());
        let back = space.descriptor_of(e.view());
        for (a, b) in d.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(space.project_out(&e).dot(&space.project_out(&e)) < 1e-8);
    }

    #[test]
    fn descriptor_sees_cell_colours() {
        let mut img = RgbImage::from_pixel(8, 8, Rgb([128, 128, 128]));
        for y in 0..4 {
            for x in 0..4 {
                img.put_pixel(x, y, Rgb([255, 128, 0]));
            }
        }
        let d = image_descriptor(&img);
        // top-left cell is warm (red minus blue positive), others neutral
        assert!(d[cell_mean_index(0, 0, 1)] > 1.5);
        assert!(d[cell_mean_index(1, 1, 1)].abs() < 1e-6);
    }
}
