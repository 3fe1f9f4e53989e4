//! Image-space edit conditioning: adapter projection of image embeddings to
//! four tokens, and the lambda-weighted edit direction
//! `lambda * (H(x_edit) - H(x)) + (1 - lambda) * H(y)`.

use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use ndarray::{Array2, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::backbone::Conditioning;
use crate::encoders::{ImageEncoder, TextEncoder, EMBED_DIM};
use crate::error::{Error, Result};
use crate::image_ops::{ensure_size, IMAGE_SIZE};
use crate::nn::{LayerNorm, Linear};
use crate::tensor_file::{read_tensor_file, write_tensor_file};

/// Number of image tokens produced by the adapter projection.
pub const IMAGE_TOKENS: usize = 4;

/// Lambda values outside this range are accepted but logged.
pub const LAMBDA_ADVISORY_RANGE: (f64, f64) = (0.0, 1.5);

/// Adapter image tokens, `(4, 768)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTokens {
    pub tokens: Array2<f32>,
    pub source_id: String,
}

#[derive(Serialize, Deserialize)]
struct TokenMeta {
    source_id: String,
}

impl ImageTokens {
    pub fn new(tokens: Array2<f32>, source_id: impl Into<String>) -> Result<Self> {
        let source_id = source_id.into();
        if tokens.dim() != (IMAGE_TOKENS, EMBED_DIM) {
            return Err(Error::Contract(format!(
                "image tokens for {source_id} must be ({IMAGE_TOKENS}, {EMBED_DIM}), got {:?}",
                tokens.dim()
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::Computation(format!(
                "non-finite image tokens for {source_id}"
            )));
        }
        Ok(Self { tokens, source_id })
    }

    /// All-zero tokens, the unconditional image input of the adapter.
    pub fn zeros() -> Self {
        Self {
            tokens: Array2::zeros((IMAGE_TOKENS, EMBED_DIM)),
            source_id: "null".into(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let data = self.tokens.as_standard_layout();
        write_tensor_file(
            path,
            &[IMAGE_TOKENS, EMBED_DIM],
            &TokenMeta {
                source_id: self.source_id.clone(),
            },
            data.as_slice().expect("standard layout"),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (shape, meta, data): (_, TokenMeta, _) = read_tensor_file(path)?;
        let tokens = Array2::from_shape_vec((shape[0], *shape.get(1).unwrap_or(&0)), data)
            .map_err(|e| Error::Contract(format!("bad token file: {e}")))?;
        Self::new(tokens, meta.source_id)
    }
}

/// `H(e) = LN(Lin(e))`: a linear map from one embedding to
/// `IMAGE_TOKENS * EMBED_DIM` values, reshaped to tokens and layer-normed
/// per token.
#[derive(Debug, Clone)]
pub struct AdapterProjection {
    linear: Linear,
    norm: LayerNorm,
    id: String,
}

impl AdapterProjection {
    pub fn new(linear: Linear, norm: LayerNorm, id: impl Into<String>) -> Result<Self> {
        if linear.inputs() != EMBED_DIM || linear.outputs() != IMAGE_TOKENS * EMBED_DIM {
            return Err(Error::Config(format!(
                "adapter projection must map {EMBED_DIM} -> {}, got {} -> {}",
                IMAGE_TOKENS * EMBED_DIM,
                linear.inputs(),
                linear.outputs()
            )));
        }
        if norm.gamma.len() != EMBED_DIM || norm.beta.len() != EMBED_DIM {
            return Err(Error::Config("adapter layer norm must have width 768".into()));
        }
        Ok(Self {
            linear,
            norm,
            id: id.into(),
        })
    }

    /// Loads adapter image-projection weights from a safetensors file using
    /// the usual key names (`proj.weight`, `proj.bias`, `norm.weight`,
    /// `norm.bias`, optionally prefixed with `image_proj.`). The linear weight
    /// is stored `(out, in)`.
    pub fn from_safetensors(path: impl AsRef<Path>) -> Result<Self> {
        use safetensors::{Dtype, SafeTensors};
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::Config(format!(
                "adapter weights not found: {}",
                path.display()
            )));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let fetch = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
            let view = st
                .tensor(&format!("image_proj.{name}"))
                .or_else(|_| st.tensor(name))
                .map_err(|_| Error::Config(format!("{}: missing tensor {name}", path.display())))?;
            let data = view.data();
            let values = match view.dtype() {
                Dtype::F32 => data
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
                Dtype::F16 => data
                    .chunks_exact(2)
                    .map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f32())
                    .collect(),
                Dtype::BF16 => data
                    .chunks_exact(2)
                    .map(|b| half::bf16::from_le_bytes([b[0], b[1]]).to_f32())
                    .collect(),
                other => {
                    return Err(Error::Config(format!(
                        "{}: unsupported dtype {other:?} for {name}",
                        path.display()
                    )))
                }
            };
            Ok((view.shape().to_vec(), values))
        };
        let (wshape, w) = fetch("proj.weight")?;
        let (_, b) = fetch("proj.bias")?;
        let (_, gamma) = fetch("norm.weight")?;
        let (_, beta) = fetch("norm.bias")?;
        if wshape != [IMAGE_TOKENS * EMBED_DIM, EMBED_DIM] {
            return Err(Error::Config(format!(
                "{}: proj.weight has shape {wshape:?}",
                path.display()
            )));
        }
        let weight = Array2::from_shape_vec((wshape[0], wshape[1]), w)
            .expect("shape checked")
            .reversed_axes()
            .as_standard_layout()
            .to_owned();
        if b.len() != IMAGE_TOKENS * EMBED_DIM {
            return Err(Error::Config(format!("{}: proj.bias has length {}", path.display(), b.len())));
        }
        let mut norm = LayerNorm::new(EMBED_DIM);
        if gamma.len() != EMBED_DIM || beta.len() != EMBED_DIM {
            return Err(Error::Config(format!("{}: norm parameters must have length 768", path.display())));
        }
        norm.gamma = gamma.into();
        norm.beta = beta.into();
        let digest = crate::image_ops::sha256_hex(&bytes);
        Self::new(
            Linear::new(weight, Some(b.into())),
            norm,
            format!("safetensors:{}", &digest[..16]),
        )
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Projects one image embedding to `(IMAGE_TOKENS, EMBED_DIM)` tokens.
    pub fn project(&self, embedding: ArrayView1<f32>) -> Array2<f32> {
        let flat = self.linear.forward(embedding.insert_axis(ndarray::Axis(0)));
        let tokens = flat
            .into_shape_with_order((IMAGE_TOKENS, EMBED_DIM))
            .expect("projection width checked at construction");
        self.norm.forward(tokens.view())
    }
}

/// Frozen image encoder followed by the adapter projection.
#[derive(Clone)]
pub struct ImageProjector {
    pub encoder: Arc<dyn ImageEncoder>,
    pub projection: Arc<AdapterProjection>,
}

impl ImageProjector {
    pub fn new(encoder: Arc<dyn ImageEncoder>, projection: Arc<AdapterProjection>) -> Self {
        Self {
            encoder,
            projection,
        }
    }

    pub fn id(&self) -> String {
        format!("{}+{}", self.encoder.id(), self.projection.id())
    }

    /// `H(image)`. Inputs that are not 512x512 are centre-cropped and resized.
    pub fn project_image(&self, image: &RgbImage, source_id: &str) -> Result<ImageTokens> {
        let image = ensure_size(image, IMAGE_SIZE, source_id);
        let embedding = self.encoder.embed(&image)?;
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Computation(format!(
                "image encoder produced non-finite output for {source_id}"
            )));
        }
        ImageTokens::new(self.projection.project(embedding.view()), source_id)
    }
}

/// `lambda * (xedit - x) + (1 - lambda) * y`, elementwise, with no
/// renormalisation. The endpoints are returned exactly: `y` itself at
/// `lambda = 0` and the raw difference at `lambda = 1`.
pub fn compute_edit_direction(
    x: &ImageTokens,
    xedit: &ImageTokens,
    y: &ImageTokens,
    lambda: f64,
) -> Result<ImageTokens> {
    let shape = y.tokens.dim();
    if x.tokens.dim() != shape || xedit.tokens.dim() != shape || shape != (IMAGE_TOKENS, EMBED_DIM) {
        return Err(Error::Contract(format!(
            "edit direction needs three ({IMAGE_TOKENS}, {EMBED_DIM}) token sets, got {:?}, {:?}, {:?}",
            x.tokens.dim(),
            xedit.tokens.dim(),
            shape
        )));
    }
    if !lambda.is_finite() {
        return Err(Error::Validation(format!("lambda must be finite, got {lambda}")));
    }
    if lambda < LAMBDA_ADVISORY_RANGE.0 || lambda > LAMBDA_ADVISORY_RANGE.1 {
        tracing::warn!("lambda {lambda} is outside the usual range [0, 1.5]");
    }
    let source_id = format!("delta({}, {}, {}; {lambda})", x.source_id, xedit.source_id, y.source_id);
    let tokens = if lambda == 0.0 {
        y.tokens.clone()
    } else if lambda == 1.0 {
        &xedit.tokens - &x.tokens
    } else {
        let l = lambda as f32;
        let mut out = Array2::zeros(shape);
        Zip::from(&mut out)
            .and(&x.tokens)
            .and(&xedit.tokens)
            .and(&y.tokens)
            .for_each(|o, &a, &b, &c| *o = l * (b - a) + (1.0 - l) * c);
        out
    };
    Ok(ImageTokens { tokens, source_id })
}

/// The edit embedding `g = (delta_img, E_text(caption))`.
#[derive(Debug, Clone)]
pub struct EditEmbedding {
    pub image_tokens: ImageTokens,
    /// `(77, 768)` text-encoder states of the caption.
    pub caption_embedding: Array2<f32>,
    pub lambda_used: f64,
    pub caption_text: String,
    pub caption_truncated: bool,
}

impl EditEmbedding {
    /// The 81-token cross-attention conditioning.
    pub fn conditioning(&self) -> Result<Conditioning> {
        Conditioning::new(self.caption_embedding.clone(), self.image_tokens.tokens.clone())
    }
}

/// Projected tokens of an exemplar triplet, computed once and reused across
/// lambda values.
#[derive(Debug, Clone)]
pub struct TripletTokens {
    pub x: ImageTokens,
    pub x_edit: ImageTokens,
    pub y: ImageTokens,
}

impl TripletTokens {
    pub fn project(projector: &ImageProjector, x: &RgbImage, x_edit: &RgbImage, y: &RgbImage) -> Result<Self> {
        Ok(Self {
            x: projector.project_image(x, "x")?,
            x_edit: projector.project_image(x_edit, "x_edit")?,
            y: projector.project_image(y, "y")?,
        })
    }
}

/// Combines the edit direction with the caption's text embedding. An empty
/// caption is allowed and yields the null-text embedding. Captions longer than
/// the text window are truncated with a warning.
pub fn build_edit_embedding(
    tokens: &TripletTokens,
    text_encoder: &dyn TextEncoder,
    caption: &str,
    lambda: f64,
) -> Result<EditEmbedding> {
    let image_tokens = compute_edit_direction(&tokens.x, &tokens.x_edit, &tokens.y, lambda)?;
    let text = text_encoder.encode(caption)?;
    if text.truncated {
        tracing::warn!(
            "caption exceeds the text encoder window; kept the first {} tokens",
            text.content_tokens
        );
    }
    Ok(EditEmbedding {
        image_tokens,
        caption_embedding: text.tokens,
        lambda_used: lambda,
        caption_text: caption.to_owned(),
        caption_truncated: text.truncated,
    })
}
