//! A small U-Net over 16x16 latent tokens.
//!
//! The network's output is read as the mean of a Gaussian latent prior, and
//! the noise prediction is the exact posterior noise under that prior. Two
//! kinds of channels flow through the token stream: the first
//! [`STEERING`] channels are written only by the cross-attention of the
//! full-resolution decoder layers and carry the requested colour change per
//! grid cell; the remaining channels
//! are produced by randomly initialised residual, attention and feed-forward
//! branches and contribute a small structured residual to the prior mean.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cell_mean_index, BlockDctCodec, CELL_MEAN_DIMS, GRID, MEAN_SCALE};
use crate::backbone::{
    Autoencoder, Conditioning, DecoderHooks, DenoisingBackbone, Latent, LatentShape, PreparedConditioning,
};
use crate::encoders::EMBED_DIM;
use crate::error::{Error, Result};
use crate::nn::{
    avg_pool2, depthwise_conv3x3, gelu, random_matrix, silu, softmax_rows, timestep_embedding,
    upsample_nearest2, LayerNorm, Linear,
};
use crate::schedule::{Ddim, DdimConfig};

/// Channels reserved for the cross-attention steering signal.
pub const STEERING: usize = CELL_MEAN_DIMS;
/// Hookable decoder layers.
pub const DECODER_LAYERS: usize = 12;
/// Decoder layers at the coarse 8x8 resolution; the rest run at 16x16.
const COARSE_DECODER_LAYERS: usize = 4;
const TOKEN_SIDE: usize = 16;
const POOL: usize = 4;
const TIME_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnetConfig {
    /// Token width.
    pub channels: usize,
    pub heads: usize,
    /// Scale from steering units to latent units of the prior mean.
    pub adapter_strength: f32,
    /// Scale of the random residual head added to the prior mean.
    pub residual_scale: f32,
    /// Weight of text steering relative to image steering.
    pub text_gain: f32,
    /// Attention logit bonus per unit of colour content in a text token.
    pub text_salience: f32,
    /// Standard deviation of the latent prior around its mean.
    pub prior_std: f32,
    /// Scale of the cross-attention value projections feeding the random
    /// (non-steering) channels.
    pub cross_value_scale: f32,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            heads: 2,
            adapter_strength: 0.1,
            residual_scale: 0.02,
            text_gain: 0.5,
            text_salience: 4.0,
            prior_std: 1.0,
            cross_value_scale: 0.1,
        }
    }
}

/// Linear layer whose outputs never touch the steering channels.
fn masked_linear(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, std: f32) -> Linear {
    let mut w = random_matrix(rng, inputs, outputs, std);
    w.slice_mut(s![.., ..STEERING.min(outputs)]).fill(0.0);
    Linear::new(w, None)
}

fn lin(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Linear {
    Linear::random(rng, inputs, outputs, 1.0 / (inputs as f32).sqrt())
}

struct CrossAttention {
    norm: LayerNorm,
    q: Linear,
    text_k: Linear,
    text_v: Linear,
    text_out: Linear,
    image_k: Linear,
    image_v: Linear,
    image_out: Linear,
}

struct Block {
    res_norm: LayerNorm,
    res_in: Linear,
    res_time: Linear,
    res_conv: Array2<f32>,
    res_out: Linear,
    attn_norm: LayerNorm,
    attn_q: Linear,
    attn_k: Linear,
    attn_v: Linear,
    attn_out: Linear,
    cross: CrossAttention,
    ff_norm: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl Block {
    fn new(rng: &mut ChaCha8Rng, c: usize, value_scale: f32) -> Self {
        let branch = 0.5 / (c as f32).sqrt();
        let value_std = value_scale / (EMBED_DIM as f32).sqrt();
        Self {
            res_norm: LayerNorm::new(c),
            res_in: lin(rng, c, c),
            res_time: lin(rng, c, c),
            res_conv: random_matrix(rng, 9, c, 1.0 / 3.0),
            res_out: masked_linear(rng, c, c, branch),
            attn_norm: LayerNorm::new(c),
            attn_q: lin(rng, c, c),
            attn_k: lin(rng, c, c),
            attn_v: lin(rng, c, c),
            attn_out: masked_linear(rng, c, c, branch),
            cross: CrossAttention {
                norm: LayerNorm::new(c),
                q: lin(rng, c, c),
                text_k: lin(rng, EMBED_DIM, c),
                text_v: Linear::random(rng, EMBED_DIM, c, value_std),
                text_out: masked_linear(rng, c, c, branch),
                image_k: lin(rng, EMBED_DIM, c),
                image_v: Linear::random(rng, EMBED_DIM, c, value_std),
                image_out: masked_linear(rng, c, c, branch),
            },
            ff_norm: LayerNorm::new(c),
            ff_in: lin(rng, c, 2 * c),
            ff_out: masked_linear(rng, 2 * c, c, branch),
        }
    }
}

/// Per-block cross-attention keys and values for one conditioning.
struct BlockContext {
    text_k: Array2<f32>,
    text_v: Array2<f32>,
    image_k: Array2<f32>,
    image_v: Array2<f32>,
}

struct Prepared {
    blocks: Vec<BlockContext>,
    /// Steering values read from the text tokens, `(77, STEERING)`.
    text_steer: Array2<f32>,
    text_bias: Array1<f32>,
    /// Steering values read from the image tokens, `(4, STEERING)`.
    image_steer: Array2<f32>,
}

pub struct ReferenceUnet {
    config: UnetConfig,
    id: String,
    input: Linear,
    time_in: Linear,
    blocks: Vec<Block>,
    head: Linear,
    image_readout: Array2<f32>,
    text_readout: Array2<f32>,
    shape: LatentShape,
    ddim: Ddim,
    /// Latent DC units per descriptor unit, per opponent channel.
    dc_per_descriptor: [f32; 3],
}

const ENCODER_BLOCKS: usize = 3;

impl ReferenceUnet {
    /// `image_readout` and `text_readout` are `(DESCRIPTOR_DIM, EMBED_DIM)`
    /// maps from a conditioning token to descriptor coordinates; only the
    /// cell-mean rows drive steering. `dc_normalizers` are the codec's DC
    /// scales.
    pub fn new(
        config: UnetConfig,
        seed: u64,
        image_readout: Array2<f32>,
        text_readout: Array2<f32>,
        dc_normalizers: [f32; 3],
    ) -> Self {
        assert!(config.channels > STEERING && config.channels.is_multiple_of(config.heads));
        let c = config.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = BlockDctCodec::new().latent_shape();
        let latent_channels = shape.channels;
        let input = masked_linear(&mut rng, latent_channels, c, 1.0 / (latent_channels as f32).sqrt());
        let time_in = lin(&mut rng, TIME_DIM, c);
        let blocks = (0..ENCODER_BLOCKS + DECODER_LAYERS)
            .map(|_| Block::new(&mut rng, c, config.cross_value_scale))
            .collect();
        let head = lin(&mut rng, c, latent_channels);
        let dc_per_descriptor = std::array::from_fn(|ch| {
            let cell_mean_to_dc = super::DCT_BLOCK as f32 / MEAN_SCALE[ch];
            cell_mean_to_dc / dc_normalizers[ch]
        });
        Self {
            id: format!("reference-unet/v1/seed={seed:#x}"),
            config,
            input,
            time_in,
            blocks,
            head,
            image_readout,
            text_readout,
            shape,
            ddim: Ddim::new(DdimConfig::default()),
            dc_per_descriptor,
        }
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    pub fn image_readout(&self) -> &Array2<f32> {
        &self.image_readout
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        index: usize,
        h: &mut Array2<f32>,
        side: usize,
        temb: &Array1<f32>,
        ctx: &Prepared,
        decoder_layer: Option<usize>,
        hooks: &mut dyn DecoderHooks,
    ) -> Result<()> {
        let b = &self.blocks[index];
        let bc = &ctx.blocks[index];
        let heads = self.config.heads;

        // residual block; its output is the hookable feature
        let mut a = b.res_norm.forward(h.view());
        a.mapv_inplace(silu);
        let mut a = b.res_in.forward(a.view());
        a += &b.res_time.forward(temb.view().insert_axis(Axis(0))).row(0);
        a.mapv_inplace(silu);
        let a = depthwise_conv3x3(a.view(), side, side, &b.res_conv);
        *h += &b.res_out.forward(a.view());
        if let Some(layer) = decoder_layer {
            hooks.feature(layer, h)?;
        }

        // self-attention
        let a = b.attn_norm.forward(h.view());
        let mut q = b.attn_q.forward(a.view());
        let mut k = b.attn_k.forward(a.view());
        let v = b.attn_v.forward(a.view());
        if let Some(layer) = decoder_layer {
            hooks.self_attention(layer, &mut q, &mut k)?;
        }
        let o = crate::nn::attention(q.view(), k.view(), v.view(), heads, None);
        *h += &b.attn_out.forward(o.view());

        // decoupled cross-attention: one query, separate text and image keys
        let a = b.cross.norm.forward(h.view());
        let q = b.cross.q.forward(a.view());
        let text_p = probabilities(q.view(), bc.text_k.view(), Some(&ctx.text_bias));
        let image_p = probabilities(q.view(), bc.image_k.view(), None);
        *h += &b.cross.text_out.forward(text_p.dot(&bc.text_v).view());
        *h += &b.cross.image_out.forward(image_p.dot(&bc.image_v).view());
        if decoder_layer.is_some_and(|l| l >= COARSE_DECODER_LAYERS) {
            let per_layer = 1.0 / (DECODER_LAYERS - COARSE_DECODER_LAYERS) as f32;
            let mut steer = image_p.dot(&ctx.image_steer) * per_layer;
            steer.scaled_add(self.config.text_gain * per_layer, &text_p.dot(&ctx.text_steer));
            h.slice_mut(s![.., ..STEERING]).zip_mut_with(&steer, |x, s| *x += s);
        }

        // feed-forward
        let a = b.ff_norm.forward(h.view());
        let mut a = b.ff_in.forward(a.view());
        a.mapv_inplace(gelu);
        *h += &b.ff_out.forward(a.view());
        Ok(())
    }

    /// Token-major 16x16 grid of 4x4-pooled latent columns.
    fn pool_latent(latent: &Latent) -> Array2<f32> {
        let (ch, hh, ww) = latent.dim();
        let mut out = Array2::zeros((TOKEN_SIDE * TOKEN_SIDE, ch));
        let norm = 1.0 / (POOL * POOL) as f32;
        for c in 0..ch {
            let plane = latent.index_axis(Axis(0), c);
            for i in 0..hh {
                for j in 0..ww {
                    out[[(i / POOL) * TOKEN_SIDE + j / POOL, c]] += plane[[i, j]] * norm;
                }
            }
        }
        out
    }

    /// Prior mean in latent space from the final token grid.
    fn prior_mean(&self, h: &Array2<f32>, shape: LatentShape) -> Latent {
        let residual = self.head.forward(h.view());
        let mut mean = Array3::zeros(shape.dims());
        for c in 0..shape.channels {
            let col = residual.column(c);
            upsample_bilinear_into(
                |i, j| col[i * TOKEN_SIDE + j] * self.config.residual_scale,
                mean.index_axis_mut(Axis(0), c),
            );
        }
        // steering: per-cell colour shift, bilinear across cell centres
        let cell_pos = |i: usize| ((i as f32 - 3.5) / 8.0).clamp(0.0, 1.0);
        for ch in 0..3 {
            let dc = BlockDctCodec::channel(ch, 0, 0);
            let scale = self.config.adapter_strength * self.dc_per_descriptor[ch];
            let steer_at = |i: usize, j: usize| {
                let row = h.row(i * TOKEN_SIDE + j);
                let (u, v) = (cell_pos(i), cell_pos(j));
                let mut acc = 0.0;
                for (r, wr) in [(0, 1.0 - u), (1, u)] {
                    for (cc, wc) in [(0, 1.0 - v), (1, v)] {
                        acc += wr * wc * row[cell_mean_index(r, cc, ch)];
                    }
                }
                acc * scale
            };
            let mut plane = mean.index_axis_mut(Axis(0), dc);
            let mut add = Array2::<f32>::zeros(plane.dim());
            upsample_bilinear_into(steer_at, add.view_mut());
            plane += &add;
        }
        debug_assert_eq!(GRID, 2);
        mean
    }
}

/// Single-head softmax attention weights over all channels.
fn probabilities(q: ArrayView2<f32>, k: ArrayView2<f32>, bias: Option<&Array1<f32>>) -> Array2<f32> {
    let scale = 1.0 / (q.ncols() as f32).sqrt();
    let mut scores = q.dot(&k.t()) * scale;
    if let Some(b) = bias {
        scores += b;
    }
    softmax_rows(&mut scores);
    scores
}

/// Bilinear (half-pixel centred) upsampling from the 16x16 token grid to the
/// output plane.
fn upsample_bilinear_into(src: impl Fn(usize, usize) -> f32, mut out: ndarray::ArrayViewMut2<f32>) {
    let (oh, ow) = out.dim();
    let coord = |o: usize, n: usize| {
        let x = ((o as f32 + 0.5) * TOKEN_SIDE as f32 / n as f32 - 0.5).clamp(0.0, (TOKEN_SIDE - 1) as f32);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(TOKEN_SIDE - 1);
        (i0, i1, x - i0 as f32)
    };
    let mut grid = [[0f32; TOKEN_SIDE]; TOKEN_SIDE];
    for (i, row) in grid.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = src(i, j);
        }
    }
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, oh);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, ow);
            let top = grid[y0][x0] * (1.0 - fx) + grid[y0][x1] * fx;
            let bottom = grid[y1][x0] * (1.0 - fx) + grid[y1][x1] * fx;
            out[[y, x]] = top * (1.0 - fy) + bottom * fy;
        }
    }
}

impl DenoisingBackbone for ReferenceUnet {
    fn id(&self) -> &str {
        &self.id
    }

    fn latent_shape(&self) -> LatentShape {
        self.shape
    }

    fn decoder_layers(&self) -> usize {
        DECODER_LAYERS
    }

    fn schedule_config(&self) -> DdimConfig {
        self.ddim.config()
    }

    fn prepare(&self, conditioning: &Conditioning) -> Result<PreparedConditioning> {
        let text = &conditioning.text;
        let image = &conditioning.image;
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockContext {
                text_k: b.cross.text_k.forward(text.view()),
                text_v: b.cross.text_v.forward(text.view()),
                image_k: b.cross.image_k.forward(image.view()),
                image_v: b.cross.image_v.forward(image.view()),
            })
            .collect();
        let text_descriptor = text.dot(&self.text_readout.t());
        let text_steer = text_descriptor.slice(s![.., ..STEERING]).to_owned();
        let text_bias = text_descriptor
            .rows()
            .into_iter()
            .map(|r| {
                let lex = r.slice(s![..STEERING]);
                self.config.text_salience * lex.dot(&lex).sqrt()
            })
            .collect();
        let image_steer = image.dot(&self.image_readout.slice(s![..STEERING, ..]).t());
        let prepared = Prepared {
            blocks,
            text_steer,
            text_bias,
            image_steer,
        };
        if prepared.image_steer.iter().chain(prepared.text_steer.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Computation("non-finite conditioning".into()));
        }
        Ok(PreparedConditioning::new(conditioning.len(), prepared))
    }

    fn predict_noise(
        &self,
        latent: &Latent,
        timestep: usize,
        conditioning: &PreparedConditioning,
        hooks: &mut dyn DecoderHooks,
    ) -> Result<Latent> {
        let shape = self.latent_shape();
        shape.check(latent, "reference unet input")?;
        if timestep >= self.ddim.config().train_steps {
            return Err(Error::Contract(format!("timestep {timestep} out of range")));
        }
        let ctx: &Prepared = conditioning.downcast()?;

        let mut temb = self
            .time_in
            .forward(timestep_embedding(timestep as f32, TIME_DIM).view().insert_axis(Axis(0)))
            .row(0)
            .to_owned();
        temb.mapv_inplace(silu);

        let side = TOKEN_SIDE;
        let mut h = self.input.forward(Self::pool_latent(latent).view());
        self.block(0, &mut h, side, &temb, ctx, None, hooks)?;
        let skip_hi = h.clone();
        let mut h = avg_pool2(h.view(), side, side);
        let half = side / 2;
        self.block(1, &mut h, half, &temb, ctx, None, hooks)?;
        let skip_lo = h.clone();
        self.block(2, &mut h, half, &temb, ctx, None, hooks)?;
        h += &skip_lo;
        for layer in 0..COARSE_DECODER_LAYERS {
            self.block(ENCODER_BLOCKS + layer, &mut h, half, &temb, ctx, Some(layer), hooks)?;
        }
        let mut h = upsample_nearest2(h.view(), half, half);
        h += &skip_hi;
        for layer in COARSE_DECODER_LAYERS..DECODER_LAYERS {
            self.block(ENCODER_BLOCKS + layer, &mut h, side, &temb, ctx, Some(layer), hooks)?;
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::Computation(format!(
                "non-finite activations at timestep {timestep}"
            )));
        }

        // exact posterior noise of z_t = sqrt(abar) x0 + sqrt(1 - abar) eps
        // with x0 ~ N(mean, prior_std^2)
        let mean = self.prior_mean(&h, shape);
        let abar = self.ddim.alpha_bar(Some(timestep)) as f32;
        let var = self.config.prior_std * self.config.prior_std;
        let (sa, sb) = (abar.sqrt(), (1.0 - abar).sqrt());
        let denom = abar * var + 1.0 - abar;
        let mut eps = latent.clone();
        ndarray::Zip::from(&mut eps)
            .and(&mean)
            .for_each(|z, &m| *z = sb * (*z - sa * m) / denom);
        Ok(eps)
    }
}
