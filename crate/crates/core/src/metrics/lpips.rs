use image::imageops::{self, FilterType};
use image::RgbImage;
use ndarray::{s, Array3};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::image_ops::to_unit;

/// Side length images are resampled to before feature extraction.
pub const LPIPS_INPUT: u32 = 128;

/// Output channels of each convolution stage.
pub const LPIPS_CHANNELS: [usize; 3] = [16, 32, 32];

const NORM_EPS: f32 = 1e-10;

/// One 3x3 convolution with zero padding, no bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    /// `(out, in, 3, 3)` row-major.
    pub weights: Vec<f32>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvLayer {
    pub fn weight(&self, o: usize, i: usize, dy: usize, dx: usize) -> f32 {
        self.weights[((o * self.in_channels + i) * 3 + dy) * 3 + dx]
    }

    fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_channels);
        let mut padded = Array3::<f32>::zeros((c, h + 2, w + 2));
        padded.slice_mut(s![.., 1..h + 1, 1..w + 1]).assign(x);
        let mut out = Array3::<f32>::zeros((self.out_channels, h, w));
        for o in 0..self.out_channels {
            let mut plane = out.slice_mut(s![o, .., ..]);
            for i in 0..c {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let k = self.weight(o, i, dy, dx);
                        let src = padded.slice(s![i, dy..dy + h, dx..dx + w]);
                        plane.scaled_add(k, &src);
                    }
                }
            }
        }
        out
    }
}

/// Perceptual distance over a fixed, seeded convolutional filter bank, in
/// the LPIPS formulation: per-pixel channel-normalized activations, squared
/// differences, spatial mean, averaged over stages. Each stage term is
/// halved so the distance lies in [0, 1] (activations are non-negative, so
/// normalized vectors are at most sqrt(2) apart).
#[derive(Debug, Clone)]
pub struct Lpips {
    pub layers: Vec<ConvLayer>,
    seed: u64,
}

impl Lpips {
    pub const DEFAULT_SEED: u64 = 0x0191_95e7;

    pub fn new(seed: u64) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut in_ch = 3;
        for (stage, &out_ch) in LPIPS_CHANNELS.iter().enumerate() {
            let mut weights = Vec::with_capacity(out_ch * in_ch * 9);
            for o in 0..out_ch {
                let mut f: Vec<f32> = (0..in_ch * 9).map(|_| StandardNormal.sample(&mut rng)).collect();
                // most first-stage filters are spatially zero-mean edge detectors;
                // the rest respond to colour
                if stage == 0 && o % 4 != 3 {
                    for ch in f.chunks_mut(9) {
                        let mean = ch.iter().sum::<f32>() / 9.0;
                        ch.iter_mut().for_each(|v| *v -= mean);
                    }
                }
                let norm = f.iter().map(|v| v * v).sum::<f32>().sqrt();
                weights.extend(f.iter().map(|v| v / norm));
            }
            layers.push(ConvLayer {
                weights,
                in_channels: in_ch,
                out_channels: out_ch,
            });
            in_ch = out_ch;
        }
        Self { layers, seed }
    }

    pub fn id(&self) -> String {
        format!("filterbank-lpips/v1/{:x}", self.seed)
    }

    /// Network input: resampled to [`LPIPS_INPUT`] and mapped to [-1, 1].
    pub fn input(img: &RgbImage) -> Array3<f32> {
        let n = LPIPS_INPUT;
        let small = if img.dimensions() == (n, n) {
            img.clone()
        } else {
            imageops::resize(img, n, n, FilterType::Triangle)
        };
        let mut x = Array3::<f32>::zeros((3, n as usize, n as usize));
        for (px, py, p) in small.enumerate_pixels() {
            for c in 0..3 {
                x[[c, py as usize, px as usize]] = to_unit(p[c]);
            }
        }
        x
    }

    /// Post-ReLU activations of every stage.
    pub fn features(&self, img: &RgbImage) -> Vec<Array3<f32>> {
        let mut x = Self::input(img);
        let mut feats = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut f = layer.forward(&x);
            f.mapv_inplace(|v| v.max(0.0));
            if i + 1 < self.layers.len() {
                x = avg_pool2(&f);
            }
            feats.push(f);
        }
        feats
    }

    pub fn distance_from_features(fa: &[Array3<f32>], fb: &[Array3<f32>]) -> f64 {
        let mut total = 0.0;
        for (a, b) in fa.iter().zip(fb) {
            let (c, h, w) = a.dim();
            let mut stage = 0.0f64;
            for y in 0..h {
                for x in 0..w {
                    let na = (0..c).map(|k| a[[k, y, x]].powi(2)).sum::<f32>().sqrt() + NORM_EPS;
                    let nb = (0..c).map(|k| b[[k, y, x]].powi(2)).sum::<f32>().sqrt() + NORM_EPS;
                    let d: f32 = (0..c).map(|k| (a[[k, y, x]] / na - b[[k, y, x]] / nb).powi(2)).sum();
                    stage += d as f64;
                }
            }
            total += 0.5 * stage / (h * w) as f64;
        }
        total / fa.len() as f64
    }

    /// Distance between two same-sized images.
    pub fn distance(&self, a: &RgbImage, b: &RgbImage) -> f64 {
        Self::distance_from_features(&self.features(a), &self.features(b))
    }
}

impl Default for Lpips {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

fn avg_pool2(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(k, i, j)| {
        0.25 * (x[[k, 2 * i, 2 * j]] + x[[k, 2 * i + 1, 2 * j]] + x[[k, 2 * i, 2 * j + 1]] + x[[k, 2 * i + 1, 2 * j + 1]])
    })
}
