//! Minimal dense-network building blocks over `ndarray`, used by the
//! reference models. Activations are token-major: `(tokens, channels)`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Fully connected layer. The weight is stored as `(in, out)` so the forward
/// pass is a single `x · W`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Array2<f32>,
    pub bias: Option<Array1<f32>>,
}

impl Linear {
    pub fn new(weight: Array2<f32>, bias: Option<Array1<f32>>) -> Self {
        if let Some(b) = &bias {
            assert_eq!(b.len(), weight.ncols());
        }
        Self { weight, bias }
    }

    /// Gaussian init with the given standard deviation, no bias.
    pub fn random(rng: &mut impl Rng, inputs: usize, outputs: usize, std: f32) -> Self {
        Self::new(random_matrix(rng, inputs, outputs, std), None)
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self::new(Array2::zeros((inputs, outputs)), None)
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let n = row.len() as f32;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            let inv = 1.0 / (var + self.eps).sqrt();
            for ((v, g), b) in row.iter_mut().zip(&self.gamma).zip(&self.beta) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        out
    }
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f32) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f32 = StandardNormal.sample(rng);
        z * std
    })
}

pub fn random_vector(rng: &mut impl Rng, len: usize, std: f32) -> Array1<f32> {
    Array1::from_shape_simple_fn(len, || {
        let z: f32 = StandardNormal.sample(rng);
        z * std
    })
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (0.797_884_6 * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn softmax_rows(scores: &mut Array2<f32>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head scaled dot-product attention. `q` is `(n, c)`, `k` and `v` are
/// `(m, c)`; heads split the channel axis evenly. `key_bias`, when given, is
/// added to every query's logit for the corresponding key.
pub fn attention(
    q: ArrayView2<f32>,
    k: ArrayView2<f32>,
    v: ArrayView2<f32>,
    heads: usize,
    key_bias: Option<&Array1<f32>>,
) -> Array2<f32> {
    let (n, c) = q.dim();
    assert_eq!(k.ncols(), c);
    assert_eq!(v.ncols(), c);
    assert_eq!(k.nrows(), v.nrows());
    assert_eq!(c % heads, 0, "channels must divide evenly into heads");
    let dh = c / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = Array2::zeros((n, c));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores.mapv_inplace(|x| x * scale);
        if let Some(bias) = key_bias {
            scores += bias;
        }
        softmax_rows(&mut scores);
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
    }
    out
}

/// Depthwise 3x3 convolution over a `(h * w, c)` token grid with zero
/// padding. `kernel` is `(9, c)`, taps in row-major order.
pub fn depthwise_conv3x3(x: ArrayView2<f32>, h: usize, w: usize, kernel: &Array2<f32>) -> Array2<f32> {
    let c = x.ncols();
    assert_eq!(x.nrows(), h * w);
    assert_eq!(kernel.dim(), (9, c));
    let mut out = Array2::zeros((h * w, c));
    for i in 0..h {
        for j in 0..w {
            let mut acc = out.row_mut(i * w + j);
            for di in 0..3 {
                let ii = i as isize + di as isize - 1;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in 0..3 {
                    let jj = j as isize + dj as isize - 1;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let src = x.row(ii as usize * w + jj as usize);
                    let tap = kernel.row(di * 3 + dj);
                    acc.zip_mut_with(&(&src * &tap), |a, b| *a += b);
                }
            }
        }
    }
    out
}

/// 2x2 average pooling of a `(h * w, c)` token grid.
pub fn avg_pool2(x: ArrayView2<f32>, h: usize, w: usize) -> Array2<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array2::zeros((oh * ow, x.ncols()));
    for i in 0..oh {
        for j in 0..ow {
            let mut row = out.row_mut(i * ow + j);
            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                row += &x.row((2 * i + di) * w + 2 * j + dj);
            }
            row.mapv_inplace(|v| v * 0.25);
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling of a `(h * w, c)` token grid.
pub fn upsample_nearest2(x: ArrayView2<f32>, h: usize, w: usize) -> Array2<f32> {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = Array2::zeros((oh * ow, x.ncols()));
    for i in 0..oh {
        for j in 0..ow {
            out.row_mut(i * ow + j).assign(&x.row((i / 2) * w + j / 2));
        }
    }
    out
}

/// Sinusoidal timestep embedding (`dim` must be even).
pub fn timestep_embedding(timestep: f32, dim: usize) -> Array1<f32> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f32.ln()) * i as f32 / half as f32).exp();
        let arg = timestep * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}

pub fn all_finite(x: &Array2<f32>) -> bool {
    x.iter().all(|v| v.is_finite())
}

pub fn mean_rows(x: ArrayView2<f32>) -> Array1<f32> {
    x.mean_axis(Axis(0)).expect("non-empty")
}
