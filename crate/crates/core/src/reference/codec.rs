use image::{Rgb, RgbImage};
use ndarray::Array3;

use crate::backbone::{Autoencoder, Latent, LatentShape};
use crate::error::{Error, Result};
use crate::image_ops::{from_unit, opponent_planes, opponent_to_rgb, IMAGE_SIZE};

pub const DCT_BLOCK: usize = 8;
const COEFFS: usize = DCT_BLOCK * DCT_BLOCK;

/// Orthonormal 8x8 block DCT over opponent colour planes. Coefficients are
/// divided by a fixed per-frequency scale so the latent is roughly unit
/// variance on natural images; DC scales are chosen so one descriptor unit of
/// a cell-mean shift equals one latent unit.
pub struct BlockDctCodec {
    basis: [[f32; DCT_BLOCK]; DCT_BLOCK],
    scales: [[f32; COEFFS]; 3],
}

impl Default for BlockDctCodec {
    fn default() -> Self {
        Self::new()
    }
}

impl BlockDctCodec {
    pub fn new() -> Self {
        let mut basis = [[0f32; DCT_BLOCK]; DCT_BLOCK];
        for (k, row) in basis.iter_mut().enumerate() {
            let alpha = if k == 0 {
                (1.0 / DCT_BLOCK as f64).sqrt()
            } else {
                (2.0 / DCT_BLOCK as f64).sqrt()
            };
            for (n, v) in row.iter_mut().enumerate() {
                *v = (alpha
                    * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2 * DCT_BLOCK) as f64)
                        .cos()) as f32;
            }
        }
        let mut scales = [[0f32; COEFFS]; 3];
        let ac_base = [1.0f32, 0.5, 0.5];
        for c in 0..3 {
            for u in 0..DCT_BLOCK {
                for v in 0..DCT_BLOCK {
                    scales[c][u * DCT_BLOCK + v] = if u + v == 0 {
                        DCT_BLOCK as f32 / super::MEAN_SCALE[c]
                    } else {
                        ac_base[c] / (u + v) as f32
                    };
                }
            }
        }
        Self { basis, scales }
    }

    /// Latent channel holding frequency `(u, v)` of opponent channel `c`.
    pub fn channel(c: usize, u: usize, v: usize) -> usize {
        c * COEFFS + u * DCT_BLOCK + v
    }

    /// Latent scale of the DC coefficient for each opponent channel.
    pub fn dc_normalizers(&self) -> [f32; 3] {
        [self.scales[0][0], self.scales[1][0], self.scales[2][0]]
    }
}

impl Autoencoder for BlockDctCodec {
    fn id(&self) -> &str {
        "block-dct-codec/v1"
    }

    fn latent_shape(&self) -> LatentShape {
        let side = IMAGE_SIZE as usize / DCT_BLOCK;
        LatentShape {
            channels: 3 * COEFFS,
            height: side,
            width: side,
        }
    }

    fn encode(&self, image: &RgbImage) -> Result<Latent> {
        if image.width() != IMAGE_SIZE || image.height() != IMAGE_SIZE {
            return Err(Error::Contract(format!(
                "codec expects {IMAGE_SIZE}x{IMAGE_SIZE} input, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        let w = IMAGE_SIZE as usize;
        let shape = self.latent_shape();
        let planes = opponent_planes(image);
        let mut latent = Array3::zeros((shape.channels, shape.height, shape.width));
        let d = &self.basis;
        for (c, plane) in planes.iter().enumerate() {
            for by in 0..shape.height {
                for bx in 0..shape.width {
                    // rows: tmp = D · B
                    let mut tmp = [[0f32; DCT_BLOCK]; DCT_BLOCK];
                    for (u, drow) in d.iter().enumerate() {
                        for n in 0..DCT_BLOCK {
                            let row = &plane[(by * DCT_BLOCK + n) * w + bx * DCT_BLOCK..][..DCT_BLOCK];
                            for (m, &px) in row.iter().enumerate() {
                                tmp[u][m] += drow[n] * px;
                            }
                        }
                    }
                    // columns: C = tmp · Dᵀ
                    for u in 0..DCT_BLOCK {
                        for v in 0..DCT_BLOCK {
                            let coeff: f32 = (0..DCT_BLOCK).map(|m| tmp[u][m] * d[v][m]).sum();
                            latent[[Self::channel(c, u, v), by, bx]] =
                                coeff / self.scales[c][u * DCT_BLOCK + v];
                        }
                    }
                }
            }
        }
        Ok(latent)
    }

    fn decode(&self, latent: &Latent) -> Result<RgbImage> {
        let shape = self.latent_shape();
        if latent.dim() != (shape.channels, shape.height, shape.width) {
            return Err(Error::Contract(format!(
                "codec expects latent {:?}, got {:?}",
                (shape.channels, shape.height, shape.width),
                latent.dim()
            )));
        }
        if latent.iter().any(|v| !v.is_finite()) {
            return Err(Error::Computation("non-finite latent passed to decoder".into()));
        }
        let w = IMAGE_SIZE as usize;
        let d = &self.basis;
        let mut planes = [vec![0f32; w * w], vec![0f32; w * w], vec![0f32; w * w]];
        for (c, plane) in planes.iter_mut().enumerate() {
            for by in 0..shape.height {
                for bx in 0..shape.width {
                    let mut coeffs = [[0f32; DCT_BLOCK]; DCT_BLOCK];
                    for u in 0..DCT_BLOCK {
                        for v in 0..DCT_BLOCK {
                            coeffs[u][v] = latent[[Self::channel(c, u, v), by, bx]]
                                * self.scales[c][u * DCT_BLOCK + v];
                        }
                    }
                    // B = Dᵀ · C · D
                    let mut tmp = [[0f32; DCT_BLOCK]; DCT_BLOCK];
                    for n in 0..DCT_BLOCK {
                        for v in 0..DCT_BLOCK {
                            tmp[n][v] = (0..DCT_BLOCK).map(|u| d[u][n] * coeffs[u][v]).sum();
                        }
                    }
                    for n in 0..DCT_BLOCK {
                        let row = &mut plane[(by * DCT_BLOCK + n) * w + bx * DCT_BLOCK..][..DCT_BLOCK];
                        for (m, px) in row.iter_mut().enumerate() {
                            *px = (0..DCT_BLOCK).map(|v| tmp[n][v] * d[v][m]).sum();
                        }
                    }
                }
            }
        }
        let mut img = RgbImage::new(IMAGE_SIZE, IMAGE_SIZE);
        for (i, p) in img.pixels_mut().enumerate() {
            let rgb = opponent_to_rgb([planes[0][i], planes[1][i], planes[2][i]]);
            *p = Rgb([from_unit(rgb[0]), from_unit(rgb[1]), from_unit(rgb[2])]);
        }
        Ok(img)
    }
}
