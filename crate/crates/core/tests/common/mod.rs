//! Helpers shared by integration test targets.

// the oracle mirrors the textbook loop nest on purpose
#![allow(clippy::needless_range_loop)]

use exedit_core::metrics::Lpips;
use image::{Rgb, RgbImage};
use rand::Rng;

/// Direct nested-loop evaluation of the filter-bank network and distance.
pub fn naive_lpips(net: &Lpips, a: &RgbImage, b: &RgbImage) -> f64 {
    fn forward(net: &Lpips, img: &RgbImage) -> Vec<Vec<Vec<Vec<f64>>>> {
        let x = Lpips::input(img);
        let (c0, h0, w0) = x.dim();
        let mut cur: Vec<Vec<Vec<f64>>> = (0..c0)
            .map(|c| (0..h0).map(|y| (0..w0).map(|xx| x[[c, y, xx]] as f64).collect()).collect())
            .collect();
        let mut feats = Vec::new();
        for (li, layer) in net.layers.iter().enumerate() {
            let h = cur[0].len();
            let w = cur[0][0].len();
            let mut out = vec![vec![vec![0.0; w]; h]; layer.out_channels];
            for o in 0..layer.out_channels {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for i in 0..layer.in_channels {
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                        acc += layer.weight(o, i, dy, dx) as f64 * cur[i][sy as usize][sx as usize];
                                    }
                                }
                            }
                        }
                        out[o][y][xx] = acc.max(0.0);
                    }
                }
            }
            if li + 1 < net.layers.len() {
                cur = out
                    .iter()
                    .map(|p| {
                        (0..h / 2)
                            .map(|y| {
                                (0..w / 2)
                                    .map(|xx| {
                                        (p[2 * y][2 * xx] + p[2 * y + 1][2 * xx] + p[2 * y][2 * xx + 1] + p[2 * y + 1][2 * xx + 1]) / 4.0
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect();
            }
            feats.push(out);
        }
        feats
    }
    let (fa, fb) = (forward(net, a), forward(net, b));
    let mut total = 0.0;
    for (la, lb) in fa.iter().zip(&fb) {
        let (c, h, w) = (la.len(), la[0].len(), la[0][0].len());
        let mut sum = 0.0;
        for y in 0..h {
            for x in 0..w {
                let na: f64 = (0..c).map(|k| la[k][y][x].powi(2)).sum::<f64>().sqrt() + 1e-10;
                let nb: f64 = (0..c).map(|k| lb[k][y][x].powi(2)).sum::<f64>().sqrt() + 1e-10;
                sum += (0..c).map(|k| (la[k][y][x] / na - lb[k][y][x] / nb).powi(2)).sum::<f64>();
            }
        }
        total += 0.5 * sum / (h * w) as f64;
    }
    total / fa.len() as f64
}

pub fn random_image(rng: &mut impl Rng) -> RgbImage {
    let base = [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()];
    let freq = rng.random_range(2..9);
    RgbImage::from_fn(160, 160, |x, y| {
        let wave = (((x / freq) + (y / (freq + 1))) % 2) as u8 * 60;
        let noise = rng.random_range(0..40u8);
        Rgb(base.map(|b| b.wrapping_add(wave).saturating_add(noise)))
    })
}

