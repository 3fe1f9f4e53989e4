//! Evaluation metrics (LPIPS, SSIM, CLIP score, directional similarity and
//! visual-edit similarity) and dataset-level reports.

mod lpips;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use ndarray::Array1;
use serde::{Deserialize, Serialize};

pub use lpips::{ConvLayer, Lpips, LPIPS_CHANNELS, LPIPS_INPUT};

use crate::dataset::{resolve, Manifest};
use crate::encoders::{ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::image_ops::{load_image, resize_exact};
use crate::reference::ReferenceModels;

/// Cosine similarity; 0 when either vector is all zeros.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different lengths");
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

fn to_f64(v: &Array1<f32>) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn difference(a: &Array1<f32>, b: &Array1<f32>) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| x as f64 - y as f64).collect()
}

/// `100 * max(0, cos(image, text))`.
pub fn clip_score_of(image: &Array1<f32>, text: &Array1<f32>) -> f64 {
    100.0 * cosine(&to_f64(image), &to_f64(text)).max(0.0)
}

/// `cos(E(y_hat) - E(y), text)`.
pub fn directional_similarity_of(y: &Array1<f32>, y_hat: &Array1<f32>, text: &Array1<f32>) -> f64 {
    cosine(&difference(y_hat, y), &to_f64(text))
}

/// `cos(E(x_edit) - E(x), E(y_hat) - E(y))`.
pub fn s_visual_of(x: &Array1<f32>, x_edit: &Array1<f32>, y: &Array1<f32>, y_hat: &Array1<f32>) -> f64 {
    cosine(&difference(x_edit, x), &difference(y_hat, y))
}

const SSIM_SIGMA: f64 = 1.5;
const SSIM_RADIUS: usize = 5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 255.0;

fn gaussian_taps() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - SSIM_RADIUS as f64;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| v / sum)
}

/// Separable Gaussian filter over the valid region only.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = taps.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|k| taps[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let taps = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mu_a, ow, oh) = filter_valid(a, w, h, &taps);
    let (mu_b, ..) = filter_valid(b, w, h, &taps);
    let (aa, ..) = filter_valid(&prod(a, a), w, h, &taps);
    let (bb, ..) = filter_valid(&prod(b, b), w, h, &taps);
    let (ab, ..) = filter_valid(&prod(a, b), w, h, &taps);
    let c1 = (SSIM_K1 * SSIM_L).powi(2);
    let c2 = (SSIM_K2 * SSIM_L).powi(2);
    let mut total = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / (ow * oh) as f64
}

fn match_size(a: &RgbImage, b: &RgbImage, metric: &str) -> RgbImage {
    if a.dimensions() != b.dimensions() {
        tracing::warn!(
            "{metric}: resizing {}x{} image to {}x{}",
            b.width(),
            b.height(),
            a.width(),
            a.height()
        );
        resize_exact(b, a.width(), a.height())
    } else {
        b.clone()
    }
}

/// Mean SSIM over RGB channels: 11-tap Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, L = 255, population statistics, averaged over the
/// region where the window fits. `b` is resized to `a` when sizes differ.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> f64 {
    let b = match_size(a, b, "ssim");
    let (w, h) = (a.width() as usize, a.height() as usize);
    assert!(w > 2 * SSIM_RADIUS && h > 2 * SSIM_RADIUS, "ssim needs images of at least 11x11");
    let plane = |img: &RgbImage, c: usize| img.pixels().map(|p| p[c] as f64).collect::<Vec<_>>();
    (0..3).map(|c| ssim_plane(&plane(a, c), &plane(&b, c), w, h)).sum::<f64>() / 3.0
}

/// Encoders and the perceptual network used for scoring.
#[derive(Clone)]
pub struct Metrics {
    pub image_encoder: Arc<dyn ImageEncoder>,
    pub text_encoder: Arc<dyn TextEncoder>,
    pub lpips: Arc<Lpips>,
}

impl Metrics {
    pub fn new(image_encoder: Arc<dyn ImageEncoder>, text_encoder: Arc<dyn TextEncoder>, lpips: Lpips) -> Self {
        Self {
            image_encoder,
            text_encoder,
            lpips: Arc::new(lpips),
        }
    }

    /// Same encoders as the reference pipeline.
    pub fn reference(models: &ReferenceModels) -> Self {
        Self::new(models.image_encoder.clone(), models.text_encoder.clone(), Lpips::default())
    }

    pub fn lpips(&self, a: &RgbImage, b: &RgbImage) -> f64 {
        let b = match_size(a, b, "lpips");
        self.lpips.distance(a, &b)
    }

    pub fn ssim(&self, a: &RgbImage, b: &RgbImage) -> f64 {
        ssim(a, b)
    }

    pub fn clip_score(&self, image: &RgbImage, caption: &str) -> Result<f64> {
        Ok(clip_score_of(
            &self.image_encoder.embed(image)?,
            &self.text_encoder.encode(caption)?.pooled,
        ))
    }

    pub fn directional_similarity(&self, y: &RgbImage, y_hat: &RgbImage, caption: &str) -> Result<f64> {
        Ok(directional_similarity_of(
            &self.image_encoder.embed(y)?,
            &self.image_encoder.embed(y_hat)?,
            &self.text_encoder.encode(caption)?.pooled,
        ))
    }

    pub fn s_visual(&self, x: &RgbImage, x_edit: &RgbImage, y: &RgbImage, y_hat: &RgbImage) -> Result<f64> {
        let e = |img: &RgbImage| self.image_encoder.embed(img);
        Ok(s_visual_of(&e(x)?, &e(x_edit)?, &e(y)?, &e(y_hat)?))
    }

    /// Scores one output. LPIPS and SSIM need the ground truth; CLIP score
    /// and directional similarity need the caption.
    #[allow(clippy::too_many_arguments)]
    pub fn score(
        &self,
        id: &str,
        x: &RgbImage,
        x_edit: &RgbImage,
        y: &RgbImage,
        y_hat: &RgbImage,
        y_edit: Option<&RgbImage>,
        caption: Option<&str>,
    ) -> Result<MetricRow> {
        Ok(MetricRow {
            id: id.to_owned(),
            lpips: y_edit.map(|gt| self.lpips(y_hat, gt)),
            ssim: y_edit.map(|gt| ssim(y_hat, gt)),
            clip_score: caption.map(|c| self.clip_score(y_hat, c)).transpose()?,
            dir_sim: caption.map(|c| self.directional_similarity(y, y_hat, c)).transpose()?,
            s_visual: Some(self.s_visual(x, x_edit, y, y_hat)?),
            error: None,
        })
    }

    pub fn metadata(&self, manifest_sha256: Option<String>, options: serde_json::Value) -> ReportMetadata {
        ReportMetadata {
            image_encoder_id: self.image_encoder.id().to_owned(),
            text_encoder_id: self.text_encoder.id().to_owned(),
            lpips_id: self.lpips.id(),
            manifest_sha256,
            options,
        }
    }

    /// Scores every accepted manifest entry against its output in
    /// `results_dir`. Outputs are looked up as `{id}/result.png` with
    /// `{id}/caption.txt` (a result bundle) or as `{id}.png` with `{id}.txt`.
    /// Entries whose output or inputs cannot be read become failed rows.
    pub fn evaluate(&self, manifest: &Manifest, manifest_dir: &Path, results_dir: &Path) -> MetricReport {
        let mut rows = Vec::new();
        for entry in manifest.accepted() {
            let row = (|| -> Result<MetricRow> {
                let (out_path, caption_path) = locate_result(results_dir, &entry.id)?;
                let y_hat = load_image(&out_path)?;
                let caption = match caption_path {
                    Some(p) => Some(std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?),
                    None => None,
                };
                let load = |p: &Path| load_image(resolve(manifest_dir, p));
                let (x, xe, y) = (load(&entry.x)?, load(&entry.x_edit)?, load(&entry.y)?);
                let y_edit = load(&entry.y_edit).ok();
                let y = match_size(&y_hat, &y, "evaluate");
                self.score(&entry.id, &x, &xe, &y, &y_hat, y_edit.as_ref(), caption.as_deref().map(str::trim))
            })();
            rows.push(row.unwrap_or_else(|e| MetricRow::failed(&entry.id, &e)));
        }
        MetricReport::new(rows, self.metadata(Some(manifest.digest()), serde_json::Value::Null))
    }
}

fn locate_result(results_dir: &Path, id: &str) -> Result<(PathBuf, Option<PathBuf>)> {
    let bundle = results_dir.join(id);
    let candidates = [
        (bundle.join("result.png"), bundle.join("caption.txt")),
        (results_dir.join(format!("{id}.png")), results_dir.join(format!("{id}.txt"))),
    ];
    for (img, cap) in candidates {
        if img.exists() {
            return Ok((img, cap.exists().then_some(cap)));
        }
    }
    Err(Error::Validation(format!("no result for {id} in {}", results_dir.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub lpips: Option<f64>,
    pub ssim: Option<f64>,
    pub clip_score: Option<f64>,
    pub dir_sim: Option<f64>,
    pub s_visual: Option<f64>,
    pub error: Option<String>,
}

impl MetricRow {
    pub fn failed(id: &str, error: &Error) -> Self {
        Self {
            id: id.to_owned(),
            lpips: None,
            ssim: None,
            clip_score: None,
            dir_sim: None,
            s_visual: None,
            error: Some(error.to_string()),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub lpips: Option<f64>,
    pub ssim: Option<f64>,
    pub clip_score: Option<f64>,
    pub dir_sim: Option<f64>,
    pub s_visual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub image_encoder_id: String,
    pub text_encoder_id: String,
    pub lpips_id: String,
    pub manifest_sha256: Option<String>,
    pub options: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub means: MetricMeans,
    pub failures: usize,
    pub metadata: ReportMetadata,
}

/// Mean of the present values. Values are summed in sorted order so the
/// result does not depend on row order.
fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    pub fn new(rows: Vec<MetricRow>, metadata: ReportMetadata) -> Self {
        let ok = || rows.iter().filter(|r| !r.is_failed());
        let means = MetricMeans {
            lpips: mean_of(ok().map(|r| r.lpips)),
            ssim: mean_of(ok().map(|r| r.ssim)),
            clip_score: mean_of(ok().map(|r| r.clip_score)),
            dir_sim: mean_of(ok().map(|r| r.dir_sim)),
            s_visual: mean_of(ok().map(|r| r.s_visual)),
        };
        let failures = rows.iter().filter(|r| r.is_failed()).count();
        Self {
            rows,
            means,
            failures,
            metadata,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "lpips", "ssim", "clip_score", "dir_sim", "s_visual", "error"])?;
        let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.id.clone(),
                cell(r.lpips),
                cell(r.ssim),
                cell(r.clip_score),
                cell(r.dir_sim),
                cell(r.s_visual),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// One-line-per-method table of the five means.
    pub fn summary_table(&self, method: &str) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let m = &self.means;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>9} {:>9} {:>10} {:>9} {:>9}",
            "Method", "LPIPS ↓", "SSIM ↑", "CLIP ↑", "Dir-Sim ↑", "S-Vis ↑"
        );
        let _ = writeln!(
            out,
            "{:<16} {:>9} {:>9} {:>10} {:>9} {:>9}",
            method,
            cell(m.lpips),
            cell(m.ssim),
            cell(m.clip_score),
            cell(m.dir_sim),
            cell(m.s_visual)
        );
        let _ = writeln!(out, "samples: {}  failures: {}", self.rows.len(), self.failures);
        out
    }
}
