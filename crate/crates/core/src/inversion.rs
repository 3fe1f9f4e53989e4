//! Deterministic DDIM inversion of an image to terminal noise, the matching
//! reconstruction, and an on-disk cache of inversion results.

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backbone::{Autoencoder, DenoisingBackbone, Latent, NoHooks, PreparedConditioning};
use crate::error::{Error, Result};
use crate::image_ops::{content_hash, ensure_size, sha256_hex, IMAGE_SIZE};
use crate::schedule::Ddim;
use crate::tensor_file::{read_tensor_file, write_tensor_file};

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    pub y_noise: Latent,
    /// Timesteps visited, ascending (clean to noisy).
    pub schedule: Vec<usize>,
    pub source_image_id: String,
    pub num_steps: usize,
    pub backbone_id: String,
}

/// Progress callback: `(completed steps, total steps)`.
pub type StepCallback<'a> = &'a mut dyn FnMut(usize, usize);

fn check_finite(latent: &Latent, what: &str, timestep: usize) -> Result<()> {
    if latent.iter().any(|v| !v.is_finite()) {
        return Err(Error::Computation(format!(
            "non-finite {what} at timestep {timestep}"
        )));
    }
    Ok(())
}

/// Inverts `y` unconditionally over `num_steps` DDIM steps.
/// `null_conditioning` must be the backbone's prepared empty-text, zero-image
/// conditioning.
pub fn invert(
    backbone: &dyn DenoisingBackbone,
    codec: &dyn Autoencoder,
    null_conditioning: &PreparedConditioning,
    y: &RgbImage,
    source_image_id: &str,
    num_steps: usize,
    on_step: StepCallback,
) -> Result<InversionResult> {
    let y = ensure_size(y, IMAGE_SIZE, source_image_id);
    let ddim = Ddim::new(backbone.schedule_config());
    let mut schedule = ddim.timesteps(num_steps)?;
    schedule.reverse();

    let mut z = codec.encode(&y)?;
    backbone.latent_shape().check(&z, "encoded image")?;
    let mut prev = None;
    for (i, &t) in schedule.iter().enumerate() {
        // noise is predicted at the target level from the current latent
        let eps = backbone.predict_noise(&z, t, null_conditioning, &mut NoHooks)?;
        check_finite(&eps, "noise prediction", t)?;
        z = ddim.invert_step(&z, &eps, prev, t);
        check_finite(&z, "latent", t)?;
        prev = Some(t);
        on_step(i + 1, num_steps);
    }
    Ok(InversionResult {
        y_noise: z,
        schedule,
        source_image_id: source_image_id.to_owned(),
        num_steps,
        backbone_id: backbone.id().to_owned(),
    })
}

/// Checks an inversion schedule against the backbone's own spacing and
/// returns the matching descending sampling schedule.
pub fn sampling_schedule(backbone: &dyn DenoisingBackbone, inv: &InversionResult) -> Result<Vec<usize>> {
    let ddim = Ddim::new(backbone.schedule_config());
    if inv.schedule.len() != inv.num_steps {
        return Err(Error::Contract(format!(
            "inversion records {} steps but a schedule of length {}",
            inv.num_steps,
            inv.schedule.len()
        )));
    }
    let expected = ddim.timesteps(inv.num_steps).map_err(|e| Error::Contract(e.to_string()))?;
    let reversed: Vec<usize> = inv.schedule.iter().rev().copied().collect();
    if reversed != expected {
        return Err(Error::Contract(
            "inversion schedule does not match the backbone's noise schedule".into(),
        ));
    }
    if inv.backbone_id != backbone.id() {
        return Err(Error::Contract(format!(
            "inversion was produced by {}, not {}",
            inv.backbone_id,
            backbone.id()
        )));
    }
    Ok(reversed)
}

/// Unconditional DDIM denoising of `inv.y_noise` over the exact reverse of
/// its inversion schedule, decoded to an image.
pub fn reconstruct(
    backbone: &dyn DenoisingBackbone,
    codec: &dyn Autoencoder,
    null_conditioning: &PreparedConditioning,
    inv: &InversionResult,
    on_step: StepCallback,
) -> Result<RgbImage> {
    let schedule = sampling_schedule(backbone, inv)?;
    let ddim = Ddim::new(backbone.schedule_config());
    let mut z = inv.y_noise.clone();
    for (i, &t) in schedule.iter().enumerate() {
        let eps = backbone.predict_noise(&z, t, null_conditioning, &mut NoHooks)?;
        z = ddim.step(&z, &eps, t, schedule.get(i + 1).copied());
        check_finite(&z, "latent", t)?;
        on_step(i + 1, schedule.len());
    }
    codec.decode(&z)
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    schedule: Vec<usize>,
    source_image_id: String,
    num_steps: usize,
    backbone_id: String,
}

/// Inversion results on disk, keyed by image content, step count, and
/// backbone and codec identity. Writes are atomic renames, so concurrent
/// readers never observe partial entries.
#[derive(Debug, Clone)]
pub struct InversionCache {
    dir: PathBuf,
}

impl InversionCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn key(image: &RgbImage, num_steps: usize, backbone_id: &str, codec_id: &str) -> String {
        let prepared = ensure_size(image, IMAGE_SIZE, "inversion cache key");
        let material = format!(
            "{}|{num_steps}|{backbone_id}|{codec_id}",
            content_hash(&prepared)
        );
        sha256_hex(material.as_bytes())[..32].to_owned()
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("inversion-{key}.extf"))
    }

    pub fn get(&self, key: &str) -> Result<Option<InversionResult>> {
        let path = self.path(key);
        if !path.exists() {
            return Ok(None);
        }
        load_inversion(&path).map(Some)
    }

    pub fn put(&self, key: &str, inv: &InversionResult) -> Result<PathBuf> {
        let path = self.path(key);
        save_inversion(&path, inv)?;
        Ok(path)
    }
}

pub fn save_inversion(path: &Path, inv: &InversionResult) -> Result<()> {
    let (c, h, w) = inv.y_noise.dim();
    let data = inv.y_noise.as_standard_layout();
    write_tensor_file(
        path,
        &[c, h, w],
        &CacheMeta {
            schedule: inv.schedule.clone(),
            source_image_id: inv.source_image_id.clone(),
            num_steps: inv.num_steps,
            backbone_id: inv.backbone_id.clone(),
        },
        data.as_slice().expect("standard layout"),
    )
}

pub fn load_inversion(path: &Path) -> Result<InversionResult> {
    let (shape, meta, data): (Vec<usize>, CacheMeta, Vec<f32>) = read_tensor_file(path)?;
    if shape.len() != 3 {
        return Err(Error::Contract(format!(
            "{}: expected a 3-d latent, found shape {shape:?}",
            path.display()
        )));
    }
    let y_noise = Latent::from_shape_vec((shape[0], shape[1], shape[2]), data)
        .map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?;
    Ok(InversionResult {
        y_noise,
        schedule: meta.schedule,
        source_image_id: meta.source_image_id,
        num_steps: meta.num_steps,
        backbone_id: meta.backbone_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Conditioning;
    use crate::edit_embedding::ImageTokens;
    use crate::encoders::TextEncoder;
    use crate::image_ops::mean_abs_diff;
    use crate::reference::{ReferenceModels, DEFAULT_SEED};
    use image::Rgb;

    fn setup() -> (ReferenceModels, PreparedConditioning) {
        let models = ReferenceModels::new(DEFAULT_SEED);
        let text = models.text_encoder.encode("").unwrap().tokens;
        let cond = Conditioning::new(text, ImageTokens::zeros().tokens).unwrap();
        let prepared = models.unet.prepare(&cond).unwrap();
        (models, prepared)
    }

    fn image() -> RgbImage {
        RgbImage::from_fn(512, 512, |x, y| {
            Rgb([(x / 2) as u8, (y / 2) as u8, ((x + y) % 200) as u8 + 30])
        })
    }

    #[test]
    fn single_step_inversion() {
        let (m, null) = setup();
        let inv = invert(m.unet.as_ref(), m.codec.as_ref(), &null, &image(), "y", 1, &mut |_, _| {}).unwrap();
        assert_eq!(inv.schedule, vec![999]);
        assert_eq!(inv.num_steps, 1);
        assert!(inv.y_noise.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn roundtrip_and_determinism() {
        let (m, null) = setup();
        let img = image();
        let mut calls = 0;
        let inv = invert(m.unet.as_ref(), m.codec.as_ref(), &null, &img, "y", 20, &mut |_, _| calls += 1).unwrap();
        assert_eq!(calls, 20);
        assert!(inv.schedule.windows(2).all(|w| w[0] < w[1]));
        let again = invert(m.unet.as_ref(), m.codec.as_ref(), &null, &img, "y", 20, &mut |_, _| {}).unwrap();
        assert_eq!(inv.y_noise, again.y_noise);
        let a = reconstruct(m.unet.as_ref(), m.codec.as_ref(), &null, &inv, &mut |_, _| {}).unwrap();
        let b = reconstruct(m.unet.as_ref(), m.codec.as_ref(), &null, &inv, &mut |_, _| {}).unwrap();
        assert_eq!(a, b);
        assert!(mean_abs_diff(&a, &img) < 0.05, "{}", mean_abs_diff(&a, &img));
    }

    #[test]
    fn tampered_schedule_is_contract_error() {
        let (m, null) = setup();
        let mut inv = invert(m.unet.as_ref(), m.codec.as_ref(), &null, &image(), "y", 5, &mut |_, _| {}).unwrap();
        inv.schedule[2] += 1;
        assert!(matches!(
            reconstruct(m.unet.as_ref(), m.codec.as_ref(), &null, &inv, &mut |_, _| {}),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cache_roundtrip() {
        let (m, null) = setup();
        let img = image();
        let inv = invert(m.unet.as_ref(), m.codec.as_ref(), &null, &img, "y", 3, &mut |_, _| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cache = InversionCache::new(dir.path());
        let key = InversionCache::key(&img, 3, m.unet.id(), m.codec.id());
        assert!(cache.get(&key).unwrap().is_none());
        cache.put(&key, &inv).unwrap();
        assert_eq!(cache.get(&key).unwrap().unwrap(), inv);
        assert_ne!(key, InversionCache::key(&img, 4, m.unet.id(), m.codec.id()));
    }
}
