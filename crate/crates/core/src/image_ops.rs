//! Image loading, preprocessing and small pixel utilities shared by the
//! pipeline, the metrics and the curation tooling.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::RgbImage;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Working resolution of the editing backbone.
pub const IMAGE_SIZE: u32 = 512;

pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?;
    Ok(img.to_rgb8())
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

pub fn save_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Center-crops to a square and resizes with a bicubic filter.
pub fn prepare_image(img: &RgbImage, size: u32) -> RgbImage {
    if img.width() == size && img.height() == size {
        return img.clone();
    }
    let side = img.width().min(img.height());
    let x = (img.width() - side) / 2;
    let y = (img.height() - side) / 2;
    let square = imageops::crop_imm(img, x, y, side, side).to_image();
    if side == size {
        square
    } else {
        imageops::resize(&square, size, size, FilterType::CatmullRom)
    }
}

/// Like [`prepare_image`] but logs when the input was not already at `size`.
pub fn ensure_size(img: &RgbImage, size: u32, what: &str) -> RgbImage {
    if img.width() != size || img.height() != size {
        tracing::warn!(
            "{what}: resizing {}x{} input to {size}x{size}",
            img.width(),
            img.height()
        );
    }
    prepare_image(img, size)
}

/// Plain resize to exact dimensions (no crop).
pub fn resize_exact(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    imageops::resize(img, width, height, FilterType::CatmullRom)
}

/// SHA-256 over dimensions and raw pixels, hex encoded.
pub fn content_hash(img: &RgbImage) -> String {
    let mut hasher = Sha256::new();
    hasher.update(img.width().to_le_bytes());
    hasher.update(img.height().to_le_bytes());
    hasher.update(img.as_raw());
    hex::encode(hasher.finalize())
}

/// SHA-256 of a byte string, hex encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Mean absolute pixel difference in [0, 1] units.
pub fn mean_abs_diff(a: &RgbImage, b: &RgbImage) -> f64 {
    assert_eq!(a.dimensions(), b.dimensions(), "image size mismatch");
    let total: u64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&p, &q)| (p as i32 - q as i32).unsigned_abs() as u64)
        .sum();
    total as f64 / (a.as_raw().len() as f64 * 255.0)
}

/// Maps an 8-bit value to [-1, 1].
#[inline]
pub fn to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

#[inline]
pub fn from_unit(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// RGB in [-1, 1] to an opponent space: luma, red-blue, green-magenta.
#[inline]
pub fn rgb_to_opponent([r, g, b]: [f32; 3]) -> [f32; 3] {
    [(r + g + b) / 3.0, (r - b) / 2.0, (2.0 * g - r - b) / 4.0]
}

#[inline]
pub fn opponent_to_rgb([l, rb, gm]: [f32; 3]) -> [f32; 3] {
    [
        l + rb - 2.0 / 3.0 * gm,
        l + 4.0 / 3.0 * gm,
        l - rb - 2.0 / 3.0 * gm,
    ]
}

/// Splits an image into three opponent-colour planes, each `height * width`
/// in row-major order.
pub fn opponent_planes(img: &RgbImage) -> [Vec<f32>; 3] {
    let n = (img.width() * img.height()) as usize;
    let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (i, p) in img.pixels().enumerate() {
        let o = rgb_to_opponent([to_unit(p[0]), to_unit(p[1]), to_unit(p[2])]);
        for c in 0..3 {
            planes[c][i] = o[c];
        }
    }
    planes
}

/// Horizontal concatenation; both images must share a height.
pub fn hconcat(left: &RgbImage, right: &RgbImage) -> RgbImage {
    assert_eq!(left.height(), right.height());
    let mut out = RgbImage::new(left.width() + right.width(), left.height());
    imageops::replace(&mut out, left, 0, 0);
    imageops::replace(&mut out, right, left.width() as i64, 0);
    out
}
