//! Deterministic inputs shared by the benchmarks.

use std::path::PathBuf;

use exedit_core::edit_embedding::{ImageTokens, IMAGE_TOKENS};
use exedit_core::encoders::EMBED_DIM;
use exedit_core::image_ops::{load_image, prepare_image, IMAGE_SIZE};
use image::RgbImage;
use ndarray::Array2;

/// One of the bundled natural photos, resized to the pipeline resolution.
pub fn photo(name: &str) -> RgbImage {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures/natural")
        .join(format!("{name}.jpg"));
    let img = load_image(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    prepare_image(&img, IMAGE_SIZE)
}

/// Smoothly varying image tokens; `phase` tells them apart.
pub fn tokens(phase: f32) -> ImageTokens {
    let m = Array2::from_shape_fn((IMAGE_TOKENS, EMBED_DIM), |(i, j)| (phase + i as f32 * 0.37 + j as f32 * 0.011).sin());
    ImageTokens::new(m, format!("bench-{phase}")).expect("token shape")
}
