//! Metric implementations against independent references.

mod common;

use std::path::PathBuf;

use exedit_core::image_ops::load_image;
use common::{naive_lpips, random_image};
use exedit_core::metrics::{ssim, Lpips};
use rand::SeedableRng;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Values from scikit-image `structural_similarity` with Gaussian weights
/// (sigma 1.5), population covariance and data range 255.
const SKIMAGE_SSIM: [f64; 5] = [
    0.5320326074278273,
    0.9140614132319221,
    0.6426684330312048,
    0.14506042398617439,
    0.9222639974128893,
];

#[test]
fn ssim_matches_scikit_image() {
    for (i, want) in SKIMAGE_SSIM.iter().enumerate() {
        let a = load_image(fixture(&format!("ssim_pairs/pair{i}_a.png"))).unwrap();
        let b = load_image(fixture(&format!("ssim_pairs/pair{i}_b.png"))).unwrap();
        let got = ssim(&a, &b);
        assert!((got - want).abs() < 1e-3, "pair {i}: {got} vs {want}");
    }
}

#[test]
fn lpips_matches_naive_evaluation() {
    let net = Lpips::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for i in 0..5 {
        let (a, b) = (random_image(&mut rng), random_image(&mut rng));
        let got = net.distance(&a, &b);
        let want = naive_lpips(&net, &a, &b);
        assert!((got - want).abs() < 1e-3, "pair {i}: {got} vs {want}");
    }
}
