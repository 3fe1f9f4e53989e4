//! Deterministic colour-grading edits for building small evaluation suites
//! with exact ground truth: the same grade applied to `x` and `y` gives
//! `x_edit` and `y_edit`.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::pipeline::{EditType, ExemplarTriplet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorGrade {
    Warm,
    Cool,
    Brighten,
    Darken,
    Desaturate,
    Sepia,
    Contrast,
    Teal,
    Faded,
    Magenta,
}

impl ColorGrade {
    pub const ALL: [ColorGrade; 10] = [
        ColorGrade::Warm,
        ColorGrade::Cool,
        ColorGrade::Brighten,
        ColorGrade::Darken,
        ColorGrade::Desaturate,
        ColorGrade::Sepia,
        ColorGrade::Contrast,
        ColorGrade::Teal,
        ColorGrade::Faded,
        ColorGrade::Magenta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ColorGrade::Warm => "warm",
            ColorGrade::Cool => "cool",
            ColorGrade::Brighten => "brighten",
            ColorGrade::Darken => "darken",
            ColorGrade::Desaturate => "desaturate",
            ColorGrade::Sepia => "sepia",
            ColorGrade::Contrast => "contrast",
            ColorGrade::Teal => "teal",
            ColorGrade::Faded => "faded",
            ColorGrade::Magenta => "magenta",
        }
    }

    fn map(self, [r, g, b]: [f32; 3]) -> [f32; 3] {
        let luma = 0.299 * r + 0.587 * g + 0.114 * b;
        match self {
            ColorGrade::Warm => [r + 40.0, g + 10.0, b - 40.0],
            ColorGrade::Cool => [r - 40.0, g + 5.0, b + 45.0],
            ColorGrade::Brighten => [r * 1.2 + 35.0, g * 1.2 + 35.0, b * 1.2 + 35.0],
            ColorGrade::Darken => [r * 0.6, g * 0.6, b * 0.6],
            ColorGrade::Desaturate => [
                luma + 0.15 * (r - luma),
                luma + 0.15 * (g - luma),
                luma + 0.15 * (b - luma),
            ],
            ColorGrade::Sepia => [
                0.393 * r + 0.769 * g + 0.189 * b,
                0.349 * r + 0.686 * g + 0.168 * b,
                0.272 * r + 0.534 * g + 0.131 * b,
            ],
            ColorGrade::Contrast => [
                (r - 128.0) * 1.6 + 128.0,
                (g - 128.0) * 1.6 + 128.0,
                (b - 128.0) * 1.6 + 128.0,
            ],
            ColorGrade::Teal => [r - 45.0, g + 20.0, b + 25.0],
            ColorGrade::Faded => [r * 0.6 + 70.0, g * 0.6 + 70.0, b * 0.6 + 70.0],
            ColorGrade::Magenta => [r + 35.0, g - 35.0, b + 30.0],
        }
    }

    pub fn apply(self, img: &RgbImage) -> RgbImage {
        let mut out = img.clone();
        for p in out.pixels_mut() {
            let v = self.map([p[0] as f32, p[1] as f32, p[2] as f32]);
            p.0 = v.map(|c| c.round().clamp(0.0, 255.0) as u8);
        }
        out
    }
}

/// `n` triplets over `photos` (at least two): triplet `i` grades photo `i`
/// as the exemplar and a different photo as the test image.
pub fn graded_suite(photos: &[(String, RgbImage)], n: usize) -> Vec<ExemplarTriplet> {
    assert!(photos.len() >= 2, "a suite needs at least two photos");
    let p = photos.len();
    (0..n)
        .map(|i| {
            let grade = ColorGrade::ALL[i % ColorGrade::ALL.len()];
            let xi = i % p;
            let yi = (xi + 1 + (i / p) % (p - 1)) % p;
            let (xn, x) = &photos[xi];
            let (yn, y) = &photos[yi];
            let mut t = ExemplarTriplet::new(
                format!("{i:02}-{}-{xn}-{yn}", grade.name()),
                x.clone(),
                grade.apply(x),
                y.clone(),
            );
            t.y_edit = Some(grade.apply(y));
            t.edit_type = Some(EditType::GlobalStyle);
            t
        })
        .collect()
}
