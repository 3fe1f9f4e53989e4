use image::{imageops, RgbImage};

use super::{spliced_description, VlmBackend, VlmRequest, CAPTION_TEMPLATE, DESCRIBE_EDIT_PROMPT, INSTRUCTION_TEMPLATE};
use crate::error::Result;
use crate::reference::{cell_mean_index, image_descriptor, CELL_MEAN_DIMS, GRID, LEXICON};

/// Deterministic offline stand-in for a VLM. It reads global colour and
/// contrast changes between the two halves of an exemplar grid and names them
/// with the colour vocabulary the reference text encoder understands. It does
/// not recognise objects.
#[derive(Debug, Default, Clone)]
pub struct HeuristicVlm;

const MIN_CHANGE: f32 = 0.05;
const MATCH_COSINE: f32 = 0.6;

impl HeuristicVlm {
    pub fn new() -> Self {
        Self
    }

    /// Cell-averaged channel means and global stds of the descriptor.
    fn summary(img: &RgbImage) -> ([f32; 3], [f32; 3], [f32; 4]) {
        let d = image_descriptor(img);
        let mut means = [0f32; 3];
        let mut cells = [0f32; 4];
        for r in 0..GRID {
            for c in 0..GRID {
                for ch in 0..3 {
                    means[ch] += d[cell_mean_index(r, c, ch)] / (GRID * GRID) as f32;
                }
            }
        }
        let stds = [d[CELL_MEAN_DIMS], d[CELL_MEAN_DIMS + 1], d[CELL_MEAN_DIMS + 2]];
        for (i, cell) in cells.iter_mut().enumerate() {
            let (r, c) = (i / GRID, i % GRID);
            *cell = (0..3).map(|ch| d[cell_mean_index(r, c, ch)]).sum();
        }
        (means, stds, cells)
    }

    /// Vocabulary words best matching a change, strongest first.
    fn words_for(change: &[f32; 6]) -> Vec<&'static str> {
        let norm = |v: &[f32]| v.iter().map(|x| x * x).sum::<f32>().sqrt();
        let n = norm(change);
        if n < MIN_CHANGE {
            return Vec::new();
        }
        let mut scored: Vec<(f32, &'static str, [f32; 6])> = LEXICON
            .iter()
            .map(|(w, s)| {
                let cos = s.iter().zip(change).map(|(a, b)| a * b).sum::<f32>() / (norm(s) * n);
                (cos, *w, *s)
            })
            .filter(|(cos, _, _)| *cos > MATCH_COSINE)
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        let mut picked: Vec<(&'static str, [f32; 6])> = Vec::new();
        for (_, w, s) in scored {
            // skip synonyms of an already chosen word
            if picked.iter().any(|(_, p)| p == &s) {
                continue;
            }
            picked.push((w, s));
            if picked.len() == 2 {
                break;
            }
        }
        picked.into_iter().map(|(w, _)| w).collect()
    }

    fn describe(&self, grid: &RgbImage) -> String {
        let half = grid.width() / 2;
        let left = imageops::crop_imm(grid, 0, 0, half, grid.height()).to_image();
        let right = imageops::crop_imm(grid, half, 0, half, grid.height()).to_image();
        let (m0, s0, c0) = Self::summary(&left);
        let (m1, s1, c1) = Self::summary(&right);
        let change = [
            m1[0] - m0[0],
            m1[1] - m0[1],
            m1[2] - m0[2],
            s1[0] - s0[0],
            s1[1] - s0[1],
            s1[2] - s0[2],
        ];
        let words = Self::words_for(&change);
        if words.is_empty() {
            return "The two images look nearly identical. No significant edit is visible, so the \
                    image should be kept as it is."
                .into();
        }
        let mut out = format!(
            "The edit changes the overall colour grading of the image, giving it {} look.",
            with_article(&join_words(&words), false)
        );
        let luma = change[0];
        if luma > 0.15 {
            out.push_str(" The whole scene becomes brighter.");
        } else if luma < -0.15 {
            out.push_str(" The whole scene becomes darker.");
        }
        let cell_change: Vec<f32> = c1.iter().zip(&c0).map(|(a, b)| (a - b).abs()).collect();
        let (max, min) = cell_change
            .iter()
            .fold((0f32, f32::MAX), |(mx, mn), &v| (mx.max(v), mn.min(v)));
        if max > 3.0 * min.max(0.02) {
            let i = cell_change.iter().position(|&v| v == max).unwrap_or(0);
            let region = ["top left", "top right", "bottom left", "bottom right"][i];
            out.push_str(&format!(" The change is strongest in the {region} of the image."));
        }
        out.push_str(" The objects and the layout of the scene stay the same.");
        out
    }

    fn scene(&self, y: &RgbImage) -> String {
        let (m, _, _) = Self::summary(y);
        let light = if m[0] > 0.3 {
            "well-lit"
        } else if m[0] < -0.3 {
            "dim"
        } else {
            "evenly lit"
        };
        let tint = if m[1] > 0.25 {
            "reddish"
        } else if m[1] < -0.25 {
            "bluish"
        } else if m[2] > 0.25 {
            "greenish"
        } else {
            "neutral"
        };
        format!("{light} {tint} photo")
    }

    fn caption(&self, y: &RgbImage, description: &str) -> String {
        let words = vocabulary_in(description);
        if words.is_empty() {
            return format!("{} of the original scene.", with_article(&self.scene(y), true));
        }
        format!(
            "{} of the same scene with {} colour grade.",
            with_article(&self.scene(y), true),
            with_article(&join_words(&words), false)
        )
    }

    fn instruction(&self, description: &str) -> String {
        let words = vocabulary_in(description);
        if words.is_empty() {
            return "Keep the image unchanged.".into();
        }
        format!("Make the image {}.", join_words(&words))
    }
}

fn with_article(phrase: &str, capital: bool) -> String {
    let vowel = phrase.starts_with(['a', 'e', 'i', 'o', 'u']);
    let article = match (vowel, capital) {
        (true, true) => "An",
        (true, false) => "an",
        (false, true) => "A",
        (false, false) => "a",
    };
    format!("{article} {phrase}")
}

fn join_words(words: &[&str]) -> String {
    match words {
        [] => String::new(),
        [a] => (*a).to_owned(),
        [rest @ .., last] => format!("{} and {last}", rest.join(", ")),
    }
}

/// Vocabulary words in `text`, in order of first appearance, at most three.
fn vocabulary_in(text: &str) -> Vec<&'static str> {
    let mut out = Vec::new();
    for word in text.to_lowercase().split(|c: char| !c.is_alphanumeric()) {
        if let Some((w, _)) = LEXICON.iter().find(|(w, _)| *w == word) {
            if !out.contains(w) {
                out.push(*w);
            }
        }
        if out.len() == 3 {
            break;
        }
    }
    out
}

fn template_prefix(template: &str) -> &str {
    &template[..template.find('\u{201c}').unwrap_or(template.len())]
}

impl VlmBackend for HeuristicVlm {
    fn id(&self) -> String {
        "heuristic-vlm/v1".into()
    }

    fn generate(&self, request: &VlmRequest) -> Result<String> {
        let p = request.prompt.as_str();
        let reply = if p == DESCRIBE_EDIT_PROMPT {
            self.describe(&request.image)
        } else if p.starts_with(template_prefix(CAPTION_TEMPLATE)) {
            self.caption(&request.image, spliced_description(p).unwrap_or(""))
        } else if p.starts_with(template_prefix(INSTRUCTION_TEMPLATE)) {
            self.instruction(spliced_description(p).unwrap_or(""))
        } else {
            "The image shows a scene.".into()
        };
        Ok(reply)
    }
}
