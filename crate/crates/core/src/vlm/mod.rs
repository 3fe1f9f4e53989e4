//! Two-step VLM prompting: describe the edit shown in an exemplar grid, then
//! caption the test image as it would look after that edit (and optionally
//! phrase the edit as a short instruction).

mod heuristic;
mod http;
mod prompts;
mod replay;

use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use heuristic::HeuristicVlm;
pub use http::{HttpVlm, VLM_URL_ENV};
pub use prompts::{
    caption_prompt, instruction_prompt, spliced_description, CAPTION_TEMPLATE, DESCRIBE_EDIT_PROMPT,
    INSTRUCTION_TEMPLATE, SPLICE_POINT,
};
pub use replay::ReplayVlm;

use crate::error::{Error, Result};
use crate::image_ops::{hconcat, prepare_image, IMAGE_SIZE};

/// One prompt plus image sent to a VLM backend.
#[derive(Debug, Clone)]
pub struct VlmRequest {
    pub image: RgbImage,
    pub prompt: String,
    pub max_words: usize,
    pub temperature: f32,
}

impl VlmRequest {
    pub fn new(image: RgbImage, prompt: String, max_words: usize, temperature: f32) -> Result<Self> {
        if prompt.trim().is_empty() {
            return Err(Error::Validation("VLM prompt must not be empty".into()));
        }
        if max_words == 0 {
            return Err(Error::Validation("max_words must be positive".into()));
        }
        if temperature.is_nan() || temperature < 0.0 {
            return Err(Error::Validation(format!("temperature must be >= 0, got {temperature}")));
        }
        Ok(Self {
            image,
            prompt,
            max_words,
            temperature,
        })
    }

    /// Generation budget in tokens for a word cap (roughly 1.5 tokens per
    /// word plus slack for the final sentence).
    pub fn max_new_tokens(&self) -> usize {
        self.max_words * 3 / 2 + 16
    }
}

pub trait VlmBackend: Send + Sync {
    fn id(&self) -> String;

    /// Raw model reply to a single image + prompt.
    fn generate(&self, request: &VlmRequest) -> Result<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordCaps {
    pub g_text: usize,
    pub g_caption: usize,
    pub g_edit_inst: usize,
}

impl Default for WordCaps {
    fn default() -> Self {
        Self {
            g_text: 100,
            g_caption: 40,
            g_edit_inst: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmProvenance {
    pub backend_id: String,
    pub temperature: f32,
    /// Exact prompts sent, in order.
    pub prompts: Vec<String>,
    /// Which outputs had to be truncated to their word cap.
    pub truncated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditVerbalization {
    pub g_text: String,
    pub g_caption: String,
    pub g_edit_inst: Option<String>,
    pub provenance: VlmProvenance,
}

/// Side-by-side grid: `x` on the left, `x_edit` on the right, each
/// 512x512. Inputs of other sizes are centre-cropped and resized first.
pub fn compose_grid(x: &RgbImage, x_edit: &RgbImage) -> RgbImage {
    let fit = |img: &RgbImage| {
        if img.dimensions() == (IMAGE_SIZE, IMAGE_SIZE) {
            img.clone()
        } else {
            tracing::warn!(
                "grid input is {}x{}, resizing to {IMAGE_SIZE}x{IMAGE_SIZE}",
                img.width(),
                img.height()
            );
            prepare_image(img, IMAGE_SIZE)
        }
    };
    hconcat(&fit(x), &fit(x_edit))
}

/// Collapses a reply to one paragraph and enforces a word cap. Over-long
/// text is cut after the last sentence that ends within the cap, or at the
/// cap itself when no sentence ends early enough. Returns the text and
/// whether it was cut.
pub fn enforce_word_cap(text: &str, cap: usize) -> (String, bool) {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= cap {
        return (words.join(" "), false);
    }
    let kept = &words[..cap];
    let sentence_end = kept
        .iter()
        .rposition(|w| w.trim_end_matches(['"', '\'', ')', '\u{201d}']).ends_with(['.', '!', '?']));
    let cut = match sentence_end {
        Some(i) => &kept[..=i],
        None => kept,
    };
    (cut.join(" "), true)
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Drives a backend through the prompt chain and enforces the word caps.
#[derive(Clone)]
pub struct VlmInstructor {
    backend: Arc<dyn VlmBackend>,
    caps: WordCaps,
    temperature: f32,
}

impl VlmInstructor {
    pub fn new(backend: Arc<dyn VlmBackend>) -> Self {
        Self {
            backend,
            caps: WordCaps::default(),
            temperature: 0.0,
        }
    }

    pub fn with_caps(mut self, caps: WordCaps) -> Self {
        self.caps = caps;
        self
    }

    pub fn with_temperature(mut self, temperature: f32) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn caps(&self) -> WordCaps {
        self.caps
    }

    fn ask(&self, image: &RgbImage, prompt: String, cap: usize, what: &str) -> Result<(String, bool)> {
        let request = VlmRequest::new(image.clone(), prompt, cap, self.temperature)?;
        let reply = self.backend.generate(&request)?;
        if reply.trim().is_empty() {
            return Err(Error::Generation(format!("VLM returned an empty {what}")));
        }
        let (text, cut) = enforce_word_cap(&reply, cap);
        if cut {
            tracing::warn!("{what} exceeded {cap} words and was truncated");
        }
        Ok((text, cut))
    }

    /// Edit description for a before/after grid.
    pub fn describe_edit(&self, grid: &RgbImage) -> Result<String> {
        Ok(self.ask(grid, DESCRIBE_EDIT_PROMPT.to_owned(), self.caps.g_text, "edit description")?.0)
    }

    /// Caption of `y` after the described edit.
    pub fn caption_edited(&self, y: &RgbImage, g_text: &str) -> Result<String> {
        if g_text.trim().is_empty() {
            return Err(Error::Validation("edit description must not be empty".into()));
        }
        Ok(self.ask(y, caption_prompt(g_text), self.caps.g_caption, "caption")?.0)
    }

    /// Short edit instruction for `y`.
    pub fn edit_instruction(&self, y: &RgbImage, g_text: &str) -> Result<String> {
        if g_text.trim().is_empty() {
            return Err(Error::Validation("edit description must not be empty".into()));
        }
        Ok(self.ask(y, instruction_prompt(g_text), self.caps.g_edit_inst, "edit instruction")?.0)
    }

    /// Runs the full chain for a triplet.
    pub fn verbalize(
        &self,
        x: &RgbImage,
        x_edit: &RgbImage,
        y: &RgbImage,
        with_instruction: bool,
    ) -> Result<EditVerbalization> {
        let mut prompts = Vec::new();
        let mut truncated = Vec::new();
        let grid = compose_grid(x, x_edit);

        prompts.push(DESCRIBE_EDIT_PROMPT.to_owned());
        let (g_text, cut) = self.ask(&grid, DESCRIBE_EDIT_PROMPT.to_owned(), self.caps.g_text, "edit description")?;
        if cut {
            truncated.push("g_text".to_owned());
        }

        let p2 = caption_prompt(&g_text);
        prompts.push(p2.clone());
        let (g_caption, cut) = self.ask(y, p2, self.caps.g_caption, "caption")?;
        if cut {
            truncated.push("g_caption".to_owned());
        }

        let g_edit_inst = if with_instruction {
            let p3 = instruction_prompt(&g_text);
            prompts.push(p3.clone());
            let (inst, cut) = self.ask(y, p3, self.caps.g_edit_inst, "edit instruction")?;
            if cut {
                truncated.push("g_edit_inst".to_owned());
            }
            Some(inst)
        } else {
            None
        };

        Ok(EditVerbalization {
            g_text,
            g_caption,
            g_edit_inst,
            provenance: VlmProvenance {
                backend_id: self.backend.id(),
                temperature: self.temperature,
                prompts,
                truncated,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn img(c: u8) -> RgbImage {
        RgbImage::from_pixel(512, 512, Rgb([c, c / 2, 255 - c]))
    }

    #[test]
    fn grid_geometry_and_halves() {
        let (a, b) = (img(10), img(200));
        let g = compose_grid(&a, &b);
        assert_eq!(g.dimensions(), (1024, 512));
        assert_eq!(g.get_pixel(0, 0), a.get_pixel(0, 0));
        assert_eq!(g.get_pixel(1023, 511), b.get_pixel(0, 0));
        let same = compose_grid(&a, &a);
        for y in 0..512 {
            for x in 0..512 {
                assert_eq!(same.get_pixel(x, y), same.get_pixel(x + 512, y));
            }
        }
    }

    #[test]
    fn grid_resizes_mismatched_inputs() {
        let g = compose_grid(&RgbImage::new(300, 200), &img(3));
        assert_eq!(g.dimensions(), (1024, 512));
    }

    #[test]
    fn truncation_prefers_sentence_boundaries() {
        let reply = format!("{} Last part goes on and on.", "This is a sentence. ".repeat(37));
        assert_eq!(word_count(&reply), 154);
        let (text, cut) = enforce_word_cap(&reply, 100);
        assert!(cut);
        assert!(word_count(&text) <= 100);
        assert!(text.ends_with('.'));
        assert_eq!(word_count(&text), 100);

        let (text, cut) = enforce_word_cap("one two three four five six", 4);
        assert!(cut);
        assert_eq!(text, "one two three four");
    }

    #[test]
    fn replies_become_single_paragraphs() {
        let (text, cut) = enforce_word_cap("A warm\n\nsunset  glow.\n", 40);
        assert!(!cut);
        assert_eq!(text, "A warm sunset glow.");
    }

    #[test]
    fn request_validation() {
        assert!(VlmRequest::new(img(0), " ".into(), 10, 0.0).is_err());
        assert!(VlmRequest::new(img(0), "p".into(), 0, 0.0).is_err());
        assert!(VlmRequest::new(img(0), "p".into(), 10, -1.0).is_err());
        assert!(VlmRequest::new(img(0), "p".into(), 10, f32::NAN).is_err());
    }

    #[test]
    fn over_long_reply_is_cut_to_caps() {
        let words = "Sentence with some words here. ".repeat(30);
        let vlm = VlmInstructor::new(Arc::new(ReplayVlm::constant(&words)));
        let v = vlm.verbalize(&img(1), &img(2), &img(3), true).unwrap();
        assert!(word_count(&v.g_text) <= 100);
        assert!(word_count(&v.g_caption) <= 40);
        assert!(word_count(v.g_edit_inst.as_deref().unwrap()) <= 20);
        assert_eq!(v.provenance.truncated, vec!["g_text", "g_caption", "g_edit_inst"]);
    }

    #[test]
    fn caption_prompt_contains_g_text_verbatim() {
        let replay = Arc::new(ReplayVlm::constant("Make everything warm and orange."));
        let vlm = VlmInstructor::new(replay.clone());
        let v = vlm.verbalize(&img(1), &img(2), &img(3), true).unwrap();
        let sent = replay.requests();
        assert_eq!(sent.len(), 3);
        assert_eq!(sent[0], DESCRIBE_EDIT_PROMPT);
        assert!(sent[1].contains(&v.g_text));
        assert!(sent[1].starts_with("Generate a one line description"));
        assert!(sent[2].contains(&v.g_text));
        assert_eq!(v.provenance.prompts, sent);
    }

    #[test]
    fn empty_reply_is_generation_error() {
        let vlm = VlmInstructor::new(Arc::new(ReplayVlm::constant("   ")));
        assert!(matches!(vlm.describe_edit(&img(1)), Err(Error::Generation(_))));
        assert!(vlm.caption_edited(&img(1), "").is_err());
    }

    #[test]
    fn greedy_heuristic_is_deterministic() {
        let vlm = VlmInstructor::new(Arc::new(HeuristicVlm::new()));
        let a = vlm.caption_edited(&img(50), "Make the image warmer.").unwrap();
        let b = vlm.caption_edited(&img(50), "Make the image warmer.").unwrap();
        assert_eq!(a, b);
        let a = vlm.edit_instruction(&img(50), "Make the image warmer.").unwrap();
        let b = vlm.edit_instruction(&img(50), "Make the image warmer.").unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn cap_is_a_hard_postcondition(words in proptest::collection::vec("[a-z]{1,8}[.!?]?", 0..200), cap in 1usize..120) {
            let text = words.join(" ");
            let (out, cut) = enforce_word_cap(&text, cap);
            prop_assert!(word_count(&out) <= cap);
            prop_assert!(!out.contains('\n'));
            prop_assert_eq!(cut, words.len() > cap);
            // output is a prefix of the word sequence
            let prefix: Vec<&str> = words.iter().map(String::as_str).take(word_count(&out)).collect();
            prop_assert_eq!(out, prefix.join(" "));
        }
    }
}
