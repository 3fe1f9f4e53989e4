//! Prompt templates sent to the VLM. The texts are verbatim; the caption and
//! instruction templates carry a splice point replaced by the edit
//! description.

/// Placeholder in [`CAPTION_TEMPLATE`] and [`INSTRUCTION_TEMPLATE`] that is
/// replaced by the edit description.
pub const SPLICE_POINT: &str = "<Response from LLaVA using p1>";

/// Asks for a description of the edit shown in a before/after grid.
pub const DESCRIBE_EDIT_PROMPT: &str = "The given image is a 2x1 grid of two individual images. The image on the right is an \
     edited version of the image on the left. Give a detailed explanation of the edits \
     required to obtain the second image starting from the first image. The suggested edits \
     can include addition/removal of objects, replacement of objects, change of style, change \
     of background, motion, etc. Describe ONLY the edits, and do not mention any elements \
     that don’t require editing. Ignore minor changes and focus on a broad holistic view of \
     the required edit. Give an answer in 100 words or less. Your answer should be in a \
     single paragraph. Strictly adhere to this format.";

/// Asks for a caption of the test image after applying the described edit.
pub const CAPTION_TEMPLATE: &str = "Generate a one line description of an image generated after applying the following edit \
     on this image - “<Response from LLaVA using p1>”. Generate the caption in one line based \
     on the content of the input image. If any part of the mentioned edit is not applicable \
     to the given image, ignore it. Make sure that your caption completely describes the \
     final image that would be obtained after applying this edit on the given image. The \
     generated caption should be in one line, and should contain less than 20 words. Do not \
     exceed 20 words.";

/// Asks for a short edit instruction for the test image.
pub const INSTRUCTION_TEMPLATE: &str = "Generate a one line edit instruction to edit the given image. The edit should follow the \
     instruction in this longer edit - “<Response from LLaVA using p1>” Generate the edit \
     instruction in a single line based on the content of the input image. If any part of the \
     mentioned image is not applicable to the given image, ignore it. Make sure that your \
     instruction is sufficient to replicate the describe edit. The generated instruction \
     should be in one line, and should contain less than 20 words. Do not exceed 20 words.";

pub fn caption_prompt(edit_description: &str) -> String {
    CAPTION_TEMPLATE.replacen(SPLICE_POINT, edit_description, 1)
}

pub fn instruction_prompt(edit_description: &str) -> String {
    INSTRUCTION_TEMPLATE.replacen(SPLICE_POINT, edit_description, 1)
}

/// Recovers the spliced edit description from an instantiated template.
pub fn spliced_description(prompt: &str) -> Option<&str> {
    let start = prompt.find('\u{201c}')? + '\u{201c}'.len_utf8();
    let end = start + prompt[start..].rfind('\u{201d}')?;
    Some(&prompt[start..end])
}
