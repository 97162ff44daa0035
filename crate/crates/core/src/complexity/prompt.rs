use std::sync::OnceLock;

use regex::Regex;

use super::{ComplexityScore, ImageDescription};
use crate::error::{Error, Result};

const PREAMBLE: &str = "\
Given the description of a 512px image, determine its complexity based on the following factors:

1. Number of distinct objects

2. Color variance

3. Texture complexity

4. Foreground and background

5. Symmetry and repetition

6. Human perception factors, like the presence of human faces or text

You will be given the caption, whether there are text or numbers, and whether there are faces in the image. \
Assign a complexity score such that a higher number means the image is more complex. \
Note that text and facial details are intrinsically complex because they are crucial to human perception. \
Here are some examples for scoring:

- Score 1: A plane in a sky

- Score 2: A t-shirt with a emoji on it

- Score 3: A dog lying on the grass

- Score 4: A woman skiing in the snow

- Score 5: Two kids walking on the beach

- Score 6: A dinning table full of food

- Score 7: A close-up shot of a old man

- Score 8: Many people gathering in the stadium

- Score 9: Newspapers or graphs with text and numbers

Now determine the complexity for the caption:

";

pub const RESPONSE_FORMAT: &str =
    "Respond with \"Score: ? out of 9\", where \"?\" is a number between 1 and 9. Then provide explanations.";

/// Sentence describing the two perception flags.
pub fn perception_sentence(has_text: bool, has_faces: bool) -> &'static str {
    match (has_text, has_faces) {
        (true, true) => "There are text visible in the image. There are also facial details.",
        (true, false) => "There are text visible in the image, but there is no human face.",
        (false, true) => "There is no obvious text in the image, but there are facial details.",
        (false, false) => "There is no text or human face in the image.",
    }
}

/// Fills the scoring template with a caption and its perception sentence.
pub fn build_prompt(desc: &ImageDescription) -> String {
    let mut s = String::with_capacity(PREAMBLE.len() + desc.caption.len() + 256);
    s.push_str(PREAMBLE);
    s.push_str(&desc.caption);
    s.push_str("\n\n");
    s.push_str(perception_sentence(desc.has_text, desc.has_faces));
    s.push_str("\n\n");
    s.push_str(RESPONSE_FORMAT);
    s
}

fn score_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Score:\s*(-?\d+)\s+out of 9").expect("valid regex"))
}

/// Extracts the first `Score: <int> out of 9` from a model response.
pub fn parse_score(response: &str) -> Result<ComplexityScore> {
    let caps = score_pattern()
        .captures(response)
        .ok_or_else(|| Error::Parse(format!("no \"Score: N out of 9\" in response {response:?}")))?;
    let raw = &caps[1];
    let value: i64 = raw.parse().unwrap_or(if raw.starts_with('-') { i64::MIN } else { i64::MAX });
    ComplexityScore::new(value)
}

/// Canonical response text for a score.
pub fn format_score(score: ComplexityScore) -> String {
    format!("Score: {} out of 9", score.value())
}
