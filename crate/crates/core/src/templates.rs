//! The shared instruction template for language-only and image-grounded
//! dialogues, and the per-token loss masks derived from it.
//!
//! Both renderings start from the same preamble line. Only response text
//! and the `<EOS>` closing each response are marked for loss.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tokenizer::{TokenId, Vocab, EOS, EOS_ID, IMAGE, IMAGE_ID};

pub const PREAMBLE: &str = "<BOS> Below is an instruction that describes a task. \
Write a response that appropriately completes the request ";

/// Image-caption instructions, sampled uniformly for caption data.
pub const CAPTION_INSTRUCTIONS: [&str; 10] = [
    "Can you describe the image?",
    "Could you provide a description of the image?",
    "What do you see in this image?",
    "Share your thoughts on the content of the image.",
    "Please narrate what's happening in the picture.",
    "Can you give a brief explanation of the image?",
    "Describe the main elements and details present in the image.",
    "In your own words, what is depicted in the image?",
    "How would you describe the image's content in a caption?",
    "Can you suggest an insightful caption that highlights the underlying message of the image?",
];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TemplateError {
    #[error("language-only records take exactly one round, got {0}")]
    UnsupportedShape(usize),
    #[error("record has no rounds")]
    NoRounds,
    #[error("round {0} has an empty response")]
    EmptyResponse(usize),
    #[error("vision-language rendering needs an image reference")]
    MissingImage,
    #[error("language rendering given a record with an image reference")]
    UnexpectedImage,
    #[error("rendered text and response spans disagree: {0}")]
    SpanMismatch(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    pub instruction: String,
    pub response: String,
}

impl Round {
    pub fn new(instruction: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            instruction: instruction.into(),
            response: response.into(),
        }
    }
}

/// One instruction datum, independent of the dataset it came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueRecord {
    #[serde(rename = "image", default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(rename = "input", default, skip_serializing_if = "Option::is_none")]
    pub lm_input: Option<String>,
    pub rounds: Vec<Round>,
    #[serde(default)]
    pub source: String,
}

impl DialogueRecord {
    pub fn language(
        source: &str,
        instruction: &str,
        input: Option<&str>,
        response: &str,
    ) -> Self {
        Self {
            image_ref: None,
            lm_input: input.map(str::to_string),
            rounds: vec![Round::new(instruction, response)],
            source: source.to_string(),
        }
    }

    pub fn vision(source: &str, image: &str, rounds: Vec<Round>) -> Self {
        Self {
            image_ref: Some(image.to_string()),
            lm_input: None,
            rounds,
            source: source.to_string(),
        }
    }

    pub fn is_vision_language(&self) -> bool {
        self.image_ref.is_some()
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        if self.rounds.is_empty() {
            return Err(TemplateError::NoRounds);
        }
        if let Some(i) = self.rounds.iter().position(|r| r.response.is_empty()) {
            return Err(TemplateError::EmptyResponse(i));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateOptions {
    /// Emit `### Input:` even when the input slot is empty.
    pub keep_empty_input: bool,
}

/// A rendered dialogue plus the byte ranges that carry loss. Each range runs
/// from the first response character through the closing `<EOS>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub loss_spans: Vec<Range<usize>>,
}

impl Rendered {
    /// Everything before the last response, without the single space that
    /// precedes it: the prompt a model continues from.
    pub fn prompt_before_last_response(&self) -> &str {
        let start = self.loss_spans.last().map_or(self.text.len(), |s| s.start);
        let head = &self.text[..start];
        head.strip_suffix(' ').unwrap_or(head)
    }
}

/// Token ids with their loss mask and image-marker positions.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EncodedSample {
    pub ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub media_positions: Vec<usize>,
}

impl EncodedSample {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Maximal runs of consecutive masked positions.
    pub fn masked_runs(&self) -> Vec<Range<usize>> {
        let mut runs = Vec::new();
        let mut start = None;
        for (i, &m) in self.loss_mask.iter().chain(std::iter::once(&false)).enumerate() {
            match (m, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push(s..i);
                    start = None;
                }
                _ => {}
            }
        }
        runs
    }
}

fn response_block(out: &mut String, spans: &mut Vec<Range<usize>>, response: &str, eos_sep: &str) {
    out.push_str("### Response: ");
    let start = out.len();
    out.push_str(response);
    out.push_str(eos_sep);
    out.push_str(EOS);
    spans.push(start..out.len());
}

pub fn render_language(rec: &DialogueRecord) -> Result<Rendered, TemplateError> {
    render_language_with(rec, TemplateOptions::default())
}

pub fn render_language_with(
    rec: &DialogueRecord,
    opts: TemplateOptions,
) -> Result<Rendered, TemplateError> {
    if rec.image_ref.is_some() {
        return Err(TemplateError::UnexpectedImage);
    }
    if rec.rounds.len() != 1 {
        return Err(TemplateError::UnsupportedShape(rec.rounds.len()));
    }
    Ok(render_text_rounds(rec, opts))
}

// Language layout; rounds after the first (chat continuation only) repeat
// the instruction/response blocks.
fn render_text_rounds(rec: &DialogueRecord, opts: TemplateOptions) -> Rendered {
    let mut text = String::from(PREAMBLE);
    let mut spans = Vec::new();
    for (i, round) in rec.rounds.iter().enumerate() {
        text.push_str("\n\n### Instruction: ");
        text.push_str(&round.instruction);
        if i == 0 {
            let input = rec.lm_input.as_deref().unwrap_or("");
            if !input.is_empty() || opts.keep_empty_input {
                text.push_str("\n\n### Input: ");
                text.push_str(input);
            }
        }
        text.push_str("\n\n");
        response_block(&mut text, &mut spans, &round.response, " ");
    }
    Rendered {
        text,
        loss_spans: spans,
    }
}

pub fn render_vision_language(rec: &DialogueRecord) -> Result<Rendered, TemplateError> {
    if rec.image_ref.is_none() {
        return Err(TemplateError::MissingImage);
    }
    let mut text = String::from(PREAMBLE);
    text.push_str("\n\n### Image: ");
    text.push_str(IMAGE);
    let mut spans = Vec::new();
    for round in &rec.rounds {
        text.push_str("\n\n### Instruction: ");
        text.push_str(&round.instruction);
        text.push_str("\n\n");
        response_block(&mut text, &mut spans, &round.response, "");
    }
    Ok(Rendered {
        text,
        loss_spans: spans,
    })
}

/// Renders with whichever template fits the record.
pub fn render(rec: &DialogueRecord, opts: TemplateOptions) -> Result<Rendered, TemplateError> {
    if rec.is_vision_language() {
        render_vision_language(rec)
    } else {
        render_language_with(rec, opts)
    }
}

/// Prompt for the next turn of a conversation: the training rendering of
/// `history` plus the new instruction, cut right after `### Response:`.
/// Text-only conversations longer than one round continue the language
/// layout with further instruction/response blocks.
pub fn render_chat_prompt(
    has_image: bool,
    history: &[Round],
    instruction: &str,
    opts: TemplateOptions,
) -> String {
    let mut rounds = history.to_vec();
    rounds.push(Round::new(instruction, "_"));
    let rec = DialogueRecord {
        image_ref: has_image.then(String::new),
        lm_input: None,
        rounds,
        source: String::new(),
    };
    let rendered = if has_image {
        render_vision_language(&rec).expect("image present")
    } else {
        render_text_rounds(&rec, opts)
    };
    rendered.prompt_before_last_response().to_string()
}

/// Tokenizes a rendering and marks exactly the tokens inside its loss spans.
pub fn encode_with_mask(rendered: &Rendered, vocab: &Vocab) -> Result<EncodedSample, TemplateError> {
    let text = &rendered.text;
    for span in &rendered.loss_spans {
        let ok = span.end <= text.len()
            && text.is_char_boundary(span.start)
            && text[..span.end].ends_with(EOS)
            && span.start < span.end;
        if !ok {
            return Err(TemplateError::SpanMismatch(format!(
                "span {span:?} does not end in {EOS} inside text of {} bytes",
                text.len()
            )));
        }
    }
    let tokens = vocab.encode_with_spans(text);
    let mut ids = Vec::with_capacity(tokens.len());
    let mut loss_mask = Vec::with_capacity(tokens.len());
    let mut media_positions = Vec::new();
    for (pos, (id, range)) in tokens.iter().enumerate() {
        let mut inside = false;
        for s in &rendered.loss_spans {
            let contained = range.start >= s.start && range.end <= s.end;
            let overlaps = range.start < s.end && range.end > s.start;
            if overlaps && !contained {
                return Err(TemplateError::SpanMismatch(format!(
                    "token {pos} spans {range:?} across loss span {s:?}"
                )));
            }
            inside |= contained;
        }
        if *id == IMAGE_ID {
            media_positions.push(pos);
        }
        ids.push(*id);
        loss_mask.push(inside);
    }
    let eos_masked = ids
        .iter()
        .zip(&loss_mask)
        .filter(|&(&id, &m)| m && id == EOS_ID)
        .count();
    if eos_masked != rendered.loss_spans.len() {
        return Err(TemplateError::SpanMismatch(format!(
            "{} loss spans but {eos_masked} masked {EOS} tokens",
            rendered.loss_spans.len()
        )));
    }
    Ok(EncodedSample {
        ids,
        loss_mask,
        media_positions,
    })
}

/// Text of a generated response: the decoded tokens up to the closing
/// `<EOS>`, without the space the language layout puts before it.
pub fn response_text(vocab: &Vocab, generated: &[TokenId]) -> String {
    let end = generated.iter().position(|&t| t == EOS_ID);
    let closed = end.is_some();
    let text = vocab
        .decode(&generated[..end.unwrap_or(generated.len())])
        .unwrap_or_default();
    if closed {
        text.strip_suffix(' ').map(str::to_string).unwrap_or(text)
    } else {
        text
    }
}

/// Uniform pick from [`CAPTION_INSTRUCTIONS`], deterministic per seed.
pub fn caption_instruction(seed: u64) -> &'static str {
    caption_instruction_from(&mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn caption_instruction_from<R: Rng>(rng: &mut R) -> &'static str {
    CAPTION_INSTRUCTIONS[rng.gen_range(0..CAPTION_INSTRUCTIONS.len())]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vl(n: usize) -> DialogueRecord {
        let rounds = (0..n)
            .map(|i| Round::new(format!("question {i}?"), format!("answer number {i} here.")))
            .collect();
        DialogueRecord::vision("t", "img.toyimg", rounds)
    }

    fn corpus_vocab(texts: &[&str]) -> Vocab {
        Vocab::build(texts.iter().copied(), 1000).unwrap()
    }

    #[test]
    fn language_without_input_block() {
        let rec = DialogueRecord::language("t", "Add 2+2", Some(""), "4");
        let r = render_language(&rec).unwrap();
        assert!(!r.text.contains("### Input:"));
        assert!(r.text.ends_with("### Response: 4 <EOS>"));
        assert_eq!(r.text.matches("<BOS>").count(), 1);
        assert_eq!(r.text.matches("<EOS>").count(), 1);
        let kept = render_language_with(&rec, TemplateOptions { keep_empty_input: true }).unwrap();
        assert!(kept.text.contains("\n\n### Input: \n\n### Response: 4 <EOS>"));
    }

    #[test]
    fn language_rejects_wrong_shapes() {
        let mut rec = DialogueRecord::language("t", "", None, "ok");
        assert!(render_language(&rec).is_ok());
        rec.rounds.push(Round::new("again", "no"));
        assert_eq!(render_language(&rec), Err(TemplateError::UnsupportedShape(2)));
        assert_eq!(render_language(&vl(1)), Err(TemplateError::UnexpectedImage));
        assert_eq!(
            render_vision_language(&DialogueRecord::language("t", "a", None, "b")),
            Err(TemplateError::MissingImage)
        );
    }

    #[test]
    fn vision_rounds_in_order() {
        let r = render_vision_language(&vl(3)).unwrap();
        assert_eq!(r.text.matches("### Instruction:").count(), 3);
        assert_eq!(r.text.matches("### Response:").count(), 3);
        assert_eq!(r.text.matches("<EOS>").count(), 3);
        assert_eq!(r.text.matches("<image>").count(), 1);
        let blocks: Vec<&str> = r.text.split("### Instruction: ").skip(1).collect();
        for (i, b) in blocks.iter().enumerate() {
            assert!(b.starts_with(&format!("question {i}?")));
            assert!(b.contains(&format!("answer number {i} here.<EOS>")));
        }
        let one = render_vision_language(&vl(1)).unwrap();
        let after_image = one.text.split("### Image: <image>").nth(1).unwrap();
        assert_eq!(after_image.matches("### Instruction:").count(), 1);
    }

    #[test]
    fn preamble_is_shared() {
        let l = render_language(&DialogueRecord::language("t", "a", None, "b")).unwrap();
        let v = render_vision_language(&vl(1)).unwrap();
        let first = |s: &str| s.split('\n').next().unwrap().to_string();
        assert_eq!(first(&l.text), first(&v.text));
    }

    #[test]
    fn language_mask_decodes_to_response_and_eos() {
        let rec = DialogueRecord::language("t", "Say hi", Some("politely"), "hello there friend");
        let r = render_language(&rec).unwrap();
        let v = corpus_vocab(&[&r.text]);
        let s = encode_with_mask(&r, &v).unwrap();
        let masked: Vec<TokenId> = s.ids.iter().zip(&s.loss_mask).filter(|p| *p.1).map(|p| *p.0).collect();
        assert_eq!(v.decode(&masked).unwrap(), "hello there friend <EOS>");
    }

    #[test]
    fn oov_response_still_masks_exactly() {
        let rec = DialogueRecord::language("t", "Say", None, "zebra\tquokka");
        let r = render_language(&rec).unwrap();
        let v = corpus_vocab(&["Say"]);
        let s = encode_with_mask(&r, &v).unwrap();
        for run in s.masked_runs() {
            assert_eq!(v.decode(&s.ids[run]).unwrap(), "zebra\tquokka <EOS>");
        }
    }

    #[test]
    fn two_round_mask_has_two_eos() {
        let r = render_vision_language(&vl(2)).unwrap();
        let v = corpus_vocab(&[&r.text]);
        let s = encode_with_mask(&r, &v).unwrap();
        let eos = s.ids.iter().zip(&s.loss_mask).filter(|&(&id, &m)| m && id == EOS_ID).count();
        assert_eq!(eos, 2);
        assert_eq!(s.media_positions.len(), 1);
        assert_eq!(s.ids[s.media_positions[0]], IMAGE_ID);
        let runs = s.masked_runs();
        assert_eq!(runs.len(), 2);
        assert_eq!(v.decode(&s.ids[runs[1].clone()]).unwrap(), "answer number 1 here.<EOS>");
    }

    #[test]
    fn span_mismatch_is_reported() {
        let mut r = render_vision_language(&vl(1)).unwrap();
        let v = corpus_vocab(&[&r.text]);
        r.loss_spans[0].start += 2;
        assert!(matches!(encode_with_mask(&r, &v), Err(TemplateError::SpanMismatch(_))));
        let mut r2 = render_vision_language(&vl(1)).unwrap();
        r2.loss_spans[0].end -= 1;
        assert!(matches!(encode_with_mask(&r2, &v), Err(TemplateError::SpanMismatch(_))));
    }

    #[test]
    fn chat_prompt_is_training_prefix() {
        let rec = vl(3);
        let full = render_vision_language(&rec).unwrap();
        let prompt = render_chat_prompt(true, &rec.rounds[..2], &rec.rounds[2].instruction, TemplateOptions::default());
        assert!(prompt.ends_with("### Response:"));
        assert_eq!(
            format!("{prompt} {}<EOS>", rec.rounds[2].response),
            full.text
        );
        let single = render_chat_prompt(false, &[], "Say hi", TemplateOptions::default());
        let lang = render_language(&DialogueRecord::language("", "Say hi", None, "x")).unwrap();
        assert_eq!(format!("{single} x <EOS>"), lang.text);
    }

    #[test]
    fn caption_instruction_properties() {
        assert_eq!(caption_instruction(5), caption_instruction(5));
        let mut counts = [0usize; 10];
        for seed in 0..10_000u64 {
            let s = caption_instruction(seed);
            let i = CAPTION_INSTRUCTIONS.iter().position(|&c| c == s).unwrap();
            counts[i] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.1).abs() <= 0.02, "frequency {f}");
        }
    }
}
