use std::collections::HashMap;

use serde::Serialize;

use super::{Example, Result};
use crate::dataops::COUNT_QUESTION;
use crate::model::{shift, Decoding, Model};
use crate::numerics::{Real, Tape};
use crate::templates::{render, response_text, TemplateOptions, CAPTION_INSTRUCTIONS};
use crate::tokenizer::Vocab;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub masked_tokens: usize,
    /// Token-weighted mean masked loss.
    pub mean_loss: f64,
    pub perplexity: f64,
    /// Fraction of samples whose last response is reproduced verbatim.
    pub exact_match: f64,
    pub counting_total: usize,
    pub counting_accuracy: Option<f64>,
    pub caption_total: usize,
    pub caption_overlap: Option<f64>,
}

/// First run of ASCII digits in `s`.
pub fn first_number(s: &str) -> Option<usize> {
    let start = s.find(|c: char| c.is_ascii_digit())?;
    let digits: String = s[start..].chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

/// Unigram F1 between whitespace-split, lower-cased word multisets.
pub fn token_overlap(generated: &str, reference: &str) -> f64 {
    let bag = |s: &str| {
        let mut m: HashMap<String, usize> = HashMap::new();
        for w in s.split_whitespace() {
            let w = w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase();
            if !w.is_empty() {
                *m.entry(w).or_default() += 1;
            }
        }
        m
    };
    let (g, r) = (bag(generated), bag(reference));
    let common: usize = g.iter().map(|(w, &n)| n.min(*r.get(w).unwrap_or(&0))).sum();
    let (ng, nr) = (g.values().sum::<usize>(), r.values().sum::<usize>());
    if common == 0 || ng == 0 || nr == 0 {
        return 0.0;
    }
    let (p, rc) = (common as f64 / ng as f64, common as f64 / nr as f64);
    2.0 * p * rc / (p + rc)
}

/// Masked perplexity over `heldout`, then greedy generation of every
/// sample's last response from its prompt. Counting questions are scored
/// against the image's ground-truth count, caption requests by word overlap.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    heldout: &[Example],
    vocab: &Vocab,
    opts: TemplateOptions,
    max_new: usize,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        samples: heldout.len(),
        ..Default::default()
    };
    let (mut nll, mut exact) = (0.0, 0usize);
    let (mut counted, mut overlap) = (0usize, 0.0);
    for ex in heldout {
        let mut tape = Tape::new();
        let loss = model.sample_loss(&mut tape, &ex.sample, ex.image.as_deref())?;
        let n = shift(&ex.sample).2.iter().filter(|&&m| m).count();
        nll += tape.value(loss).item().as_f64() * n as f64;
        report.masked_tokens += n;

        let rendered = render(&ex.record, opts)?;
        let prompt = vocab.encode(rendered.prompt_before_last_response());
        let out = model.generate(&prompt, ex.image.as_deref(), max_new, Decoding::Greedy)?;
        let text = response_text(vocab, &out);
        let last = ex.record.rounds.last().expect("validated record");
        exact += (text == last.response) as usize;
        if last.instruction == COUNT_QUESTION {
            if let Some(img) = &ex.image {
                report.counting_total += 1;
                counted += (first_number(&text) == Some(img.attributes.count)) as usize;
            }
        } else if CAPTION_INSTRUCTIONS.contains(&last.instruction.as_str()) {
            report.caption_total += 1;
            overlap += token_overlap(&text, &last.response);
        }
    }
    report.mean_loss = if report.masked_tokens > 0 {
        nll / report.masked_tokens as f64
    } else {
        f64::NAN
    };
    report.perplexity = report.mean_loss.exp();
    if report.samples > 0 {
        report.exact_match = exact as f64 / report.samples as f64;
    }
    if report.counting_total > 0 {
        report.counting_accuracy = Some(counted as f64 / report.counting_total as f64);
    }
    if report.caption_total > 0 {
        report.caption_overlap = Some(overlap / report.caption_total as f64);
    }
    Ok(report)
}
