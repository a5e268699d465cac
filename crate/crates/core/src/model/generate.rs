use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelError, Result, Visual};
use crate::dataops::ToyImage;
use crate::numerics::{Real, Tape};
use crate::tokenizer::{TokenId, EOS_ID, IMAGE_ID};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Decoding {
    #[default]
    Greedy,
    Temperature { tau: f64, seed: u64 },
}

impl<T: Real> Model<T> {
    /// Extends `prompt` one token at a time until `<EOS>` (included in the
    /// output) or `max_new` tokens. Every step reruns the full forward pass.
    pub fn generate(
        &self,
        prompt: &[TokenId],
        image: Option<&ToyImage>,
        max_new: usize,
        mode: Decoding,
    ) -> Result<Vec<TokenId>> {
        if prompt.is_empty() {
            return Err(ModelError::Config("empty prompt".into()));
        }
        if prompt.len() > self.cfg.max_seq_len {
            return Err(ModelError::Length {
                len: prompt.len(),
                max: self.cfg.max_seq_len,
            });
        }
        let media_pos = prompt.iter().position(|&t| t == IMAGE_ID);
        let latents = match (image, media_pos) {
            (Some(img), Some(_)) => {
                let mut tape = Tape::new();
                let v = self.visual_latents(&mut tape, img)?;
                Some(tape.value(v).clone())
            }
            (Some(_), None) => {
                return Err(ModelError::Config(
                    "image supplied for a prompt without an image marker".into(),
                ))
            }
            (None, _) => None,
        };
        let mut rng = match mode {
            Decoding::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Decoding::Greedy => None,
        };
        let mut ids: Vec<usize> = prompt.iter().map(|&t| t as usize).collect();
        let mut out = Vec::new();
        while out.len() < max_new && ids.len() < self.cfg.max_seq_len {
            let mut tape = Tape::new();
            let visual = latents.as_ref().map(|l| Visual {
                latents: tape.constant(l.clone()),
                media_pos: media_pos.unwrap(),
            });
            let logits = self.decoder_forward(&mut tape, &ids, visual)?;
            let last = tape.value(logits).row(ids.len() - 1);
            let next = match (mode, rng.as_mut()) {
                (Decoding::Temperature { tau, .. }, Some(rng)) if tau > 0.0 => sample(last, tau, rng),
                _ => argmax(last),
            };
            ids.push(next);
            out.push(next as TokenId);
            if next as TokenId == EOS_ID {
                break;
            }
        }
        Ok(out)
    }
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample<T: Real>(row: &[T], tau: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = row.iter().map(|v| v.as_f64() / tau).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}
