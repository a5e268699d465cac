use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use super::Result;
use crate::dataops::ToyImage;
use crate::templates::{encode_with_mask, render, DialogueRecord, EncodedSample, TemplateOptions};
use crate::tokenizer::Vocab;

/// A record ready for training: its encoding and, for vision-language
/// records, the loaded image.
#[derive(Clone, Debug)]
pub struct Example {
    pub source: String,
    pub record: DialogueRecord,
    pub sample: EncodedSample,
    pub image: Option<Arc<ToyImage>>,
}

/// Rendered training text of each record, for building a vocabulary.
pub fn corpus_texts(records: &[DialogueRecord], opts: TemplateOptions) -> Result<Vec<String>> {
    records
        .iter()
        .map(|r| Ok(render(r, opts)?.text))
        .collect()
}

/// Renders, tokenizes and masks each record. Image references are read as
/// given (callers resolve them first); repeated images are loaded once.
pub fn build_examples(records: &[DialogueRecord], vocab: &Vocab, opts: TemplateOptions) -> Result<Vec<Example>> {
    let mut cache: HashMap<String, Arc<ToyImage>> = HashMap::new();
    records
        .iter()
        .map(|rec| {
            let rendered = render(rec, opts)?;
            let sample = encode_with_mask(&rendered, vocab)?;
            let image = match &rec.image_ref {
                Some(r) => Some(match cache.get(r) {
                    Some(img) => img.clone(),
                    None => {
                        let img = Arc::new(ToyImage::load(Path::new(r))?);
                        cache.insert(r.clone(), img.clone());
                        img
                    }
                }),
                None => None,
            };
            Ok(Example {
                source: rec.source.clone(),
                record: rec.clone(),
                sample,
                image,
            })
        })
        .collect()
}
