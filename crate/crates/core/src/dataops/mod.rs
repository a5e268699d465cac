//! Instruction data: JSONL ingestion, the short-answer quality filter,
//! mixture construction with per-source sampling, joint VL/LM pairing, and a
//! synthetic corpus of programmatic scenes.

mod filter;
mod image;
mod ingest;
mod mixture;
mod paired;
mod synth;

pub use filter::{quality_filter, FilterReport, SourceDrops};
pub use image::{SceneAttributes, ToyImage};
pub use ingest::{export, ingest, Ingest};
pub use mixture::{
    build_mixture, resolve_image_path, resolve_images, Mixture, MixtureReport, MixtureSpec, SourceReport,
    SourceSpec, Take, DEFAULT_EXCLUDED_SOURCES,
};
pub use paired::PairedIterator;
pub use synth::{
    count_answer, synth_corpus, synth_language_records, synth_scene, synth_source,
    synth_vision_records, SynthOutput, VlTask, COLOR_QUESTION, COUNT_QUESTION, IMAGE_SIDE,
};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Language,
    VisionLanguage,
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: invalid record: {msg}")]
    Invalid { line: usize, msg: String },
    #[error("image file not found: {0}")]
    MissingImage(PathBuf),
    #[error("image {path}: {msg}")]
    ImageFormat { path: PathBuf, msg: String },
    #[error("mixture configuration: {0}")]
    Config(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;
