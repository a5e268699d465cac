//! Multi-round dialogue over a trained model. A session keeps its image and
//! the rounds so far; every turn re-renders the whole conversation through
//! the training template and generates the next response.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::dataops::{DataError, ToyImage};
use crate::model::{Decoding, Model, ModelError};
use crate::templates::{render_chat_prompt, response_text, Round, TemplateOptions};
use crate::tokenizer::{TokenizerError, Vocab};

#[derive(Debug, thiserror::Error)]
pub enum ChatError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("conversation is {len} tokens, the model's context holds {max}; start a new session")]
    ContextOverflow { len: usize, max: usize },
    #[error("the session already has an image; images can only be attached once, before the first message")]
    ImageLocked,
    #[error("image: {0}")]
    Image(#[from] DataError),
    #[error("vocabulary: {0}")]
    Vocab(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ChatError>;

#[derive(Clone, Debug, Serialize)]
pub struct ChatSession {
    pub session_id: String,
    #[serde(rename = "image", skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(skip)]
    pub image: Option<Arc<ToyImage>>,
    pub history: Vec<Round>,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    /// Prompt of the most recent turn, as fed to the model.
    #[serde(skip)]
    pub last_prompt: Option<String>,
}

impl ChatSession {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            image_ref: None,
            image: None,
            history: Vec::new(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            last_prompt: None,
        }
    }

    pub fn attach_image(&mut self, image_ref: impl Into<String>, image: ToyImage) -> Result<()> {
        if self.image.is_some() || !self.history.is_empty() {
            return Err(ChatError::ImageLocked);
        }
        self.image_ref = Some(image_ref.into());
        self.image = Some(Arc::new(image));
        Ok(())
    }

    /// Prompt for the next turn: all rounds so far and `instruction`, up to
    /// and including `### Response:`.
    pub fn prompt_for(&self, instruction: &str, opts: TemplateOptions) -> String {
        render_chat_prompt(self.image.is_some(), &self.history, instruction, opts)
    }
}

/// Reads an image given either inline in the text format or as a path.
pub fn read_image_arg(arg: &str) -> Result<(String, ToyImage)> {
    if arg.trim_start().starts_with("TOYIMG") {
        let img = ToyImage::from_text(arg).map_err(|msg| DataError::ImageFormat {
            path: PathBuf::from("<inline>"),
            msg,
        })?;
        return Ok(("<inline>".into(), img));
    }
    Ok((arg.to_string(), ToyImage::load(Path::new(arg))?))
}

/// Vocabulary file stored next to a checkpoint.
pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("vocab")
}

/// Everything a turn needs besides the session.
#[derive(Clone, Debug)]
pub struct ChatModel {
    pub model: Model<f32>,
    pub vocab: Vocab,
    pub opts: TemplateOptions,
    pub max_new: usize,
}

impl ChatModel {
    pub fn new(model: Model<f32>, vocab: Vocab) -> Self {
        let max_new = model.cfg.max_seq_len;
        Self {
            model,
            vocab,
            opts: TemplateOptions::default(),
            max_new,
        }
    }

    /// Loads a checkpoint and the vocabulary saved beside it.
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let model = Model::load(checkpoint)?;
        let vocab = Vocab::load(&vocab_path(checkpoint))?;
        Ok(Self::new(model, vocab))
    }
}

/// One dialogue turn. On success the round is appended to the history;
/// on any error the session is left unchanged.
pub fn chat_turn(session: &mut ChatSession, instruction: &str, engine: &ChatModel, mode: Decoding) -> Result<String> {
    let instruction = instruction.trim();
    if instruction.is_empty() {
        return Err(ChatError::EmptyInstruction);
    }
    let prompt = session.prompt_for(instruction, engine.opts);
    let ids = engine.vocab.encode(&prompt);
    let max = engine.model.cfg.max_seq_len;
    // A prompt filling the whole context leaves no room for a response.
    if ids.len() >= max {
        return Err(ChatError::ContextOverflow { len: ids.len(), max });
    }
    let out = engine
        .model
        .generate(&ids, session.image.as_deref(), engine.max_new, mode)?;
    let response = response_text(&engine.vocab, &out);
    session.history.push(Round::new(instruction, response.clone()));
    session.last_prompt = Some(prompt);
    Ok(response)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dataops::synth_scene;
    use crate::model::ModelConfig;
    use crate::templates::{render_language, render_vision_language, DialogueRecord};

    fn scene(seed: u64) -> ToyImage {
        synth_scene(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn engine() -> ChatModel {
        let corpus = [
            crate::templates::PREAMBLE,
            "### Image: ### Instruction: ### Response: How many squares are there?",
            "What color are they? Describe the picture. first question here second",
        ];
        let vocab = Vocab::build(corpus, 400).unwrap();
        let mut cfg = ModelConfig::tiny(vocab.len());
        cfg.max_seq_len = 160;
        let mut e = ChatModel::new(Model::new(cfg).unwrap(), vocab);
        e.max_new = 6;
        e
    }

    #[test]
    fn three_turn_prompt_matches_training_render() {
        let e = engine();
        let mut s = ChatSession::new("a");
        s.attach_image("scene.toyimg", scene(3)).unwrap();
        let asks = ["How many squares are there?", "What color are they?", "Describe the picture."];
        for a in &asks {
            chat_turn(&mut s, a, &e, Decoding::Greedy).unwrap();
        }
        let mut rec = DialogueRecord::vision("chat", "scene.toyimg", s.history.clone());
        rec.rounds.last_mut().unwrap().response = "anything".into();
        let rendered = render_vision_language(&rec).unwrap();
        assert_eq!(s.last_prompt.as_deref(), Some(rendered.prompt_before_last_response()));
        assert!(s.last_prompt.as_ref().unwrap().ends_with("### Response:"));
    }

    #[test]
    fn single_text_turn_uses_language_layout() {
        let e = engine();
        let mut s = ChatSession::new("t");
        chat_turn(&mut s, "Describe the picture.", &e, Decoding::Greedy).unwrap();
        let rec = DialogueRecord::language("chat", "Describe the picture.", None, "x");
        assert_eq!(
            s.last_prompt.as_deref(),
            Some(render_language(&rec).unwrap().prompt_before_last_response())
        );
    }

    #[test]
    fn second_turn_contains_first_round() {
        let e = engine();
        let mut s = ChatSession::new("b");
        let r1 = chat_turn(&mut s, "first question here", &e, Decoding::Greedy).unwrap();
        chat_turn(&mut s, "second question", &e, Decoding::Greedy).unwrap();
        let p = s.last_prompt.unwrap();
        let i1 = p.find("first question here").unwrap();
        let i2 = p.find("second question").unwrap();
        assert!(i1 < i2);
        assert!(p[i1..i2].contains(&r1));
        assert_eq!(s.history.len(), 2);
    }

    #[test]
    fn overflow_and_preconditions() {
        let mut e = engine();
        e.model.cfg.max_seq_len = 40;
        let mut s = ChatSession::new("c");
        assert!(matches!(chat_turn(&mut s, "  ", &e, Decoding::Greedy), Err(ChatError::EmptyInstruction)));
        let long = "describe the picture ".repeat(20);
        assert!(matches!(
            chat_turn(&mut s, &long, &e, Decoding::Greedy),
            Err(ChatError::ContextOverflow { max: 40, .. })
        ));
        assert!(s.history.is_empty());
        s.history.push(Round::new("q", "a"));
        assert!(matches!(s.attach_image("x", scene(1)), Err(ChatError::ImageLocked)));
    }

    #[test]
    fn image_argument_forms() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = (scene(5), ());
        let (r, inline) = read_image_arg(&img.to_text()).unwrap();
        assert_eq!(r, "<inline>");
        assert_eq!(inline.grid, img.grid);
        let p = dir.path().join("s.toyimg");
        img.save(&p).unwrap();
        let (r, loaded) = read_image_arg(p.to_str().unwrap()).unwrap();
        assert_eq!(r, p.to_str().unwrap());
        assert_eq!(loaded.attributes, img.attributes);
        assert!(matches!(read_image_arg("/nonexistent.toyimg"), Err(ChatError::Image(_))));
    }
}
