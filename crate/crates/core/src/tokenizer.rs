//! Word-level tokenizer with byte fallback and atomic special tokens.
//!
//! Id layout: `<BOS>`, `<EOS>`, `<image>` take ids 0..3, the 256 byte
//! tokens take 3..259, and frequency-ranked words follow.
//!
//! Whitespace is mostly implicit: the decoder puts a single space between
//! two consecutive atomic tokens (words or specials). Any other separator is
//! spelled out with byte tokens. Two atomic tokens that touch with no space
//! at all (as in `answer<EOS>`) are joined by the glue byte `0xFF`, which
//! never occurs in UTF-8 and decodes to nothing. This keeps
//! `decode(encode(s)) == s` for every string.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

pub type TokenId = u32;

pub const BOS_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;
pub const IMAGE_ID: TokenId = 2;
const BYTE_BASE: TokenId = 3;
const GLUE_BYTE: u8 = 0xFF;
const FIRST_WORD: TokenId = BYTE_BASE + 256;

/// Number of ids reserved before any word: 3 specials + 256 bytes.
pub const RESERVED_IDS: usize = FIRST_WORD as usize;

pub const BOS: &str = "<BOS>";
pub const EOS: &str = "<EOS>";
pub const IMAGE: &str = "<image>";

const SPECIALS: [(&str, TokenId); 3] = [(BOS, BOS_ID), (EOS, EOS_ID), (IMAGE, IMAGE_ID)];

const HEADER: &str = "mmgpt-vocab v1";

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("vocab size {0} is below the {RESERVED_IDS} reserved ids")]
    VocabTooSmall(usize),
    #[error("token id {id} at index {index} is outside vocab of {size}")]
    OutOfRange { index: usize, id: TokenId, size: usize },
    #[error("vocab file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SegKind {
    Special(TokenId),
    Word,
    Space,
}

#[derive(Clone, Debug)]
struct Segment {
    kind: SegKind,
    range: Range<usize>,
}

fn special_at(text: &str, i: usize) -> Option<(TokenId, usize)> {
    SPECIALS
        .iter()
        .find(|(s, _)| text[i..].starts_with(s))
        .map(|&(s, id)| (id, s.len()))
}

fn segment(text: &str) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        if let Some((id, len)) = special_at(text, i) {
            out.push(Segment {
                kind: SegKind::Special(id),
                range: i..i + len,
            });
            i += len;
            continue;
        }
        let start = i;
        let first = text[i..].chars().next().expect("in bounds");
        let space = first.is_whitespace();
        i += first.len_utf8();
        while i < text.len() {
            let c = text[i..].chars().next().expect("in bounds");
            if c.is_whitespace() != space || (!space && special_at(text, i).is_some()) {
                break;
            }
            i += c.len_utf8();
        }
        out.push(Segment {
            kind: if space { SegKind::Space } else { SegKind::Word },
            range: start..i,
        });
    }
    out
}

/// Immutable token table.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    word_ids: HashMap<String, TokenId>,
}

impl Vocab {
    /// Ranks whitespace-delimited words of `corpus` by frequency (ties by
    /// lexicographic order) and keeps as many as fit in `size` ids.
    pub fn build<'a, I>(corpus: I, size: usize) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if size < RESERVED_IDS {
            return Err(TokenizerError::VocabTooSmall(size));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in corpus {
            for seg in segment(text) {
                if seg.kind == SegKind::Word {
                    *counts.entry(&text[seg.range]).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(size - RESERVED_IDS);
        Ok(Self::from_words(
            ranked.into_iter().map(|(w, _)| w.to_string()).collect(),
        ))
    }

    fn from_words(words: Vec<String>) -> Self {
        let word_ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), FIRST_WORD + i as TokenId))
            .collect();
        Self { words, word_ids }
    }

    pub fn len(&self) -> usize {
        RESERVED_IDS + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn word_id(&self, word: &str) -> Option<TokenId> {
        self.word_ids.get(word).copied()
    }

    pub fn is_special(id: TokenId) -> bool {
        id < BYTE_BASE
    }

    /// Printable form of a single token; byte tokens render as `<0xNN>`.
    pub fn token_str(&self, id: TokenId) -> Option<String> {
        match id {
            BOS_ID => Some(BOS.to_string()),
            EOS_ID => Some(EOS.to_string()),
            IMAGE_ID => Some(IMAGE.to_string()),
            i if i < FIRST_WORD => Some(format!("<0x{:02X}>", i - BYTE_BASE)),
            i => self.words.get((i - FIRST_WORD) as usize).cloned(),
        }
    }

    fn atomic_surface(&self, id: TokenId) -> Option<&str> {
        match id {
            BOS_ID => Some(BOS),
            EOS_ID => Some(EOS),
            IMAGE_ID => Some(IMAGE),
            i if i >= FIRST_WORD => self.words.get((i - FIRST_WORD) as usize).map(String::as_str),
            _ => None,
        }
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_with_spans(text)
            .into_iter()
            .map(|(id, _)| id)
            .collect()
    }

    /// Encodes and reports the byte range of `text` each token stands for.
    /// The glue token gets an empty range at the join point.
    pub fn encode_with_spans(&self, text: &str) -> Vec<(TokenId, Range<usize>)> {
        let mut out = Vec::new();
        let push_bytes = |out: &mut Vec<(TokenId, Range<usize>)>, range: Range<usize>| {
            for (k, b) in text.as_bytes()[range.clone()].iter().enumerate() {
                let at = range.start + k;
                out.push((BYTE_BASE + *b as TokenId, at..at + 1));
            }
        };
        let mut prev_atomic = false;
        let mut pending: Option<Range<usize>> = None;
        for seg in segment(text) {
            let atomic = match seg.kind {
                SegKind::Space => {
                    pending = Some(seg.range);
                    continue;
                }
                SegKind::Special(id) => Some(id),
                SegKind::Word => self.word_id(&text[seg.range.clone()]),
            };
            match pending.take() {
                Some(ws) if prev_atomic && atomic.is_some() && &text[ws.clone()] == " " => {}
                Some(ws) => push_bytes(&mut out, ws),
                None if prev_atomic && atomic.is_some() => out.push((
                    BYTE_BASE + GLUE_BYTE as TokenId,
                    seg.range.start..seg.range.start,
                )),
                None => {}
            }
            match atomic {
                Some(id) => out.push((id, seg.range)),
                None => push_bytes(&mut out, seg.range),
            }
            prev_atomic = atomic.is_some();
        }
        if let Some(ws) = pending {
            push_bytes(&mut out, ws);
        }
        out
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        let mut prev_atomic = false;
        for (index, &id) in ids.iter().enumerate() {
            if id as usize >= self.len() {
                return Err(TokenizerError::OutOfRange {
                    index,
                    id,
                    size: self.len(),
                });
            }
            match self.atomic_surface(id) {
                Some(s) => {
                    if prev_atomic {
                        bytes.push(b' ');
                    }
                    bytes.extend_from_slice(s.as_bytes());
                    prev_atomic = true;
                }
                None => {
                    let b = (id - BYTE_BASE) as u8;
                    if b != GLUE_BYTE {
                        bytes.push(b);
                    }
                    prev_atomic = false;
                }
            }
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{HEADER} {}", self.words.len()).unwrap();
        for (name, (surface, id)) in ["BOS", "EOS", "IMAGE"].iter().zip(SPECIALS) {
            writeln!(s, "special {name} {surface} {id}").unwrap();
        }
        writeln!(s, "bytes {BYTE_BASE} {FIRST_WORD}").unwrap();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let bad = |line: usize, msg: &str| TokenizerError::Format {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.split('\n');
        let head = lines.next().unwrap_or_default();
        let n: usize = head
            .strip_prefix(HEADER)
            .and_then(|r| r.trim().parse().ok())
            .ok_or_else(|| bad(1, "missing vocab header"))?;
        for (k, (name, (surface, id))) in ["BOS", "EOS", "IMAGE"].iter().zip(SPECIALS).enumerate() {
            let expected = format!("special {name} {surface} {id}");
            if lines.next() != Some(expected.as_str()) {
                return Err(bad(k + 2, &format!("expected `{expected}`")));
            }
        }
        if lines.next() != Some(format!("bytes {BYTE_BASE} {FIRST_WORD}").as_str()) {
            return Err(bad(5, "bad byte range line"));
        }
        let mut words = Vec::with_capacity(n);
        for k in 0..n {
            let w = lines
                .next()
                .ok_or_else(|| bad(6 + k, "truncated word list"))?;
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(bad(6 + k, "word entries must be non-empty and whitespace-free"));
            }
            words.push(w.to_string());
        }
        if lines.any(|l| !l.is_empty()) {
            return Err(bad(6 + n, "trailing content after word list"));
        }
        Ok(Self::from_words(words))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
