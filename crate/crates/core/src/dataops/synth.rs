use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{export, Kind, Result, SceneAttributes, SourceSpec, ToyImage};
use crate::templates::{caption_instruction_from, DialogueRecord, Round};

pub const COUNT_QUESTION: &str = "How many squares are there?";
pub const COLOR_QUESTION: &str = "What color are the squares?";

pub const IMAGE_SIDE: usize = 16;
const CELL: usize = 4;
const MAX_OBJECTS: usize = 6;

const COLORS: [(&str, [f32; 3]); 5] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.9, 0.9, 0.1]),
    ("white", [1.0, 1.0, 1.0]),
];
const BACKGROUNDS: [(&str, [f32; 3]); 2] = [("black", [0.0, 0.0, 0.0]), ("gray", [0.5, 0.5, 0.5])];

const WORDS: [&str; 16] = [
    "apple", "river", "stone", "cloud", "lamp", "forest", "garden", "window", "paper", "music",
    "bridge", "candle", "mirror", "ocean", "pencil", "violin",
];
const NUMBER_WORDS: [&str; 13] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthOutput {
    pub vl_path: PathBuf,
    pub lm_path: PathBuf,
    pub vl_records: Vec<DialogueRecord>,
    pub lm_records: Vec<DialogueRecord>,
}

/// Question families for generated vision-language rounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VlTask {
    Count,
    Color,
    Caption,
}

/// Squares of one color on a plain background, at most one per 4×4 cell.
pub fn synth_scene<R: Rng>(rng: &mut R) -> ToyImage {
    let mut img = ToyImage::new(IMAGE_SIDE, IMAGE_SIDE, 3);
    let (color, rgb) = COLORS[rng.gen_range(0..COLORS.len())];
    let (background, bg) = BACKGROUNDS[rng.gen_range(0..BACKGROUNDS.len())];
    let count = rng.gen_range(1..=MAX_OBJECTS);
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            img.pixel_mut(y, x).copy_from_slice(&bg);
        }
    }
    let cells_per_row = IMAGE_SIDE / CELL;
    for cell in sample(rng, cells_per_row * cells_per_row, count) {
        let (cy, cx) = ((cell / cells_per_row) * CELL, (cell % cells_per_row) * CELL);
        let (oy, ox) = (rng.gen_range(0..2), rng.gen_range(0..2));
        for y in cy + oy..cy + oy + 3 {
            for x in cx + ox..cx + ox + 3 {
                img.pixel_mut(y, x).copy_from_slice(&rgb);
            }
        }
    }
    img.attributes = SceneAttributes {
        object: "square".into(),
        count,
        color: color.into(),
        background: background.into(),
    };
    img
}

pub fn count_answer(count: usize) -> String {
    if count == 1 {
        "There is 1 square in the image.".into()
    } else {
        format!("There are {count} squares in the image.")
    }
}

impl VlTask {
    pub const ALL: [Self; 3] = [Self::Count, Self::Color, Self::Caption];
}

fn round_for<R: Rng>(task: VlTask, a: &SceneAttributes, rng: &mut R) -> Round {
    match task {
        VlTask::Count => Round::new(COUNT_QUESTION, count_answer(a.count)),
        VlTask::Color => Round::new(COLOR_QUESTION, format!("The squares are {}.", a.color)),
        VlTask::Caption => {
            let noun = if a.count == 1 { "square" } else { "squares" };
            Round::new(
                caption_instruction_from(rng),
                format!(
                    "The image shows {} {} {noun} on a {} background.",
                    NUMBER_WORDS[a.count], a.color, a.background
                ),
            )
        }
    }
}

/// Generates `n` scenes under `dir/images/` and one record per scene whose
/// image reference is relative to `dir`. Single-round records rotate through
/// counting, color and caption questions; with `max_rounds > 1` each record
/// holds a random number of distinct rounds.
pub fn synth_vision_records(
    dir: &Path,
    stem: &str,
    seed: u64,
    n: usize,
    tasks: &[VlTask],
    max_rounds: usize,
) -> Result<Vec<DialogueRecord>> {
    assert!(!tasks.is_empty() && max_rounds >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| super::DataError::io(&img_dir, e))?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let img = synth_scene(&mut rng);
        let rel = format!("images/{stem}_{i:05}.toyimg");
        img.save(&dir.join(&rel))?;
        let rounds = if max_rounds == 1 {
            vec![round_for(tasks[i % tasks.len()], &img.attributes, &mut rng)]
        } else {
            let k = rng.gen_range(1..=max_rounds.min(tasks.len()));
            let mut picked = tasks.to_vec();
            picked.shuffle(&mut rng);
            picked[..k]
                .iter()
                .map(|&t| round_for(t, &img.attributes, &mut rng))
                .collect()
        };
        out.push(DialogueRecord::vision(stem, &rel, rounds));
    }
    Ok(out)
}

/// Arithmetic, echo and list instructions with answers of three or more
/// words. Every answer is a function of its prompt.
pub fn synth_language_records(source: &str, seed: u64, n: usize) -> Vec<DialogueRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| match i % 3 {
            0 => {
                let (a, b) = (rng.gen_range(0..10), rng.gen_range(0..10));
                DialogueRecord::language(
                    source,
                    &format!("What is {a} plus {b}?"),
                    None,
                    &format!("{a} plus {b} equals {}.", a + b),
                )
            }
            1 => {
                let k = rng.gen_range(1..=3);
                let words: Vec<&str> = (0..k).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
                let text = words.join(" ");
                DialogueRecord::language(
                    source,
                    "Repeat the input.",
                    Some(&text),
                    &format!("The input was {text}."),
                )
            }
            _ => {
                // The answer follows from the prompt: k words onward from `start`.
                let k = rng.gen_range(2..=4);
                let start = rng.gen_range(0..WORDS.len());
                let words: Vec<&str> = (0..k).map(|j| WORDS[(start + j) % WORDS.len()]).collect();
                DialogueRecord::language(
                    source,
                    &format!("List {} things starting from {}.", NUMBER_WORDS[k], WORDS[start]),
                    None,
                    &format!("Here are {} things: {}.", NUMBER_WORDS[k], words.join(", ")),
                )
            }
        })
        .collect()
}

/// Writes `vl.jsonl`, `lm.jsonl` and the scene images into `dir`.
pub fn synth_corpus(dir: &Path, seed: u64, n_vl: usize, n_lm: usize) -> Result<SynthOutput> {
    assert!(n_vl >= 1 && n_lm >= 1, "counts must be at least 1");
    std::fs::create_dir_all(dir).map_err(|e| super::DataError::io(dir, e))?;
    let vl_records = synth_vision_records(dir, "synth_vl", seed, n_vl, &VlTask::ALL, 1)?;
    let lm_records = synth_language_records("synth_lm", seed.wrapping_add(1), n_lm);
    let vl_path = dir.join("vl.jsonl");
    let lm_path = dir.join("lm.jsonl");
    export(&vl_path, &vl_records)?;
    export(&lm_path, &lm_records)?;
    Ok(SynthOutput {
        vl_path,
        lm_path,
        vl_records,
        lm_records,
    })
}

/// Generates a stand-in for one mixture source at `base_dir/spec.path`.
/// Caption sources get caption rounds, VQA-style sources get attribute
/// questions, and conversation sources get up to three mixed rounds.
pub fn synth_source(base_dir: &Path, spec: &SourceSpec, seed: u64) -> Result<PathBuf> {
    let n = spec.synth.unwrap_or(0);
    let path = base_dir.join(&spec.path);
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    std::fs::create_dir_all(&dir).map_err(|e| super::DataError::io(&dir, e))?;
    let records = match spec.kind {
        Kind::Language => synth_language_records(&spec.name, seed, n),
        Kind::VisionLanguage => {
            let name = spec.name.to_ascii_lowercase();
            let (tasks, rounds): (&[VlTask], usize) = if name.contains("caption") || name.contains("coco") {
                (&[VlTask::Caption], 1)
            } else if name.contains("vqa") {
                (&[VlTask::Count, VlTask::Color], 1)
            } else {
                (&VlTask::ALL, 3)
            };
            synth_vision_records(&dir, &spec.name, seed, n, tasks, rounds)?
        }
    };
    export(&path, &records)?;
    Ok(path)
}
