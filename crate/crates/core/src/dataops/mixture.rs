use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ingest, quality_filter, DataError, Kind, Result};
use crate::templates::DialogueRecord;

/// Sources whose answers are one or two words; excluded wholesale when the
/// source-level exclusion list is switched on.
pub const DEFAULT_EXCLUDED_SOURCES: [&str; 5] = ["vqav2", "okvqa", "gqa", "clevr", "nlvr"];

/// How many records a source contributes: `"all"` or `{"count": N}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Take {
    All,
    Count(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub name: String,
    pub kind: Kind,
    pub path: PathBuf,
    pub take: Take,
    /// Records to generate for this source when preparing a synthetic corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<usize>,
}

fn default_min_words() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub sources: Vec<SourceSpec>,
    pub seed: u64,
    #[serde(default = "default_min_words")]
    pub min_response_words: usize,
    /// Source tags dropped entirely before any per-record filtering.
    #[serde(default)]
    pub exclude_sources: Vec<String>,
}

impl MixtureSpec {
    /// The instruction-tuning roster: two language-only sources and three
    /// vision-language sources taken whole, plus counted samples of 5000
    /// from the knowledge-VQA source and 512 each from captions and OCR-VQA.
    pub fn instruction_default(seed: u64) -> Self {
        let src = |name: &str, kind, take, synth| SourceSpec {
            name: name.into(),
            kind,
            path: PathBuf::from(format!("{name}.jsonl")),
            take,
            synth: Some(synth),
        };
        use Kind::*;
        Self {
            sources: vec![
                src("dolly", Language, Take::All, 150),
                src("alpaca_gpt4", Language, Take::All, 150),
                src("llava", VisionLanguage, Take::All, 100),
                src("minigpt4", VisionLanguage, Take::All, 100),
                src("aokvqa", VisionLanguage, Take::Count(5000), 6000),
                src("coco_caption", VisionLanguage, Take::Count(512), 600),
                src("ocr_vqa", VisionLanguage, Take::Count(512), 600),
            ],
            seed,
            min_response_words: 3,
            exclude_sources: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_response_words == 0 {
            return Err(DataError::Config("min_response_words must be at least 1".into()));
        }
        for s in &self.sources {
            if s.take == Take::Count(0) {
                return Err(DataError::Config(format!("source `{}`: take.count must be ≥ 1", s.name)));
            }
        }
        for kind in [Kind::Language, Kind::VisionLanguage] {
            if !self.sources.iter().any(|s| s.kind == kind) {
                return Err(DataError::Config(format!("no {kind:?} source in mixture")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SourceReport {
    pub name: String,
    pub kind: Kind,
    pub take: Take,
    pub excluded: bool,
    pub available: usize,
    pub dropped: usize,
    pub selected: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MixtureReport {
    pub seed: u64,
    pub sources: Vec<SourceReport>,
    pub vl_total: usize,
    pub lm_total: usize,
}

impl fmt::Display for MixtureReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mixture (seed {})", self.seed)?;
        writeln!(
            f,
            "{:<16} {:<16} {:>10} {:>10} {:>10} {:>10}",
            "source", "kind", "take", "available", "dropped", "selected"
        )?;
        for s in &self.sources {
            let take = match s.take {
                _ if s.excluded => "excluded".to_string(),
                Take::All => "all".to_string(),
                Take::Count(n) => n.to_string(),
            };
            let kind = match s.kind {
                Kind::Language => "language",
                Kind::VisionLanguage => "vision-language",
            };
            writeln!(
                f,
                "{:<16} {:<16} {:>10} {:>10} {:>10} {:>10}",
                s.name, kind, take, s.available, s.dropped, s.selected
            )?;
        }
        write!(f, "vision-language: {}  language: {}", self.vl_total, self.lm_total)
    }
}

#[derive(Clone, Debug)]
pub struct Mixture {
    /// Image references here are resolved against each source file's
    /// directory, so records can be used from anywhere.
    pub vl: Vec<DialogueRecord>,
    pub lm: Vec<DialogueRecord>,
    pub report: MixtureReport,
}

/// Rewrites relative image references to paths under `base_dir`.
pub fn resolve_images(records: &mut [DialogueRecord], base_dir: &Path) {
    for rec in records {
        if let Some(img) = &rec.image_ref {
            rec.image_ref = Some(resolve_image_path(base_dir, img).to_string_lossy().into_owned());
        }
    }
}

pub fn resolve_image_path(base_dir: &Path, image_ref: &str) -> PathBuf {
    let p = Path::new(image_ref);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

fn source_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Ingests, filters and samples every source. Relative source paths are
/// taken relative to `base_dir`.
pub fn build_mixture(spec: &MixtureSpec, base_dir: &Path) -> Result<Mixture> {
    spec.validate()?;
    let mut report = MixtureReport {
        seed: spec.seed,
        ..Default::default()
    };
    let (mut vl, mut lm) = (Vec::new(), Vec::new());
    for (index, src) in spec.sources.iter().enumerate() {
        let excluded = spec.exclude_sources.iter().any(|e| *e == src.name);
        let mut entry = SourceReport {
            name: src.name.clone(),
            kind: src.kind,
            take: src.take,
            excluded,
            available: 0,
            dropped: 0,
            selected: 0,
        };
        if excluded {
            report.sources.push(entry);
            continue;
        }
        let path = base_dir.join(&src.path);
        let records = ingest(&path, src.kind)?
            .map(|r| r.map_err(|e| with_path(e, &path)))
            .collect::<Result<Vec<_>>>()?;
        entry.available = records.len();
        let (kept, drops) = quality_filter(records, spec.min_response_words);
        entry.dropped = drops.total_dropped();
        let mut chosen = match src.take {
            Take::All => kept,
            Take::Count(n) => {
                if n > kept.len() {
                    log::warn!(
                        "source `{}`: requested {n} records but only {} remain after filtering",
                        src.name,
                        kept.len()
                    );
                }
                let k = n.min(kept.len());
                let mut rng = ChaCha8Rng::seed_from_u64(source_seed(spec.seed, index));
                let mut picks = rand::seq::index::sample(&mut rng, kept.len(), k).into_vec();
                picks.sort_unstable();
                let mut kept: Vec<Option<DialogueRecord>> = kept.into_iter().map(Some).collect();
                picks.into_iter().map(|i| kept[i].take().unwrap()).collect()
            }
        };
        entry.selected = chosen.len();
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for rec in &mut chosen {
            if rec.source.is_empty() {
                rec.source = src.name.clone();
            }
        }
        resolve_images(&mut chosen, &dir);
        match src.kind {
            Kind::Language => lm.extend(chosen),
            Kind::VisionLanguage => vl.extend(chosen),
        }
        report.sources.push(entry);
    }
    report.vl_total = vl.len();
    report.lm_total = lm.len();
    if vl.is_empty() || lm.is_empty() {
        return Err(DataError::Config(format!(
            "mixture has {} vision-language and {} language records; both must be non-empty",
            vl.len(),
            lm.len()
        )));
    }
    Ok(Mixture { vl, lm, report })
}

fn with_path(e: DataError, path: &Path) -> DataError {
    match e {
        DataError::Malformed { line, msg } => DataError::Malformed {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        DataError::Invalid { line, msg } => DataError::Invalid {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::dataops::export;
    use crate::templates::Round;

    fn lm_file(dir: &Path, name: &str, n: usize) -> PathBuf {
        let recs: Vec<_> = (0..n)
            .map(|i| DialogueRecord::language(name, &format!("task {i}"), None, &format!("answer number {i}")))
            .collect();
        let p = dir.join(format!("{name}.jsonl"));
        export(&p, &recs).unwrap();
        p
    }

    fn vl_file(dir: &Path, name: &str, n: usize) -> PathBuf {
        std::fs::write(dir.join("img.toyimg"), "TOYIMG v1 1 1 1\n0").unwrap();
        let recs: Vec<_> = (0..n)
            .map(|i| DialogueRecord::vision(name, "img.toyimg", vec![Round::new("q", format!("it is {i}"))]))
            .collect();
        let p = dir.join(format!("{name}.jsonl"));
        export(&p, &recs).unwrap();
        p
    }

    fn spec(sources: Vec<(&str, Kind, Take)>, seed: u64) -> MixtureSpec {
        MixtureSpec {
            sources: sources
                .into_iter()
                .map(|(n, kind, take)| SourceSpec {
                    name: n.into(),
                    kind,
                    path: format!("{n}.jsonl").into(),
                    take,
                    synth: None,
                })
                .collect(),
            seed,
            min_response_words: 3,
            exclude_sources: vec![],
        }
    }

    #[test]
    fn take_serializes_as_all_or_count() {
        assert_eq!(serde_json::to_string(&Take::All).unwrap(), "\"all\"");
        assert_eq!(serde_json::to_string(&Take::Count(5)).unwrap(), r#"{"count":5}"#);
        let t: Take = serde_json::from_str(r#"{"count":512}"#).unwrap();
        assert_eq!(t, Take::Count(512));
    }

    #[test]
    fn counted_sampling_exact_distinct_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        lm_file(dir.path(), "lm", 3);
        vl_file(dir.path(), "big", 10000);
        let s = spec(
            vec![("lm", Kind::Language, Take::All), ("big", Kind::VisionLanguage, Take::Count(5000))],
            7,
        );
        let a = build_mixture(&s, dir.path()).unwrap();
        assert_eq!(a.vl.len(), 5000);
        let distinct: HashSet<_> = a.vl.iter().map(|r| r.rounds[0].response.clone()).collect();
        assert_eq!(distinct.len(), 5000);
        assert_eq!(a.lm.len(), 3);
        let b = build_mixture(&s, dir.path()).unwrap();
        assert_eq!(a.vl, b.vl);
        let c = build_mixture(&MixtureSpec { seed: 8, ..s }, dir.path()).unwrap();
        assert_ne!(a.vl, c.vl);
        assert!(Path::new(a.vl[0].image_ref.as_ref().unwrap()).starts_with(dir.path()));
    }

    #[test]
    fn take_equal_to_size_returns_whole_source_and_overdraw_clamps() {
        let dir = tempfile::tempdir().unwrap();
        lm_file(dir.path(), "lm", 2);
        vl_file(dir.path(), "v", 512);
        let s = spec(
            vec![("lm", Kind::Language, Take::Count(5)), ("v", Kind::VisionLanguage, Take::Count(512))],
            1,
        );
        let m = build_mixture(&s, dir.path()).unwrap();
        assert_eq!(m.vl.len(), 512);
        assert_eq!(m.lm.len(), 2);
        for (i, r) in m.vl.iter().enumerate() {
            assert_eq!(r.rounds[0].response, format!("it is {i}"));
        }
    }

    #[test]
    fn empty_side_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        lm_file(dir.path(), "lm", 2);
        let p = dir.path().join("short.jsonl");
        std::fs::write(dir.path().join("img.toyimg"), "TOYIMG v1 1 1 1\n0").unwrap();
        export(&p, &[DialogueRecord::vision("short", "img.toyimg", vec![Round::new("q", "yes")])]).unwrap();
        let s = spec(
            vec![("lm", Kind::Language, Take::All), ("short", Kind::VisionLanguage, Take::All)],
            1,
        );
        assert!(matches!(build_mixture(&s, dir.path()), Err(DataError::Config(_))));
        let mut s2 = s.clone();
        s2.sources.truncate(1);
        assert!(matches!(build_mixture(&s2, dir.path()), Err(DataError::Config(_))));
    }

    #[test]
    fn excluded_sources_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        lm_file(dir.path(), "lm", 2);
        vl_file(dir.path(), "v", 4);
        let mut s = spec(
            vec![
                ("lm", Kind::Language, Take::All),
                ("v", Kind::VisionLanguage, Take::All),
                ("gqa", Kind::VisionLanguage, Take::All),
            ],
            1,
        );
        s.exclude_sources = DEFAULT_EXCLUDED_SOURCES.iter().map(|s| s.to_string()).collect();
        let m = build_mixture(&s, dir.path()).unwrap();
        assert!(m.report.sources[2].excluded);
        assert_eq!(m.vl.len(), 4);
        assert!(m.report.to_string().contains("excluded"));
    }
}
