use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::{Path, PathBuf};

use super::{resolve_image_path, DataError, Kind, Result};
use crate::templates::DialogueRecord;

/// Streaming, order-preserving reader over a JSONL record file.
pub struct Ingest {
    lines: Lines<BufReader<File>>,
    base_dir: PathBuf,
    kind: Kind,
    line: usize,
}

/// Opens `path` for streaming validation. Image references are checked
/// relative to the file's directory but kept verbatim in the records.
pub fn ingest(path: &Path, kind: Kind) -> Result<Ingest> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    Ok(Ingest {
        lines: BufReader::new(file).lines(),
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        kind,
        line: 0,
    })
}

impl Ingest {
    fn parse(&self, text: &str) -> Result<DialogueRecord> {
        let line = self.line;
        let rec: DialogueRecord = serde_json::from_str(text).map_err(|e| DataError::Malformed {
            line,
            msg: e.to_string(),
        })?;
        rec.validate().map_err(|e| DataError::Invalid {
            line,
            msg: e.to_string(),
        })?;
        match (self.kind, &rec.image_ref) {
            (Kind::Language, Some(_)) => Err(DataError::Invalid {
                line,
                msg: "language-only source record carries an image".into(),
            }),
            (Kind::VisionLanguage, None) => Err(DataError::Invalid {
                line,
                msg: "vision-language record without an image".into(),
            }),
            (Kind::VisionLanguage, Some(img)) => {
                let resolved = resolve_image_path(&self.base_dir, img);
                if !resolved.exists() {
                    return Err(DataError::MissingImage(resolved));
                }
                Ok(rec)
            }
            (Kind::Language, None) => Ok(rec),
        }
    }
}

impl Iterator for Ingest {
    type Item = Result<DialogueRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => {
                    return Some(Err(DataError::Malformed {
                        line: self.line + 1,
                        msg: e.to_string(),
                    }))
                }
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            return Some(self.parse(&text));
        }
    }
}

/// Writes records as JSONL, one per line.
pub fn export<'a, I>(path: &Path, records: I) -> Result<()>
where
    I: IntoIterator<Item = &'a DialogueRecord>,
{
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec).expect("serializable record");
        w.write_all(b"\n").map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}
