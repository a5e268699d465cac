use std::collections::BTreeMap;

use serde::Serialize;

use crate::templates::DialogueRecord;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SourceDrops {
    pub seen: usize,
    pub dropped: usize,
}

/// Per-source drop statistics, keyed by source tag.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FilterReport {
    pub by_source: BTreeMap<String, SourceDrops>,
}

impl FilterReport {
    pub fn total_dropped(&self) -> usize {
        self.by_source.values().map(|d| d.dropped).sum()
    }
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Drops every record whose responses are all shorter than
/// `min_response_words` words. A single long-enough response keeps the
/// whole record.
pub fn quality_filter<I>(records: I, min_response_words: usize) -> (Vec<DialogueRecord>, FilterReport)
where
    I: IntoIterator<Item = DialogueRecord>,
{
    assert!(min_response_words >= 1, "min_response_words must be at least 1");
    let mut report = FilterReport::default();
    let mut kept = Vec::new();
    for rec in records {
        let entry = report.by_source.entry(rec.source.clone()).or_default();
        entry.seen += 1;
        if rec
            .rounds
            .iter()
            .any(|r| word_count(&r.response) >= min_response_words)
        {
            kept.push(rec);
        } else {
            entry.dropped += 1;
        }
    }
    (kept, report)
}
