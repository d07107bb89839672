//! The M2 gold-edit format.
//!
//! ```text
//! S Alice have a cat .
//! A 1 2|||R:VERB:SVA|||has|||REQUIRED|||-NONE-|||0
//! ```
//!
//! Each `S` line opens a record; the `A` lines that follow carry one edit each.
//! A `noop` edit with span `-1 -1` marks an annotator who made no changes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::Edit;

pub const NOOP: &str = "noop";
const NONE: &str = "-NONE-";
const SEP: &str = "|||";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum M2Error {
    #[error("line {line}: edit line before any sentence line")]
    EditBeforeSentence { line: usize },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: span {start}..{end} out of bounds for {len} tokens")]
    SpanOutOfBounds {
        line: usize,
        start: i64,
        end: i64,
        len: usize,
    },
    #[error("line {line}: edit overlaps another edit of annotator {annotator}")]
    Overlap { line: usize, annotator: u32 },
    #[error("line {line}: annotator {annotator} mixes noop with real edits")]
    NoopMixed { line: usize, annotator: u32 },
    #[error("unknown annotator {0}")]
    UnknownAnnotator(u32),
}

/// One gold edit. `correction` is already split into tokens; an empty list
/// is a deletion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct M2Edit {
    pub start: usize,
    pub end: usize,
    pub etype: String,
    pub correction: Vec<String>,
    pub required: String,
    pub comment: String,
    pub annotator: u32,
}

impl M2Edit {
    pub fn new(start: usize, end: usize, etype: &str, correction: &[&str], annotator: u32) -> Self {
        Self {
            start,
            end,
            etype: etype.to_owned(),
            correction: correction.iter().map(|s| (*s).to_owned()).collect(),
            required: "REQUIRED".to_owned(),
            comment: NONE.to_owned(),
            annotator,
        }
    }

    /// `None` when the edit changes nothing (empty span, empty correction).
    pub fn to_edit(&self) -> Option<Edit> {
        Edit::new(self.start, self.end, self.correction.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct M2Record {
    pub tokens: Vec<String>,
    /// Annotator id to that annotator's edits, sorted by span. An empty list
    /// is an explicit noop.
    pub annotators: BTreeMap<u32, Vec<M2Edit>>,
}

impl M2Record {
    pub fn new(tokens: Vec<String>) -> Self {
        Self {
            tokens,
            annotators: BTreeMap::new(),
        }
    }

    pub fn edits(&self, annotator: u32) -> Result<&[M2Edit], M2Error> {
        self.annotators
            .get(&annotator)
            .map(Vec::as_slice)
            .ok_or(M2Error::UnknownAnnotator(annotator))
    }

    /// Gold edits of one annotator as [`Edit`]s (no-change edits dropped).
    pub fn gold_edits(&self, annotator: u32) -> Result<Vec<Edit>, M2Error> {
        Ok(self.edits(annotator)?.iter().filter_map(M2Edit::to_edit).collect())
    }

    /// Annotator ids. A record without `A` lines has one implicit annotator
    /// (id 0) with no edits.
    pub fn annotator_ids(&self) -> Vec<u32> {
        if self.annotators.is_empty() {
            vec![0]
        } else {
            self.annotators.keys().copied().collect()
        }
    }
}

fn syntax(line: usize, message: impl Into<String>) -> M2Error {
    M2Error::Syntax {
        line,
        message: message.into(),
    }
}

struct PendingEdit {
    line: usize,
    noop: bool,
    edit: M2Edit,
}

pub fn parse_m2(text: &str) -> Result<Vec<M2Record>, M2Error> {
    let mut records = Vec::new();
    let mut current: Option<(M2Record, Vec<PendingEdit>)> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if let Some((rec, pending)) = current.take() {
                records.push(finish_record(rec, pending)?);
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("S ").or_else(|| (line == "S").then_some("")) {
            if let Some((rec, pending)) = current.take() {
                records.push(finish_record(rec, pending)?);
            }
            let tokens = rest.split(' ').filter(|t| !t.is_empty()).map(str::to_owned).collect();
            current = Some((M2Record::new(tokens), Vec::new()));
        } else if let Some(rest) = line.strip_prefix("A ") {
            let (rec, pending) = current
                .as_mut()
                .ok_or(M2Error::EditBeforeSentence { line: line_no })?;
            pending.push(parse_edit_line(rest, line_no, rec.tokens.len())?);
        } else {
            return Err(syntax(line_no, "expected a line starting with \"S \" or \"A \""));
        }
    }
    if let Some((rec, pending)) = current.take() {
        records.push(finish_record(rec, pending)?);
    }
    Ok(records)
}

fn parse_edit_line(rest: &str, line: usize, n_tokens: usize) -> Result<PendingEdit, M2Error> {
    let fields: Vec<&str> = rest.split(SEP).collect();
    if fields.len() != 6 {
        return Err(syntax(line, format!("expected 6 |||-separated fields, found {}", fields.len())));
    }
    let mut span = fields[0].split(' ');
    let (Some(s), Some(e), None) = (span.next(), span.next(), span.next()) else {
        return Err(syntax(line, "span must be two integers"));
    };
    let parse_int = |v: &str| v.parse::<i64>().map_err(|_| syntax(line, format!("not an integer: {v:?}")));
    let (start, end) = (parse_int(s)?, parse_int(e)?);
    let annotator = fields[5]
        .trim()
        .parse::<u32>()
        .map_err(|_| syntax(line, format!("not an annotator id: {:?}", fields[5])))?;
    let noop = fields[1] == NOOP || (start == -1 && end == -1);
    if noop {
        if start != -1 || end != -1 {
            return Err(M2Error::SpanOutOfBounds {
                line,
                start,
                end,
                len: n_tokens,
            });
        }
    } else if start < 0 || end < start || end as usize > n_tokens {
        return Err(M2Error::SpanOutOfBounds {
            line,
            start,
            end,
            len: n_tokens,
        });
    }
    let correction = match fields[2] {
        NONE | "" => Vec::new(),
        c => c.split(' ').filter(|t| !t.is_empty()).map(str::to_owned).collect(),
    };
    Ok(PendingEdit {
        line,
        noop,
        edit: M2Edit {
            start: start.max(0) as usize,
            end: end.max(0) as usize,
            etype: fields[1].to_owned(),
            correction,
            required: fields[3].to_owned(),
            comment: fields[4].to_owned(),
            annotator,
        },
    })
}

fn finish_record(mut record: M2Record, pending: Vec<PendingEdit>) -> Result<M2Record, M2Error> {
    let mut noops: BTreeMap<u32, usize> = BTreeMap::new();
    let mut lines: BTreeMap<u32, Vec<(usize, M2Edit)>> = BTreeMap::new();
    for p in pending {
        if p.noop {
            noops.insert(p.edit.annotator, p.line);
            lines.entry(p.edit.annotator).or_default();
        } else {
            lines.entry(p.edit.annotator).or_default().push((p.line, p.edit));
        }
    }
    for (annotator, mut edits) in lines {
        if let Some(&line) = noops.get(&annotator) {
            if let Some((other, _)) = edits.first() {
                return Err(M2Error::NoopMixed {
                    line: line.max(*other),
                    annotator,
                });
            }
        }
        edits.sort_by_key(|(_, e)| (e.start, e.end));
        for pair in edits.windows(2) {
            let (a, b) = (&pair[0].1, &pair[1].1);
            let insert_clash = a.start == a.end && b.start == b.end && a.start == b.start;
            if a.end > b.start || insert_clash {
                return Err(M2Error::Overlap {
                    line: pair[1].0,
                    annotator,
                });
            }
        }
        record
            .annotators
            .insert(annotator, edits.into_iter().map(|(_, e)| e).collect());
    }
    Ok(record)
}

/// Renders records as M2 text, one blank line after each record.
pub fn serialize_m2(records: &[M2Record]) -> String {
    let mut out = String::new();
    for record in records {
        out.push('S');
        for tok in &record.tokens {
            out.push(' ');
            out.push_str(tok);
        }
        out.push('\n');
        for (annotator, edits) in &record.annotators {
            if edits.is_empty() {
                let _ = writeln!(out, "A -1 -1{SEP}{NOOP}{SEP}{NONE}{SEP}REQUIRED{SEP}{NONE}{SEP}{annotator}");
            }
            for e in edits {
                let _ = writeln!(
                    out,
                    "A {} {}{SEP}{}{SEP}{}{SEP}{}{SEP}{}{SEP}{}",
                    e.start,
                    e.end,
                    e.etype,
                    e.correction.join(" "),
                    e.required,
                    e.comment,
                    annotator
                );
            }
        }
        out.push('\n');
    }
    out
}

/// The corrected token sequence for one annotator.
pub fn apply_edits(record: &M2Record, annotator: u32) -> Result<Vec<String>, M2Error> {
    let edits = record.edits(annotator)?;
    let mut tokens = record.tokens.clone();
    for e in edits.iter().rev() {
        tokens.splice(e.start..e.end, e.correction.iter().cloned());
    }
    Ok(tokens)
}
