//! Parallel GEC corpora: the [`SentencePair`] record every other module works
//! on, line-aligned text ingestion and JSONL persistence.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line count mismatch: source has {source_lines} lines, target has {target_lines}")]
    LineCountMismatch {
        source_lines: usize,
        target_lines: usize,
    },
    #[error("{path}:{line}: empty {side} line")]
    EmptyLine {
        path: PathBuf,
        line: usize,
        side: &'static str,
    },
    #[error("{path}:{line}: malformed record ({field}): {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },
    #[error("duplicate pair id {0:?}")]
    DuplicateId(String),
    #[error("corpus is empty")]
    Empty,
}

/// One (source, target) example with provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub id: String,
    pub source: String,
    pub target: String,
    /// Texts are in space-separated token form.
    #[serde(default)]
    pub tokenized: bool,
    /// The detokenizing LLM changed more than whitespace in the target.
    #[serde(default)]
    pub modified_by_detok: bool,
    #[serde(default)]
    pub origin: String,
    /// Keys this version does not know about, carried through round-trips.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl SentencePair {
    pub fn new(id: impl Into<String>, source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            source: source.into(),
            target: target.into(),
            tokenized: false,
            modified_by_detok: false,
            origin: String::new(),
            extra: Map::new(),
        }
    }

    pub fn with_origin(mut self, origin: impl Into<String>) -> Self {
        self.origin = origin.into();
        self
    }

    pub fn tokenized(mut self, tokenized: bool) -> Self {
        self.tokenized = tokenized;
        self
    }

    /// Source and target differ. Tokenized pairs compare token sequences,
    /// everything else compares the exact strings.
    pub fn is_erroneous(&self) -> bool {
        if self.tokenized {
            !self
                .source
                .split_whitespace()
                .eq(self.target.split_whitespace())
        } else {
            self.source != self.target
        }
    }
}

pub fn is_erroneous(pair: &SentencePair) -> bool {
    pair.is_erroneous()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub pairs: Vec<SentencePair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_examples: usize,
    pub n_erroneous: usize,
    pub erroneous_ratio: f64,
}

impl Corpus {
    pub fn new(name: impl Into<String>, pairs: Vec<SentencePair>) -> Self {
        Self {
            name: name.into(),
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SentencePair> {
        self.pairs.iter()
    }

    /// Builds a corpus with the same name from the pairs accepted by `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&SentencePair) -> bool) -> Corpus {
        Corpus {
            name: self.name.clone(),
            pairs: self.pairs.iter().filter(|p| keep(p)).cloned().collect(),
        }
    }

    pub fn check_unique_ids(&self) -> Result<(), CorpusError> {
        let mut seen = std::collections::HashSet::with_capacity(self.pairs.len());
        for pair in &self.pairs {
            if !seen.insert(pair.id.as_str()) {
                return Err(CorpusError::DuplicateId(pair.id.clone()));
            }
        }
        Ok(())
    }

    pub fn stats(&self) -> Result<CorpusStats, CorpusError> {
        compute_stats(self)
    }
}

pub fn compute_stats(corpus: &Corpus) -> Result<CorpusStats, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let n_examples = corpus.len();
    let n_erroneous = corpus.iter().filter(|p| p.is_erroneous()).count();
    Ok(CorpusStats {
        n_examples,
        n_erroneous,
        erroneous_ratio: n_erroneous as f64 / n_examples as f64,
    })
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Reads line-aligned source and target files. Pair `i` gets id `"{name}:{i}"`.
pub fn load_parallel(src_path: &Path, trg_path: &Path, name: &str) -> Result<Corpus, CorpusError> {
    let sources = read_lines(src_path)?;
    let targets = read_lines(trg_path)?;
    if sources.len() != targets.len() {
        return Err(CorpusError::LineCountMismatch {
            source_lines: sources.len(),
            target_lines: targets.len(),
        });
    }
    let mut pairs = Vec::with_capacity(sources.len());
    for (i, (source, target)) in sources.into_iter().zip(targets).enumerate() {
        if source.trim().is_empty() {
            return Err(CorpusError::EmptyLine {
                path: src_path.to_path_buf(),
                line: i + 1,
                side: "source",
            });
        }
        if target.trim().is_empty() {
            return Err(CorpusError::EmptyLine {
                path: trg_path.to_path_buf(),
                line: i + 1,
                side: "target",
            });
        }
        pairs.push(SentencePair::new(format!("{name}:{i}"), source, target).with_origin(name));
    }
    Ok(Corpus::new(name, pairs))
}

/// Writes sources and targets as two line-aligned files.
pub fn save_parallel(corpus: &Corpus, src_path: &Path, trg_path: &Path) -> Result<(), CorpusError> {
    let write = |path: &Path, pick: fn(&SentencePair) -> &str| -> Result<(), CorpusError> {
        let err = |source| CorpusError::Write {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(err)?);
        for pair in corpus.iter() {
            writeln!(out, "{}", pick(pair)).map_err(err)?;
        }
        out.flush().map_err(err)
    };
    write(src_path, |p| &p.source)?;
    write(trg_path, |p| &p.target)
}

pub fn save_jsonl(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let err = |source| CorpusError::Write {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(err)?);
    for pair in corpus.iter() {
        serde_json::to_writer(&mut out, pair).map_err(|e| err(e.into()))?;
        out.write_all(b"\n").map_err(err)?;
    }
    out.flush().map_err(err)
}

/// Loads a JSONL corpus. The corpus name is taken from the file stem.
pub fn load_jsonl(path: &Path) -> Result<Corpus, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(parse_record(&line).map_err(|(field, message)| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            field,
            message,
        })?);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let corpus = Corpus::new(name, pairs);
    corpus.check_unique_ids()?;
    Ok(corpus)
}

fn parse_record(line: &str) -> Result<SentencePair, (String, String)> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| ("<json>".to_owned(), e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ("<json>".to_owned(), "expected an object".to_owned()))?;
    for key in ["id", "source", "target"] {
        match obj.get(key) {
            Some(Value::String(s)) if key == "id" || !s.trim().is_empty() => {}
            Some(Value::String(_)) => return Err((key.to_owned(), "empty text".to_owned())),
            Some(_) => return Err((key.to_owned(), "expected a string".to_owned())),
            None => return Err((key.to_owned(), "missing".to_owned())),
        }
    }
    for key in ["tokenized", "modified_by_detok"] {
        if let Some(v) = obj.get(key) {
            if !v.is_boolean() {
                return Err((key.to_owned(), "expected a boolean".to_owned()));
            }
        }
    }
    if let Some(v) = obj.get("origin") {
        if !v.is_string() {
            return Err(("origin".to_owned(), "expected a string".to_owned()));
        }
    }
    serde_json::from_value(value).map_err(|e| ("<record>".to_owned(), e.to_string()))
}
