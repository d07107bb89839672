//! Annotation tasks, the append-only label log and derived statistics.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use gecprep_core::align::{extract_token_edits, tokenize, OpKind};
use gecprep_core::corpus::{Corpus, SentencePair};
use gecprep_core::detok::DetokOutcome;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown task {0}")]
    UnknownTask(u64),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("unknown export policy {0:?}")]
    UnknownPolicy(String),
    #[error("label log {path}:{line}: {message}")]
    BadLog {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("label log {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Essential,
    Optional,
    Erroneous,
    NotAssessable,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Essential, Label::Optional, Label::Erroneous, Label::NotAssessable];

    /// Whether the LLM change is kept by the curated export.
    pub fn accepts_change(self) -> bool {
        matches!(self, Label::Essential | Label::Optional)
    }
}

impl FromStr for Label {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "essential" => Ok(Label::Essential),
            "optional" => Ok(Label::Optional),
            "erroneous" => Ok(Label::Erroneous),
            "not_assessable" | "notassessable" => Ok(Label::NotAssessable),
            _ => Err(StoreError::UnknownLabel(s.to_owned())),
        }
    }
}

/// One changed span between the original and the LLM-modified target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffSpan {
    pub op: OpKind,
    /// Token span in the original target.
    pub start: usize,
    pub end: usize,
    pub original: String,
    pub modified: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: u64,
    pub pair_id: String,
    pub source: String,
    pub original_target: String,
    pub modified_target: String,
    pub original_tokens: Vec<String>,
    pub diff_spans: Vec<DiffSpan>,
}

fn diff_spans(original: &[String], modified: &str) -> Vec<DiffSpan> {
    extract_token_edits(original, &tokenize(modified))
        .into_iter()
        .map(|e| DiffSpan {
            op: e.op,
            start: e.start,
            end: e.end,
            original: original[e.start..e.end].join(" "),
            modified: e.replacement.join(" "),
        })
        .collect()
}

/// Deterministic subsample of the modified outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sampling {
    pub k: usize,
    pub seed: u64,
}

/// One task per modified outcome (or a seeded sample of `k` of them), in
/// outcome order, numbered from 1.
pub fn create_tasks(outcomes: &[DetokOutcome], pairs: &[SentencePair], sampling: Option<Sampling>) -> Vec<AnnotationTask> {
    let by_id: HashMap<&str, &SentencePair> = pairs.iter().map(|p| (p.id.as_str(), p)).collect();
    let modified: Vec<(&DetokOutcome, &SentencePair)> = outcomes
        .iter()
        .filter(|o| o.modified)
        .filter_map(|o| Some((o, *by_id.get(o.pair_id.as_str())?)))
        .collect();
    let chosen: Vec<usize> = match sampling {
        Some(s) if s.k < modified.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            let mut idx = index::sample(&mut rng, modified.len(), s.k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..modified.len()).collect(),
    };
    chosen
        .into_iter()
        .enumerate()
        .map(|(n, i)| {
            let (outcome, pair) = modified[i];
            let original_tokens = tokenize(&pair.target);
            let modified_target = outcome.final_text().to_owned();
            AnnotationTask {
                task_id: n as u64 + 1,
                pair_id: pair.id.clone(),
                source: pair.source.clone(),
                original_target: pair.target.clone(),
                diff_spans: diff_spans(&original_tokens, &modified_target),
                original_tokens,
                modified_target,
            }
        })
        .collect()
}

/// One line of the label log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEvent {
    pub task_id: u64,
    pub pair_id: String,
    pub label: Label,
    pub annotator: String,
    pub ts: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationStats {
    pub n_tasks: usize,
    pub n_labeled: usize,
    pub pending: usize,
    pub corpus_size: usize,
    pub n_modified: usize,
    pub modified_ratio: f64,
    pub essential: f64,
    pub optional: f64,
    pub erroneous: f64,
    pub not_assessable: f64,
    pub wrong_annotations_lower_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportPolicy {
    /// Drop every modified pair.
    Filtered,
    /// Keep everything as detokenized.
    Full,
    /// Keep accepted LLM changes, revert the rest to the rule output.
    Curated,
}

impl FromStr for ExportPolicy {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "filtered" => Ok(ExportPolicy::Filtered),
            "full" => Ok(ExportPolicy::Full),
            "curated" => Ok(ExportPolicy::Curated),
            _ => Err(StoreError::UnknownPolicy(s.to_owned())),
        }
    }
}

/// Rebuilds the detokenized corpus from the original pairs and outcomes.
pub fn detokenized_corpus(original: &Corpus, outcomes: &[DetokOutcome]) -> Corpus {
    let by_id: HashMap<&str, &DetokOutcome> = outcomes.iter().map(|o| (o.pair_id.as_str(), o)).collect();
    let pairs = original
        .iter()
        .map(|p| {
            let mut out = p.clone();
            if let Some(o) = by_id.get(p.id.as_str()) {
                out.target = o.final_text().to_owned();
                out.tokenized = false;
                out.modified_by_detok = o.modified;
            }
            out
        })
        .collect();
    Corpus::new(original.name.clone(), pairs)
}

/// Applies an export policy to a detokenized corpus. Under `Curated`, a
/// modified pair without an accepting label is reverted to `rule_text`.
pub fn export_filtered(
    corpus: &Corpus,
    outcomes: &[DetokOutcome],
    labels: &HashMap<String, Label>,
    policy: ExportPolicy,
) -> Corpus {
    match policy {
        ExportPolicy::Full => corpus.clone(),
        ExportPolicy::Filtered => corpus.filtered(|p| !p.modified_by_detok),
        ExportPolicy::Curated => {
            let rule_text: HashMap<&str, &str> =
                outcomes.iter().map(|o| (o.pair_id.as_str(), o.rule_text.as_str())).collect();
            let pairs = corpus
                .iter()
                .map(|p| {
                    let mut out = p.clone();
                    let accepted = labels.get(&p.id).is_some_and(|l| l.accepts_change());
                    if p.modified_by_detok && !accepted {
                        if let Some(t) = rule_text.get(p.id.as_str()) {
                            out.target = (*t).to_owned();
                            out.modified_by_detok = false;
                        }
                    }
                    out
                })
                .collect();
            Corpus::new(corpus.name.clone(), pairs)
        }
    }
}

/// Final label per pair id from a label log, without the task list.
pub fn read_label_log(path: &Path) -> Result<HashMap<String, Label>, StoreError> {
    let io = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut labels = HashMap::new();
    for (i, line) in BufReader::new(File::open(path).map_err(io)?).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let event: LabelEvent = serde_json::from_str(&line).map_err(|e| StoreError::BadLog {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        labels.insert(event.pair_id, event.label);
    }
    Ok(labels)
}

struct Lease {
    annotator: String,
    expires: Instant,
}

/// Task queue with leases and a last-write-wins label log.
pub struct AnnotationStore {
    tasks: Vec<AnnotationTask>,
    labels: BTreeMap<u64, LabelEvent>,
    leases: HashMap<u64, Lease>,
    lease_timeout: Duration,
    corpus_size: usize,
    n_modified: usize,
    log: Option<(PathBuf, File)>,
}

impl AnnotationStore {
    /// `corpus_size` and `n_modified` describe the whole detokenized corpus,
    /// which may be larger than the sampled task list.
    pub fn new(tasks: Vec<AnnotationTask>, corpus_size: usize, n_modified: usize, lease_timeout: Duration) -> Self {
        Self {
            tasks,
            labels: BTreeMap::new(),
            leases: HashMap::new(),
            lease_timeout,
            corpus_size,
            n_modified,
            log: None,
        }
    }

    pub fn from_outcomes(
        outcomes: &[DetokOutcome],
        pairs: &[SentencePair],
        sampling: Option<Sampling>,
        lease_timeout: Duration,
    ) -> Self {
        let n_modified = outcomes.iter().filter(|o| o.modified).count();
        Self::new(create_tasks(outcomes, pairs, sampling), outcomes.len(), n_modified, lease_timeout)
    }

    /// Replays an existing label log (if any) and appends new labels to it.
    pub fn with_log(mut self, path: &Path) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let bad = |message: String| StoreError::BadLog {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message,
                };
                let event: LabelEvent = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
                let task = self.task(event.task_id).map_err(|e| bad(e.to_string()))?;
                if task.pair_id != event.pair_id {
                    return Err(bad(format!("task {} belongs to {}, not {}", event.task_id, task.pair_id, event.pair_id)));
                }
                self.labels.insert(event.task_id, event);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        self.log = Some((path.to_path_buf(), file));
        Ok(self)
    }

    pub fn tasks(&self) -> &[AnnotationTask] {
        &self.tasks
    }

    pub fn task(&self, task_id: u64) -> Result<&AnnotationTask, StoreError> {
        task_id
            .checked_sub(1)
            .and_then(|i| self.tasks.get(i as usize))
            .ok_or(StoreError::UnknownTask(task_id))
    }

    pub fn label_of(&self, task_id: u64) -> Option<Label> {
        self.labels.get(&task_id).map(|e| e.label)
    }

    /// Final label per pair id.
    pub fn labels_by_pair(&self) -> HashMap<String, Label> {
        self.labels.values().map(|e| (e.pair_id.clone(), e.label)).collect()
    }

    /// Lowest-id unlabeled task not leased to someone else. An annotator who
    /// already holds a live lease gets that task again.
    pub fn next_task(&mut self, annotator: &str, now: Instant) -> Option<&AnnotationTask> {
        self.leases.retain(|_, l| l.expires > now);
        let labels = &self.labels;
        let held = self
            .leases
            .iter()
            .filter(|(id, l)| l.annotator == annotator && !labels.contains_key(id))
            .map(|(id, _)| *id)
            .min();
        let id = match held {
            Some(id) => id,
            None => self
                .tasks
                .iter()
                .map(|t| t.task_id)
                .find(|id| !self.labels.contains_key(id) && !self.leases.contains_key(id))?,
        };
        self.leases.insert(
            id,
            Lease {
                annotator: annotator.to_owned(),
                expires: now + self.lease_timeout,
            },
        );
        self.task(id).ok()
    }

    pub fn submit_label(&mut self, task_id: u64, label: Label, annotator: &str, ts: String) -> Result<LabelEvent, StoreError> {
        let pair_id = self.task(task_id)?.pair_id.clone();
        let event = LabelEvent {
            task_id,
            pair_id,
            label,
            annotator: annotator.to_owned(),
            ts,
        };
        if let Some((path, file)) = &mut self.log {
            let mut line = serde_json::to_string(&event).expect("label event serializes");
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|source| StoreError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        self.leases.remove(&task_id);
        self.labels.insert(task_id, event.clone());
        Ok(event)
    }

    pub fn stats(&self) -> AnnotationStats {
        let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
        for e in self.labels.values() {
            *counts.entry(e.label).or_default() += 1;
        }
        let n_labeled = self.labels.len();
        let frac = |l: Label| {
            if n_labeled == 0 {
                0.0
            } else {
                counts.get(&l).copied().unwrap_or(0) as f64 / n_labeled as f64
            }
        };
        let modified_ratio = if self.corpus_size == 0 {
            0.0
        } else {
            self.n_modified as f64 / self.corpus_size as f64
        };
        let essential = frac(Label::Essential);
        AnnotationStats {
            n_tasks: self.tasks.len(),
            n_labeled,
            pending: self.tasks.len() - n_labeled,
            corpus_size: self.corpus_size,
            n_modified: self.n_modified,
            modified_ratio,
            essential,
            optional: frac(Label::Optional),
            erroneous: frac(Label::Erroneous),
            not_assessable: frac(Label::NotAssessable),
            wrong_annotations_lower_bound: modified_ratio * essential,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(id: &str, modified: bool, llm: &str) -> DetokOutcome {
        DetokOutcome {
            pair_id: id.into(),
            rule_text: format!("rule {id}"),
            llm_text: Some(llm.into()),
            modified,
        }
    }

    fn fixture(n: usize, modified: &[usize]) -> (Vec<DetokOutcome>, Vec<SentencePair>) {
        let pairs: Vec<_> = (0..n)
            .map(|i| SentencePair::new(i.to_string(), format!("src {i}"), format!("a cafe and and I drank {i} .")).tokenized(true))
            .collect();
        let outcomes = (0..n)
            .map(|i| {
                if modified.contains(&i) {
                    outcome(&i.to_string(), true, &format!("a cafe and I drank {i}."))
                } else {
                    outcome(&i.to_string(), false, &format!("a cafe and and I drank {i}."))
                }
            })
            .collect();
        (outcomes, pairs)
    }

    #[test]
    fn tasks_only_for_modified() {
        let (o, p) = fixture(5, &[1, 3]);
        let tasks = create_tasks(&o, &p, None);
        assert_eq!(tasks.len(), 2);
        assert_eq!((tasks[0].task_id, tasks[0].pair_id.as_str()), (1, "1"));
        assert_eq!(tasks[0].diff_spans.len(), 1);
        assert_eq!(tasks[0].diff_spans[0].op, OpKind::Unnecessary);
        assert_eq!(tasks[0].diff_spans[0].original, "and");
        assert!(create_tasks(&o, &p, Some(Sampling { k: 10, seed: 1 })).len() == 2);
        let (o, p) = fixture(3, &[]);
        assert!(create_tasks(&o, &p, None).is_empty());
    }

    #[test]
    fn seeded_sampling() {
        let modified: Vec<usize> = (0..1000).collect();
        let (o, p) = fixture(1000, &modified);
        let s = Some(Sampling { k: 284, seed: 42 });
        let a = create_tasks(&o, &p, s);
        assert_eq!(a.len(), 284);
        assert_eq!(a, create_tasks(&o, &p, s));
        assert_ne!(a, create_tasks(&o, &p, Some(Sampling { k: 284, seed: 43 })));
    }

    #[test]
    fn leases_and_labels() {
        let (o, p) = fixture(3, &[0, 1, 2]);
        let mut store = AnnotationStore::from_outcomes(&o, &p, None, Duration::from_secs(60));
        let now = Instant::now();
        assert_eq!(store.next_task("ann", now).unwrap().task_id, 1);
        assert_eq!(store.next_task("ann", now).unwrap().task_id, 1);
        assert_eq!(store.next_task("bob", now).unwrap().task_id, 2);
        store.submit_label(1, Label::Essential, "ann", "t".into()).unwrap();
        assert_eq!(store.next_task("ann", now).unwrap().task_id, 3);
        // bob's lease on 2 expires
        let later = now + Duration::from_secs(61);
        assert_eq!(store.next_task("cy", later).unwrap().task_id, 2);
        store.submit_label(2, Label::Essential, "cy", "t".into()).unwrap();
        store.submit_label(2, Label::Erroneous, "cy", "t".into()).unwrap();
        store.submit_label(3, Label::Optional, "ann", "t".into()).unwrap();
        assert_eq!(store.label_of(2), Some(Label::Erroneous));
        assert!(store.next_task("ann", later).is_none());
        assert!(matches!(store.submit_label(9, Label::Optional, "x", "t".into()), Err(StoreError::UnknownTask(9))));
        let s = store.stats();
        assert_eq!((s.n_labeled, s.pending), (3, 0));
        assert!((s.essential + s.optional + s.erroneous + s.not_assessable - 1.0).abs() < 1e-9);
    }

    #[test]
    fn all_optional_gives_zero_bound() {
        let (o, p) = fixture(4, &[0, 1]);
        let mut store = AnnotationStore::from_outcomes(&o, &p, None, Duration::from_secs(1));
        store.submit_label(1, Label::Optional, "a", "t".into()).unwrap();
        store.submit_label(2, Label::Optional, "a", "t".into()).unwrap();
        let s = store.stats();
        assert_eq!(s.modified_ratio, 0.5);
        assert_eq!((s.essential, s.wrong_annotations_lower_bound), (0.0, 0.0));
    }

    #[test]
    fn export_policies() {
        let (o, p) = fixture(4, &[1, 2]);
        let corpus = detokenized_corpus(&Corpus::new("c", p), &o);
        let mut labels = HashMap::new();
        labels.insert("1".to_owned(), Label::Essential);
        labels.insert("2".to_owned(), Label::Erroneous);
        assert_eq!(export_filtered(&corpus, &o, &labels, ExportPolicy::Full), corpus);
        let filtered = export_filtered(&corpus, &o, &labels, ExportPolicy::Filtered);
        assert_eq!(filtered.pairs.iter().map(|p| p.id.as_str()).collect::<Vec<_>>(), ["0", "3"]);
        let curated = export_filtered(&corpus, &o, &labels, ExportPolicy::Curated);
        assert_eq!(curated.len(), 4);
        assert_eq!(curated.pairs[1].target, "a cafe and I drank 1.");
        assert_eq!(curated.pairs[2].target, "rule 2");
        assert!("nope".parse::<ExportPolicy>().is_err());
    }

    #[test]
    fn label_parsing() {
        assert_eq!("not-assessable".parse::<Label>().unwrap(), Label::NotAssessable);
        assert_eq!("Essential".parse::<Label>().unwrap(), Label::Essential);
        assert!("great".parse::<Label>().is_err());
    }
}
