//! A small, deterministic context-rule corrector driven by training schedules.
//!
//! Erroneous pairs add weight to the rewrite rules extracted from them; correct
//! pairs subtract the stage learning rate from every rule whose left-hand side
//! occurs in the sentence. A rule fires when its weight exceeds the threshold,
//! so a final correct-only stage suppresses corrections in proportion to its
//! learning rate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{extract_token_edits, tokenize};
use crate::corpus::{Corpus, SentencePair};
use crate::m2::M2Record;
use crate::pipeline::{build_schedule, stage_data, PipelineError, Schedule, ScheduleConfig};
use crate::scoring::{score_corpus, ScoreError, ScoreReport};

pub const SENT_START: &str = "<s>";
pub const SENT_END: &str = "</s>";
pub const MAX_SPAN: usize = 3;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("pair {0} is not erroneous")]
    NotErroneous(String),
    #[error("learning rate must be finite and non-negative, got {0}")]
    InvalidLearningRate(f64),
    #[error("{eval} eval pairs but {gold} gold records")]
    LengthMismatch { eval: usize, gold: usize },
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path}:{line}: {message}")]
    Model {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("model io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Left context, matched source span and right context of a rule.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RuleLhs {
    pub left: String,
    pub span: Vec<String>,
    pub right: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub lhs: RuleLhs,
    pub rhs: Vec<String>,
    pub weight: f64,
}

fn context_at(tokens: &[String], idx: Option<usize>, edge: &str) -> String {
    idx.and_then(|i| tokens.get(i)).cloned().unwrap_or_else(|| edge.to_owned())
}

fn lhs_at(tokens: &[String], start: usize, len: usize) -> RuleLhs {
    RuleLhs {
        left: context_at(tokens, start.checked_sub(1), SENT_START),
        span: tokens[start..start + len].to_vec(),
        right: context_at(tokens, Some(start + len), SENT_END),
    }
}

/// One rule per extracted edit, with one token of context on each side. Edits
/// longer than [`MAX_SPAN`] tokens on either side are not turned into rules.
pub fn extract_rules(pair: &SentencePair) -> Result<Vec<Rule>, SurrogateError> {
    if !pair.is_erroneous() {
        return Err(SurrogateError::NotErroneous(pair.id.clone()));
    }
    let src = tokenize(&pair.source);
    let trg = tokenize(&pair.target);
    Ok(extract_token_edits(&src, &trg)
        .into_iter()
        .filter(|e| e.end - e.start <= MAX_SPAN && e.replacement.len() <= MAX_SPAN)
        .map(|e| Rule {
            lhs: lhs_at(&src, e.start, e.end - e.start),
            rhs: e.replacement,
            weight: 0.0,
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    /// Per left-hand side, `(rhs, weight)` sorted by weight descending then rhs.
    pub rules: BTreeMap<RuleLhs, Vec<(Vec<String>, f64)>>,
    pub threshold: f64,
}

enum Prepared {
    Erroneous(Vec<Rule>),
    Correct(Vec<String>),
}

impl SurrogateModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_threshold(threshold: f64) -> Self {
        Self {
            threshold,
            ..Self::default()
        }
    }

    pub fn rule_count(&self) -> usize {
        self.rules.values().map(Vec::len).sum()
    }

    pub fn weight(&self, lhs: &RuleLhs, rhs: &[String]) -> Option<f64> {
        self.rules.get(lhs)?.iter().find(|(r, _)| r == rhs).map(|(_, w)| *w)
    }

    pub fn iter_rules(&self) -> impl Iterator<Item = Rule> + '_ {
        self.rules.iter().flat_map(|(lhs, list)| {
            list.iter().map(move |(rhs, w)| Rule {
                lhs: lhs.clone(),
                rhs: rhs.clone(),
                weight: *w,
            })
        })
    }

    fn sort_entry(list: &mut [(Vec<String>, f64)]) {
        list.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    }

    fn add(&mut self, rule: &Rule, delta: f64) {
        let list = self.rules.entry(rule.lhs.clone()).or_default();
        match list.iter_mut().find(|(r, _)| *r == rule.rhs) {
            Some((_, w)) => *w += delta,
            None => list.push((rule.rhs.clone(), delta)),
        }
        Self::sort_entry(list);
    }

    /// Distinct left-hand sides of existing rules that match somewhere in
    /// `tokens`.
    fn matching_lhs(&self, tokens: &[String]) -> BTreeSet<RuleLhs> {
        let mut found = BTreeSet::new();
        for start in 0..=tokens.len() {
            for len in 0..=MAX_SPAN.min(tokens.len() - start) {
                let lhs = lhs_at(tokens, start, len);
                if self.rules.contains_key(&lhs) {
                    found.insert(lhs);
                }
            }
        }
        found
    }

    pub fn train_stage(&mut self, corpus: &Corpus, learning_rate: f64, epochs: u32) -> Result<(), SurrogateError> {
        if !(learning_rate.is_finite() && learning_rate >= 0.0) {
            return Err(SurrogateError::InvalidLearningRate(learning_rate));
        }
        if learning_rate == 0.0 {
            return Ok(());
        }
        let prepared: Vec<Prepared> = corpus
            .iter()
            .map(|p| match extract_rules(p) {
                Ok(rules) => Prepared::Erroneous(rules),
                Err(_) => Prepared::Correct(tokenize(&p.source)),
            })
            .collect();
        for _ in 0..epochs {
            for item in &prepared {
                match item {
                    Prepared::Erroneous(rules) => {
                        for rule in rules {
                            self.add(rule, learning_rate);
                        }
                    }
                    Prepared::Correct(tokens) => {
                        for lhs in self.matching_lhs(tokens) {
                            let list = self.rules.get_mut(&lhs).expect("matched lhs exists");
                            for (_, w) in list.iter_mut() {
                                *w -= learning_rate;
                            }
                            Self::sort_entry(list);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Best rule starting at `start`: highest weight, then longer span, then
    /// lexicographically smaller rhs.
    fn best_at(&self, tokens: &[String], start: usize) -> Option<(usize, &[String], f64)> {
        let mut best: Option<(usize, &[String], f64)> = None;
        for len in 0..=MAX_SPAN.min(tokens.len() - start) {
            let Some(list) = self.rules.get(&lhs_at(tokens, start, len)) else {
                continue;
            };
            let Some((rhs, w)) = list.first() else { continue };
            let better = match best {
                None => true,
                Some((blen, brhs, bw)) => {
                    *w > bw || (*w == bw && (len > blen || (len == blen && rhs.as_slice() < brhs)))
                }
            };
            if better {
                best = Some((len, rhs, *w));
            }
        }
        best
    }

    /// Single left-to-right pass; returns the corrected tokens and the number
    /// of rule applications.
    pub fn correct_tokens(&self, tokens: &[String]) -> (Vec<String>, usize) {
        let mut out = Vec::with_capacity(tokens.len());
        let mut applied = 0;
        let mut i = 0;
        while i <= tokens.len() {
            match self.best_at(tokens, i).filter(|(_, _, w)| *w > self.threshold) {
                Some((len, rhs, _)) => {
                    applied += 1;
                    out.extend(rhs.iter().cloned());
                    if len == 0 {
                        if i < tokens.len() {
                            out.push(tokens[i].clone());
                        }
                        i += 1;
                    } else {
                        i += len;
                    }
                }
                None => {
                    if i < tokens.len() {
                        out.push(tokens[i].clone());
                    }
                    i += 1;
                }
            }
        }
        (out, applied)
    }

    /// Corrects tokenized text; the output is space-separated tokens.
    pub fn correct(&self, text: &str) -> String {
        self.correct_tokens(&tokenize(text)).0.join(" ")
    }

    pub fn train_schedule(&mut self, schedule: &Schedule, corpora: &[Corpus]) -> Result<(), SurrogateError> {
        for stage in &schedule.stages {
            let data = stage_data(stage, corpora)?;
            self.train_stage(&data, stage.learning_rate, stage.epochs)?;
        }
        Ok(())
    }

    /// Writes one JSON rule per line, threshold on the first line.
    pub fn save_jsonl(&self, path: &Path) -> Result<(), SurrogateError> {
        let err = |source| SurrogateError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(err)?);
        writeln!(out, "{}", serde_json::json!({ "threshold": self.threshold })).map_err(err)?;
        for rule in self.iter_rules() {
            serde_json::to_writer(&mut out, &rule).map_err(|e| err(e.into()))?;
            out.write_all(b"\n").map_err(err)?;
        }
        out.flush().map_err(err)
    }

    pub fn load_jsonl(path: &Path) -> Result<Self, SurrogateError> {
        let file = File::open(path).map_err(|source| SurrogateError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |line: usize, message: String| SurrogateError::Model {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut model = SurrogateModel::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| SurrogateError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            if i == 0 {
                let head: serde_json::Value = serde_json::from_str(&line).map_err(|e| bad(1, e.to_string()))?;
                model.threshold = head["threshold"].as_f64().ok_or_else(|| bad(1, "missing threshold".into()))?;
                continue;
            }
            let rule: Rule = serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?;
            model.add(&rule, rule.weight);
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub score: ScoreReport,
    pub applied_edits: usize,
}

pub fn evaluate(model: &SurrogateModel, eval_pairs: &[SentencePair], gold: &[M2Record]) -> Result<EvalReport, SurrogateError> {
    if eval_pairs.len() != gold.len() {
        return Err(SurrogateError::LengthMismatch {
            eval: eval_pairs.len(),
            gold: gold.len(),
        });
    }
    let (edits, applied): (Vec<_>, Vec<_>) = eval_pairs
        .par_iter()
        .zip(gold.par_iter())
        .map(|(pair, g)| {
            let (hyp, applied) = model.correct_tokens(&tokenize(&pair.source));
            (extract_token_edits(&g.tokens, &hyp), applied)
        })
        .unzip();
    Ok(EvalReport {
        score: score_corpus(&edits, gold)?,
        applied_edits: applied.iter().sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lr: f64,
    pub precision: f64,
    pub recall: f64,
    pub f0_5: f64,
    pub applied_edits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Tab-separated table; scores as percentages with two decimals.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("lr\tprecision\trecall\tf0_5\tapplied_edits\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:e}\t{:.2}\t{:.2}\t{:.2}\t{}",
                r.lr,
                r.precision * 100.0,
                r.recall * 100.0,
                r.f0_5 * 100.0,
                r.applied_edits
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep table serializes")
    }
}

/// Trains one model per final-stage learning rate from the same starting
/// point and evaluates each. A learning rate of 0 drops the final stage.
pub fn run_sweep(
    config: &ScheduleConfig,
    grid: &[f64],
    corpora: &[Corpus],
    eval_pairs: &[SentencePair],
    gold: &[M2Record],
    threshold: f64,
) -> Result<SweepTable, SurrogateError> {
    let mut base = SurrogateModel::with_threshold(threshold);
    for stage in config.base_stages() {
        let data = stage_data(&stage, corpora)?;
        base.train_stage(&data, stage.learning_rate, stage.epochs)?;
    }
    let mut lrs = grid.to_vec();
    lrs.sort_by(f64::total_cmp);
    let rows = lrs
        .par_iter()
        .map(|&lr| {
            let mut model = base.clone();
            if lr != 0.0 {
                let schedule = build_schedule(&config.with_final_lr(lr))?;
                let last = schedule.stages.last().expect("three stages");
                let data = stage_data(last, corpora)?;
                model.train_stage(&data, last.learning_rate, last.epochs)?;
            }
            let report = evaluate(&model, eval_pairs, gold)?;
            Ok(SweepRow {
                lr,
                precision: report.score.precision,
                recall: report.score.recall,
                f0_5: report.score.f_half,
                applied_edits: report.applied_edits,
            })
        })
        .collect::<Result<Vec<_>, SurrogateError>>()?;
    Ok(SweepTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::m2::M2Edit;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn pair(id: &str, s: &str, t: &str) -> SentencePair {
        SentencePair::new(id, s, t)
    }

    fn have_lhs() -> RuleLhs {
        RuleLhs {
            left: "Alice".into(),
            span: toks("have"),
            right: "a".into(),
        }
    }

    #[test]
    fn extract_rules_examples() {
        let rules = extract_rules(&pair("0", "Alice have a cat.", "Alice has a cat.")).unwrap();
        assert_eq!(rules.len(), 1);
        assert_eq!(rules[0].lhs, have_lhs());
        assert_eq!(rules[0].rhs, toks("has"));
        assert_eq!(rules[0].weight, 0.0);
        assert!(matches!(
            extract_rules(&pair("1", "Same.", "Same.")),
            Err(SurrogateError::NotErroneous(_))
        ));
        let ins = extract_rules(&pair("2", "I went store.", "I went to the store.")).unwrap();
        assert_eq!(
            ins[0].lhs,
            RuleLhs {
                left: "went".into(),
                span: vec![],
                right: "store".into()
            }
        );
        let edge = extract_rules(&pair("3", "me too", "I too")).unwrap();
        assert_eq!(edge[0].lhs.left, SENT_START);
    }

    #[test]
    fn training_arithmetic() {
        let mut m = SurrogateModel::new();
        let err = Corpus::new("e", vec![pair("0", "Alice have a cat.", "Alice has a cat.")]);
        m.train_stage(&err, 1.0, 1).unwrap();
        assert_eq!(m.weight(&have_lhs(), &toks("has")), Some(1.0));
        let ok = Corpus::new("c", vec![pair("1", "Alice have a dog.", "Alice have a dog.")]);
        m.train_stage(&ok, 0.4, 1).unwrap();
        assert!((m.weight(&have_lhs(), &toks("has")).unwrap() - 0.6).abs() < 1e-12);
        let before = m.clone();
        m.train_stage(&ok, 0.0, 3).unwrap();
        assert_eq!(m, before);
        assert!(matches!(m.train_stage(&ok, -1.0, 1), Err(SurrogateError::InvalidLearningRate(_))));
    }

    #[test]
    fn correct_respects_threshold() {
        let mut m = SurrogateModel::new();
        assert_eq!(m.correct("Alice have a cat ."), "Alice have a cat .");
        m.add(
            &Rule {
                lhs: have_lhs(),
                rhs: toks("has"),
                weight: 0.0,
            },
            1.0,
        );
        assert_eq!(m.correct("Alice have a cat ."), "Alice has a cat .");
        let mut low = SurrogateModel::new();
        low.add(
            &Rule {
                lhs: have_lhs(),
                rhs: toks("has"),
                weight: 0.0,
            },
            -0.2,
        );
        assert_eq!(low.correct("Alice have a cat ."), "Alice have a cat .");
    }

    #[test]
    fn insertion_and_tie_breaks() {
        let mut m = SurrogateModel::new();
        let ins = Rule {
            lhs: RuleLhs {
                left: "went".into(),
                span: vec![],
                right: "store".into(),
            },
            rhs: toks("to the"),
            weight: 0.0,
        };
        m.add(&ins, 1.0);
        assert_eq!(m.correct("I went store ."), "I went to the store .");
        // Same weight at the same position: the longer span wins.
        let sub = Rule {
            lhs: RuleLhs {
                left: "went".into(),
                span: toks("store"),
                right: ".".into(),
            },
            rhs: toks("home"),
            weight: 0.0,
        };
        m.add(&sub, 1.0);
        assert_eq!(m.correct_tokens(&toks("I went store .")), (toks("I went home ."), 1));
    }

    #[test]
    fn evaluate_empty_and_perfect() {
        let train = Corpus::new(
            "t",
            vec![
                pair("0", "Alice have a cat .", "Alice has a cat ."),
                pair("1", "we goes home now", "we go home now"),
                pair("2", "I went store today", "I went to the store today"),
                pair("3", "she like red apples", "she likes red apples"),
                pair("4", "they was there yesterday", "they were there yesterday"),
            ],
        );
        let eval = train.pairs.clone();
        let gold: Vec<M2Record> = eval
            .iter()
            .map(|p| {
                let tokens = tokenize(&p.source);
                let mut rec = M2Record::new(tokens.clone());
                let edits = extract_token_edits(&tokens, &tokenize(&p.target))
                    .into_iter()
                    .map(|e| M2Edit {
                        start: e.start,
                        end: e.end,
                        etype: "X".into(),
                        correction: e.replacement,
                        required: "REQUIRED".into(),
                        comment: "-NONE-".into(),
                        annotator: 0,
                    })
                    .collect();
                rec.annotators.insert(0, edits);
                rec
            })
            .collect();
        let empty = evaluate(&SurrogateModel::new(), &eval, &gold).unwrap();
        assert_eq!((empty.score.recall, empty.applied_edits), (0.0, 0));
        let mut m = SurrogateModel::new();
        m.train_stage(&train, 1.0, 1).unwrap();
        let full = evaluate(&m, &eval, &gold).unwrap();
        assert_eq!(full.score.f_half, 1.0);
        assert_eq!(full.applied_edits, 5);
    }

    #[test]
    fn model_file_round_trip() {
        let mut m = SurrogateModel::with_threshold(0.25);
        let train = Corpus::new(
            "t",
            vec![pair("0", "Alice have a cat .", "Alice has a cat ."), pair("1", "I went store", "I went to the store")],
        );
        m.train_stage(&train, 0.5, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.jsonl");
        m.save_jsonl(&path).unwrap();
        assert_eq!(SurrogateModel::load_jsonl(&path).unwrap(), m);
    }
}
