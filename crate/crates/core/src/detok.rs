//! Detokenization of tokenized GEC corpora.
//!
//! Targets are first joined by a rule-based detokenizer. An optional LLM pass
//! then fixes the spacing using the detokenized source as a hint; whatever it
//! returns is checked against the original tokens, and any change beyond
//! whitespace marks the pair as modified.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{operation_stats, OpStats};
use crate::corpus::{Corpus, CorpusError, SentencePair};
use crate::llm::{LlmClient, LlmError};

const PROMPT_HEAD: &str = "You will receive two texts: source text and corrected text. Corrected text may not have proper spaces. Your task is to remove/add proper spaces to the corrected text. Do not write any comments, just write corrected text with proper spaces.";
const SOURCE_LABEL: &str = "\n\nSource text: ";
const TARGET_LABEL: &str = "\n\nCorrected text: ";
const PROMPT_TAIL: &str = "\n\nOnly change spaces, you must not change punctuation.";

#[derive(Debug, Error)]
pub enum DetokError {
    #[error("pair {0} is not tokenized")]
    NotTokenized(String),
    #[error("pair {pair_id}: {source}")]
    Llm {
        pair_id: String,
        #[source]
        source: LlmError,
    },
}

const CLOSING: &[char] = &['.', ',', '!', '?', ';', ':', '%', ')', ']', '}'];
const OPENING: &[&str] = &["(", "[", "{"];
const CURRENCY: &[&str] = &["$", "£", "€", "¥"];
const CONTRACTIONS: &[&str] = &["n't", "'s", "'re", "'ve", "'ll", "'d", "'m"];

fn attaches_left(token: &str) -> bool {
    (!token.is_empty() && token.chars().all(|c| CLOSING.contains(&c)))
        || CONTRACTIONS.contains(&token.to_lowercase().as_str())
}

fn attaches_right(token: &str) -> bool {
    OPENING.contains(&token) || CURRENCY.contains(&token)
}

/// Joins tokens into naturally spaced text. Only spaces are decided here; the
/// non-whitespace content is never altered.
pub fn rule_detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    let mut quotes = 0usize;
    for tok in tokens {
        let tok = tok.as_ref();
        let mut space = !glue_next;
        glue_next = false;
        if tok == "\"" {
            quotes += 1;
            if quotes % 2 == 1 {
                glue_next = true;
            } else {
                space = false;
            }
        } else if attaches_left(tok) {
            space = false;
        }
        if attaches_right(tok) {
            glue_next = true;
        }
        if space {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

pub fn strip_whitespace(text: &str) -> String {
    text.chars().filter(|c| !c.is_whitespace()).collect()
}

/// The two texts differ at most in whitespace.
pub fn spaces_only_diff(a: &str, b: &str) -> bool {
    a.chars()
        .filter(|c| !c.is_whitespace())
        .eq(b.chars().filter(|c| !c.is_whitespace()))
}

/// Renders the detokenization prompt with both texts substituted verbatim.
pub fn detok_prompt(source_detok: &str, target: &str) -> String {
    format!("{PROMPT_HEAD}{SOURCE_LABEL}{source_detok}{TARGET_LABEL}{target}{PROMPT_TAIL}")
}

/// The target text embedded in a prompt built by [`detok_prompt`].
pub fn prompt_target(prompt: &str) -> Option<&str> {
    let start = prompt.rfind(TARGET_LABEL)? + TARGET_LABEL.len();
    let rest = &prompt[start..];
    Some(rest.strip_suffix(PROMPT_TAIL).unwrap_or(rest))
}

/// The detokenized source embedded in a prompt built by [`detok_prompt`].
pub fn prompt_source(prompt: &str) -> Option<&str> {
    let start = prompt.find(SOURCE_LABEL)? + SOURCE_LABEL.len();
    let end = prompt.rfind(TARGET_LABEL)?;
    prompt.get(start..end)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub retries: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            backoff: Duration::from_millis(500),
        }
    }
}

pub fn llm_detokenize(
    client: &dyn LlmClient,
    retry: &RetryPolicy,
    source_detok: &str,
    target_tokenized: &str,
) -> Result<String, LlmError> {
    let prompt = detok_prompt(source_detok, target_tokenized);
    let mut attempt = 0u32;
    loop {
        match client.complete(&prompt) {
            Ok(text) => {
                let text = text.trim();
                if text.is_empty() {
                    return Err(LlmError::EmptyCompletion);
                }
                return Ok(text.to_owned());
            }
            Err(e) if e.is_retryable() && attempt < retry.retries => {
                std::thread::sleep(retry.backoff * 2u32.saturating_pow(attempt));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// LLM pass configuration for [`detokenize_corpus`].
pub struct LlmPass<'a> {
    pub client: &'a dyn LlmClient,
    pub retry: RetryPolicy,
    pub concurrency: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetokOutcome {
    pub pair_id: String,
    pub rule_text: String,
    pub llm_text: Option<String>,
    pub modified: bool,
}

impl DetokOutcome {
    pub fn final_text(&self) -> &str {
        self.llm_text.as_deref().unwrap_or(&self.rule_text)
    }
}

pub fn save_outcomes(outcomes: &[DetokOutcome], path: &Path) -> Result<(), CorpusError> {
    let err = |source| CorpusError::Write {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(err)?);
    for o in outcomes {
        serde_json::to_writer(&mut out, o).map_err(|e| err(e.into()))?;
        out.write_all(b"\n").map_err(err)?;
    }
    out.flush().map_err(err)
}

pub fn load_outcomes(path: &Path) -> Result<Vec<DetokOutcome>, CorpusError> {
    let err = |source| CorpusError::Read {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(err)?;
    let mut outcomes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(err)?;
        if line.trim().is_empty() {
            continue;
        }
        outcomes.push(serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            field: "<json>".to_owned(),
            message: e.to_string(),
        })?);
    }
    Ok(outcomes)
}

/// Detokenizes every target. Sources are kept as they are: tokenized corpora
/// are expected to carry raw source text next to tokenized targets.
pub fn detokenize_corpus(
    corpus: &Corpus,
    llm: Option<&LlmPass<'_>>,
) -> Result<(Corpus, Vec<DetokOutcome>), DetokError> {
    if let Some(p) = corpus.iter().find(|p| !p.tokenized) {
        return Err(DetokError::NotTokenized(p.id.clone()));
    }
    let rule_texts: Vec<String> = corpus
        .iter()
        .map(|p| rule_detokenize(&p.target.split_whitespace().collect::<Vec<_>>()))
        .collect();
    let llm_texts: Vec<Option<String>> = match llm {
        None => vec![None; corpus.len()],
        Some(pass) => run_llm(corpus, &rule_texts, pass)?.into_iter().map(Some).collect(),
    };
    let mut pairs = Vec::with_capacity(corpus.len());
    let mut outcomes = Vec::with_capacity(corpus.len());
    for ((pair, rule_text), llm_text) in corpus.iter().zip(rule_texts).zip(llm_texts) {
        let outcome = DetokOutcome {
            pair_id: pair.id.clone(),
            modified: !spaces_only_diff(&pair.target, llm_text.as_deref().unwrap_or(&rule_text)),
            rule_text,
            llm_text,
        };
        let mut out = pair.clone();
        out.target = outcome.final_text().to_owned();
        out.tokenized = false;
        out.modified_by_detok = outcome.modified;
        pairs.push(out);
        outcomes.push(outcome);
    }
    Ok((Corpus::new(corpus.name.clone(), pairs), outcomes))
}

fn run_llm(corpus: &Corpus, rule_texts: &[String], pass: &LlmPass<'_>) -> Result<Vec<String>, DetokError> {
    let n = corpus.len();
    let results: Mutex<Vec<Option<Result<String, LlmError>>>> = Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let failed = std::sync::atomic::AtomicBool::new(false);
    let workers = pass.concurrency.clamp(1, n.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if failed.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let res = llm_detokenize(pass.client, &pass.retry, &corpus.pairs[i].source, &rule_texts[i]);
                if res.is_err() {
                    failed.store(true, Ordering::Relaxed);
                }
                results.lock().expect("results lock")[i] = Some(res);
            });
        }
    });
    let results = results.into_inner().expect("results lock");
    let mut out = Vec::with_capacity(n);
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Some(Ok(text)) => out.push(text),
            Some(Err(source)) => {
                return Err(DetokError::Llm {
                    pair_id: corpus.pairs[i].id.clone(),
                    source,
                })
            }
            // Skipped after an earlier failure; that failure is reported first.
            None => continue,
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetokReport {
    pub n_total: usize,
    pub n_modified: usize,
    pub modified_ratio: f64,
    pub op_stats: Option<OpStats>,
}

/// Counts modified outcomes and classifies what the LLM changed, comparing
/// each original tokenized target with its LLM text.
pub fn build_report(outcomes: &[DetokOutcome], pairs: &[SentencePair]) -> DetokReport {
    let by_id: HashMap<&str, &SentencePair> = pairs.iter().map(|p| (p.id.as_str(), p)).collect();
    let modified: Vec<(&str, &str)> = outcomes
        .iter()
        .filter(|o| o.modified)
        .filter_map(|o| {
            let pair = by_id.get(o.pair_id.as_str())?;
            Some((pair.target.as_str(), o.final_text()))
        })
        .collect();
    let n_total = outcomes.len();
    let n_modified = outcomes.iter().filter(|o| o.modified).count();
    DetokReport {
        n_total,
        n_modified,
        modified_ratio: if n_total == 0 {
            0.0
        } else {
            n_modified as f64 / n_total as f64
        },
        op_stats: operation_stats(&modified).ok(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split(' ').collect()
    }

    #[test]
    fn rule_examples() {
        assert_eq!(rule_detokenize(&toks("Alice has a cat .")), "Alice has a cat.");
        assert_eq!(rule_detokenize::<&str>(&[]), "");
        assert_eq!(rule_detokenize(&["He", "said", "\"", "hi", ",", "\"", "."]), "He said \"hi,\".");
        assert_eq!(rule_detokenize(&toks("I do n't know ( yet ) , it costs $ 5 or 10 %")), "I don't know (yet), it costs $5 or 10%");
        assert_eq!(rule_detokenize(&toks("We 're here ... right ?")), "We're here... right?");
        assert_eq!(
            rule_detokenize(&toks("\" a \" and \" b \"")),
            "\"a\" and \"b\""
        );
    }

    #[test]
    fn spaces_only() {
        assert!(spaces_only_diff("a b c.", "ab c ."));
        assert!(!spaces_only_diff("and and I drank", "and I drank"));
        assert!(spaces_only_diff("", " "));
        assert!(!spaces_only_diff("a,", "a"));
    }

    #[test]
    fn prompt_is_verbatim() {
        let p = detok_prompt("I went to a cafe.", "I went to a cafe .");
        assert!(p.starts_with("You will receive two texts: source text and corrected text."));
        assert!(p.contains("remove/add proper spaces to the corrected text"));
        assert!(p.contains("\n\nSource text: I went to a cafe.\n\nCorrected text: I went to a cafe .\n\n"));
        assert!(p.ends_with("Only change spaces, you must not change punctuation."));
        assert_eq!(prompt_target(&p), Some("I went to a cafe ."));
        assert_eq!(prompt_source(&p), Some("I went to a cafe."));
    }

    fn tokenized_pair(id: &str, src: &str, trg: &str) -> SentencePair {
        SentencePair::new(id, src, trg).tokenized(true)
    }

    #[test]
    fn no_client_is_rule_only() {
        let c = Corpus::new(
            "t",
            vec![
                tokenized_pair("0", "Alice have a cat.", "Alice has a cat ."),
                tokenized_pair("1", "I do not know", "I do n't know ."),
            ],
        );
        let (out, outcomes) = detokenize_corpus(&c, None).unwrap();
        assert!(outcomes.iter().all(|o| !o.modified && o.llm_text.is_none()));
        assert_eq!(out.pairs[0].target, "Alice has a cat.");
        assert_eq!(out.pairs[1].target, "I don't know.");
        assert!(out.pairs.iter().all(|p| !p.tokenized && !p.modified_by_detok));
        let raw = Corpus::new("r", vec![SentencePair::new("0", "a", "b")]);
        assert!(matches!(detokenize_corpus(&raw, None), Err(DetokError::NotTokenized(_))));
    }

    #[test]
    fn doubled_and_is_flagged() {
        let stub = |prompt: &str| -> Result<String, LlmError> {
            let t = prompt_target(prompt).unwrap();
            Ok(t.replace("and and", "and"))
        };
        let c = Corpus::new(
            "t",
            vec![tokenized_pair(
                "0",
                "I went to a cafe and and I drank a drink.",
                "I went to a cafe and and I drank a drink .",
            )],
        );
        let pass = LlmPass {
            client: &stub,
            retry: RetryPolicy::default(),
            concurrency: 1,
        };
        let (out, outcomes) = detokenize_corpus(&c, Some(&pass)).unwrap();
        assert!(outcomes[0].modified);
        assert_eq!(out.pairs[0].target, "I went to a cafe and I drank a drink.");
        assert!(out.pairs[0].modified_by_detok);
        let report = build_report(&outcomes, &c.pairs);
        assert_eq!(report.n_modified, 1);
        assert_eq!(report.op_stats.unwrap().unnecessary, 1.0);
    }

    #[test]
    fn retries_then_surfaces_transport_errors() {
        let calls = AtomicUsize::new(0);
        let flaky = |_: &str| -> Result<String, LlmError> {
            if calls.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(LlmError::Transport("reset".into()))
            } else {
                Ok("  fine.  ".into())
            }
        };
        let retry = RetryPolicy {
            retries: 2,
            backoff: Duration::from_millis(1),
        };
        assert_eq!(llm_detokenize(&flaky, &retry, "s", "fine .").unwrap(), "fine.");
        let down = |_: &str| -> Result<String, LlmError> { Err(LlmError::Transport("refused".into())) };
        assert!(matches!(llm_detokenize(&down, &retry, "s", "t"), Err(LlmError::Transport(_))));
        let blank = |_: &str| -> Result<String, LlmError> { Ok(" \n ".into()) };
        assert!(matches!(llm_detokenize(&blank, &retry, "s", "t"), Err(LlmError::EmptyCompletion)));
    }

    #[test]
    fn unreachable_endpoint_fails_after_retries() {
        let client = crate::llm::HttpLlmClient::new(crate::llm::LlmSettings {
            endpoint: "http://127.0.0.1:9/v1/chat/completions".into(),
            timeout_secs: 2,
            ..Default::default()
        });
        let retry = RetryPolicy {
            retries: 1,
            backoff: Duration::from_millis(1),
        };
        assert!(matches!(llm_detokenize(&client, &retry, "s", "t"), Err(LlmError::Transport(_))));
    }

    #[test]
    fn errors_carry_pair_id() {
        let fail_second = |prompt: &str| -> Result<String, LlmError> {
            if prompt.contains("second") {
                Err(LlmError::EmptyCompletion)
            } else {
                Ok(prompt_target(prompt).unwrap().to_owned())
            }
        };
        let c = Corpus::new(
            "t",
            vec![tokenized_pair("a", "first", "first ."), tokenized_pair("b", "second", "second .")],
        );
        let pass = LlmPass {
            client: &fail_second,
            retry: RetryPolicy::default(),
            concurrency: 2,
        };
        match detokenize_corpus(&c, Some(&pass)) {
            Err(DetokError::Llm { pair_id, .. }) => assert_eq!(pair_id, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn report_without_modifications() {
        let outcomes = vec![DetokOutcome {
            pair_id: "0".into(),
            rule_text: "a.".into(),
            llm_text: None,
            modified: false,
        }];
        let r = build_report(&outcomes, &[tokenized_pair("0", "a", "a .")]);
        assert_eq!((r.n_total, r.n_modified), (1, 0));
        assert!(r.op_stats.is_none());
    }

    proptest! {
        #[test]
        fn rule_never_changes_content(tokens in proptest::collection::vec("[a-z\"'.,!?;:%()\\[\\]{}$€]{1,4}|n't|'s|\"", 0..20)) {
            let out = rule_detokenize(&tokens);
            prop_assert_eq!(strip_whitespace(&out), strip_whitespace(&tokens.join(" ")));
        }
    }
}
