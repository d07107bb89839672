//! Annotation service for LLM detokenization changes.
//!
//! Every pair the LLM pass modified becomes a task. Annotators lease tasks,
//! label them `essential`, `optional`, `erroneous` or `not_assessable`, and
//! the labels are appended to a JSONL log that is replayed on restart.
//! [`store::AnnotationStats`] turns the labels into a lower bound on wrong
//! annotations in the tokenized corpus.

pub mod http;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use gecprep_core::corpus::Corpus;
use gecprep_core::detok::DetokOutcome;
use serde::{Deserialize, Serialize};

pub use http::{router, serve, AppState, Server, TOKEN_HEADER};
pub use store::{
    create_tasks, detokenized_corpus, export_filtered, AnnotationStats, AnnotationStore, AnnotationTask, DiffSpan,
    ExportPolicy, Label, LabelEvent, Sampling, StoreError, read_label_log,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    /// Label log; labels are kept in memory only when unset.
    pub label_log: Option<PathBuf>,
    pub lease_timeout_secs: u64,
    pub token: Option<String>,
    pub sample: Option<Sampling>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8088)),
            label_log: None,
            lease_timeout_secs: 600,
            token: None,
            sample: None,
        }
    }
}

impl ServiceConfig {
    /// Overrides from `GECPREP_ANNO_BIND`, `GECPREP_ANNO_LOG`,
    /// `GECPREP_ANNO_TOKEN` and `GECPREP_ANNO_LEASE_SECS`.
    pub fn apply_env(&mut self) -> Result<(), String> {
        self.apply_vars(|k| std::env::var(k).ok())
    }

    pub fn apply_vars(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), String> {
        if let Some(v) = var("GECPREP_ANNO_BIND") {
            self.bind = v.parse().map_err(|e| format!("GECPREP_ANNO_BIND={v}: {e}"))?;
        }
        if let Some(v) = var("GECPREP_ANNO_LOG") {
            self.label_log = Some(PathBuf::from(v));
        }
        if let Some(v) = var("GECPREP_ANNO_TOKEN") {
            self.token = Some(v).filter(|t| !t.is_empty());
        }
        if let Some(v) = var("GECPREP_ANNO_LEASE_SECS") {
            self.lease_timeout_secs = v.parse().map_err(|e| format!("GECPREP_ANNO_LEASE_SECS={v}: {e}"))?;
        }
        Ok(())
    }

    /// Builds the service state for a tokenized corpus and its detok outcomes.
    pub fn build_state(&self, original: &Corpus, outcomes: Vec<DetokOutcome>) -> Result<Arc<AppState>, StoreError> {
        let mut store = AnnotationStore::from_outcomes(
            &outcomes,
            &original.pairs,
            self.sample,
            Duration::from_secs(self.lease_timeout_secs),
        );
        if let Some(path) = &self.label_log {
            store = store.with_log(path)?;
        }
        let corpus = detokenized_corpus(original, &outcomes);
        Ok(Arc::new(AppState::new(store, corpus, outcomes, self.token.clone())))
    }
}
