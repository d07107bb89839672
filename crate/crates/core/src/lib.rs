//! Data-side toolkit for minimal-edit grammatical error correction.
//!
//! * [`corpus`]: parallel corpora and JSONL persistence
//! * [`m2`]: the M2 gold-edit format
//! * [`align`]: tokenization, alignment and edit extraction
//! * [`scoring`]: edit-level F0.5 and GLEU
//! * [`detok`], [`llm`]: rule and LLM-assisted detokenization
//! * [`pipeline`]: setups, augmentation, training schedules, SFT emission
//! * [`surrogate`]: a rule-based corrector trained by those schedules
//! * [`synthetic`]: seeded fixture corpora

pub mod align;
pub mod corpus;
pub mod detok;
pub mod llm;
pub mod m2;
pub mod pipeline;
pub mod scoring;
pub mod surrogate;
pub mod synthetic;

pub use align::{extract_edits, tokenize, Edit, OpKind, OpStats};
pub use corpus::{compute_stats, Corpus, CorpusStats, SentencePair};
pub use detok::{DetokOutcome, DetokReport};
pub use m2::{M2Edit, M2Record};
pub use pipeline::{Schedule, ScheduleConfig, ScheduleStage, SetupMode};
pub use scoring::{f_beta, GleuReport, ScoreReport};
pub use surrogate::{SurrogateModel, SweepTable};
