//! Dataset processing setups, pair-splitting augmentation and the staged
//! training schedule, plus emission of SFT-ready prompt/completion files.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, SentencePair};

/// Instruction used for training and inference prompts.
pub const INSTRUCTION: &str = "Correct the following text, making only minimal changes where necessary.";

pub const BASE_LEARNING_RATE: f64 = 5e-6;
pub const WARMUP_STEPS: u32 = 100;
pub const AUG_SUFFIX: &str = "#aug";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("final-stage learning rate {final_lr} exceeds the preceding stage's {previous}")]
    FinalLrTooHigh { final_lr: f64, previous: f64 },
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("schedule has no stages")]
    EmptySchedule,
    #[error("stage {stage} needs corpus {corpus:?}, which was not provided")]
    MissingCorpus { stage: usize, corpus: String },
    #[error("unknown {kind} {value:?}")]
    UnknownVariant { kind: &'static str, value: String },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SetupMode {
    OnlyErroneous,
    Unchanged,
    Augmented,
}

impl FromStr for SetupMode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "only-erroneous" => Ok(SetupMode::OnlyErroneous),
            "unchanged" => Ok(SetupMode::Unchanged),
            "augmented" => Ok(SetupMode::Augmented),
            _ => Err(PipelineError::UnknownVariant {
                kind: "setup mode",
                value: s.to_owned(),
            }),
        }
    }
}

/// Adds a `(target, target)` twin right after every erroneous pair.
pub fn augment(corpus: &Corpus) -> Corpus {
    let mut pairs = Vec::with_capacity(corpus.len() * 2);
    for pair in corpus.iter() {
        pairs.push(pair.clone());
        if pair.is_erroneous() {
            let mut twin = pair.clone();
            twin.id = format!("{}{AUG_SUFFIX}", pair.id);
            twin.source = pair.target.clone();
            pairs.push(twin);
        }
    }
    Corpus::new(corpus.name.clone(), pairs)
}

pub fn build_setup(corpus: &Corpus, mode: SetupMode) -> Corpus {
    match mode {
        SetupMode::OnlyErroneous => corpus.filtered(SentencePair::is_erroneous),
        SetupMode::Unchanged => corpus.clone(),
        SetupMode::Augmented => augment(corpus),
    }
}

/// Splits into (erroneous, correct), keeping order within each group.
pub fn split_groups(corpus: &Corpus) -> (Corpus, Corpus) {
    let (err, ok): (Vec<_>, Vec<_>) = corpus.pairs.iter().cloned().partition(SentencePair::is_erroneous);
    (Corpus::new(corpus.name.clone(), err), Corpus::new(corpus.name.clone(), ok))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageFilter {
    All,
    ErroneousOnly,
    CorrectOnly,
}

impl StageFilter {
    pub fn apply(self, corpus: &Corpus) -> Corpus {
        match self {
            StageFilter::All => corpus.clone(),
            StageFilter::ErroneousOnly => corpus.filtered(SentencePair::is_erroneous),
            StageFilter::CorrectOnly => corpus.filtered(|p| !p.is_erroneous()),
        }
    }
}

impl fmt::Display for StageFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageFilter::All => "all",
            StageFilter::ErroneousOnly => "erroneous_only",
            StageFilter::CorrectOnly => "correct_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStage {
    pub stage_id: usize,
    pub corpus_name: String,
    /// Setup applied to the corpus before the stage filter.
    pub setup: SetupMode,
    pub filter: StageFilter,
    pub epochs: u32,
    pub learning_rate: f64,
    pub warmup_steps: u32,
}

/// Trainer settings that are carried into the manifest untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDefaults {
    pub batch_size: u32,
    pub grad_accum: u32,
    pub scheduler: String,
    pub optimizer: String,
    pub weight_decay: f64,
}

impl Default for TrainingDefaults {
    fn default() -> Self {
        Self {
            batch_size: 4,
            grad_accum: 4,
            scheduler: "linear".to_owned(),
            optimizer: "AdamW8bit".to_owned(),
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub stages: Vec<ScheduleStage>,
    pub defaults: TrainingDefaults,
}

impl Schedule {
    /// Checks ordering constraints: every correct-only stage must not use a
    /// higher learning rate than the stage before it.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.stages.is_empty() {
            return Err(PipelineError::EmptySchedule);
        }
        for s in &self.stages {
            if !(s.learning_rate.is_finite() && s.learning_rate > 0.0) {
                return Err(PipelineError::InvalidLearningRate(s.learning_rate));
            }
        }
        for w in self.stages.windows(2) {
            if w[1].filter == StageFilter::CorrectOnly && w[1].learning_rate > w[0].learning_rate {
                return Err(PipelineError::FinalLrTooHigh {
                    final_lr: w[1].learning_rate,
                    previous: w[0].learning_rate,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub first_corpus: String,
    pub first_setup: SetupMode,
    pub final_corpus: String,
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: u32,
    pub epochs: u32,
    pub defaults: TrainingDefaults,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            first_corpus: "fce-train".to_owned(),
            first_setup: SetupMode::Unchanged,
            final_corpus: "bea-train".to_owned(),
            base_lr: BASE_LEARNING_RATE,
            final_lr: 3e-7,
            warmup_steps: WARMUP_STEPS,
            epochs: 1,
            defaults: TrainingDefaults::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn with_final_lr(&self, final_lr: f64) -> Self {
        Self {
            final_lr,
            ..self.clone()
        }
    }

    /// The first two stages: the first corpus in full, then the erroneous
    /// group of the final corpus.
    pub fn base_stages(&self) -> Vec<ScheduleStage> {
        vec![
            ScheduleStage {
                stage_id: 1,
                corpus_name: self.first_corpus.clone(),
                setup: self.first_setup,
                filter: StageFilter::All,
                epochs: self.epochs,
                learning_rate: self.base_lr,
                warmup_steps: self.warmup_steps,
            },
            ScheduleStage {
                stage_id: 2,
                corpus_name: self.final_corpus.clone(),
                setup: SetupMode::Unchanged,
                filter: StageFilter::ErroneousOnly,
                epochs: self.epochs,
                learning_rate: self.base_lr,
                warmup_steps: self.warmup_steps,
            },
        ]
    }
}

/// Three stages: first corpus, erroneous group of the final corpus, then its
/// correct group at the (lower) final learning rate.
pub fn build_schedule(config: &ScheduleConfig) -> Result<Schedule, PipelineError> {
    let mut stages = config.base_stages();
    stages.push(ScheduleStage {
        stage_id: 3,
        corpus_name: config.final_corpus.clone(),
        setup: SetupMode::Unchanged,
        filter: StageFilter::CorrectOnly,
        epochs: config.epochs,
        learning_rate: config.final_lr,
        warmup_steps: config.warmup_steps,
    });
    let schedule = Schedule {
        stages,
        defaults: config.defaults.clone(),
    };
    schedule.validate()?;
    Ok(schedule)
}

pub fn build_schedule_grid(config: &ScheduleConfig, grid: &[f64]) -> Result<Vec<Schedule>, PipelineError> {
    grid.iter().map(|&lr| build_schedule(&config.with_final_lr(lr))).collect()
}

/// Resolves a stage's training data from named corpora.
pub fn stage_data(stage: &ScheduleStage, corpora: &[Corpus]) -> Result<Corpus, PipelineError> {
    let corpus = corpora
        .iter()
        .find(|c| c.name == stage.corpus_name)
        .ok_or_else(|| PipelineError::MissingCorpus {
            stage: stage.stage_id,
            corpus: stage.corpus_name.clone(),
        })?;
    Ok(stage.filter.apply(&build_setup(corpus, stage.setup)))
}

pub fn render_prompt(source: &str) -> String {
    format!("{INSTRUCTION}\n\n### Text to correct:\n{source}\n\n### Corrected text:\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestStage {
    pub id: usize,
    pub file: String,
    pub epochs: u32,
    pub learning_rate: f64,
    pub warmup_steps: u32,
    pub filter: StageFilter,
    pub corpus: String,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: Vec<ManifestStage>,
    pub defaults: TrainingDefaults,
}

/// Writes `stage_<id>.jsonl` per stage and `manifest.json` into `out_dir`.
pub fn emit_sft(corpora: &[Corpus], schedule: &Schedule, out_dir: &Path) -> Result<Manifest, PipelineError> {
    schedule.validate()?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PipelineError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut stages = Vec::with_capacity(schedule.stages.len());
    for stage in &schedule.stages {
        let data = stage_data(stage, corpora)?;
        let file = format!("stage_{}.jsonl", stage.stage_id);
        let path = out_dir.join(&file);
        let mut out = BufWriter::new(File::create(&path).map_err(io(&path))?);
        for pair in data.iter() {
            let rec = SftRecord {
                prompt: render_prompt(&pair.source),
                completion: pair.target.clone(),
            };
            serde_json::to_writer(&mut out, &rec).map_err(|e| io(&path)(e.into()))?;
            out.write_all(b"\n").map_err(io(&path))?;
        }
        out.flush().map_err(io(&path))?;
        stages.push(ManifestStage {
            id: stage.stage_id,
            file,
            epochs: stage.epochs,
            learning_rate: stage.learning_rate,
            warmup_steps: stage.warmup_steps,
            filter: stage.filter,
            corpus: stage.corpus_name.clone(),
            examples: data.len(),
        });
    }
    let manifest = Manifest {
        stages,
        defaults: schedule.defaults.clone(),
    };
    let path = out_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| io(&path)(e.into()))?;
    text.push('\n');
    fs::write(&path, text).map_err(io(&path))?;
    Ok(manifest)
}
