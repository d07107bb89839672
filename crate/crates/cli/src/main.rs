mod config;
mod output;

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gecprep_annosvc::{export_filtered, read_label_log, detokenized_corpus, ExportPolicy, Sampling};
use gecprep_core::align::{extract_edits, Edit};
use gecprep_core::corpus::{self, compute_stats, Corpus};
use gecprep_core::detok::{self, detokenize_corpus, LlmPass, RetryPolicy};
use gecprep_core::llm::{EchoClient, HttpLlmClient, LlmClient};
use gecprep_core::m2::{self, parse_m2, M2Record};
use gecprep_core::pipeline::{self, build_schedule, build_setup, emit_sft, split_groups, SetupMode};
use gecprep_core::scoring::{gleu_corpus, score_texts};
use gecprep_core::surrogate::{evaluate, run_sweep, SurrogateModel};
use serde_json::{json, Value};

use crate::config::Config;

#[derive(Parser)]
#[command(name = "gecprep", version, about = "Data preparation for minimal-edit grammatical error correction")]
struct Cli {
    /// TOML config with [llm], [paths], [schedule] and [anno] sections.
    #[arg(long, global = true, env = "GECPREP_CONFIG")]
    config: Option<PathBuf>,
    /// Print tables instead of JSON.
    #[arg(long, global = true)]
    pretty: bool,
    /// Worker threads for parallel steps.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a parallel text corpus (one sentence per line) to JSONL.
    #[command(alias = "load")]
    Convert {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        trg: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long)]
        out: PathBuf,
        /// Mark pairs as whitespace-tokenized.
        #[arg(long)]
        tokenized: bool,
    },
    /// Size and erroneous-pair ratio of corpora.
    Stats {
        #[arg(long = "corpus", value_name = "[NAME=]PATH")]
        corpora: Vec<String>,
    },
    /// Detokenize targets with the rules and, optionally, an LLM.
    Detok {
        #[arg(long, value_name = "[NAME=]PATH")]
        corpus: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        outcomes: PathBuf,
        /// Run the LLM pass against the configured endpoint.
        #[arg(long, conflicts_with = "no_llm")]
        llm: bool,
        /// Rules only (default).
        #[arg(long)]
        no_llm: bool,
        /// Use a local stand-in for the LLM.
        #[arg(long, value_enum, conflicts_with = "no_llm")]
        llm_stub: Option<LlmStub>,
    },
    /// Modified ratio and operation breakdown of a detokenization run.
    DetokReport {
        /// The tokenized corpus that was detokenized.
        #[arg(long, value_name = "[NAME=]PATH")]
        corpus: String,
        #[arg(long)]
        outcomes: PathBuf,
    },
    /// Parse and validate an M2 file.
    M2Parse {
        #[arg(long)]
        m2: PathBuf,
        /// Include parsed records in the output.
        #[arg(long)]
        records: bool,
        /// Write the normalized M2 here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply one annotator's edits, giving corrected sentences.
    M2Apply {
        #[arg(long)]
        m2: PathBuf,
        #[arg(long, default_value_t = 0)]
        annotator: u32,
        /// Write one sentence per line here instead of printing them.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Token edits between a source and target text, or for every pair of a corpus.
    ExtractEdits {
        #[arg(long, requires = "target", conflicts_with = "corpus")]
        source: Option<String>,
        #[arg(long)]
        target: Option<String>,
        #[arg(long, value_name = "[NAME=]PATH")]
        corpus: Option<String>,
    },
    /// Span-level precision, recall and F0.5 against M2 gold.
    Score {
        /// One hypothesis per line.
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Corpus GLEU.
    Gleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        src: PathBuf,
        /// Reference file, one sentence per line; repeat for more references.
        #[arg(long = "ref", required = true)]
        refs: Vec<PathBuf>,
        #[arg(long, default_value_t = 4)]
        n: usize,
    },
    /// Build a training setup from a corpus.
    Setup {
        #[arg(long, value_parser = parse_setup)]
        mode: SetupMode,
        #[arg(long, value_name = "[NAME=]PATH")]
        corpus: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add a correct twin after every erroneous pair.
    Augment {
        #[arg(long, value_name = "[NAME=]PATH")]
        corpus: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split a corpus into its erroneous and correct groups.
    SplitGroups {
        #[arg(long, value_name = "[NAME=]PATH")]
        corpus: String,
        #[arg(long)]
        erroneous_out: PathBuf,
        #[arg(long)]
        correct_out: PathBuf,
    },
    /// Build and validate the three-stage training schedule.
    ScheduleBuild {
        #[arg(long)]
        final_lr: Option<f64>,
        /// Comma-separated final learning rates; one schedule each.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
    /// Write per-stage instruction-tuning files and a manifest.
    SftEmit {
        #[arg(long = "corpus", value_name = "[NAME=]PATH")]
        corpora: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        final_lr: Option<f64>,
    },
    /// Train the surrogate corrector through the schedule.
    SurrogateTrain {
        #[arg(long = "corpus", value_name = "[NAME=]PATH")]
        corpora: Vec<String>,
        #[arg(long)]
        final_lr: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
        #[arg(long)]
        model: PathBuf,
    },
    /// Score a trained surrogate on an evaluation set.
    SurrogateEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_name = "[NAME=]PATH")]
        eval: Option<String>,
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Final-stage learning-rate sweep with the surrogate corrector.
    Sweep {
        #[arg(long = "corpus", value_name = "[NAME=]PATH")]
        corpora: Vec<String>,
        #[arg(long, value_name = "[NAME=]PATH")]
        eval: Option<String>,
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1e-7,2e-7,2.5e-7,3e-7,3.5e-7,4e-7,5e-7")]
        grid: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
        /// Also write the table as TSV.
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Serve annotation tasks for LLM-modified pairs.
    AnnoServe {
        #[arg(long, value_name = "[NAME=]PATH")]
        corpus: String,
        #[arg(long)]
        outcomes: PathBuf,
        /// Append-only label log, replayed on start.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        bind: Option<SocketAddr>,
        #[arg(long)]
        token: Option<String>,
        /// Annotate a seeded sample of this many modified pairs.
        #[arg(long)]
        sample_k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export the detokenized corpus under a label policy.
    AnnoExport {
        #[arg(long, value_name = "[NAME=]PATH")]
        corpus: String,
        #[arg(long)]
        outcomes: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        policy: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LlmStub {
    /// Returns the tokenized target unchanged.
    Echo,
}

fn parse_setup(s: &str) -> Result<SetupMode, String> {
    s.parse().map_err(|e: pipeline::PipelineError| e.to_string())
}

/// Loads `[NAME=]PATH`; without a name the file stem is used.
fn load_corpus(spec: &str) -> Result<Corpus> {
    let (name, path) = match spec.split_once('=') {
        Some((n, p)) if !n.is_empty() && !n.contains(['/', '\\']) => (Some(n), p),
        _ => (None, spec),
    };
    let mut c = corpus::load_jsonl(Path::new(path))?;
    if let Some(n) = name {
        c.name = n.to_owned();
    }
    Ok(c)
}

fn load_corpora(specs: &[String], config: &Config) -> Result<Vec<Corpus>> {
    if !specs.is_empty() {
        return specs.iter().map(|s| load_corpus(s)).collect();
    }
    if config.paths.corpora.is_empty() {
        bail!("no corpora given; pass --corpus or set [paths.corpora]");
    }
    config
        .paths
        .corpora
        .iter()
        .map(|(name, p)| load_corpus(&format!("{name}={}", p.display())))
        .collect()
}

fn eval_inputs(eval: Option<&str>, gold: Option<&Path>, config: &Config) -> Result<(Corpus, Vec<M2Record>)> {
    let eval = match (eval, &config.paths.eval) {
        (Some(e), _) => load_corpus(e)?,
        (None, Some(p)) => corpus::load_jsonl(p)?,
        _ => bail!("no evaluation corpus; pass --eval or set paths.eval"),
    };
    let gold = match gold.or(config.paths.gold.as_deref()) {
        Some(p) => read_m2(p)?,
        None => bail!("no gold M2; pass --gold or set paths.gold"),
    };
    Ok((eval, gold))
}

fn read_m2(path: &Path) -> Result<Vec<M2Record>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_m2(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn stats_value(c: &Corpus) -> Result<Value> {
    let mut v = serde_json::to_value(compute_stats(c)?)?;
    v["name"] = json!(c.name);
    Ok(v)
}

fn edits_value(edits: &[Edit]) -> Value {
    serde_json::to_value(edits).expect("edits serialize")
}

fn run(cli: Cli) -> Result<Value> {
    let config = Config::load(cli.config.as_deref())?;
    Ok(match cli.command {
        Command::Convert {
            src,
            trg,
            name,
            out,
            tokenized,
        } => {
            let mut c = corpus::load_parallel(&src, &trg, &name)?;
            for p in &mut c.pairs {
                p.tokenized = tokenized;
            }
            corpus::save_jsonl(&c, &out)?;
            json!({"name": name, "n_pairs": c.len(), "out": out})
        }
        Command::Stats { corpora } => {
            let corpora = load_corpora(&corpora, &config)?;
            let mut values = corpora.iter().map(stats_value).collect::<Result<Vec<_>>>()?;
            if values.len() == 1 {
                values.remove(0)
            } else {
                Value::Array(values)
            }
        }
        Command::Detok {
            corpus,
            out,
            outcomes,
            llm,
            no_llm: _,
            llm_stub,
        } => {
            let c = load_corpus(&corpus)?;
            let client: Option<Box<dyn LlmClient>> = match (llm_stub, llm) {
                (Some(LlmStub::Echo), _) => Some(Box::new(EchoClient)),
                (None, true) => Some(Box::new(HttpLlmClient::new(config.llm.clone()))),
                (None, false) => None,
            };
            let pass = client.as_deref().map(|client| LlmPass {
                client,
                retry: RetryPolicy {
                    retries: config.llm.retries,
                    backoff: std::time::Duration::from_millis(config.llm.backoff_ms),
                },
                concurrency: config.llm.concurrency,
            });
            let (detok_corpus, results) = detokenize_corpus(&c, pass.as_ref())?;
            corpus::save_jsonl(&detok_corpus, &out)?;
            detok::save_outcomes(&results, &outcomes)?;
            serde_json::to_value(detok::build_report(&results, &c.pairs))?
        }
        Command::DetokReport { corpus, outcomes } => {
            let c = load_corpus(&corpus)?;
            let results = detok::load_outcomes(&outcomes)?;
            serde_json::to_value(detok::build_report(&results, &c.pairs))?
        }
        Command::M2Parse { m2, records, out } => {
            let recs = read_m2(&m2)?;
            if let Some(out) = out {
                write_text(&out, &m2::serialize_m2(&recs))?;
            }
            let mut annotators: Vec<u32> = recs.iter().flat_map(|r| r.annotators.keys().copied()).collect();
            annotators.sort_unstable();
            annotators.dedup();
            let n_edits: usize = recs.iter().flat_map(|r| r.annotators.values()).map(Vec::len).sum();
            let mut v = json!({"n_records": recs.len(), "n_edits": n_edits, "annotators": annotators});
            if records {
                v["records"] = serde_json::to_value(&recs)?;
            }
            v
        }
        Command::M2Apply { m2, annotator, out } => {
            let recs = read_m2(&m2)?;
            let sentences = recs
                .iter()
                .map(|r| m2::apply_edits(r, annotator).map(|t| t.join(" ")))
                .collect::<Result<Vec<_>, _>>()?;
            match out {
                Some(out) => {
                    write_text(&out, &sentences.iter().map(|s| format!("{s}\n")).collect::<String>())?;
                    json!({"n_sentences": sentences.len(), "out": out})
                }
                None => json!(sentences),
            }
        }
        Command::ExtractEdits { source, target, corpus } => match (source, target, corpus) {
            (Some(s), Some(t), None) => edits_value(&extract_edits(&s, &t)),
            (None, None, Some(c)) => {
                let c = load_corpus(&c)?;
                Value::Array(
                    c.iter()
                        .map(|p| json!({"id": p.id, "edits": edits_value(&extract_edits(&p.source, &p.target))}))
                        .collect(),
                )
            }
            _ => bail!("pass either --source and --target, or --corpus"),
        },
        Command::Score { hyp, gold } => {
            let hyps = read_lines(&hyp)?;
            serde_json::to_value(score_texts(&hyps, &read_m2(&gold)?)?)?
        }
        Command::Gleu { hyp, src, refs, n } => {
            let hyps = read_lines(&hyp)?;
            let srcs = read_lines(&src)?;
            let ref_files = refs.iter().map(|p| read_lines(p)).collect::<Result<Vec<_>>>()?;
            if let Some(bad) = ref_files.iter().position(|r| r.len() != hyps.len()) {
                bail!("{} has {} lines, expected {}", refs[bad].display(), ref_files[bad].len(), hyps.len());
            }
            let per_sentence: Vec<Vec<String>> =
                (0..hyps.len()).map(|i| ref_files.iter().map(|r| r[i].clone()).collect()).collect();
            serde_json::to_value(gleu_corpus(&hyps, &srcs, &per_sentence, n)?)?
        }
        Command::Setup { mode, corpus, out } => {
            let built = build_setup(&load_corpus(&corpus)?, mode);
            corpus::save_jsonl(&built, &out)?;
            let mut v = stats_value(&built)?;
            v["out"] = json!(out);
            v
        }
        Command::Augment { corpus, out } => {
            let c = load_corpus(&corpus)?;
            let augmented = pipeline::augment(&c);
            if let Some(out) = &out {
                corpus::save_jsonl(&augmented, out)?;
            }
            json!({"before": stats_value(&c)?, "after": stats_value(&augmented)?})
        }
        Command::SplitGroups {
            corpus,
            erroneous_out,
            correct_out,
        } => {
            let (erroneous, correct) = split_groups(&load_corpus(&corpus)?);
            corpus::save_jsonl(&erroneous, &erroneous_out)?;
            corpus::save_jsonl(&correct, &correct_out)?;
            json!({"erroneous": erroneous.len(), "correct": correct.len()})
        }
        Command::ScheduleBuild { final_lr, grid } => {
            let base = &config.schedule;
            if grid.is_empty() {
                serde_json::to_value(build_schedule(&base.with_final_lr(final_lr.unwrap_or(base.final_lr)))?)?
            } else {
                serde_json::to_value(pipeline::build_schedule_grid(base, &grid)?)?
            }
        }
        Command::SftEmit {
            corpora,
            out_dir,
            final_lr,
        } => {
            let corpora = load_corpora(&corpora, &config)?;
            let schedule = build_schedule(&config.schedule.with_final_lr(final_lr.unwrap_or(config.schedule.final_lr)))?;
            serde_json::to_value(emit_sft(&corpora, &schedule, &out_dir)?)?
        }
        Command::SurrogateTrain {
            corpora,
            final_lr,
            threshold,
            model,
        } => {
            let corpora = load_corpora(&corpora, &config)?;
            let schedule = build_schedule(&config.schedule.with_final_lr(final_lr.unwrap_or(config.schedule.final_lr)))?;
            let mut m = SurrogateModel::with_threshold(threshold);
            m.train_schedule(&schedule, &corpora)?;
            m.save_jsonl(&model)?;
            json!({"rules": m.rule_count(), "stages": schedule.stages.len(), "model": model})
        }
        Command::SurrogateEval { model, eval, gold } => {
            let m = SurrogateModel::load_jsonl(&model)?;
            let (eval, gold) = eval_inputs(eval.as_deref(), gold.as_deref(), &config)?;
            serde_json::to_value(evaluate(&m, &eval.pairs, &gold)?)?
        }
        Command::Sweep {
            corpora,
            eval,
            gold,
            grid,
            threshold,
            tsv,
        } => {
            let corpora = load_corpora(&corpora, &config)?;
            let (eval, gold) = eval_inputs(eval.as_deref(), gold.as_deref(), &config)?;
            let table = run_sweep(&config.schedule, &grid, &corpora, &eval.pairs, &gold, threshold)?;
            if let Some(tsv) = tsv {
                write_text(&tsv, &table.to_tsv())?;
            }
            if cli.pretty {
                serde_json::to_value(&table.rows)?
            } else {
                serde_json::to_value(&table)?
            }
        }
        Command::AnnoServe {
            corpus,
            outcomes,
            log,
            bind,
            token,
            sample_k,
            seed,
        } => {
            let mut svc = config.anno.clone();
            svc.label_log = log.or(svc.label_log);
            svc.bind = bind.unwrap_or(svc.bind);
            svc.token = token.or(svc.token);
            if let Some(k) = sample_k {
                svc.sample = Some(Sampling { k, seed });
            }
            let state = svc.build_state(&load_corpus(&corpus)?, detok::load_outcomes(&outcomes)?)?;
            serve(state, svc.bind)?;
            json!({"status": "stopped"})
        }
        Command::AnnoExport {
            corpus,
            outcomes,
            log,
            policy,
            out,
        } => {
            let policy: ExportPolicy = policy.parse()?;
            let original = load_corpus(&corpus)?;
            let results = detok::load_outcomes(&outcomes)?;
            let labels = match log.or(config.anno.label_log.clone()) {
                Some(p) if p.exists() => read_label_log(&p)?,
                _ => Default::default(),
            };
            let exported = export_filtered(&detokenized_corpus(&original, &results), &results, &labels, policy);
            corpus::save_jsonl(&exported, &out)?;
            json!({"policy": policy, "n_pairs": exported.len(), "labels": labels.len(), "out": out})
        }
    })
}

fn serve(state: Arc<gecprep_annosvc::AppState>, bind: SocketAddr) -> Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .with_context(|| format!("binding {bind}"))?;
        let addr = listener.local_addr()?;
        println!("{}", json!({"listening": addr.to_string()}));
        std::io::stdout().flush()?;
        gecprep_annosvc::serve(listener, state).await?;
        Ok(())
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("{}", json!({"error": "config", "detail": e.to_string()}));
            return ExitCode::from(1);
        }
    }
    let pretty = cli.pretty;
    match run(cli) {
        Ok(value) => {
            print!("{}", output::render(&value, pretty));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let detail: Vec<String> = e.chain().map(ToString::to_string).collect();
            eprintln!("{}", json!({"error": e.to_string(), "detail": detail.join(": ")}));
            ExitCode::from(1)
        }
    }
}
