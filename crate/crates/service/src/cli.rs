//! The `neurorag` command line.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use neurorag_core::corpus::{ingest, ChunkConfig};
use neurorag_core::engine::{read_labeled_queries, text_files, DataDir, Engine, Mode, RetrieveRequest, RetrieveResponse};
use neurorag_core::features::SessionState;
use neurorag_core::metrics::{evaluate, parse_examples, EvalReport, InstrumentScorer, OracleScorer, ProvidedScorer, Scorer};
use neurorag_core::proknow::NextQuestion;
use neurorag_core::types::{ConfigOverrides, ModelCheckpoint};
use serde_json::{json, Value};

use crate::api::{self, ApiError, AppState};
use crate::config::{Explicit, Settings};

#[derive(Debug, Parser)]
#[command(name = "neurorag", version, about = "Interpretable retrieval over clinical conversations")]
pub struct Cli {
    /// TOML config file (also NEURORAG_CONFIG).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Data directory (also NEURORAG_DATA_DIR). Without one the bundled demo data is used.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Print machine-readable JSON, including errors on stderr.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the bundled demo data set into a directory.
    Init { dir: PathBuf },
    /// Chunk, annotate and embed text files into a corpus store.
    Ingest(IngestArgs),
    /// Rank the corpus for a query or a conversation.
    Retrieve(RetrieveArgs),
    /// Interactive session: type patient turns, `:help` for commands.
    Session,
    /// Fit the modulation matrices on labeled queries.
    Train(TrainArgs),
    /// Score a labeled JSONL set per task.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Inspect configuration.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum ConfigAction {
    /// Print the resolved settings, defaults included.
    Show,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Text files or directories of `*.txt`; defaults to `<data-dir>/corpus`.
    pub paths: Vec<PathBuf>,
    /// Store directory; defaults to `<data-dir>/store`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub overlap: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Mar,
    Kgpath,
    Proknow,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mar => Mode::Mar,
            ModeArg::Kgpath => Mode::Kgpath,
            ModeArg::Proknow => Mode::Proknow,
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct OverrideArgs {
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub hops: Option<usize>,
    #[arg(long)]
    pub alpha_blend: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub beta_loss: Option<f64>,
    #[arg(long)]
    pub label_budget: Option<usize>,
}

impl OverrideArgs {
    fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            top_k: self.top_k,
            tau: self.tau,
            hops: self.hops,
            alpha_blend: self.alpha_blend,
            gamma: self.gamma,
            beta_loss: self.beta_loss,
            label_budget: self.label_budget,
            ..Default::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Query text; defaults to the last turn.
    #[arg(long)]
    pub text: Option<String>,
    /// A patient turn; repeat in conversation order.
    #[arg(long = "turn")]
    pub turns: Vec<String>,
    /// Session state JSON to start from.
    #[arg(long)]
    pub session: Option<PathBuf>,
    #[arg(long = "instrument")]
    pub instrument_id: Option<String>,
    /// Print the full provenance record.
    #[arg(long)]
    pub explain: bool,
    #[command(flatten)]
    pub overrides: OverrideArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSONL of {query, positive_id, negative_id?}.
    #[arg(long)]
    pub triples: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path; defaults to `<data-dir>/model.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: OverrideArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScorerArg {
    /// Use each example's `prediction` field.
    Provided,
    /// Predict the gold label.
    Oracle,
    /// Predict positive when the text matches the task's instrument.
    Instrument,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSONL of {task, text, label, prediction?}.
    #[arg(long)]
    pub examples: PathBuf,
    #[arg(long, value_enum, default_value = "provided")]
    pub scorer: ScorerArg,
    /// TASK=INSTRUMENT pairs for the instrument scorer.
    #[arg(long = "task", value_parser = parse_task_pair)]
    pub tasks: Vec<(String, String)>,
}

fn parse_task_pair(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((t, i)) if !t.is_empty() && !i.is_empty() => Ok((t.to_string(), i.to_string())),
        _ => Err(format!("expected TASK=INSTRUMENT, got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Port (also NEURORAG_PORT); 0 picks a free one.
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub bind: Option<String>,
}

/// Error JSON for a failed command.
pub fn error_json(err: &anyhow::Error) -> Value {
    let e = if let Some(core) = err.downcast_ref::<neurorag_core::Error>() {
        ApiError::from(core)
    } else {
        ApiError::new(axum::http::StatusCode::BAD_REQUEST, "usage", format!("{err:#}"))
    };
    e.body()
}

pub struct Runner<'a> {
    settings: Settings,
    json: bool,
    out: &'a mut dyn Write,
}

pub fn run(cli: Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> anyhow::Result<()> {
    let port = match &cli.command {
        Command::Serve(s) => s.port,
        _ => None,
    };
    let settings = Settings::load(
        cli.config.as_deref(),
        Explicit {
            data_dir: cli.data_dir.clone(),
            port,
        },
    )?;
    let mut cx = Runner {
        settings,
        json: cli.json,
        out,
    };
    match cli.command {
        Command::Init { dir } => cx.init(&dir),
        Command::Ingest(a) => cx.ingest(a),
        Command::Retrieve(a) => cx.retrieve(a),
        Command::Session => cx.session(input),
        Command::Train(a) => cx.train(a),
        Command::Eval(a) => cx.eval(a),
        Command::Serve(a) => cx.serve(a),
        Command::Config {
            action: ConfigAction::Show,
        } => cx.config_show(),
    }
}

impl Runner<'_> {
    fn engine(&self) -> anyhow::Result<Engine> {
        Ok(Engine::open(
            self.settings.data_dir.as_deref(),
            self.settings.retrieval.clone(),
            self.settings.enricher.clone(),
        )?)
    }

    fn emit(&mut self, v: &impl serde::Serialize) -> anyhow::Result<()> {
        writeln!(self.out, "{}", serde_json::to_string(v)?)?;
        Ok(())
    }

    fn init(&mut self, dir: &Path) -> anyhow::Result<()> {
        neurorag_core::demo::write_files(dir)?;
        if self.json {
            self.emit(&json!({ "data_dir": dir }))
        } else {
            writeln!(self.out, "wrote demo data to {}", dir.display())?;
            Ok(())
        }
    }

    fn ingest(&mut self, a: IngestArgs) -> anyhow::Result<()> {
        let data = DataDir::new(self.settings.data_dir.as_deref());
        let sources = if a.paths.is_empty() {
            vec![data
                .path("corpus")
                .context("pass source paths or --data-dir with a corpus/ directory")?]
        } else {
            a.paths
        };
        let mut files = Vec::new();
        for p in sources {
            if p.is_dir() {
                files.extend(text_files(&p)?);
            } else {
                files.push(p);
            }
        }
        let out = match a.out {
            Some(o) => o,
            None => data.path("store").context("pass --out or --data-dir")?,
        };
        let chunking = ChunkConfig {
            window: a.window.unwrap_or(self.settings.chunking.window),
            overlap: a.overlap.unwrap_or(self.settings.chunking.overlap),
        };
        let lexicon = data.lexicon()?;
        let encoder = data.encoder()?;
        let model = data.model(lexicon.vocabulary(), encoder.as_ref())?;
        let report = ingest(&files, &lexicon, encoder.as_ref(), &model, chunking)?;
        report.corpus.persist(&out)?;
        let summary = json!({
            "store": out,
            "sources": files.len(),
            "documents": report.corpus.len(),
            "errors": report.errors,
        });
        if self.json {
            return self.emit(&summary);
        }
        writeln!(
            self.out,
            "ingested {} documents from {} files into {}",
            report.corpus.len(),
            files.len() - report.errors.len(),
            out.display()
        )?;
        for e in &report.errors {
            writeln!(self.out, "skipped {}: {}", e.path, e.message)?;
        }
        Ok(())
    }

    fn retrieve(&mut self, a: RetrieveArgs) -> anyhow::Result<()> {
        let engine = self.engine()?;
        let session = build_session(&engine, a.session.as_deref(), &a.turns)?;
        let req = RetrieveRequest {
            mode: a.mode.map(Mode::from),
            text: a.text,
            instrument_id: a.instrument_id,
            overrides: a.overrides.overrides(),
        };
        let resp = engine.retrieve(&req, session.as_ref())?;
        if self.json {
            self.emit(&resp)
        } else if a.explain {
            writeln!(self.out, "{}", serde_json::to_string_pretty(&resp)?)?;
            Ok(())
        } else {
            write_ranking(self.out, &resp)
        }
    }

    fn session(&mut self, input: &mut dyn BufRead) -> anyhow::Result<()> {
        let engine = self.engine()?;
        let mut s = SessionState::new(uuid::Uuid::new_v4().to_string());
        let mut pending: Option<String> = None;
        if !self.json {
            writeln!(self.out, "session {}; :help for commands", s.id)?;
        }
        let mut line = String::new();
        loop {
            line.clear();
            if input.read_line(&mut line)? == 0 {
                break;
            }
            let l = line.trim();
            if l.is_empty() {
                continue;
            }
            let (cmd, rest) = match l.strip_prefix(':') {
                Some(c) => c.split_once(' ').map_or((c, ""), |(a, b)| (a, b.trim())),
                None => ("patient", l),
            };
            let result = self.repl_step(&engine, &mut s, &mut pending, cmd, rest);
            match result {
                Ok(true) => {}
                Ok(false) => break,
                Err(e) => {
                    if self.json {
                        self.emit(&error_json(&e))?;
                    } else {
                        writeln!(self.out, "error: {e:#}")?;
                    }
                }
            }
        }
        Ok(())
    }

    fn repl_step(
        &mut self,
        engine: &Engine,
        s: &mut SessionState,
        pending: &mut Option<String>,
        cmd: &str,
        rest: &str,
    ) -> anyhow::Result<bool> {
        match cmd {
            "patient" | "clinician" => {
                if rest.is_empty() {
                    bail!("turn text must not be empty");
                }
                let u = engine.add_turn(s, cmd, rest)?;
                if self.json {
                    self.emit(&u)?;
                } else {
                    writeln!(
                        self.out,
                        "turn {}: new {:?}; phi {:?}; complexity {:.3}; alpha {:.4}",
                        u.turn,
                        u.new_features,
                        u.phi.ids().collect::<Vec<_>>(),
                        u.complexity.total,
                        u.alpha
                    )?;
                }
            }
            "retrieve" => {
                let mode = match rest {
                    "" => None,
                    m => Some(serde_json::from_value::<Mode>(Value::String(m.into())).context("mode is mar, kgpath or proknow")?),
                };
                let resp = engine.retrieve(
                    &RetrieveRequest {
                        mode,
                        ..Default::default()
                    },
                    Some(s),
                )?;
                if self.json {
                    self.emit(&resp)?;
                } else {
                    write_ranking(self.out, &resp)?;
                }
            }
            "next" => {
                let id = match rest {
                    "" => engine
                        .retrieve(
                            &RetrieveRequest {
                                mode: Some(Mode::Proknow),
                                ..Default::default()
                            },
                            Some(s),
                        )?
                        .proknow
                        .and_then(|p| p.instrument_id)
                        .context("no instrument matches the session yet; name one")?,
                    id => id.to_string(),
                };
                let q = engine.next_question(s, &id)?;
                if let NextQuestion::Question { text, .. } = &q {
                    *pending = Some(text.clone());
                }
                if self.json {
                    self.emit(&q)?;
                } else {
                    match &q {
                        NextQuestion::Question { item_index, text, .. } => {
                            writeln!(self.out, "[{id} item {item_index}] {text}  (:accept to ask)")?
                        }
                        NextQuestion::Exhausted { .. } => writeln!(self.out, "[{id}] every item has been asked")?,
                    }
                }
            }
            "accept" => {
                let q = pending.take().context("no suggested question; use :next")?;
                return self.repl_step(engine, s, pending, "clinician", &q);
            }
            "state" => {
                if self.json {
                    self.emit(s)?;
                } else {
                    writeln!(self.out, "{}", serde_json::to_string_pretty(s)?)?;
                }
            }
            "help" => writeln!(
                self.out,
                "text                patient turn\n:clinician TEXT     clinician turn\n:retrieve [MODE]    rank the corpus (mar, kgpath, proknow)\n:next [INSTRUMENT]  suggest the next question\n:accept             ask the suggested question\n:state              print the session\n:quit"
            )?,
            "quit" | "exit" => return Ok(false),
            other => bail!("unknown command :{other}; :help lists commands"),
        }
        Ok(true)
    }

    fn train(&mut self, a: TrainArgs) -> anyhow::Result<()> {
        let out = match a.out {
            Some(o) => o,
            None => DataDir::new(self.settings.data_dir.as_deref())
                .path("model.json")
                .context("pass --out or --data-dir")?,
        };
        let engine = self.engine()?;
        let labeled = read_labeled_queries(&a.triples)?;
        let mut hyper = self.settings.training;
        if let Some(lr) = a.lr {
            hyper.learning_rate = lr;
        }
        if let Some(e) = a.epochs {
            hyper.epochs = e;
        }
        if let Some(s) = a.seed {
            hyper.seed = s;
        }
        let lease = engine.begin_training()?;
        let report = engine.train(&lease, &labeled, &hyper, &a.overrides.overrides())?;
        let ck: ModelCheckpoint = engine.snapshot().model.checkpoint();
        let body = serde_json::to_string(&ck)?;
        std::fs::write(&out, body).with_context(|| format!("writing {}", out.display()))?;
        if self.json {
            return self.emit(&json!({ "checkpoint": out, "report": report }));
        }
        writeln!(
            self.out,
            "{} triples, {} epochs: loss {:.6} -> {:.6}, triple accuracy {:.3} -> {:.3}{}",
            report.triples,
            hyper.epochs,
            report.loss_curve.first().copied().unwrap_or(report.final_loss),
            report.final_loss,
            report.initial_accuracy,
            report.triple_accuracy,
            if !report.sampling_fallbacks.is_empty() {
                format!(" ({} uniform negative fallbacks)", report.sampling_fallbacks.len())
            } else {
                String::new()
            }
        )?;
        writeln!(self.out, "wrote {}", out.display())?;
        Ok(())
    }

    fn eval(&mut self, a: EvalArgs) -> anyhow::Result<()> {
        let raw = std::fs::read_to_string(&a.examples).with_context(|| format!("reading {}", a.examples.display()))?;
        let examples = parse_examples(&raw)?;
        let report = match a.scorer {
            ScorerArg::Provided => evaluate(&examples, &ProvidedScorer)?,
            ScorerArg::Oracle => evaluate(&examples, &OracleScorer)?,
            ScorerArg::Instrument => {
                let engine = self.engine()?;
                let scorer = InstrumentScorer {
                    lexicon: engine.lexicon(),
                    kg: engine.kg(),
                    registry: engine.instruments(),
                    task_instruments: a.tasks.into_iter().collect::<BTreeMap<_, _>>(),
                };
                evaluate(&examples, &scorer as &dyn Scorer)?
            }
        };
        if self.json {
            self.emit(&report)
        } else {
            write_eval(self.out, &report)
        }
    }

    fn serve(&mut self, a: ServeArgs) -> anyhow::Result<()> {
        let bind = a.bind.unwrap_or_else(|| self.settings.bind.clone());
        let addr = format!("{bind}:{}", self.settings.port);
        let engine = Arc::new(self.engine()?);
        let state = AppState::new(engine, self.settings.training);
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        rt.block_on(async {
            let listener = tokio::net::TcpListener::bind(&addr)
                .await
                .with_context(|| format!("binding {addr}"))?;
            let local = listener.local_addr()?;
            tracing::info!(%local, "listening");
            if self.json {
                self.emit(&json!({ "listening": format!("http://{local}") }))?;
            } else {
                writeln!(self.out, "listening on http://{local}")?;
            }
            self.out.flush()?;
            api::serve(listener, state).await?;
            Ok(())
        })
    }

    fn config_show(&mut self) -> anyhow::Result<()> {
        if self.json {
            let s = self.settings.clone();
            self.emit(&s)
        } else {
            write!(self.out, "{}", self.settings.to_toml()?)?;
            Ok(())
        }
    }
}

fn build_session(engine: &Engine, file: Option<&Path>, turns: &[String]) -> anyhow::Result<Option<SessionState>> {
    let mut s = match file {
        Some(p) => {
            let raw = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&raw).with_context(|| format!("parsing session {}", p.display()))?
        }
        None if turns.is_empty() => return Ok(None),
        None => SessionState::new("cli"),
    };
    for t in turns {
        engine.add_turn(&mut s, "patient", t)?;
    }
    Ok(Some(s))
}

fn write_ranking(out: &mut dyn Write, r: &RetrieveResponse) -> anyhow::Result<()> {
    writeln!(out, "{:>4}  {:>9}  document", "rank", "score")?;
    for d in &r.ranking {
        writeln!(out, "{:>4}  {:>9.6}  {}", d.rank, d.score, d.document_id)?;
    }
    if let Some(p) = &r.proknow {
        match &p.next_question {
            Some(NextQuestion::Question { instrument_id, text, .. }) => {
                writeln!(out, "next question ({instrument_id}): {text}")?
            }
            Some(NextQuestion::Exhausted { instrument_id }) => writeln!(out, "{instrument_id}: every item asked")?,
            None => writeln!(out, "no instrument matches")?,
        }
    }
    Ok(())
}

fn write_eval(out: &mut dyn Write, r: &EvalReport) -> anyhow::Result<()> {
    writeln!(out, "{:<20} {:>5} {:>8} {:>8} {:>8} {:>8}", "task", "n", "Acc", "F1", "Prec", "Rec")?;
    for t in &r.tasks {
        let s = t.scores;
        writeln!(
            out,
            "{:<20} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            t.task,
            t.confusion.total(),
            s.accuracy,
            s.f1,
            s.precision,
            s.recall
        )?;
    }
    let m = r.macro_average;
    writeln!(
        out,
        "{:<20} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
        "macro", "", m.accuracy, m.f1, m.precision, m.recall
    )?;
    Ok(())
}
