pub mod config;
pub mod server;
pub mod transport;

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use capfuse::corpus::{
    filter_first_author_repeat, ingest_jsonl, make_split, read_records, render_author_text, write_records,
    DatasetSplit, IngestConfig, PaperRecord,
};
use capfuse::encoder::Field;
use capfuse::evaluation::{
    calibrate_linear, corr_table, ols_table, ols_with_intercept, pearson_corr_matrix, plot, threshold_by_rate, Table,
};
use capfuse::experiment::{build_vocab, partition, train_model, train_predicted, Arch, Parts, RunOutput};
use capfuse::fusion::FusionKind;
use capfuse::llm::{map_concurrent, Gateway};
use capfuse::model::Objective;
use capfuse::service::{
    finalize_score, predict_outcome, recommend, ModelPair, RecommendRequest, Registry, Submission,
    TrainedModel,
};
use capfuse::synthetic::generate;
use capfuse::training::{aggregate_trials, AggregateMode, RunDir, TrialResult};

use crate::config::{AppConfig, ModelEntry};
use crate::transport::HttpTransport;

#[derive(Debug, Parser)]
#[command(name = "capfuse", version, about = "Predict review outcomes from authors, capability and idea text")]
pub struct Cli {
    /// TOML file with [train], [encoder], [predictor], [gateway] and [serve] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the training seed list with a single seed; also seeds synth and split.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate labelled synthetic records with a planted outcome function.
    Synth {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value = "ICLR2024")]
        venue: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate raw JSONL documents into normalised records.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Allowed venues (repeatable); defaults to the built-in list.
        #[arg(long = "venue")]
        venues: Vec<String>,
        /// Where to write per-document rejections as JSONL.
        #[arg(long)]
        rejections: Option<PathBuf>,
        /// Keep only records whose first author leads at least two records.
        #[arg(long)]
        first_author_repeat: bool,
    },
    /// Run LLM extraction or judging over records.
    Extract {
        #[arg(value_enum)]
        what: ExtractKind,
        #[arg(long)]
        records: PathBuf,
        /// Records with the extracted field filled in, or judge scores as CSV.
        #[arg(long)]
        out: PathBuf,
        /// Re-extract fields that are already present.
        #[arg(long)]
        overwrite: bool,
    },
    /// Write a seeded 8:1:1 split manifest.
    Split {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an outcome model; one run directory per seed.
    Train(TrainArgs),
    /// Metrics, tables, regressions, calibration and plots.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
    /// Predict rating and acceptance for one submission (JSON file or stdin).
    Predict {
        #[command(flatten)]
        models: PairArgs,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Rank candidate ideas or author groups (JSON file or stdin).
    Recommend {
        #[command(flatten)]
        models: PairArgs,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Serve the HTTP API and an optional static directory.
    Serve {
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        static_dir: Option<PathBuf>,
        /// `id=RATING.json,ACCEPTANCE.json`; repeatable, added to the config's models.
        #[arg(long = "pair")]
        pairs: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExtractKind {
    Idea,
    Capability,
    Judge,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, default_value = "three-way")]
    pub arch: Arch,
    #[arg(long, default_value = "sa1")]
    pub fusion: FusionKind,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    /// Input fields of a single-encoder model, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "author")]
    pub fields: Vec<Field>,
    /// Trained explicit three-way model that supplies capability targets (cap-pred).
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub model_id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Rating,
    Acceptance,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Rating => Objective::Rating,
            ObjectiveArg::Acceptance => Objective::Acceptance,
        }
    }
}

#[derive(Debug, Args)]
pub struct PairArgs {
    /// Rating model; defaults to the first `[[serve.models]]` entry.
    #[arg(long, requires = "acceptance")]
    pub rating: Option<PathBuf>,
    #[arg(long, requires = "rating")]
    pub acceptance: Option<PathBuf>,
    #[arg(long, default_value = "cli")]
    pub model_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Part {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Median,
    MeanStd,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Test metrics of one trained model.
    Metrics {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        part: Part,
    },
    /// Per-record outputs of several models as CSV (`record_id,label,<name>...`).
    Predictions {
        /// `name=PATH`, repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        part: Part,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate run summaries into one table (text and CSV).
    Table {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "median")]
        mode: ModeArg,
        #[arg(long)]
        out_prefix: Option<PathBuf>,
    },
    /// OLS of one CSV column on others, with an intercept.
    Ols {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        y: String,
        #[arg(long, value_delimiter = ',', required = true)]
        x: Vec<String>,
        #[arg(long)]
        out_prefix: Option<PathBuf>,
    },
    /// Pearson correlation matrix of CSV columns.
    Corr {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        columns: Vec<String>,
        #[arg(long)]
        out_prefix: Option<PathBuf>,
    },
    /// Calibrate a score column to a target mean/std and optionally threshold
    /// a probability column at a target positive rate.
    Calibrate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        column: String,
        #[arg(long)]
        mean: f64,
        #[arg(long)]
        std: f64,
        #[arg(long, requires = "rate")]
        prob_column: Option<String>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Static SVG figures.
    Plot {
        #[command(subcommand)]
        figure: PlotCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum PlotCommand {
    /// Correlation heat map of CSV columns.
    Correlation {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        columns: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Raw against calibrated scores.
    Calibration {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        column: String,
        #[arg(long)]
        mean: f64,
        #[arg(long)]
        std: f64,
        /// Column with true outcomes, drawn for reference.
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = AppConfig::load(cli.config.as_deref(), cli.seed, |k| std::env::var(k).ok())?;
    let seed = cli.seed.unwrap_or(42);
    match cli.command {
        Command::Synth { n, venue, out } => {
            let records: Vec<PaperRecord> = generate(n, seed, &venue)?.into_iter().map(|(r, _)| r).collect();
            write_records(&out, &records)?;
            eprintln!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Ingest {
            input,
            out,
            venues,
            rejections,
            first_author_repeat,
        } => {
            let mut icfg = IngestConfig::default();
            if !venues.is_empty() {
                icfg.venues = venues;
            }
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let report = ingest_jsonl(&text, &icfg)?;
            let mut records = report.records;
            if first_author_repeat {
                records = filter_first_author_repeat(&records);
            }
            write_records(&out, &records)?;
            if let Some(p) = rejections {
                write_jsonl(&p, &report.rejections)?;
            }
            for r in &report.rejections {
                log::warn!("document {} rejected: {}", r.position, r.reason);
            }
            eprintln!("kept {} records, rejected {}", records.len(), report.rejections.len());
        }
        Command::Extract {
            what,
            records,
            out,
            overwrite,
        } => extract(&cfg, what, &records, &out, overwrite)?,
        Command::Split { records, out } => {
            let split = make_split(&read_records(&records)?, seed)?;
            split.write_manifest(&out)?;
            let (a, b, c) = split.sizes();
            eprintln!("split seed {seed}: train {a}, val {b}, test {c}");
        }
        Command::Train(args) => train(&cfg, args)?,
        Command::Eval { command } => eval(command)?,
        Command::Predict { models, input } => {
            let pair = load_pair(&cfg, &models)?;
            let sub: Submission = serde_json::from_str(&read_input(input.as_deref())?)?;
            print_json(&predict_outcome(&pair, &sub)?)?;
        }
        Command::Recommend { models, input } => {
            let pair = load_pair(&cfg, &models)?;
            let req: RecommendRequest = serde_json::from_str(&read_input(input.as_deref())?)?;
            print_json(&recommend(&pair, &req, cfg.serve.fanout)?)?;
        }
        Command::Serve {
            addr,
            static_dir,
            pairs,
        } => {
            let mut entries = cfg.serve.models.clone();
            for p in &pairs {
                entries.push(parse_pair(p)?);
            }
            let mut registry = Registry::new();
            registry.fanout = cfg.serve.fanout;
            for e in &entries {
                let pair = ModelPair::new(&e.id, TrainedModel::load(&e.rating)?, TrainedModel::load(&e.acceptance)?)?;
                registry.add(Arc::new(pair))?;
            }
            if registry.is_empty() {
                log::warn!("no models loaded; predict and recommend will answer 503");
            }
            let router = server::router(Arc::new(registry), static_dir.or(cfg.serve.static_dir.clone()));
            let addr = addr.unwrap_or(cfg.serve.addr.clone());
            tokio::runtime::Runtime::new()?.block_on(server::serve(router, &addr))?;
        }
    }
    Ok(())
}

fn read_input(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            Ok(s)
        }
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses `id=RATING,ACCEPTANCE`.
pub fn parse_pair(s: &str) -> Result<ModelEntry> {
    let (id, paths) = s.split_once('=').ok_or_else(|| anyhow!("expected id=RATING,ACCEPTANCE, got {s}"))?;
    let (r, a) = paths
        .split_once(',')
        .ok_or_else(|| anyhow!("expected id=RATING,ACCEPTANCE, got {s}"))?;
    Ok(ModelEntry {
        id: id.into(),
        rating: r.into(),
        acceptance: a.into(),
    })
}

fn load_pair(cfg: &AppConfig, args: &PairArgs) -> Result<ModelPair> {
    let (id, r, a) = match (&args.rating, &args.acceptance) {
        (Some(r), Some(a)) => (args.model_id.clone(), r.clone(), a.clone()),
        _ => {
            let e = cfg
                .serve
                .models
                .first()
                .ok_or_else(|| anyhow!("pass --rating and --acceptance or list [[serve.models]] in the config"))?;
            (e.id.clone(), e.rating.clone(), e.acceptance.clone())
        }
    };
    Ok(ModelPair::new(id, TrainedModel::load(&r)?, TrainedModel::load(&a)?)?)
}

fn manuscript_text(r: &PaperRecord) -> String {
    format!("{}\n\n{}", r.title, r.r#abstract)
}

fn extract(cfg: &AppConfig, what: ExtractKind, records_path: &Path, out: &Path, overwrite: bool) -> Result<()> {
    let mut records = read_records(records_path)?;
    let gateway = Gateway::new(cfg.gateway.clone(), HttpTransport::new(&cfg.gateway))?;
    let width = cfg.gateway.max_concurrency;
    match what {
        ExtractKind::Judge => {
            let batch = gateway.judge_records(&records);
            let mut w = csv::Writer::from_path(out)?;
            w.write_record(["record_id", "acc_chance", "rating_ave"])?;
            for (id, o) in &batch.outputs {
                w.write_record([id.clone(), o.acc_chance.to_string(), o.rating_ave.to_string()])?;
            }
            w.flush()?;
            for e in &batch.excluded {
                log::warn!("excluded {}: {}", e.record_id, e.reason);
            }
            eprintln!("judged {}, excluded {}", batch.outputs.len(), batch.excluded.len());
        }
        ExtractKind::Idea | ExtractKind::Capability => {
            let todo: Vec<usize> = (0..records.len())
                .filter(|&i| {
                    let field = match what {
                        ExtractKind::Idea => &records[i].idea_text,
                        _ => &records[i].capability_text,
                    };
                    overwrite || field.is_none()
                })
                .collect();
            let results = map_concurrent(&todo, width, |&i| {
                let r = &records[i];
                match what {
                    ExtractKind::Idea => gateway.extract_idea(&manuscript_text(r)).map(|x| x.text),
                    _ => gateway
                        .extract_capability(&manuscript_text(r), &render_author_text(r, false))
                        .map(|p| p.render_text()),
                }
            });
            let mut failed = 0;
            for (&i, res) in todo.iter().zip(results) {
                match res {
                    Ok(text) => match what {
                        ExtractKind::Idea => records[i].idea_text = Some(text),
                        _ => records[i].capability_text = Some(text),
                    },
                    Err(e) => {
                        failed += 1;
                        log::warn!("{}: extraction failed: {e}", records[i].record_id);
                    }
                }
            }
            write_records(out, &records)?;
            eprintln!(
                "extracted {} of {} ({} calls, {} failed)",
                todo.len() - failed,
                todo.len(),
                gateway.outbound_calls(),
                failed
            );
        }
    }
    Ok(())
}

fn load_parts(records: &Path, split: &Path) -> Result<Parts> {
    let records = read_records(records)?;
    let split = DatasetSplit::read_manifest(split)?;
    Ok(partition(&records, &split)?)
}

#[derive(Serialize)]
struct RunConfig<'a> {
    arch: String,
    fusion: String,
    fields: Vec<&'static str>,
    seed: u64,
    train: &'a capfuse::training::TrainConfig,
    encoder: capfuse::encoder::EncoderConfig,
    predictor: Option<&'a capfuse::experiment::PredictorConfig>,
    teacher: Option<&'a Path>,
}

fn train(cfg: &AppConfig, args: TrainArgs) -> Result<()> {
    let mut tcfg = cfg.train.clone();
    if let Some(o) = args.objective {
        tcfg.objective = o.into();
    }
    let teacher = match (&args.arch, &args.teacher) {
        (Arch::CapPred, Some(p)) => Some(TrainedModel::load(p)?),
        (Arch::CapPred, None) => bail!("cap-pred needs --teacher (a trained explicit three-way model)"),
        (_, Some(_)) => bail!("--teacher only applies to --arch cap-pred"),
        _ => None,
    };
    let parts = load_parts(&args.records, &args.split)?;
    if let Some(t) = &teacher {
        if args.objective.is_none() {
            tcfg.objective = t.objective;
        }
    }
    let encoder = cfg.encoder();
    let vocab = match &teacher {
        Some(t) => t.vocab.clone(),
        None => build_vocab(&encoder.vocab_id, &parts.train, 2),
    };
    let model_id = args.model_id.clone().unwrap_or_else(|| {
        let fusion = if args.arch == Arch::Single { "none".into() } else { args.fusion.key() };
        format!("{}-{}-{}", args.arch, fusion, tcfg.objective)
    });
    let mut trials: Vec<TrialResult> = Vec::new();
    let mut best: Option<(f64, PathBuf)> = None;
    for &seed in &tcfg.seeds {
        let dir = RunDir::create(args.out.join(format!("seed-{seed}")))?;
        dir.write_config(&RunConfig {
            arch: args.arch.to_string(),
            fusion: args.fusion.key(),
            fields: args.fields.iter().map(|f| f.as_str()).collect(),
            seed,
            train: &tcfg,
            encoder: encoder.clone(),
            predictor: teacher.as_ref().map(|_| &cfg.predictor),
            teacher: args.teacher.as_deref(),
        })?;
        let mut log_epoch = |stage: &str, m: &capfuse::training::EpochMetrics| {
            log::info!("seed {seed} {stage} epoch {}: train {:.4} val {:.4}", m.epoch, m.train_loss, m.val_loss);
            if stage != "pretrain" {
                if let Err(e) = dir.append_metrics(m) {
                    log::warn!("metrics log: {e}");
                }
            }
        };
        let run: RunOutput = match &teacher {
            Some(t) => train_predicted(&model_id, t, &cfg.predictor, &tcfg, &parts, seed, &mut log_epoch)?,
            None => train_model(
                &model_id,
                &args.arch,
                &args.fields,
                args.fusion,
                &encoder,
                &tcfg,
                &vocab,
                &parts,
                seed,
                |m| log_epoch("train", m),
            )?,
        };
        dir.write_checkpoint(&run.trained)?;
        dir.write_summary(&run.trial)?;
        eprintln!("seed {seed}: best epoch {} test {:?}", run.trial.best_epoch, run.trial.test_metrics);
        let path = dir.path().join(RunDir::CHECKPOINT);
        if best.as_ref().is_none_or(|(v, _)| run.trial.val_loss < *v) {
            best = Some((run.trial.val_loss, path));
        }
        trials.push(run.trial);
    }
    let summary = BTreeMap::from([
        ("median", aggregate_trials(&trials, AggregateMode::Median)?),
        ("mean_std", aggregate_trials(&trials, AggregateMode::MeanStd)?),
    ]);
    fs::write(
        args.out.join(RunDir::SUMMARY),
        serde_json::to_vec_pretty(&serde_json::json!({ "model_id": model_id, "trials": trials, "aggregate": summary }))?,
    )?;
    // the lowest-validation-loss seed becomes the run's model
    if let Some((_, path)) = best {
        fs::copy(&path, args.out.join("model.json"))?;
        eprintln!("model written to {}", args.out.join("model.json").display());
    }
    Ok(())
}

fn part<'a>(parts: &'a Parts, p: Part) -> &'a [PaperRecord] {
    match p {
        Part::Train => &parts.train,
        Part::Val => &parts.val,
        Part::Test => &parts.test,
    }
}

/// Reads the named numeric columns of a CSV file.
pub fn read_columns(path: &Path, names: &[String]) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| anyhow!("column {n} not in {}", path.display()))
        })
        .collect::<Result<_>>()?;
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        for (k, &i) in idx.iter().enumerate() {
            let v: f64 = row[i]
                .trim()
                .parse()
                .with_context(|| format!("row {} column {}: {:?}", line + 2, names[k], &row[i]))?;
            cols[k].push(v);
        }
    }
    Ok(names.iter().cloned().zip(cols).collect())
}

fn emit_table(table: &Table, prefix: Option<&Path>) -> Result<()> {
    print!("{}", table.render_text());
    if let Some(p) = prefix {
        fs::write(p.with_extension("txt"), table.render_text())?;
        fs::write(p.with_extension("csv"), table.to_csv())?;
    }
    Ok(())
}

fn eval(cmd: EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Metrics {
            model,
            records,
            split,
            part: p,
        } => {
            let m = TrainedModel::load(&model)?;
            let parts = load_parts(&records, &split)?;
            let examples = part(&parts, p)
                .iter()
                .map(|r| m.model.prepare(r, &m.vocab, m.objective))
                .collect::<capfuse::Result<Vec<_>>>()?;
            let (metrics, _) = capfuse::training::outcome_metrics(&m.model, &m.store, m.objective, &examples)?;
            print_json(&serde_json::json!({ "model_id": m.model_id, "objective": m.objective, "n": examples.len(), "metrics": metrics }))?;
        }
        EvalCommand::Predictions {
            models,
            records,
            split,
            part: p,
            out,
        } => {
            let parts = load_parts(&records, &split)?;
            let loaded: Vec<(String, TrainedModel)> = models
                .iter()
                .map(|s| {
                    let (name, path) = s.split_once('=').ok_or_else(|| anyhow!("expected name=PATH, got {s}"))?;
                    Ok((name.to_string(), TrainedModel::load(Path::new(path))?))
                })
                .collect::<Result<_>>()?;
            let objective = loaded[0].1.objective;
            if loaded.iter().any(|(_, m)| m.objective != objective) {
                bail!("all models must share one objective");
            }
            let mut w = csv::Writer::from_path(&out)?;
            let mut header = vec!["record_id".to_string(), "label".to_string()];
            header.extend(loaded.iter().map(|(n, _)| n.clone()));
            w.write_record(&header)?;
            let mut skipped = 0;
            for r in part(&parts, p) {
                let Some(label) = objective.label(r) else {
                    skipped += 1;
                    continue;
                };
                let mut row = vec![r.record_id.clone(), label.to_string()];
                for (_, m) in &loaded {
                    row.push(finalize_score(objective, m.raw(r)?)?.to_string());
                }
                w.write_record(&row)?;
            }
            w.flush()?;
            if skipped > 0 {
                log::warn!("{skipped} unlabelled records skipped");
            }
        }
        EvalCommand::Table { runs, mode, out_prefix } => {
            let mode = match mode {
                ModeArg::Median => AggregateMode::Median,
                ModeArg::MeanStd => AggregateMode::MeanStd,
            };
            let mut rows = Vec::new();
            for dir in &runs {
                let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.join(RunDir::SUMMARY))?)?;
                let trials: Vec<TrialResult> = serde_json::from_value(v["trials"].clone())?;
                let name = v["model_id"].as_str().map(String::from).unwrap_or_else(|| dir.display().to_string());
                rows.push((name, aggregate_trials(&trials, mode)?));
            }
            let keys: Vec<String> = rows[0].1.keys().cloned().collect();
            let cols: Vec<&str> = keys.iter().map(String::as_str).collect();
            let mut table = Table::new("Test performance", &cols);
            for (name, agg) in rows {
                let cells = keys
                    .iter()
                    .map(|k| match agg.get(k) {
                        Some(s) => match s.std {
                            Some(sd) => format!("{:.3} ± {:.3}", s.value, sd),
                            None => format!("{:.3}", s.value),
                        },
                        None => "-".into(),
                    })
                    .collect();
                table.push(name, cells);
            }
            emit_table(&table, out_prefix.as_deref())?;
        }
        EvalCommand::Ols { input, y, x, out_prefix } => {
            let mut names = vec![y.clone()];
            names.extend(x.iter().cloned());
            let mut cols = read_columns(&input, &names)?;
            let (_, yv) = cols.remove(0);
            let report = ols_with_intercept(&cols, &yv)?;
            emit_table(&ols_table("Regression", &[(y.as_str(), &report)]), out_prefix.as_deref())?;
        }
        EvalCommand::Corr {
            input,
            columns,
            out_prefix,
        } => {
            let m = pearson_corr_matrix(&read_columns(&input, &columns)?)?;
            emit_table(&corr_table("Correlation", &m), out_prefix.as_deref())?;
        }
        EvalCommand::Calibrate {
            input,
            column,
            mean,
            std,
            prob_column,
            rate,
            out,
        } => {
            let mut rdr = csv::Reader::from_path(&input)?;
            let headers = rdr.headers()?.clone();
            let rows: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
            let scores = &read_columns(&input, std::slice::from_ref(&column))?[0].1;
            let calibrated = calibrate_linear(scores, mean, std)?;
            let positives = match (&prob_column, rate) {
                (Some(c), Some(r)) => Some(threshold_by_rate(&read_columns(&input, std::slice::from_ref(c))?[0].1, r)?),
                _ => None,
            };
            let mut w = csv::Writer::from_path(&out)?;
            let mut h: Vec<String> = headers.iter().map(String::from).collect();
            h.push(format!("{column}_calibrated"));
            if let Some(c) = &prob_column {
                h.push(format!("{c}_positive"));
            }
            w.write_record(&h)?;
            for (i, row) in rows.iter().enumerate() {
                let mut cells: Vec<String> = row.iter().map(String::from).collect();
                cells.push(calibrated[i].to_string());
                if let Some(p) = &positives {
                    cells.push(u8::from(p[i]).to_string());
                }
                w.write_record(&cells)?;
            }
            w.flush()?;
        }
        EvalCommand::Plot { figure } => match figure {
            PlotCommand::Correlation { input, columns, out } => {
                let m = pearson_corr_matrix(&read_columns(&input, &columns)?)?;
                fs::write(&out, plot::correlation_heatmap(&m, "Pearson correlation"))?;
            }
            PlotCommand::Calibration {
                input,
                column,
                mean,
                std,
                label,
                out,
            } => {
                let raw = read_columns(&input, std::slice::from_ref(&column))?.remove(0).1;
                let cal = calibrate_linear(&raw, mean, std)?;
                let labels = match &label {
                    Some(l) => Some(read_columns(&input, std::slice::from_ref(l))?.remove(0).1),
                    None => None,
                };
                fs::write(&out, plot::calibration_scatter(&raw, &cal, labels.as_deref(), "Calibration"))?;
            }
        },
    }
    Ok(())
}
