use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use sktod_core::corpus::{
    corpus_stats, load_knowledge_base, load_split, write_knowledge_base, write_split, EntityKey, KnowledgeBase,
    Split, SplitName,
};
use sktod_core::detect::LexicalDetectorModel;
use sktod_core::metrics::EvalReport;
use sktod_core::runtime::{
    calibrate_all, calibrate_selection, evaluate_outputs, read_outputs, run_pipeline, write_outputs, Ablation,
    EvalScope, Engine, PipelineConfig, PipelineRun, RgMode, SessionStore, Stage, StageSource, ARTIFACTS_FILE,
};
use sktod_core::select::{export_training_pairs, write_training_pairs, LexicalKind};
use sktod_cli::{exit, exit_code, AppState};

#[derive(Parser)]
#[command(name = "sktod", version, about = "Review-grounded task-oriented dialogue engine")]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory with knowledge.json and one subdirectory per split.
    #[arg(long, global = true, default_value = "data")]
    data_dir: PathBuf,
    /// Calibration artifacts; defaults to <data-dir>/artifacts.
    #[arg(long, global = true)]
    artifacts: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitName::Train,
            SplitArg::Val => SplitName::Val,
            SplitArg::Test => SplitName::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScorerArg {
    Tfidf,
    Bm25,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Template,
    Ext,
    External,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum RowArg {
    Ks,
    EtKs,
    KtdEtKs,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset and print corpus statistics.
    Ingest {
        /// Only this split; all present splits by default.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// Fail when a gold snippet is missing from the knowledge base.
        #[arg(long)]
        check_integrity: bool,
        /// Write a normalized copy of the dataset here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit selection thresholds and train the detector.
    Calibrate,
    /// Knowledge-seeking turn detection.
    Detect {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Detector file to use instead of the calibrated one.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entity tracking on target instances.
    Track {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Write missing and spurious entities as TSV.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Knowledge selection over the gold entities' reviews.
    Select {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "tfidf")]
        scorer: ScorerArg,
        #[arg(long)]
        threshold: Option<f64>,
        /// Refit the threshold on the validation split before selecting.
        #[arg(long, conflicts_with = "threshold")]
        calibrate: bool,
        /// Use tracked instead of gold entities.
        #[arg(long)]
        predicted_entities: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write balanced (context, snippet, label) pairs for training an
        /// external scorer instead of selecting.
        #[arg(long)]
        export_pairs: Option<PathBuf>,
    },
    /// Response generation from gold selections.
    Generate {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "template")]
        mode: ModeArg,
        /// Append sentiment phrases to the snippets an external generator sees.
        #[arg(long)]
        use_absa: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a predictions file against a labelled split.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        /// Split directory holding logs.json and labels.json.
        #[arg(long)]
        gold: PathBuf,
        /// Comma-separated subset of ktd,et,ks,rg, or all.
        #[arg(long, default_value = "all")]
        metrics: String,
    },
    /// End-to-end ablation rows.
    E2e {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, value_delimiter = ',')]
        rows: Vec<RowArg>,
        /// Directory for per-row outputs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP dialogue service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Static files (for example a built chat client) served at /.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        #[arg(long)]
        event_log: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        ttl_minutes: u64,
    },
}

struct Ctx {
    data_dir: PathBuf,
    artifacts: PathBuf,
    config: PipelineConfig,
}

impl Ctx {
    fn kb(&self) -> anyhow::Result<KnowledgeBase> {
        Ok(load_knowledge_base(&self.data_dir)?)
    }

    fn split(&self, name: SplitName) -> anyhow::Result<Split> {
        let dir = self.data_dir.join(name.as_str());
        if !dir.is_dir() {
            return Err(sktod_core::Error::NotFound(format!("{name} split at {}", dir.display())).into());
        }
        Ok(load_split(&dir, name)?.0)
    }

    /// Engine with artifacts (when calibrated) and configured clients.
    fn engine(&self) -> anyhow::Result<Engine> {
        let mut engine = Engine::new(self.kb()?);
        if self.artifacts.join(ARTIFACTS_FILE).is_file() {
            engine.load_artifacts(&self.artifacts)?;
        } else {
            log::warn!("no artifacts at {}; run `sktod calibrate` first", self.artifacts.display());
        }
        engine.connect(&self.config.external)?;
        Ok(engine)
    }
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn report(report: &EvalReport) -> anyhow::Result<()> {
    eprintln!("{}", report.to_table().trim_end());
    print_json(report)
}

fn run_stage(engine: &Engine, config: &PipelineConfig, split: &Split, out: Option<&Path>) -> anyhow::Result<PipelineRun> {
    let run = run_pipeline(engine, config, split)?;
    if let Some(out) = out {
        write_outputs(&run.outputs, out)?;
    }
    if !run.quarantined.is_empty() {
        eprintln!("{} instances quarantined", run.quarantined.len());
    }
    report(&run.report)?;
    Ok(run)
}

/// One row per missing or spurious entity of a target instance.
fn write_tracking_errors(kb: &KnowledgeBase, split: &Split, run: &PipelineRun, path: &Path) -> anyhow::Result<()> {
    let mut tsv = String::from("instance_id\terror\tentity\tname\n");
    let gold: BTreeMap<&str, _> = split
        .instances
        .iter()
        .map(|i| (i.context.instance_id.as_str(), i.label.gold_entities()))
        .collect();
    for out in &run.outputs {
        let (Some(predicted), Some(gold)) = (&out.entities, gold.get(out.instance_id.as_str())) else {
            continue;
        };
        let predicted: BTreeSet<EntityKey> = predicted.iter().cloned().collect();
        let rows = gold
            .difference(&predicted)
            .map(|e| ("missing", e))
            .chain(predicted.difference(gold).map(|e| ("spurious", e)));
        for (kind, key) in rows {
            let name = kb.entity(key).map_or("", |e| e.name.as_str());
            tsv += &format!("{}\t{kind}\t{key}\t{name}\n", out.instance_id);
        }
    }
    std::fs::write(path, tsv).with_context(|| format!("writing {}", path.display()))
}

fn gold_upto(stage: Stage, base: &PipelineConfig) -> PipelineConfig {
    PipelineConfig {
        ktd: StageSource::Gold,
        et: StageSource::Gold,
        ks: StageSource::Gold,
        until: stage,
        ..base.clone()
    }
}

fn parse_scope(metrics: &str) -> anyhow::Result<EvalScope> {
    if metrics == "all" {
        return Ok(EvalScope::all());
    }
    let mut scope = EvalScope::default();
    for m in metrics.split(',') {
        match m.trim() {
            "ktd" => scope.detection = true,
            "et" => scope.tracking = true,
            "ks" => scope.selection = true,
            "rg" => scope.generation = true,
            other => bail!(sktod_core::Error::Config(format!("unknown metric group {other:?}"))),
        }
    }
    Ok(scope)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config: PipelineConfig = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| sktod_core::Error::Config(format!("{}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let ctx = Ctx {
        artifacts: cli.artifacts.clone().unwrap_or_else(|| cli.data_dir.join("artifacts")),
        data_dir: cli.data_dir.clone(),
        config,
    };

    match cli.command {
        Command::Ingest {
            split: only,
            check_integrity,
            out,
        } => {
            let kb = ctx.kb()?;
            let mut stats = BTreeMap::new();
            let names = match only {
                Some(s) => vec![s.into()],
                None => vec![SplitName::Train, SplitName::Val, SplitName::Test],
            };
            for name in names {
                let dir = ctx.data_dir.join(name.as_str());
                if !dir.is_dir() {
                    if only.is_some() {
                        return Err(sktod_core::Error::NotFound(format!("{name} split at {}", dir.display())).into());
                    }
                    continue;
                }
                let (split, load) = load_split(&dir, name)?;
                let dangling = split.dangling_refs(&kb);
                if let (true, Some((id, r))) = (check_integrity, dangling.first()) {
                    return Err(sktod_core::Error::Integrity(format!(
                        "{} gold snippets missing from the knowledge base, first {r} in {id}",
                        dangling.len()
                    ))
                    .into());
                }
                stats.insert(
                    name.to_string(),
                    serde_json::json!({ "stats": corpus_stats(&split, Some(&kb)), "load": {
                        "non_review_items_dropped": load.non_review_items_dropped,
                        "instances_dropped": load.instances_dropped,
                        "dangling_gold_snippets": dangling.len(),
                    }}),
                );
                if let Some(out) = &out {
                    write_split(&split, out.join(name.as_str()))?;
                }
            }
            if let Some(out) = &out {
                write_knowledge_base(&kb, out.join("knowledge.json"))?;
            }
            print_json(&serde_json::json!({
                "entities": kb.entity_count(),
                "reviews": kb.review_count(),
                "snippets": kb.snippet_count(),
                "splits": stats,
            }))
        }
        Command::Calibrate => {
            let mut engine = Engine::new(ctx.kb()?);
            let artifacts = calibrate_all(&mut engine, &ctx.data_dir, &ctx.artifacts, ctx.config.seed)?;
            eprintln!("artifacts written to {}", ctx.artifacts.display());
            print_json(&artifacts)
        }
        Command::Detect { split, model, out } => {
            let config = PipelineConfig {
                ktd: if ctx.config.ktd == StageSource::Gold {
                    StageSource::Native
                } else {
                    ctx.config.ktd
                },
                ..gold_upto(Stage::Ktd, &ctx.config)
            };
            let mut engine = ctx.engine()?;
            if let Some(path) = model {
                engine.detector = Some(LexicalDetectorModel::load(path)?);
            }
            run_stage(&engine, &config, &ctx.split(split.into())?, out.as_deref()).map(drop)
        }
        Command::Track { split, report, out } => {
            let config = PipelineConfig {
                et: StageSource::Native,
                ..gold_upto(Stage::Et, &ctx.config)
            };
            let engine = ctx.engine()?;
            let split = ctx.split(split.into())?;
            let run = run_stage(&engine, &config, &split, out.as_deref())?;
            match report {
                Some(path) => write_tracking_errors(&engine.kb, &split, &run, &path),
                None => Ok(()),
            }
        }
        Command::Select {
            split,
            scorer,
            threshold,
            calibrate,
            predicted_entities,
            out,
            export_pairs,
        } => {
            if let Some(path) = export_pairs {
                let kb = ctx.kb()?;
                let export = export_training_pairs(&ctx.split(split.into())?, &kb, ctx.config.seed)?;
                let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                write_training_pairs(&export.pairs, std::io::BufWriter::new(file))?;
                return print_json(&serde_json::json!({
                    "pairs": export.pairs.len(),
                    "positives": export.positives,
                    "negatives": export.negatives,
                    "short_instances": export.short_instances.len(),
                }));
            }
            let mut config = PipelineConfig {
                et: if predicted_entities {
                    StageSource::Native
                } else {
                    StageSource::Gold
                },
                threshold: threshold.or(ctx.config.threshold),
                ..gold_upto(Stage::Ks, &ctx.config)
            };
            match scorer {
                ScorerArg::Tfidf => config.scorer = LexicalKind::Tfidf,
                ScorerArg::Bm25 => config.scorer = LexicalKind::Bm25,
                ScorerArg::External => config.ks = StageSource::External,
            }
            if config.ks == StageSource::Gold {
                config.ks = StageSource::Native;
            }
            let mut engine = ctx.engine()?;
            if calibrate {
                let c = calibrate_selection(&mut engine, &config, &ctx.split(SplitName::Val)?)?;
                eprintln!("threshold {:.6} (validation F1 {:.2})", c.threshold, 100.0 * c.f1);
            }
            run_stage(&engine, &config, &ctx.split(split.into())?, out.as_deref()).map(drop)
        }
        Command::Generate {
            split,
            mode,
            use_absa,
            out,
        } => {
            let mut config = gold_upto(Stage::Rg, &ctx.config);
            config.use_absa |= use_absa;
            match mode {
                ModeArg::Template => {
                    config.rg = StageSource::Native;
                    config.rg_mode = RgMode::Template;
                }
                ModeArg::Ext => {
                    config.rg = StageSource::Native;
                    config.rg_mode = RgMode::Ext;
                }
                ModeArg::External => config.rg = StageSource::External,
            }
            run_stage(&ctx.engine()?, &config, &ctx.split(split.into())?, out.as_deref()).map(drop)
        }
        Command::Evaluate { pred, gold, metrics } => {
            let scope = parse_scope(&metrics)?;
            let name = gold
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(SplitName::parse)
                .unwrap_or(SplitName::Test);
            let split = load_split(&gold, name)?.0;
            let outputs = read_outputs(&pred)?;
            report(&evaluate_outputs(&outputs, &split, scope)?)
        }
        Command::E2e { split, rows, out } => {
            let engine = ctx.engine()?;
            let split = ctx.split(split.into())?;
            let rows = if rows.is_empty() {
                vec![RowArg::Ks, RowArg::EtKs, RowArg::KtdEtKs]
            } else {
                rows
            };
            let mut reports = BTreeMap::new();
            for row in rows {
                let ablation = match row {
                    RowArg::Ks => Ablation::Ks,
                    RowArg::EtKs => Ablation::EtKs,
                    RowArg::KtdEtKs => Ablation::KtdEtKs,
                };
                let preset = PipelineConfig::ablation(ablation);
                let config = PipelineConfig {
                    ktd: preset.ktd,
                    et: preset.et,
                    ks: if ctx.config.ks == StageSource::Gold {
                        StageSource::Native
                    } else {
                        ctx.config.ks
                    },
                    rg: ctx.config.rg,
                    ..ctx.config.clone()
                };
                let run = run_pipeline(&engine, &config, &split)?;
                if let Some(dir) = &out {
                    std::fs::create_dir_all(dir)?;
                    write_outputs(&run.outputs, dir.join(format!("{}.json", ablation.label())))?;
                }
                eprintln!("{}", ablation.label());
                eprintln!("{}", run.report.to_table().trim_end());
                reports.insert(ablation.label(), run.report);
            }
            print_json(&reports)
        }
        Command::Serve {
            bind,
            static_dir,
            event_log,
            ttl_minutes,
        } => {
            let engine = ctx.engine()?;
            engine.check_service(&ctx.config)?;
            let mut sessions = SessionStore::new(Duration::from_secs(ttl_minutes * 60));
            if let Some(path) = event_log {
                sessions = sessions.with_event_log(path)?;
            }
            let state = AppState {
                engine: Arc::new(engine),
                config: Arc::new(ctx.config.clone()),
                sessions: Arc::new(sessions),
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = sktod_cli::bind(bind).await?;
                log::info!("listening on {}", listener.local_addr()?);
                let shutdown = async {
                    let _ = tokio::signal::ctrl_c().await;
                    log::info!("shutting down");
                };
                sktod_cli::serve(listener, sktod_cli::router(state, static_dir), shutdown).await?;
                Ok(())
            })
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        // Core errors already carry their cause in the message.
        if e.downcast_ref::<sktod_core::Error>().is_some() {
            eprintln!("error: {e}");
        } else {
            eprintln!("error: {e:#}");
        }
        std::process::exit(exit_code(&e));
    }
}
