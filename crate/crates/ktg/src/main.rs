use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ktg::config::{load_config, ExperimentConfig};
use ktg::data::{balanced_half_split, load_dataset};
use ktg::document::{graph_digest, graph_to_json, read_graph, write_graph, GraphJson};
use ktg::models::{Backbone, ModelSpec};
use ktg::search::{read_log, run_search, SearchContext, TrialEvent, TrialRecord};
use ktg::training::{EvalResult, GraphTrainer, Outcome};
use ktg::{plot, presets, report, Error};
use ktg_core::pruner::Decision;
use ktg_core::GraphSpec;

/// Knowledge-transfer graph search and training.
#[derive(Parser)]
#[command(name = "ktg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for data order, graph sampling and preset graphs.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Random graph search with pruning.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Continue the search logged in `--out`.
        #[arg(long)]
        resume: bool,
        /// Trials trained concurrently.
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Train one graph without pruning.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Graph document to train.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        graph: Option<PathBuf>,
        /// Named baseline graph (see `presets list`).
        #[arg(long)]
        preset: Option<String>,
    },
    /// Evaluate a trained run directory on its test set.
    Eval {
        /// Output directory of `train`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Write a graph as Graphviz DOT.
    ExportDot {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        graph: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Destination file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy-vs-nodes and accuracy-vs-parameters plots from trial logs.
    Plot {
        /// Trial logs or run directories containing `trials.jsonl`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summary tables of a trial log.
    Report {
        /// Trial log or run directory.
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Baseline graph presets.
    #[command(subcommand)]
    Presets(PresetCmd),
}

#[derive(Subcommand)]
enum PresetCmd {
    List,
    Show {
        name: String,
    },
}

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID_INPUT: u8 = 2;
const EXIT_NO_RESULT: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NoCompletedTrials) => EXIT_NO_RESULT,
        Some(
            Error::Parse { .. }
            | Error::Schema { .. }
            | Error::InvalidGraph(_)
            | Error::Config(_)
            | Error::Dataset(_)
            | Error::Core(_),
        ) => EXIT_INVALID_INPUT,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Search {
            common,
            out,
            resume,
            parallel,
        } => cmd_search(&common, &out, resume, parallel),
        Command::Train {
            common,
            out,
            graph,
            preset,
        } => cmd_train(&common, &out, graph.as_deref(), preset.as_deref()),
        Command::Eval { run } => cmd_eval(&run),
        Command::ExportDot { graph, preset, out } => {
            let g = graph_from_args(graph.as_deref(), preset.as_deref(), &ExperimentConfig::default(), 0)?;
            let dot = ktg_core::dot::to_dot(&g);
            match out {
                Some(p) => write(&p, &dot)?,
                None => print!("{dot}"),
            }
            Ok(())
        }
        Command::Plot { inputs, out } => {
            let mut records = Vec::new();
            for input in &inputs {
                let path = log_path(input);
                if !path.exists() {
                    return Err(Error::Config(format!("{} does not exist", path.display())).into());
                }
                // trial ids restart in every log; offset them to stay distinct
                let base = records.len();
                records.extend(read_log(&path)?.into_iter().map(|mut r| {
                    r.trial_id += base;
                    r
                }));
            }
            for p in plot::write_plots(&records, &out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Report { input, out } => {
            let path = log_path(&input);
            if !path.exists() {
                return Err(Error::Config(format!("{} does not exist", path.display())).into());
            }
            let r = report::render_report(&read_log(&path)?)?;
            match out {
                Some(p) => write(&p, &r.markdown)?,
                None => print!("{}", r.markdown),
            }
            Ok(())
        }
        Command::Presets(PresetCmd::List) => {
            for n in presets::preset_names() {
                println!("{n}");
            }
            Ok(())
        }
        Command::Presets(PresetCmd::Show { name }) => {
            let cfg = ExperimentConfig::default();
            println!("{}", graph_to_json(&presets::preset(&name, cfg.search.arch, 0)?));
            Ok(())
        }
    }
}

fn log_path(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join("trials.jsonl")
    } else {
        input.to_path_buf()
    }
}

fn write(path: &Path, body: &str) -> anyhow::Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn resolve_config(common: &Common, fallback: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    let path = common.config.as_deref().or(fallback.filter(|p| p.exists()));
    let mut cfg = load_config(path, &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.search.seed = seed;
    }
    Ok(cfg)
}

/// Creates `out`, refusing to reuse a non-empty directory unless resuming.
fn prepare_out_dir(out: &Path, resume: bool) -> anyhow::Result<()> {
    if out.exists() && !resume {
        let nonempty = std::fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .next()
            .is_some();
        if nonempty {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --resume to continue a search)",
                out.display()
            ))
            .into());
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(())
}

fn cmd_search(common: &Common, out: &Path, resume: bool, parallel: Option<usize>) -> anyhow::Result<()> {
    let snapshot = out.join("resolved_config.toml");
    let mut cfg = resolve_config(common, resume.then_some(snapshot.as_path()))?;
    if let Some(p) = parallel {
        cfg.search.parallel = p;
    }
    if resume && !out.join("trials.jsonl").exists() {
        return Err(Error::Config(format!("nothing to resume in {}", out.display())).into());
    }
    prepare_out_dir(out, resume)?;
    write(&snapshot, &cfg.to_toml())?;

    let splits = load_dataset(&cfg.dataset)?;
    let (train, test) = if cfg.search.half_split {
        balanced_half_split(&splits.train, cfg.search.seed)?
    } else {
        (splits.train, splits.test)
    };
    let ctx = SearchContext {
        train: &train,
        test: &test,
        train_config: &cfg.train,
        backbone: &cfg.model,
    };
    let log = out.join("trials.jsonl");
    let summary = run_search(&ctx, &cfg.search, &log, resume)?;
    write(
        &out.join("summary.json"),
        &serde_json::to_string_pretty(&summary).context("serializing summary")?,
    )?;
    let rep = report::render_report(&read_log(&log)?)?;
    write(&out.join("report.md"), &rep.markdown)?;
    match &summary.best {
        Some(best) => {
            write_graph(&out.join("best_graph.json"), &best.graph.0)?;
            write(&out.join("best_graph.dot"), &ktg_core::dot::to_dot(&best.graph.0))?;
            println!(
                "best trial {} with ensemble accuracy {:.4} ({} done, {} pruned, {} failed)",
                best.trial_id,
                best.ens_acc.unwrap_or(f64::NAN),
                summary.count(TrialEvent::Done),
                summary.count(TrialEvent::Pruned),
                summary.count(TrialEvent::Failed)
            );
            Ok(())
        }
        None => Err(Error::NoCompletedTrials.into()),
    }
}

fn graph_from_args(
    graph: Option<&Path>,
    preset: Option<&str>,
    cfg: &ExperimentConfig,
    seed: u64,
) -> anyhow::Result<GraphSpec> {
    match (graph, preset) {
        (Some(p), _) => Ok(read_graph(p)?),
        (None, Some(name)) => Ok(presets::preset(name, cfg.search.arch, seed)?),
        (None, None) => Err(Error::Config("pass --graph or --preset".into()).into()),
    }
}

fn model_spec(cfg: &ExperimentConfig, graph: &GraphSpec, data: &ktg::data::Dataset) -> ModelSpec {
    ModelSpec {
        arch: graph.arch,
        num_classes: data.num_classes,
        input: (data.channels, data.height, data.width),
        backbone: cfg.model.clone(),
    }
}

fn cmd_train(common: &Common, out: &Path, graph: Option<&Path>, preset: Option<&str>) -> anyhow::Result<()> {
    let cfg = resolve_config(common, None)?;
    let g = graph_from_args(graph, preset, &cfg, common.seed.unwrap_or(0))?;
    prepare_out_dir(out, false)?;
    write(&out.join("resolved_config.toml"), &cfg.to_toml())?;
    write_graph(&out.join("graph.json"), &g)?;
    write(&out.join("graph.dot"), &ktg_core::dot::to_dot(&g))?;

    let splits = load_dataset(&cfg.dataset)?;
    let spec = model_spec(&cfg, &g, &splits.train);
    write(&out.join("model_spec.json"), &serde_json::to_string_pretty(&spec)?)?;
    let mut trainer = GraphTrainer::new(g.clone(), spec, cfg.train.clone())?;
    let digest = graph_digest(&g);
    let mut records = Vec::new();
    let report = trainer.fit(&splits.train, &splits.test, &mut |epoch, eval: &EvalResult| {
        records.push(record(&digest, TrialEvent::Checkpoint, epoch, Some(eval)));
        Decision::Continue
    })?;
    let nodes = out.join("nodes");
    std::fs::create_dir_all(&nodes).map_err(|e| Error::io(&nodes, e))?;
    for (m, node) in trainer.nodes().iter().enumerate() {
        node.save(&nodes.join(format!("node{m}.safetensors")))?;
    }
    let (event, epoch) = match &report.outcome {
        Outcome::Completed => (TrialEvent::Done, cfg.train.epochs),
        Outcome::Pruned { epoch } => (TrialEvent::Pruned, *epoch),
        Outcome::Failed { epoch, .. } => (TrialEvent::Failed, *epoch),
    };
    let mut last = record(&digest, event, epoch, report.final_eval());
    last.graph = Some(GraphJson(g.clone()));
    last.seed = Some(g.seed);
    last.wall_time = Some(report.wall_time);
    last.param_count = Some(report.param_count);
    if let Outcome::Failed { reason, .. } = &report.outcome {
        last.reason = Some(reason.clone());
    }
    records.push(last);
    let log: String = records
        .iter()
        .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
        .collect::<Result<_, _>>()?;
    write(&out.join("trials.jsonl"), &log)?;
    write(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    match report.final_eval() {
        Some(e) => {
            println!("ensemble accuracy {:.4}, nodes {:?}", e.ensemble_acc, e.node_accs);
            Ok(())
        }
        None => Err(Error::NoCompletedTrials.into()),
    }
}

fn record(digest: &str, event: TrialEvent, epoch: u32, eval: Option<&EvalResult>) -> TrialRecord {
    TrialRecord {
        trial_id: 0,
        event,
        epoch,
        ens_acc: eval.map(|e| e.ensemble_acc),
        node_accs: eval.map(|e| e.node_accs.clone()).unwrap_or_default(),
        graph_digest: digest.to_string(),
        graph: None,
        seed: None,
        wall_time: None,
        param_count: None,
        reason: None,
    }
}

fn cmd_eval(run: &Path) -> anyhow::Result<()> {
    let cfg = load_config(Some(&run.join("resolved_config.toml")), &[])?;
    let g = read_graph(&run.join("graph.json"))?;
    let spec_path = run.join("model_spec.json");
    let spec: ModelSpec = serde_json::from_str(
        &std::fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?,
    )
    .with_context(|| format!("parsing {}", spec_path.display()))?;
    let splits = load_dataset(&cfg.dataset)?;
    let mut trainer = GraphTrainer::new(g.clone(), spec.clone(), cfg.train.clone())?;
    let nodes = (0..g.num_nodes)
        .map(|m| Backbone::load(spec.clone(), &run.join("nodes").join(format!("node{m}.safetensors"))))
        .collect::<Result<Vec<_>, _>>()?;
    trainer.replace_nodes(nodes)?;
    let eval = trainer.evaluate(&splits.test)?;
    let json = serde_json::to_string_pretty(&eval)?;
    write(&run.join("eval.json"), &(json.clone() + "\n"))?;
    println!("{json}");
    Ok(())
}
