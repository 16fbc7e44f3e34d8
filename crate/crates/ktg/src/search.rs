//! Random search over graphs with median-style early stopping.
//!
//! Trials are sampled from a seed derived from the search seed and the trial
//! index, so a trial's graph never depends on scheduling. Every checkpoint and
//! terminal event is appended to a JSON-lines log; on resume, trials without
//! a terminal record are discarded and rerun, and the pruner is rebuilt from
//! the surviving reports.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ktg_core::pruner::{Decision, PrunerState, DEFAULT_MIN_REPORTS};
use ktg_core::{Arch, GraphSpec, SpaceDescriptor, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::document::{graph_digest, GraphJson};
use crate::error::{Error, Result};
use crate::models::{BackboneConfig, ModelSpec};
use crate::training::{derive_seed, GraphTrainer, Outcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub num_nodes: usize,
    pub arch: Arch,
    pub trials: usize,
    /// Reports needed at an epoch before the pruner may stop a trial there.
    pub min_reports: usize,
    pub seed: u64,
    /// Trials trained concurrently. Results are only reproducible with 1.
    pub parallel: usize,
    /// Search on a class-balanced half split of the training set instead of
    /// the train/test pair.
    pub half_split: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            num_nodes: 3,
            arch: Arch::AtSmallResnet,
            trials: 32,
            min_reports: DEFAULT_MIN_REPORTS,
            seed: 0,
            parallel: 1,
            half_split: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialEvent {
    Checkpoint,
    Done,
    Pruned,
    Failed,
}

impl TrialEvent {
    pub fn is_terminal(self) -> bool {
        self != TrialEvent::Checkpoint
    }
}

/// One line of the trial log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub event: TrialEvent,
    pub epoch: u32,
    pub ens_acc: Option<f64>,
    #[serde(default)]
    pub node_accs: Vec<f64>,
    pub graph_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Reads a trial log. A final line without a newline that does not parse is
/// treated as a torn write and ignored.
pub fn read_log(path: &Path) -> Result<Vec<TrialRecord>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !complete => break,
            Err(e) => {
                return Err(Error::Parse {
                    line: i + 1,
                    column: e.column(),
                    message: format!("{}: {e}", path.display()),
                })
            }
        }
    }
    Ok(out)
}

/// Keeps only the records of trials that reached a terminal event.
pub fn completed_records(records: Vec<TrialRecord>) -> Vec<TrialRecord> {
    let done: std::collections::BTreeSet<usize> = records
        .iter()
        .filter(|r| r.event.is_terminal())
        .map(|r| r.trial_id)
        .collect();
    records.into_iter().filter(|r| done.contains(&r.trial_id)).collect()
}

/// Rebuilds pruner statistics from checkpoint reports, in trial order.
pub fn replay_pruner(min_reports: usize, records: &[TrialRecord]) -> PrunerState {
    let mut by_trial: BTreeMap<usize, Vec<(u32, f64)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.event == TrialEvent::Checkpoint) {
        if let Some(acc) = r.ens_acc {
            by_trial.entry(r.trial_id).or_default().push((r.epoch, acc));
        }
    }
    PrunerState::replay(min_reports, by_trial.into_values().flatten())
}

struct LogWriter {
    out: BufWriter<File>,
}

impl LogWriter {
    fn append(&mut self, r: &TrialRecord) -> Result<()> {
        let line = serde_json::to_string(r).expect("trial records always serialize");
        let io = |e| Error::Io {
            path: PathBuf::from("trial log"),
            source: e,
        };
        writeln!(self.out, "{line}").map_err(io)?;
        self.out.flush().map_err(io)?;
        self.out.get_ref().sync_data().map_err(io)
    }
}

/// Rewrites `path` with `records` via a temporary file and rename.
fn rewrite_log(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("trial records always serialize"));
        text.push('\n');
    }
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Inputs shared by every trial.
pub struct SearchContext<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub train_config: &'a TrainConfig,
    pub backbone: &'a BackboneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial_id: usize,
    pub status: TrialEvent,
    pub epoch: u32,
    pub ens_acc: Option<f64>,
    pub node_accs: Vec<f64>,
    pub graph: GraphJson,
    pub graph_digest: String,
    pub wall_time: Option<f64>,
    pub param_count: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub trials: Vec<TrialSummary>,
    pub best: Option<TrialSummary>,
}

impl SearchSummary {
    pub fn from_records(records: &[TrialRecord]) -> Self {
        let mut trials: Vec<TrialSummary> = records
            .iter()
            .filter(|r| r.event.is_terminal())
            .filter_map(|r| {
                Some(TrialSummary {
                    trial_id: r.trial_id,
                    status: r.event,
                    epoch: r.epoch,
                    ens_acc: r.ens_acc,
                    node_accs: r.node_accs.clone(),
                    graph: r.graph.clone()?,
                    graph_digest: r.graph_digest.clone(),
                    wall_time: r.wall_time,
                    param_count: r.param_count,
                })
            })
            .collect();
        trials.sort_by_key(|t| t.trial_id);
        let mut best: Option<&TrialSummary> = None;
        for t in trials.iter().filter(|t| t.status == TrialEvent::Done) {
            let acc = t.ens_acc.unwrap_or(f64::NEG_INFINITY);
            if best.map_or(true, |b| acc > b.ens_acc.unwrap_or(f64::NEG_INFINITY)) {
                best = Some(t);
            }
        }
        let best = best.cloned();
        Self { trials, best }
    }

    pub fn count(&self, status: TrialEvent) -> usize {
        self.trials.iter().filter(|t| t.status == status).count()
    }
}

/// Graph of trial `trial_id`.
pub fn trial_graph(space: &SpaceDescriptor, search_seed: u64, trial_id: usize) -> Result<GraphSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(search_seed, trial_id as u64));
    Ok(space.sample(&mut rng)?)
}

struct Shared {
    pruner: PrunerState,
    log: LogWriter,
}

/// Runs (or resumes) a search, logging to `log_path`.
pub fn run_search(ctx: &SearchContext<'_>, cfg: &SearchConfig, log_path: &Path, resume: bool) -> Result<SearchSummary> {
    if cfg.parallel == 0 {
        return Err(Error::Config("parallel must be at least 1".into()));
    }
    ctx.train_config.validate()?;
    let space = SpaceDescriptor::new(cfg.num_nodes, cfg.arch)?;
    let kept = if resume {
        let kept = completed_records(read_log(log_path)?);
        rewrite_log(log_path, &kept)?;
        kept
    } else {
        if log_path.exists() {
            return Err(Error::Config(format!("{} already exists", log_path.display())));
        }
        Vec::new()
    };
    let finished: std::collections::BTreeSet<usize> = kept.iter().map(|r| r.trial_id).collect();
    let pending: Vec<usize> = (0..cfg.trials).filter(|i| !finished.contains(i)).collect();
    log::info!("{} trials finished, {} to run", finished.len(), pending.len());

    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(log_path)
        .map_err(|e| Error::io(log_path, e))?;
    let shared = Mutex::new(Shared {
        pruner: replay_pruner(cfg.min_reports, &kept),
        log: LogWriter {
            out: BufWriter::new(file),
        },
    });
    let model = ModelSpec {
        arch: cfg.arch,
        num_classes: ctx.train.num_classes,
        input: (ctx.train.channels, ctx.train.height, ctx.train.width),
        backbone: ctx.backbone.clone(),
    };

    let next = AtomicUsize::new(0);
    let worker = || -> Result<()> {
        loop {
            let k = next.fetch_add(1, Ordering::SeqCst);
            let Some(&trial_id) = pending.get(k) else {
                return Ok(());
            };
            run_trial(ctx, &space, cfg, &model, trial_id, &shared)?;
        }
    };
    let workers = cfg.parallel.min(pending.len().max(1));
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers).map(|_| s.spawn(worker)).collect();
        handles.into_iter().map(|h| h.join().expect("search worker panicked")).collect()
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    drop(shared);

    Ok(SearchSummary::from_records(&read_log(log_path)?))
}

fn run_trial(
    ctx: &SearchContext<'_>,
    space: &SpaceDescriptor,
    cfg: &SearchConfig,
    model: &ModelSpec,
    trial_id: usize,
    shared: &Mutex<Shared>,
) -> Result<()> {
    let graph = trial_graph(space, cfg.seed, trial_id)?;
    let digest = graph_digest(&graph);
    log::info!("trial {trial_id}: graph {digest}");
    let mut trainer = GraphTrainer::new(graph.clone(), model.clone(), ctx.train_config.clone())?;
    let mut log_error = None;
    let report = trainer.fit(ctx.train, ctx.test, &mut |epoch, eval| {
        let mut sh = shared.lock().expect("search state poisoned");
        let decision = sh.pruner.decide(epoch, eval.ensemble_acc);
        let rec = TrialRecord {
            trial_id,
            event: TrialEvent::Checkpoint,
            epoch,
            ens_acc: Some(eval.ensemble_acc),
            node_accs: eval.node_accs.clone(),
            graph_digest: digest.clone(),
            graph: None,
            seed: None,
            wall_time: None,
            param_count: None,
            reason: None,
        };
        if let Err(e) = sh.log.append(&rec) {
            log_error = Some(e);
            return Decision::Stop;
        }
        decision
    })?;
    if let Some(e) = log_error {
        return Err(e);
    }
    let last = report.checkpoints.last();
    let (event, epoch, reason) = match &report.outcome {
        Outcome::Completed => (TrialEvent::Done, ctx.train_config.epochs, None),
        Outcome::Pruned { epoch } => (TrialEvent::Pruned, *epoch, None),
        Outcome::Failed { epoch, reason } => (TrialEvent::Failed, *epoch, Some(reason.clone())),
    };
    let rec = TrialRecord {
        trial_id,
        event,
        epoch,
        ens_acc: if event == TrialEvent::Failed {
            None
        } else {
            last.map(|c| c.eval.ensemble_acc)
        },
        node_accs: if event == TrialEvent::Failed {
            Vec::new()
        } else {
            last.map(|c| c.eval.node_accs.clone()).unwrap_or_default()
        },
        graph_digest: digest,
        seed: Some(graph.seed),
        graph: Some(GraphJson(graph)),
        wall_time: Some(report.wall_time),
        param_count: Some(report.param_count),
        reason,
    };
    log::info!("trial {trial_id}: {event:?} at epoch {epoch}, acc {:?}", rec.ens_acc);
    shared.lock().expect("search state poisoned").log.append(&rec)
}
