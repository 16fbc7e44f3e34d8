//! End-to-end search with a simulated crash and resume.

use std::path::Path;

use ktg::data::{builtin, synthetic_dataset};
use ktg::document::{graph_to_json, parse_graph};
use ktg::models::BackboneConfig;
use ktg::report::render_report;
use ktg::search::{read_log, run_search, SearchConfig, SearchContext, SearchSummary, TrialEvent};
use ktg_core::dot::to_dot;
use ktg_core::{Arch, TrainConfig};

use crate::{ensure, Outcome};

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn outcomes(s: &SearchSummary) -> Vec<(usize, TrialEvent, u32, Option<f64>)> {
    s.trials.iter().map(|t| (t.trial_id, t.status, t.epoch, t.ens_acc)).collect()
}

/// Cuts the log inside a trial that had not finished yet and leaves half a
/// record dangling, as if the process died mid-write.
fn crash_copy(from: &Path, to: &Path) -> Result<usize, String> {
    let text = std::fs::read_to_string(from).map_err(err)?;
    let lines: Vec<&str> = text.lines().collect();
    let records = read_log(from).map_err(err)?;
    let cut = (lines.len() / 2..lines.len())
        .find(|&i| {
            let r = &records[i - 1];
            r.event == TrialEvent::Checkpoint
        })
        .ok_or("no checkpoint record to cut after")?;
    let mut torn: String = lines[..cut].iter().map(|l| format!("{l}\n")).collect();
    torn.push_str(&lines[cut][..lines[cut].len() / 2]);
    std::fs::write(to, torn).map_err(err)?;
    Ok(cut)
}

pub fn search() -> Outcome {
    let data = synthetic_dataset(&builtin("shapes-tiny").unwrap()).map_err(err)?;
    let train_config = TrainConfig {
        epochs: 8,
        batch_size: 16,
        lr_initial: 0.05,
        ..TrainConfig::default()
    };
    let backbone = BackboneConfig::tiny();
    let ctx = SearchContext {
        train: &data.train,
        test: &data.test,
        train_config: &train_config,
        backbone: &backbone,
    };
    let cfg = SearchConfig {
        num_nodes: 3,
        arch: Arch::AtSmallResnet,
        trials: 16,
        seed: 0,
        parallel: 1,
        ..SearchConfig::default()
    };
    let dir = tempfile::tempdir().map_err(err)?;
    let log = dir.path().join("trials.jsonl");
    let first = run_search(&ctx, &cfg, &log, false).map_err(err)?;
    ensure(first.trials.len() == 16, format!("{} trials finished", first.trials.len()))?;
    let pruned = first.count(TrialEvent::Pruned);
    let done = first.count(TrialEvent::Done);
    ensure(pruned >= 1, format!("no trial pruned ({done} completed)"))?;
    let best = first.best.as_ref().ok_or("no best trial")?;

    let json = graph_to_json(&best.graph.0);
    ensure(parse_graph(&json).map_err(err)? == best.graph.0, "best graph does not round-trip")?;
    let dot = to_dot(&best.graph.0);
    graphviz_rust::parse(&dot).map_err(|e| format!("best graph DOT does not parse: {e}"))?;
    let report = render_report(&read_log(&log).map_err(err)?).map_err(err)?;
    let report_dot = report.best_graph_dot.ok_or("report has no best graph")?;
    graphviz_rust::parse(&report_dot).map_err(|e| format!("report DOT does not parse: {e}"))?;

    let crashed = dir.path().join("crashed.jsonl");
    let cut = crash_copy(&log, &crashed)?;
    let resumed = run_search(&ctx, &cfg, &crashed, true).map_err(err)?;
    let resumed_best = resumed.best.as_ref().ok_or("no best trial after resume")?;
    ensure(
        resumed_best.trial_id == best.trial_id,
        format!("best trial {} before the crash, {} after resume", best.trial_id, resumed_best.trial_id),
    )?;
    ensure(outcomes(&resumed) == outcomes(&first), "resumed trial outcomes differ")?;
    Ok(format!(
        "16 trials: {done} done, {pruned} pruned; best #{} ({:.3}); cut at line {cut}, resume agrees",
        best.trial_id,
        best.ens_acc.unwrap_or(f64::NAN)
    ))
}
