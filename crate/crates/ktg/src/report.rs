//! Text summaries of a trial log.

use std::collections::BTreeMap;
use std::fmt::Write;

use ktg_core::GraphSpec;

use crate::document::graph_to_json;
use crate::error::{Error, Result};
use crate::search::{SearchSummary, TrialEvent, TrialRecord};

/// Short label for the edge designs of a graph.
pub fn design_label(g: &GraphSpec) -> String {
    match g.uniform_design() {
        Ok(Some(d)) => d.display_name().to_string(),
        Ok(None) => "Independent".to_string(),
        Err(()) => "Mixed".to_string(),
    }
}

pub struct Report {
    pub markdown: String,
    pub best_graph_json: Option<String>,
    pub best_graph_dot: Option<String>,
}

fn acc(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"))
}

fn status(e: TrialEvent) -> &'static str {
    match e {
        TrialEvent::Checkpoint => "running",
        TrialEvent::Done => "done",
        TrialEvent::Pruned => "pruned",
        TrialEvent::Failed => "failed",
    }
}

/// Renders the report. Output depends only on `records`.
pub fn render_report(records: &[TrialRecord]) -> Result<Report> {
    let summary = SearchSummary::from_records(records);
    if summary.trials.is_empty() {
        return Err(Error::Dataset("trial log has no finished trials".into()));
    }
    let mut md = String::new();
    let _ = writeln!(md, "# Search report\n");
    let _ = writeln!(
        md,
        "trials: {} (done {}, pruned {}, failed {})",
        summary.trials.len(),
        summary.count(TrialEvent::Done),
        summary.count(TrialEvent::Pruned),
        summary.count(TrialEvent::Failed)
    );
    match &summary.best {
        Some(b) => {
            let _ = writeln!(md, "best: trial {} (ensemble accuracy {})\n", b.trial_id, acc(b.ens_acc));
        }
        None => {
            let _ = writeln!(md, "best: none (no trial completed)\n");
        }
    }

    let _ = writeln!(md, "## Trials\n");
    let _ = writeln!(md, "| trial | status | epoch | ensemble | nodes | design | digest |");
    let _ = writeln!(md, "|---|---|---|---|---|---|---|");
    for t in &summary.trials {
        let nodes: Vec<String> = t.node_accs.iter().map(|a| format!("{a:.4}")).collect();
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} |",
            t.trial_id,
            status(t.status),
            t.epoch,
            acc(t.ens_acc),
            nodes.join(" "),
            design_label(&t.graph.0),
            t.graph_digest
        );
    }

    let mut reports: BTreeMap<u32, (usize, f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.event == TrialEvent::Checkpoint) {
        if let Some(a) = r.ens_acc {
            let e = reports.entry(r.epoch).or_default();
            e.0 += 1;
            e.1 += a;
        }
    }
    for t in summary.trials.iter().filter(|t| t.status == TrialEvent::Pruned) {
        reports.entry(t.epoch).or_default().2 += 1;
    }
    let _ = writeln!(md, "\n## Pruning\n");
    let _ = writeln!(md, "| epoch | reports | mean ensemble | pruned here |");
    let _ = writeln!(md, "|---|---|---|---|");
    for (epoch, (n, sum, pruned)) in &reports {
        let mean = (*n > 0).then(|| sum / *n as f64);
        let _ = writeln!(md, "| {epoch} | {n} | {} | {pruned} |", acc(mean));
    }

    let mut by_m: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for t in summary.trials.iter().filter(|t| t.status == TrialEvent::Done) {
        if let Some(a) = t.ens_acc {
            by_m.entry(t.graph.0.num_nodes).or_default().push(a);
        }
    }
    let _ = writeln!(md, "\n## Accuracy by node count\n");
    let _ = writeln!(md, "| nodes | completed | mean ensemble | best ensemble |");
    let _ = writeln!(md, "|---|---|---|---|");
    for (m, accs) in &by_m {
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let best = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(md, "| {m} | {} | {mean:.4} | {best:.4} |", accs.len());
    }

    let best_graph = summary.best.as_ref().map(|b| &b.graph.0);
    Ok(Report {
        markdown: md,
        best_graph_json: best_graph.map(|g| graph_to_json(g) + "\n"),
        best_graph_dot: best_graph.map(ktg_core::dot::to_dot),
    })
}
