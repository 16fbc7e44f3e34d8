//! Graphviz rendering of a knowledge-transfer graph.

use alloc::string::String;
use core::fmt::Write;

use crate::graph::{Endpoint, GateKind, GraphSpec};

fn node_id(e: Endpoint) -> String {
    match e {
        Endpoint::Label => "label".into(),
        Endpoint::Ensemble => "ensemble".into(),
        Endpoint::Node(i) => alloc::format!("n{i}"),
    }
}

/// DOT source with one vertex per network, a label source and the ensemble
/// sink. Cutoff edges are omitted; the rest carry `design/gate` labels
/// (label edges show the gate only).
pub fn to_dot(g: &GraphSpec) -> String {
    let mut s = String::new();
    // writing into a String cannot fail
    let _ = write_dot(&mut s, g);
    s
}

fn write_dot(s: &mut String, g: &GraphSpec) -> core::fmt::Result {
    writeln!(s, "digraph ktg {{")?;
    writeln!(s, "  rankdir=LR;")?;
    writeln!(s, "  label [label=\"Label\", shape=box];")?;
    writeln!(
        s,
        "  ensemble [label=\"Ensemble\", style=filled, fillcolor=\"#e06666\"];"
    )?;
    for i in 0..g.num_nodes {
        writeln!(s, "  n{i} [label=\"{i}: {}\"];", g.arch.name())?;
    }
    for (t, gate) in g.label_gates.iter().enumerate() {
        if *gate != GateKind::Cutoff {
            writeln!(s, "  label -> n{t} [label=\"{gate}\"];")?;
        }
    }
    for e in g.edges.iter().filter(|e| e.gate != GateKind::Cutoff) {
        writeln!(
            s,
            "  {} -> {} [label=\"{}/{}\"];",
            node_id(e.src),
            node_id(e.dst),
            e.loss.display_name(),
            e.gate
        )?;
    }
    for i in 0..g.num_nodes {
        writeln!(s, "  n{i} -> ensemble [style=dashed, arrowhead=none];")?;
    }
    writeln!(s, "}}")
}
