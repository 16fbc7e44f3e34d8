//! Named baseline graphs.
//!
//! `independent-M` trains M label-only nodes, `dml-M` connects all pairs with
//! KL/Through, `closeness-only-M` and `separation-only-M` use the combined
//! probability+attention closer/apart designs on every edge, and
//! `<design>-M` (e.g. `prob-apart-5`) uses one node-edge design everywhere.

use ktg_core::{Arch, GateKind, GraphSpec, LossDesign};

use crate::error::{Error, Result};

pub const NODE_COUNTS: std::ops::RangeInclusive<usize> = 2..=5;

const FAMILIES: [&str; 4] = ["independent", "dml", "closeness-only", "separation-only"];

fn design_slug(d: LossDesign) -> &'static str {
    match d {
        LossDesign::ProbCloser => "prob-closer",
        LossDesign::ProbApart => "prob-apart",
        LossDesign::AttnCloser => "attn-closer",
        LossDesign::AttnApart => "attn-apart",
        LossDesign::BothCloser => "both-closer",
        LossDesign::BothApart => "both-apart",
        LossDesign::LabelHard => "label-hard",
    }
}

fn family_graph(family: &str, m: usize, arch: Arch, seed: u64) -> Option<GraphSpec> {
    let uniform = |d| GraphSpec::uniform(m, arch, seed, d, GateKind::Through);
    match family {
        "independent" => Some(GraphSpec::independent(m, arch, seed)),
        "dml" => Some(GraphSpec::mutual_learning(m, arch, seed)),
        "closeness-only" => Some(uniform(LossDesign::BothCloser)),
        "separation-only" => Some(uniform(LossDesign::BothApart)),
        other => LossDesign::NODE_EDGE
            .into_iter()
            .find(|&d| design_slug(d) == other)
            .map(uniform),
    }
}

/// All preset names, in a stable order.
pub fn preset_names() -> Vec<String> {
    let families = FAMILIES
        .iter()
        .copied()
        .chain(LossDesign::NODE_EDGE.into_iter().map(design_slug));
    families
        .flat_map(|f| NODE_COUNTS.map(move |m| format!("{f}-{m}")))
        .collect()
}

pub fn preset(name: &str, arch: Arch, seed: u64) -> Result<GraphSpec> {
    let unknown = || Error::Config(format!("unknown preset `{name}` (see `presets list`)"));
    let (family, m) = name.rsplit_once('-').ok_or_else(unknown)?;
    let m: usize = m.parse().map_err(|_| unknown())?;
    if !NODE_COUNTS.contains(&m) {
        return Err(unknown());
    }
    family_graph(family, m, arch, seed).ok_or_else(unknown)
}
