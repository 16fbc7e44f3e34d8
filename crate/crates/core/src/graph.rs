//! Knowledge-transfer graph data model and validation.
//!
//! A graph over `M` networks has one edge slot per ordered node pair and one
//! label edge per node. Absence of transfer is expressed by the `Cutoff`
//! gate, so a well-formed graph always carries every slot. The ensemble node
//! is implicit: it averages all node logits and takes part in no edge.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// The attract/repel choice carried by an edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossDesign {
    /// KL divergence between probability distributions.
    ProbCloser,
    /// Cosine similarity between probability distributions.
    ProbApart,
    /// Squared distance between normalized attention crops.
    AttnCloser,
    /// Cosine similarity between attention crops.
    AttnApart,
    BothCloser,
    BothApart,
    /// Cross-entropy with the ground truth. Only valid on label edges.
    LabelHard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbTerm {
    Kl,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnTerm {
    Mse,
    Cosine,
}

impl LossDesign {
    /// The designs a node-to-node edge may carry.
    pub const NODE_EDGE: [LossDesign; 6] = [
        LossDesign::ProbCloser,
        LossDesign::ProbApart,
        LossDesign::AttnCloser,
        LossDesign::AttnApart,
        LossDesign::BothCloser,
        LossDesign::BothApart,
    ];

    pub fn prob_term(self) -> Option<ProbTerm> {
        match self {
            LossDesign::ProbCloser | LossDesign::BothCloser => Some(ProbTerm::Kl),
            LossDesign::ProbApart | LossDesign::BothApart => Some(ProbTerm::Cosine),
            _ => None,
        }
    }

    pub fn attn_term(self) -> Option<AttnTerm> {
        match self {
            LossDesign::AttnCloser | LossDesign::BothCloser => Some(AttnTerm::Mse),
            LossDesign::AttnApart | LossDesign::BothApart => Some(AttnTerm::Cosine),
            _ => None,
        }
    }

    pub fn uses_attention(self) -> bool {
        self.attn_term().is_some()
    }

    /// Human-readable rendering used in DOT labels and reports.
    pub fn display_name(self) -> &'static str {
        match self {
            LossDesign::ProbCloser => "Prob(KL-div)",
            LossDesign::ProbApart => "Prob(cosine sim)",
            LossDesign::AttnCloser => "Attention(MSE)",
            LossDesign::AttnApart => "Attention(cosine sim)",
            LossDesign::BothCloser => "Prob(KL-div)+Attention(MSE)",
            LossDesign::BothApart => "Prob(cosine sim)+Attention(cosine sim)",
            LossDesign::LabelHard => "CE",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossDesign::ProbCloser => "ProbCloser",
            LossDesign::ProbApart => "ProbApart",
            LossDesign::AttnCloser => "AttnCloser",
            LossDesign::AttnApart => "AttnApart",
            LossDesign::BothCloser => "BothCloser",
            LossDesign::BothApart => "BothApart",
            LossDesign::LabelHard => "LabelHard",
        }
    }
}

impl fmt::Display for LossDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GateKind {
    Through,
    Cutoff,
    Linear,
    Correct,
}

impl GateKind {
    pub const ALL: [GateKind; 4] = [
        GateKind::Through,
        GateKind::Cutoff,
        GateKind::Linear,
        GateKind::Correct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GateKind::Through => "Through",
            GateKind::Cutoff => "Cutoff",
            GateKind::Linear => "Linear",
            GateKind::Correct => "Correct",
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Backbone family shared by every node of a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "at-small-resnet")]
    AtSmallResnet,
    #[serde(rename = "abn-small-resnet")]
    AbnSmallResnet,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::AtSmallResnet => "at-small-resnet",
            Arch::AbnSmallResnet => "abn-small-resnet",
        }
    }
}

/// One end of an edge. Nodes serialize as their index, the sentinels as
/// `"label"` and `"ensemble"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Label,
    Ensemble,
    Node(usize),
}

impl Endpoint {
    pub fn node(self) -> Option<usize> {
        match self {
            Endpoint::Node(i) => Some(i),
            _ => None,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Label => f.write_str("label"),
            Endpoint::Ensemble => f.write_str("ensemble"),
            Endpoint::Node(i) => write!(f, "{i}"),
        }
    }
}

impl Serialize for Endpoint {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Endpoint::Label => s.serialize_str("label"),
            Endpoint::Ensemble => s.serialize_str("ensemble"),
            Endpoint::Node(i) => s.serialize_u64(*i as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Endpoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct EndpointVisitor;

        impl Visitor<'_> for EndpointVisitor {
            type Value = Endpoint;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a node index, \"label\" or \"ensemble\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Endpoint, E> {
                usize::try_from(v)
                    .map(Endpoint::Node)
                    .map_err(|_| E::custom(format!("node index {v} out of range")))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Endpoint, E> {
                u64::try_from(v)
                    .map_err(|_| E::custom(format!("negative node index {v}")))
                    .and_then(|v| self.visit_u64(v))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Endpoint, E> {
                match v {
                    "label" => Ok(Endpoint::Label),
                    "ensemble" => Ok(Endpoint::Ensemble),
                    other => Err(E::unknown_variant(other, &["label", "ensemble"])),
                }
            }
        }

        d.deserialize_any(EndpointVisitor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub loss: LossDesign,
    pub gate: GateKind,
}

impl EdgeSpec {
    pub fn between(src: usize, dst: usize, loss: LossDesign, gate: GateKind) -> Self {
        Self {
            src: Endpoint::Node(src),
            dst: Endpoint::Node(dst),
            loss,
            gate,
        }
    }

    pub fn label(dst: usize, gate: GateKind) -> Self {
        Self {
            src: Endpoint::Label,
            dst: Endpoint::Node(dst),
            loss: LossDesign::LabelHard,
            gate,
        }
    }

    pub fn is_label(&self) -> bool {
        self.src == Endpoint::Label
    }
}

/// A complete knowledge-transfer graph.
///
/// `edges` holds the node-to-node slots; label edges are stored as one gate
/// per node in `label_gates` because their loss is always cross-entropy.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GraphSpec {
    pub num_nodes: usize,
    pub arch: Arch,
    pub seed: u64,
    pub label_gates: Vec<GateKind>,
    pub edges: Vec<EdgeSpec>,
}

impl GraphSpec {
    /// Every node edge set to `(loss, gate)`, every label gate `Through`.
    pub fn uniform(num_nodes: usize, arch: Arch, seed: u64, loss: LossDesign, gate: GateKind) -> Self {
        let mut edges = Vec::with_capacity(num_nodes * num_nodes.saturating_sub(1));
        for (s, t) in ordered_pairs(num_nodes) {
            edges.push(EdgeSpec::between(s, t, loss, gate));
        }
        Self {
            num_nodes,
            arch,
            seed,
            label_gates: alloc::vec![GateKind::Through; num_nodes],
            edges,
        }
    }

    /// No transfer between nodes: every node learns from labels alone.
    pub fn independent(num_nodes: usize, arch: Arch, seed: u64) -> Self {
        Self::uniform(num_nodes, arch, seed, LossDesign::ProbCloser, GateKind::Cutoff)
    }

    /// Deep mutual learning: bidirectional KL with through gates.
    pub fn mutual_learning(num_nodes: usize, arch: Arch, seed: u64) -> Self {
        Self::uniform(num_nodes, arch, seed, LossDesign::ProbCloser, GateKind::Through)
    }

    pub fn edge(&self, src: usize, dst: usize) -> Option<&EdgeSpec> {
        self.edges
            .iter()
            .find(|e| e.src == Endpoint::Node(src) && e.dst == Endpoint::Node(dst))
    }

    pub fn edge_mut(&mut self, src: usize, dst: usize) -> Option<&mut EdgeSpec> {
        self.edges
            .iter_mut()
            .find(|e| e.src == Endpoint::Node(src) && e.dst == Endpoint::Node(dst))
    }

    /// Node edges pointing at `dst`, in source order.
    pub fn incoming(&self, dst: usize) -> impl Iterator<Item = &EdgeSpec> {
        self.edges
            .iter()
            .filter(move |e| e.dst == Endpoint::Node(dst) && e.src.node().is_some())
    }

    /// Label edges materialized as `EdgeSpec`s.
    pub fn label_edges(&self) -> impl Iterator<Item = EdgeSpec> + '_ {
        self.label_gates
            .iter()
            .enumerate()
            .map(|(t, &g)| EdgeSpec::label(t, g))
    }

    /// Whether any active edge needs attention maps.
    pub fn uses_attention(&self) -> bool {
        self.edges
            .iter()
            .any(|e| e.gate != GateKind::Cutoff && e.loss.uses_attention())
    }

    /// The single design shared by all non-cutoff node edges, if there is one.
    /// `Ok(None)` means every node edge is cut off.
    pub fn uniform_design(&self) -> Result<Option<LossDesign>, ()> {
        let mut found = None;
        for e in self.edges.iter().filter(|e| e.gate != GateKind::Cutoff) {
            match found {
                None => found = Some(e.loss),
                Some(d) if d == e.loss => {}
                Some(_) => return Err(()),
            }
        }
        Ok(found)
    }

    pub fn active_edge_count(&self) -> usize {
        self.edges.iter().filter(|e| e.gate != GateKind::Cutoff).count()
    }

    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        validate(self)
    }
}

/// Ordered `(src, dst)` pairs with `src != dst`, row-major.
pub fn ordered_pairs(num_nodes: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..num_nodes).flat_map(move |s| (0..num_nodes).filter(move |&t| t != s).map(move |t| (s, t)))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    TooFewNodes(usize),
    LabelGateCount { expected: usize, found: usize },
    SelfLoop { edge: usize, node: usize },
    EnsembleEndpoint { edge: usize },
    LabelSourceInNodeEdges { edge: usize },
    UnknownNode { edge: usize, node: usize },
    LabelHardOnNodeEdge { edge: usize },
    DuplicateEdge { src: usize, dst: usize },
    MissingEdge { src: usize, dst: usize },
    UntrainedNode(usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooFewNodes(m) => write!(f, "graph has {m} nodes, at least 2 required"),
            Violation::LabelGateCount { expected, found } => {
                write!(f, "expected {expected} label gates, found {found}")
            }
            Violation::SelfLoop { edge, node } => write!(f, "edges[{edge}]: self loop on node {node}"),
            Violation::EnsembleEndpoint { edge } => {
                write!(f, "edges[{edge}]: the ensemble node cannot be an edge endpoint")
            }
            Violation::LabelSourceInNodeEdges { edge } => {
                write!(f, "edges[{edge}]: label edges belong in label_gates")
            }
            Violation::UnknownNode { edge, node } => write!(f, "edges[{edge}]: unknown node {node}"),
            Violation::LabelHardOnNodeEdge { edge } => {
                write!(f, "edges[{edge}]: LabelHard is only valid on label edges")
            }
            Violation::DuplicateEdge { src, dst } => write!(f, "duplicate edge {src} -> {dst}"),
            Violation::MissingEdge { src, dst } => write!(f, "missing edge {src} -> {dst}"),
            Violation::UntrainedNode(t) => write!(
                f,
                "untrained node {t}: label gate and every incoming edge are Cutoff"
            ),
        }
    }
}

/// Checks every structural invariant and reports all violations found.
pub fn validate(g: &GraphSpec) -> Result<(), Vec<Violation>> {
    let m = g.num_nodes;
    let mut out = Vec::new();
    if m < 2 {
        out.push(Violation::TooFewNodes(m));
    }
    if g.label_gates.len() != m {
        out.push(Violation::LabelGateCount {
            expected: m,
            found: g.label_gates.len(),
        });
    }

    let mut seen = alloc::vec![false; m * m];
    for (i, e) in g.edges.iter().enumerate() {
        if e.src == Endpoint::Ensemble || e.dst == Endpoint::Ensemble {
            out.push(Violation::EnsembleEndpoint { edge: i });
        }
        if e.src == Endpoint::Label || e.dst == Endpoint::Label {
            out.push(Violation::LabelSourceInNodeEdges { edge: i });
        }
        if e.loss == LossDesign::LabelHard {
            out.push(Violation::LabelHardOnNodeEdge { edge: i });
        }
        for node in [e.src, e.dst].into_iter().filter_map(Endpoint::node) {
            if node >= m {
                out.push(Violation::UnknownNode { edge: i, node });
            }
        }
        if let (Endpoint::Node(s), Endpoint::Node(t)) = (e.src, e.dst) {
            if s == t {
                out.push(Violation::SelfLoop { edge: i, node: s });
            } else if s < m && t < m {
                if seen[s * m + t] {
                    out.push(Violation::DuplicateEdge { src: s, dst: t });
                }
                seen[s * m + t] = true;
            }
        }
    }
    for (s, t) in ordered_pairs(m) {
        if !seen[s * m + t] {
            out.push(Violation::MissingEdge { src: s, dst: t });
        }
    }

    for t in 0..m.min(g.label_gates.len()) {
        let label_cut = g.label_gates[t] == GateKind::Cutoff;
        let any_incoming = g
            .edges
            .iter()
            .any(|e| e.dst == Endpoint::Node(t) && e.src.node().is_some() && e.gate != GateKind::Cutoff);
        if label_cut && !any_incoming {
            out.push(Violation::UntrainedNode(t));
        }
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}
