//! JSON graph documents.
//!
//! ```json
//! {
//!   "version": 1,
//!   "num_nodes": 2,
//!   "arch": "at-small-resnet",
//!   "seed": 7,
//!   "label_gates": ["Through", "Through"],
//!   "edges": [
//!     {"src": 0, "dst": 1, "loss": "ProbCloser", "gate": "Through"},
//!     {"src": 1, "dst": 0, "loss": "ProbCloser", "gate": "Through"}
//!   ]
//! }
//! ```

use std::path::Path;

use ktg_core::{Arch, EdgeSpec, GateKind, GraphSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const GRAPH_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDocument {
    version: u32,
    num_nodes: usize,
    arch: Arch,
    seed: u64,
    label_gates: Vec<GateKind>,
    edges: Vec<EdgeSpec>,
}

impl From<&GraphSpec> for GraphDocument {
    fn from(g: &GraphSpec) -> Self {
        Self {
            version: GRAPH_VERSION,
            num_nodes: g.num_nodes,
            arch: g.arch,
            seed: g.seed,
            label_gates: g.label_gates.clone(),
            edges: g.edges.clone(),
        }
    }
}

/// Serde adapter so graphs can be embedded in other documents.
pub mod as_document {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(g: &GraphSpec, s: S) -> std::result::Result<S::Ok, S::Error> {
        GraphDocument::from(g).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<GraphSpec, D::Error> {
        let doc = GraphDocument::deserialize(d)?;
        Ok(GraphSpec {
            num_nodes: doc.num_nodes,
            arch: doc.arch,
            seed: doc.seed,
            label_gates: doc.label_gates,
            edges: doc.edges,
        })
    }
}

/// A graph that (de)serializes as a document, for embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GraphJson(#[serde(with = "as_document")] pub GraphSpec);

/// Parses and validates a graph document.
pub fn parse_graph(text: &str) -> Result<GraphSpec> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: GraphDocument = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_data() {
            Error::Schema {
                path,
                message: inner.to_string(),
            }
        } else {
            Error::Parse {
                line: inner.line(),
                column: inner.column(),
                message: inner.to_string(),
            }
        }
    })?;
    if doc.version != GRAPH_VERSION {
        return Err(Error::Schema {
            path: "version".into(),
            message: format!("unsupported version {}, expected {GRAPH_VERSION}", doc.version),
        });
    }
    let g = GraphSpec {
        num_nodes: doc.num_nodes,
        arch: doc.arch,
        seed: doc.seed,
        label_gates: doc.label_gates,
        edges: doc.edges,
    };
    g.validate().map_err(Error::InvalidGraph)?;
    Ok(g)
}

pub fn graph_to_json(g: &GraphSpec) -> String {
    serde_json::to_string_pretty(&GraphDocument::from(g)).expect("graph documents always serialize")
}

pub fn read_graph(path: &Path) -> Result<GraphSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph(&text)
}

pub fn write_graph(path: &Path, g: &GraphSpec) -> Result<()> {
    std::fs::write(path, graph_to_json(g) + "\n").map_err(|e| Error::io(path, e))
}

/// Short content hash of a graph's canonical (compact JSON) form.
pub fn graph_digest(g: &GraphSpec) -> String {
    let canonical = serde_json::to_vec(&GraphDocument::from(g)).expect("graph documents always serialize");
    Sha256::digest(&canonical)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}
