//! Edge and node losses of a knowledge-transfer graph.
//!
//! An edge loss is the batch mean of the gated per-sample design loss. A
//! node's loss is its gated label cross-entropy plus the losses of all its
//! incoming edges. Gradients are produced for the target node only; every
//! other node's output enters as a constant.

use alloc::vec::Vec;

use crate::gates::{gate_weights, GateContext};
use crate::graph::{EdgeSpec, Endpoint, GateKind, GraphSpec};
use crate::losses::{cross_entropy, cross_entropy_grad, design_loss_grad, NodeOutput};
use crate::tensor::{MapBatch, Matrix};
use crate::Error;

/// Iteration counters shared by all gates of a training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepClock {
    pub iteration: u64,
    pub total_iterations: u64,
}

impl StepClock {
    pub fn new(iteration: u64, total_iterations: u64) -> Self {
        Self {
            iteration,
            total_iterations,
        }
    }

    fn gate_context<'a>(&self, source_correct: Option<&'a [bool]>) -> GateContext<'a> {
        GateContext {
            iteration: self.iteration,
            total_iterations: self.total_iterations,
            source_correct,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ObjectiveConfig<'a> {
    /// Odd crop side lengths for attention losses.
    pub crop_sizes: &'a [usize],
    /// Weight of the attention-branch cross-entropy inside the hard loss.
    pub aux_weight: f64,
}

/// Gradient of a node loss w.r.t. the node's own outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeGrad {
    pub logits: Matrix,
    pub attention: MapBatch,
    pub aux_logits: Option<Matrix>,
}

impl NodeGrad {
    fn zeros_like(out: &NodeOutput) -> Self {
        Self {
            logits: Matrix::zeros(out.logits.rows(), out.logits.cols()),
            attention: MapBatch::zeros(
                out.attention.len(),
                out.attention.height(),
                out.attention.width(),
            ),
            aux_logits: out
                .aux_logits
                .as_ref()
                .map(|a| Matrix::zeros(a.rows(), a.cols())),
        }
    }

    /// True when no term touched the attention map.
    pub fn attention_is_zero(&self) -> bool {
        self.attention.as_slice().iter().all(|&v| v == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeLoss {
    pub total: f64,
    /// Gated label term, including any auxiliary branch cross-entropy.
    pub hard: f64,
    /// `(source, loss)` for every non-cutoff incoming edge.
    pub edges: Vec<(usize, f64)>,
    pub grad: NodeGrad,
}

fn edge_endpoints(e: &EdgeSpec) -> Result<(usize, usize), Error> {
    match (e.src, e.dst) {
        (Endpoint::Node(s), Endpoint::Node(t)) => Ok((s, t)),
        _ => Err(Error::Contract(alloc::format!(
            "edge {} -> {} is not a node-to-node edge",
            e.src,
            e.dst
        ))),
    }
}

/// Edge loss with its gradient w.r.t. the target's outputs. Cutoff edges
/// return `None` without evaluating anything.
pub fn edge_loss_grad(
    e: &EdgeSpec,
    source: &NodeOutput,
    target: &NodeOutput,
    labels: &[usize],
    clock: StepClock,
    cfg: &ObjectiveConfig<'_>,
) -> Result<Option<(f64, crate::losses::TargetGrad)>, Error> {
    edge_endpoints(e)?;
    let n = target.batch_size();
    if labels.len() != n {
        return Err(Error::Shape {
            expected: n,
            found: labels.len(),
        });
    }
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    if e.gate == GateKind::Cutoff {
        return Ok(None);
    }
    let correct = source.correct(labels);
    let ctx = clock.gate_context(Some(&correct));
    let inv_n = 1.0 / n as f64;
    let weights: Vec<f64> = gate_weights(e.gate, n, &ctx)?.into_iter().map(|w| w * inv_n).collect();
    let g = design_loss_grad(e.loss, source, target, cfg.crop_sizes, &weights)?;
    let value = g.per_sample.iter().zip(&weights).map(|(l, w)| l * w).sum();
    Ok(Some((value, g)))
}

/// `(1/N) Σ_n G(L_p(x_n) + L_map(x_n))` for one node-to-node edge.
pub fn edge_loss(
    e: &EdgeSpec,
    source: &NodeOutput,
    target: &NodeOutput,
    labels: &[usize],
    clock: StepClock,
    cfg: &ObjectiveConfig<'_>,
) -> Result<f64, Error> {
    Ok(edge_loss_grad(e, source, target, labels, clock, cfg)?.map_or(0.0, |(v, _)| v))
}

/// Loss of node `t` and its gradient w.r.t. `t`'s outputs.
pub fn node_loss(
    t: usize,
    graph: &GraphSpec,
    outputs: &[NodeOutput],
    labels: &[usize],
    clock: StepClock,
    cfg: &ObjectiveConfig<'_>,
) -> Result<NodeLoss, Error> {
    let target = outputs.get(t).ok_or(Error::MissingOutput(t))?;
    let n = target.batch_size();
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    if labels.len() != n {
        return Err(Error::Shape {
            expected: n,
            found: labels.len(),
        });
    }
    let label_gate = *graph.label_gates.get(t).ok_or(Error::MissingOutput(t))?;
    let mut grad = NodeGrad::zeros_like(target);
    let mut hard = 0.0;

    if label_gate != GateKind::Cutoff {
        let inv_n = 1.0 / n as f64;
        let weights: Vec<f64> = gate_weights(label_gate, n, &clock.gate_context(None))?
            .into_iter()
            .map(|w| w * inv_n)
            .collect();
        let ce = cross_entropy(&target.logits, labels)?;
        hard += ce.iter().zip(&weights).map(|(l, w)| l * w).sum::<f64>();
        grad.logits = cross_entropy_grad(&target.logits, labels, &weights)?;
        if let Some(aux) = &target.aux_logits {
            let aux_w: Vec<f64> = weights.iter().map(|w| w * cfg.aux_weight).collect();
            let ce = cross_entropy(aux, labels)?;
            hard += ce.iter().zip(&aux_w).map(|(l, w)| l * w).sum::<f64>();
            grad.aux_logits = Some(cross_entropy_grad(aux, labels, &aux_w)?);
        }
    }

    let mut total = hard;
    let mut edges = Vec::new();
    for e in graph.incoming(t) {
        let (s, _) = edge_endpoints(e)?;
        let source = outputs.get(s).ok_or(Error::MissingOutput(s))?;
        if let Some((value, g)) = edge_loss_grad(e, source, target, labels, clock, cfg)? {
            total += value;
            edges.push((s, value));
            add_into(grad.logits.as_mut_slice(), g.logits.as_slice());
            add_into(grad.attention.as_mut_slice(), g.attention.as_slice());
        }
    }

    Ok(NodeLoss {
        total,
        hard,
        edges,
        grad,
    })
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Losses of every node of the graph, in node order.
pub fn graph_losses(
    graph: &GraphSpec,
    outputs: &[NodeOutput],
    labels: &[usize],
    clock: StepClock,
    cfg: &ObjectiveConfig<'_>,
) -> Result<Vec<NodeLoss>, Error> {
    if outputs.len() != graph.num_nodes {
        return Err(Error::MissingOutput(outputs.len().min(graph.num_nodes)));
    }
    (0..graph.num_nodes)
        .map(|t| node_loss(t, graph, outputs, labels, clock, cfg))
        .collect()
}

/// Batch mean of plain cross-entropy, for reporting.
pub fn mean_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64, Error> {
    let ce = cross_entropy(logits, labels)?;
    Ok(ce.iter().sum::<f64>() / ce.len().max(1) as f64)
}
