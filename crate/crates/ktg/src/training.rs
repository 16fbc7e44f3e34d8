//! Joint training of all nodes of a knowledge-transfer graph.
//!
//! Every step forwards the same mini-batch through all nodes, evaluates each
//! node's loss on host copies of the outputs, and pushes the resulting
//! output gradients back through the networks. Since the host copies are
//! constants, no gradient ever crosses from one node to another.

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use ktg_core::ensemble::{accuracy, ensemble_scores, predictions};
use ktg_core::objective::{graph_losses, ObjectiveConfig, StepClock};
use ktg_core::losses::{entropy, softmax};
use ktg_core::pruner::Decision;
use ktg_core::{GraphSpec, MapBatch, Matrix, NodeOutput, TrainConfig, Violation};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batches_per_epoch, epoch_batches, gather, Augment, Dataset};
use crate::error::{Error, Result};
use crate::models::{Backbone, ModelSpec};
use crate::optim::Sgd;

const EVAL_BATCH: usize = 256;

/// Deterministic child seed for stream `stream` of `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Initialization seed of node `m`.
pub fn node_seed(graph_seed: u64, m: usize) -> u64 {
    derive_seed(graph_seed, m as u64 + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ensemble_acc: f64,
    pub node_accs: Vec<f64>,
    /// Mean prediction entropy per node, in nats. Diagnostic only.
    #[serde(default)]
    pub node_entropy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Outcome {
    Completed,
    Pruned { epoch: u32 },
    Failed { epoch: u32, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: u32,
    pub eval: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub outcome: Outcome,
    pub checkpoints: Vec<Checkpoint>,
    /// Mean total loss of each node during the last trained epoch.
    pub last_losses: Vec<f64>,
    pub param_count: usize,
    pub wall_time: f64,
}

impl TrainReport {
    pub fn final_eval(&self) -> Option<&EvalResult> {
        match self.outcome {
            Outcome::Completed => self.checkpoints.last().map(|c| &c.eval),
            _ => None,
        }
    }
}

/// Losses of a single optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLosses {
    pub total: Vec<f64>,
    pub hard: Vec<f64>,
}

pub struct GraphTrainer {
    graph: GraphSpec,
    nodes: Vec<Backbone>,
    optims: Vec<Sgd>,
    cfg: TrainConfig,
    crop_sizes: Vec<usize>,
    aux_weight: f64,
    pub augment: Augment,
}

impl GraphTrainer {
    /// Builds the node networks with seeds derived from the graph seed.
    pub fn new(graph: GraphSpec, spec: ModelSpec, cfg: TrainConfig) -> Result<Self> {
        let seeds = (0..graph.num_nodes).map(|m| node_seed(graph.seed, m)).collect();
        Self::with_init_seeds(graph, spec, cfg, seeds)
    }

    /// Like [`GraphTrainer::new`] but with explicit per-node init seeds. A
    /// single-node graph is accepted so a node can be trained stand-alone.
    pub fn with_init_seeds(graph: GraphSpec, spec: ModelSpec, cfg: TrainConfig, seeds: Vec<u64>) -> Result<Self> {
        if let Err(v) = graph.validate() {
            let v: Vec<_> = v
                .into_iter()
                .filter(|v| !(graph.num_nodes == 1 && matches!(v, Violation::TooFewNodes(_))))
                .collect();
            if !v.is_empty() {
                return Err(Error::InvalidGraph(v));
            }
        }
        if graph.num_nodes == 0 || seeds.len() != graph.num_nodes {
            return Err(Error::Config(format!(
                "need one init seed per node ({} nodes, {} seeds)",
                graph.num_nodes,
                seeds.len()
            )));
        }
        if graph.arch != spec.arch {
            return Err(Error::Config(format!(
                "graph architecture {} does not match model {}",
                graph.arch.name(),
                spec.arch.name()
            )));
        }
        cfg.validate()?;
        let crop_sizes = spec.crop_sizes();
        let aux_weight = spec.backbone.aux_weight;
        let nodes = seeds
            .iter()
            .map(|&s| Backbone::new(spec.clone(), s))
            .collect::<Result<Vec<_>>>()?;
        let optims = nodes
            .iter()
            .map(|n| Sgd::new(n.params().into_iter().cloned().collect(), cfg.momentum, cfg.weight_decay))
            .collect();
        Ok(Self {
            graph,
            nodes,
            optims,
            cfg,
            crop_sizes,
            aux_weight,
            augment: Augment::default(),
        })
    }

    pub fn graph(&self) -> &GraphSpec {
        &self.graph
    }

    pub fn nodes(&self) -> &[Backbone] {
        &self.nodes
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Swaps in externally built networks, e.g. loaded checkpoints.
    pub fn replace_nodes(&mut self, nodes: Vec<Backbone>) -> Result<()> {
        if nodes.len() != self.nodes.len() {
            return Err(Error::Config(format!(
                "expected {} networks, got {}",
                self.nodes.len(),
                nodes.len()
            )));
        }
        self.optims = nodes
            .iter()
            .map(|n| Sgd::new(n.params().into_iter().cloned().collect(), self.cfg.momentum, self.cfg.weight_decay))
            .collect();
        self.nodes = nodes;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(Backbone::param_count).sum()
    }

    /// Host copies of every node's training-mode outputs, plus the device
    /// tensors they came from.
    fn forward_all(&self, x: &Tensor, n: usize) -> Result<(Vec<NodeOutput>, Vec<crate::models::ForwardOutput>)> {
        let need_attention = self.graph.uses_attention();
        let mut host = Vec::with_capacity(self.nodes.len());
        let mut dev = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let out = node.forward(x, true)?;
            let logits = to_matrix(&out.logits)?;
            let attention = if need_attention {
                to_maps(&out.attention)?
            } else {
                MapBatch::zeros(n, 1, 1)
            };
            let mut o = NodeOutput::new(logits, attention)?;
            if let Some(aux) = &out.aux_logits {
                o = o.with_aux_logits(to_matrix(aux)?);
            }
            host.push(o);
            dev.push(out);
        }
        Ok((host, dev))
    }

    /// One SGD step of every node on the batch `(x, labels)`.
    pub fn step(&mut self, x: &Tensor, labels: &[usize], clock: StepClock, lr: f64) -> Result<StepLosses> {
        let n = labels.len();
        let (host, dev) = self.forward_all(x, n)?;
        let cfg = ObjectiveConfig {
            crop_sizes: &self.crop_sizes,
            aux_weight: self.aux_weight,
        };
        let losses = graph_losses(&self.graph, &host, labels, clock, &cfg)?;

        // d(surrogate)/d(output) equals the analytic gradient of each node's
        // own loss, so one backward pass updates all nodes independently.
        let mut surrogate: Option<Tensor> = None;
        let mut add = |t: Tensor| -> Result<()> {
            surrogate = Some(match surrogate.take() {
                Some(s) => (s + t)?,
                None => t,
            });
            Ok(())
        };
        for (out, loss) in dev.iter().zip(&losses) {
            add(weighted_sum(&out.logits, loss.grad.logits.as_slice())?)?;
            if !loss.grad.attention_is_zero() {
                add(weighted_sum(&out.attention, loss.grad.attention.as_slice())?)?;
            }
            if let (Some(aux), Some(g)) = (&out.aux_logits, &loss.grad.aux_logits) {
                add(weighted_sum(aux, g.as_slice())?)?;
            }
        }
        if let Some(s) = surrogate {
            let grads = s.backward()?;
            for opt in &mut self.optims {
                opt.step(&grads, lr)?;
            }
        }
        Ok(StepLosses {
            total: losses.iter().map(|l| l.total).collect(),
            hard: losses.iter().map(|l| l.hard).collect(),
        })
    }

    /// Per-node logits on the whole dataset in evaluation mode.
    pub fn predict_logits(&self, data: &Dataset) -> Result<Vec<Matrix>> {
        let mut out: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut classes = 0;
        for chunk in idx.chunks(EVAL_BATCH) {
            let (xs, _) = gather(data, chunk, None);
            let x = Tensor::from_vec(xs, (chunk.len(), data.channels, data.height, data.width), &Device::Cpu)?;
            for (m, node) in self.nodes.iter().enumerate() {
                let logits = node.forward(&x, false)?.logits;
                classes = logits.dim(1)?;
                out[m].extend(logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
            }
        }
        out.into_iter()
            .map(|v| Ok(Matrix::new(data.len(), classes, v)?))
            .collect()
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<EvalResult> {
        if data.is_empty() {
            return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
        }
        let logits = self.predict_logits(data)?;
        let labels = data.labels();
        let node_accs = logits
            .iter()
            .map(|l| Ok(accuracy(&predictions(l), labels)?))
            .collect::<Result<Vec<_>>>()?;
        let node_entropy = logits
            .iter()
            .map(|l| {
                let h = entropy(&softmax(l));
                h.iter().sum::<f64>() / h.len() as f64
            })
            .collect();
        let refs: Vec<&Matrix> = logits.iter().collect();
        let scores = ensemble_scores(&refs, self.cfg.ensemble_mode)?;
        Ok(EvalResult {
            ensemble_acc: accuracy(&predictions(&scores), labels)?,
            node_accs,
            node_entropy,
        })
    }

    /// Trains for the configured number of epochs, evaluating on `test` at
    /// every checkpoint epoch and asking `hook` whether to continue.
    pub fn fit(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        hook: &mut dyn FnMut(u32, &EvalResult) -> Decision,
    ) -> Result<TrainReport> {
        let started = Instant::now();
        let n = train.len();
        let per_epoch = batches_per_epoch(n, self.cfg.batch_size) as u64;
        if per_epoch == 0 {
            return Err(Error::Dataset(format!(
                "training set of {n} samples yields no batch of size {}",
                self.cfg.batch_size
            )));
        }
        let total = per_epoch * self.cfg.epochs as u64;
        let checkpoints = self.cfg.checkpoints();
        let mut order_rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, 0xa0));
        let mut report = TrainReport {
            outcome: Outcome::Completed,
            checkpoints: Vec::new(),
            last_losses: vec![0.0; self.nodes.len()],
            param_count: self.param_count(),
            wall_time: 0.0,
        };
        let mut iteration = 0u64;
        'epochs: for epoch in 0..self.cfg.epochs {
            let lr = self.cfg.lr_at(epoch);
            let mut sums = vec![0.0; self.nodes.len()];
            let batches = epoch_batches(n, self.cfg.batch_size, &mut order_rng);
            let count = batches.len();
            for batch in batches {
                iteration += 1;
                let (xs, labels) = gather(train, &batch, Some((&self.augment, &mut aug_rng)));
                let x = Tensor::from_vec(xs, (batch.len(), train.channels, train.height, train.width), &Device::Cpu)?;
                let losses = self.step(&x, &labels, StepClock::new(iteration, total), lr)?;
                if let Some(m) = losses.total.iter().position(|l| !l.is_finite()) {
                    report.outcome = Outcome::Failed {
                        epoch: epoch + 1,
                        reason: format!("non-finite loss at node {m}, iteration {iteration}"),
                    };
                    break 'epochs;
                }
                for (s, l) in sums.iter_mut().zip(&losses.total) {
                    *s += l;
                }
            }
            report.last_losses = sums.iter().map(|s| s / count as f64).collect();
            log::debug!("epoch {} lr {lr} losses {:?}", epoch + 1, report.last_losses);
            let reported = epoch + 1;
            if checkpoints.contains(&reported) {
                let eval = self.evaluate(test)?;
                log::info!("epoch {reported}: ensemble {:.4} nodes {:?}", eval.ensemble_acc, eval.node_accs);
                let decision = hook(reported, &eval);
                report.checkpoints.push(Checkpoint { epoch: reported, eval });
                if decision == Decision::Stop && reported != self.cfg.epochs {
                    report.outcome = Outcome::Pruned { epoch: reported };
                    break;
                }
            }
        }
        report.wall_time = started.elapsed().as_secs_f64();
        Ok(report)
    }
}

/// Trains `graph` from scratch without pruning.
pub fn train_graph(
    graph: &GraphSpec,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<(GraphTrainer, TrainReport)> {
    let mut trainer = GraphTrainer::new(graph.clone(), spec.clone(), cfg.clone())?;
    let report = trainer.fit(train, test, &mut |_, _| Decision::Continue)?;
    Ok((trainer, report))
}

fn to_matrix(t: &Tensor) -> Result<Matrix> {
    let (r, c) = t.dims2()?;
    Ok(Matrix::new(r, c, t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)?)
}

fn to_maps(t: &Tensor) -> Result<MapBatch> {
    let (n, h, w) = t.dims3()?;
    Ok(MapBatch::new(n, h, w, t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)?)
}

/// `sum(t * g)` with `g` a constant of the same shape.
fn weighted_sum(t: &Tensor, g: &[f64]) -> Result<Tensor> {
    let g = Tensor::from_vec(g.iter().map(|&v| v as f32).collect::<Vec<_>>(), t.shape(), t.device())?;
    Ok((t * g)?.sum_all()?)
}
