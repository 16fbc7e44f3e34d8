//! Hyperparameter space of a knowledge-transfer graph and uniform sampling.

use alloc::vec::Vec;

use rand::Rng;

use crate::graph::{ordered_pairs, Arch, EdgeSpec, GateKind, GraphSpec, LossDesign};
use crate::Error;

/// Resampling attempts before [`SpaceDescriptor::sample`] gives up.
pub const MAX_SAMPLE_ATTEMPTS: usize = 64;

/// Option lists for every slot of an `M`-node graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpaceDescriptor {
    pub num_nodes: usize,
    pub arch: Arch,
    /// `(src, dst)` for each node-edge slot, row-major.
    pub node_slots: Vec<(usize, usize)>,
    /// One label-edge slot per node.
    pub label_slots: usize,
}

impl SpaceDescriptor {
    pub fn new(num_nodes: usize, arch: Arch) -> Result<Self, Error> {
        if num_nodes < 2 {
            return Err(Error::InvalidGraphSize(num_nodes));
        }
        Ok(Self {
            num_nodes,
            arch,
            node_slots: ordered_pairs(num_nodes).collect(),
            label_slots: num_nodes,
        })
    }

    /// The 6 x 4 `(design, gate)` choices of a node-edge slot.
    pub fn node_edge_options() -> Vec<(LossDesign, GateKind)> {
        LossDesign::NODE_EDGE
            .iter()
            .flat_map(|&d| GateKind::ALL.iter().map(move |&g| (d, g)))
            .collect()
    }

    pub fn label_edge_options() -> &'static [GateKind] {
        &GateKind::ALL
    }

    /// Option count of every slot, node slots first.
    pub fn slot_option_counts(&self) -> Vec<usize> {
        let node = Self::node_edge_options().len();
        let label = Self::label_edge_options().len();
        core::iter::repeat(node)
            .take(self.node_slots.len())
            .chain(core::iter::repeat(label).take(self.label_slots))
            .collect()
    }

    /// Exact number of distinct graphs, or `None` if it overflows `u128`
    /// (from `M = 6` on).
    pub fn total_combinations(&self) -> Option<u128> {
        self.slot_option_counts()
            .into_iter()
            .try_fold(1u128, |acc, n| acc.checked_mul(n as u128))
    }

    pub fn log10_combinations(&self) -> f64 {
        self.slot_option_counts()
            .into_iter()
            .map(|n| libm::log10(n as f64))
            .sum()
    }

    /// Draws every slot independently and uniformly, resampling graphs that
    /// fail validation.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<GraphSpec, Error> {
        let options = Self::node_edge_options();
        let gates = Self::label_edge_options();
        for _ in 0..MAX_SAMPLE_ATTEMPTS {
            let seed = rng.next_u64();
            let edges = self
                .node_slots
                .iter()
                .map(|&(s, t)| {
                    let (loss, gate) = options[rng.gen_range(0..options.len())];
                    EdgeSpec::between(s, t, loss, gate)
                })
                .collect();
            let label_gates = (0..self.label_slots)
                .map(|_| gates[rng.gen_range(0..gates.len())])
                .collect();
            let g = GraphSpec {
                num_nodes: self.num_nodes,
                arch: self.arch,
                seed,
                label_gates,
                edges,
            };
            if g.validate().is_ok() {
                return Ok(g);
            }
        }
        Err(Error::SamplingFailed(MAX_SAMPLE_ATTEMPTS))
    }
}

/// Convenience wrapper around [`SpaceDescriptor::new`].
pub fn hyperparameter_space(num_nodes: usize, arch: Arch) -> Result<SpaceDescriptor, Error> {
    SpaceDescriptor::new(num_nodes, arch)
}
