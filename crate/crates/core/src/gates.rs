//! Per-sample gate functions applied to edge losses.

use alloc::vec;
use alloc::vec::Vec;

use crate::graph::GateKind;
use crate::Error;

/// Training-time state a gate may depend on.
#[derive(Clone, Copy, Debug)]
pub struct GateContext<'a> {
    /// Optimizer steps taken so far.
    pub iteration: u64,
    /// Optimizer steps at the end of training.
    pub total_iterations: u64,
    /// Whether the source node classified each sample correctly. `None`
    /// marks a label source, for which `Correct` degenerates to `Through`.
    pub source_correct: Option<&'a [bool]>,
}

impl<'a> GateContext<'a> {
    pub fn new(iteration: u64, total_iterations: u64) -> Self {
        Self {
            iteration,
            total_iterations,
            source_correct: None,
        }
    }

    pub fn with_source_correct(mut self, correct: &'a [bool]) -> Self {
        self.source_correct = Some(correct);
        self
    }

    fn check(&self) -> Result<(), Error> {
        if self.total_iterations == 0 || self.iteration > self.total_iterations {
            return Err(Error::InvalidGateContext {
                iteration: self.iteration,
                total: self.total_iterations,
            });
        }
        Ok(())
    }

    fn linear_factor(&self) -> f64 {
        self.iteration as f64 / self.total_iterations as f64
    }
}

/// Per-sample multipliers the gate applies to a batch of `n` losses.
///
/// Every gate is linear in its input, so gating a loss and gating its
/// gradient use the same weights.
pub fn gate_weights(kind: GateKind, n: usize, ctx: &GateContext<'_>) -> Result<Vec<f64>, Error> {
    ctx.check()?;
    Ok(match kind {
        GateKind::Through => vec![1.0; n],
        GateKind::Cutoff => vec![0.0; n],
        GateKind::Linear => vec![ctx.linear_factor(); n],
        GateKind::Correct => match ctx.source_correct {
            None => vec![1.0; n],
            Some(c) => {
                if c.len() != n {
                    return Err(Error::Shape {
                        expected: n,
                        found: c.len(),
                    });
                }
                c.iter().map(|&ok| if ok { 1.0 } else { 0.0 }).collect()
            }
        },
    })
}

/// Applies the gate to a vector of per-sample losses.
pub fn apply_gate(kind: GateKind, losses: &[f64], ctx: &GateContext<'_>) -> Result<Vec<f64>, Error> {
    ctx.check()?;
    Ok(match kind {
        GateKind::Through => losses.to_vec(),
        GateKind::Cutoff => vec![0.0; losses.len()],
        GateKind::Linear => {
            let f = ctx.linear_factor();
            losses.iter().map(|a| f * a).collect()
        }
        GateKind::Correct => match ctx.source_correct {
            None => losses.to_vec(),
            Some(c) => {
                if c.len() != losses.len() {
                    return Err(Error::Shape {
                        expected: losses.len(),
                        found: c.len(),
                    });
                }
                losses
                    .iter()
                    .zip(c)
                    .map(|(&a, &ok)| if ok { a } else { 0.0 })
                    .collect()
            }
        },
    })
}
