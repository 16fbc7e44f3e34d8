//! SGD with momentum and coupled weight decay.
//!
//! `d = g + wd*p; buf = mu*buf + d` (buf = d on the first step);
//! `p -= lr*buf`.

use candle_core::{backprop::GradStore, Tensor, Var};

use crate::error::Result;

pub struct Sgd {
    vars: Vec<Var>,
    buffers: Vec<Option<Tensor>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, momentum: f64, weight_decay: f64) -> Self {
        let buffers = vec![None; vars.len()];
        Self {
            vars,
            buffers,
            momentum,
            weight_decay,
        }
    }

    /// Applies one update; parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for (var, buf) in self.vars.iter().zip(self.buffers.iter_mut()) {
            let p = var.as_tensor();
            let Some(g) = grads.get(p).cloned() else {
                continue;
            };
            let d = if self.weight_decay != 0.0 {
                (g + (p.detach() * self.weight_decay)?)?
            } else {
                g
            };
            let b = match buf.take() {
                Some(prev) if self.momentum != 0.0 => ((prev * self.momentum)? + d)?,
                _ => d,
            };
            var.set(&(p.detach() - (&b * lr)?)?)?;
            *buf = Some(b);
        }
        Ok(())
    }
}
