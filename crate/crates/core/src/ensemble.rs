//! The ensemble node: a uniform average over all node logits.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::losses::softmax;
use crate::tensor::{argmax, Matrix};
use crate::Error;

/// What the ensemble averages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleMode {
    #[default]
    Logits,
    Probs,
}

/// Elementwise mean of the node logit batches.
///
/// Each entry is summed in ascending order, so the result is bitwise
/// independent of node order, and identical inputs return themselves.
/// Averaging is not voting: for one sample with node logits `(3, 1)` and
/// `(0, 4)` the mean is `(1.5, 2.5)`, so the ensemble predicts class 1 even
/// though node 0 alone predicts class 0.
pub fn ensemble_logits(nodes: &[&Matrix]) -> Result<Matrix, Error> {
    let first = nodes.first().ok_or(Error::Empty("ensemble inputs"))?;
    for m in nodes {
        first.check_same_shape(m)?;
    }
    let mut out = Matrix::zeros(first.rows(), first.cols());
    let mut vals = Vec::with_capacity(nodes.len());
    for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
        vals.clear();
        vals.extend(nodes.iter().map(|m| m.as_slice()[i]));
        vals.sort_by(f64::total_cmp);
        *o = if vals[0] == vals[vals.len() - 1] {
            vals[0]
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        };
    }
    Ok(out)
}

/// Ensemble scores under the given averaging mode.
pub fn ensemble_scores(nodes: &[&Matrix], mode: EnsembleMode) -> Result<Matrix, Error> {
    match mode {
        EnsembleMode::Logits => ensemble_logits(nodes),
        EnsembleMode::Probs => {
            let probs: Vec<Matrix> = nodes.iter().map(|m| softmax(m)).collect();
            let refs: Vec<&Matrix> = probs.iter().collect();
            ensemble_logits(&refs)
        }
    }
}

/// Row-wise argmax, lowest class index on ties.
pub fn predictions(scores: &Matrix) -> Vec<usize> {
    scores.iter_rows().map(argmax).collect()
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64, Error> {
    if predicted.len() != labels.len() {
        return Err(Error::Shape {
            expected: labels.len(),
            found: predicted.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}
