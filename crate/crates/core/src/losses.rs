//! Probability-distribution and attention-map transfer losses.
//!
//! Every loss is computed per sample; batch averaging happens once, at the
//! edge level. The source side of a loss is a constant: gradients are only
//! ever produced for the target's logits and attention map, so the types
//! returned here have no slot for a source gradient at all.

use alloc::vec;
use alloc::vec::Vec;

use crate::graph::{AttnTerm, LossDesign, ProbTerm};
use crate::tensor::{argmax, dot, l2_norm, MapBatch, Matrix};
use crate::Error;

/// Lower clamp for probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-12;
/// Lower clamp for L2 norms in normalizations.
pub const NORM_EPS: f64 = 1e-12;

/// One network's forward result on a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeOutput {
    pub logits: Matrix,
    pub probs: Matrix,
    pub attention: MapBatch,
    /// Class scores of an attention branch, when the backbone has one.
    pub aux_logits: Option<Matrix>,
}

impl NodeOutput {
    pub fn new(logits: Matrix, attention: MapBatch) -> Result<Self, Error> {
        if attention.len() != logits.rows() {
            return Err(Error::Shape {
                expected: logits.rows(),
                found: attention.len(),
            });
        }
        let probs = softmax(&logits);
        Ok(Self {
            logits,
            probs,
            attention,
            aux_logits: None,
        })
    }

    pub fn with_aux_logits(mut self, aux: Matrix) -> Self {
        self.aux_logits = Some(aux);
        self
    }

    pub fn batch_size(&self) -> usize {
        self.logits.rows()
    }

    /// Per-sample correctness of the argmax prediction.
    pub fn correct(&self, labels: &[usize]) -> Vec<bool> {
        self.logits
            .iter_rows()
            .zip(labels)
            .map(|(row, &y)| argmax(row) == y)
            .collect()
    }
}

pub fn softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = libm::exp(v - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        softmax_row(logits.row(i), out.row_mut(i));
    }
    out
}

/// Pulls a gradient w.r.t. softmax probabilities back onto the logits.
fn softmax_backward(p: &[f64], g: &[f64], out: &mut [f64], scale: f64) {
    let inner = dot(g, p);
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(g) {
        *o += scale * pi * (gi - inner);
    }
}

struct Normalized {
    unit: Vec<f64>,
    norm: f64,
    clamped: bool,
}

fn normalize(v: &[f64]) -> Normalized {
    let raw = l2_norm(v);
    let clamped = raw < NORM_EPS;
    let norm = if clamped { NORM_EPS } else { raw };
    Normalized {
        unit: v.iter().map(|x| x / norm).collect(),
        norm,
        clamped,
    }
}

impl Normalized {
    /// Gradient w.r.t. the raw vector given the gradient w.r.t. the unit one.
    fn backward(&self, g: &[f64]) -> Vec<f64> {
        if self.clamped {
            return g.iter().map(|x| x / self.norm).collect();
        }
        let inner = dot(g, &self.unit);
        g.iter()
            .zip(&self.unit)
            .map(|(gi, ui)| (gi - inner * ui) / self.norm)
            .collect()
    }
}

fn kl_row(ps: &[f64], pt: &[f64]) -> f64 {
    ps.iter()
        .zip(pt)
        .map(|(&a, &b)| a * (libm::log(a.max(PROB_EPS)) - libm::log(b.max(PROB_EPS))))
        .sum()
}

/// `KL(p_s || p_t)` per sample, natural log.
pub fn prob_kl(ps: &Matrix, pt: &Matrix) -> Result<Vec<f64>, Error> {
    ps.check_same_shape(pt)?;
    Ok(ps.iter_rows().zip(pt.iter_rows()).map(|(a, b)| kl_row(a, b)).collect())
}

fn cosine_row(a: &[f64], b: &[f64]) -> f64 {
    dot(&normalize(a).unit, &normalize(b).unit)
}

/// Cosine similarity of `p_s` and `p_t` per sample.
pub fn prob_cosine(ps: &Matrix, pt: &Matrix) -> Result<Vec<f64>, Error> {
    ps.check_same_shape(pt)?;
    Ok(ps
        .iter_rows()
        .zip(pt.iter_rows())
        .map(|(a, b)| cosine_row(a, b))
        .collect())
}

/// A square window inside a map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl CropWindow {
    /// `size × size` window centered on `(r, c)`, shifted inward to stay
    /// inside an `height × width` map.
    pub fn centered(r: usize, c: usize, size: usize, height: usize, width: usize) -> Self {
        let half = size / 2;
        Self {
            row: r.saturating_sub(half).min(height - size),
            col: c.saturating_sub(half).min(width - size),
            size,
        }
    }

    /// Flattened row-major indices of the window in a map of `width` columns.
    pub fn indices(&self, width: usize) -> impl Iterator<Item = usize> + '_ {
        (self.row..self.row + self.size)
            .flat_map(move |r| (self.col..self.col + self.size).map(move |c| r * width + c))
    }

    fn extract(&self, map: &[f64], width: usize) -> Vec<f64> {
        self.indices(width).map(|i| map[i]).collect()
    }
}

/// Row-major position of the largest entry; the first one wins ties.
pub fn peak(map: &[f64], width: usize) -> (usize, usize) {
    let i = argmax(map);
    (i / width, i % width)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropPair {
    pub q_s: Vec<f64>,
    pub q_t: Vec<f64>,
    pub window: CropWindow,
}

pub fn check_crop_sizes(sizes: &[usize], height: usize, width: usize) -> Result<(), Error> {
    if sizes.is_empty() {
        return Err(Error::Empty("crop sizes"));
    }
    for &size in sizes {
        if size % 2 == 0 {
            return Err(Error::EvenCropSize(size));
        }
        if size > height || size > width {
            return Err(Error::CropTooLarge { size, height, width });
        }
    }
    Ok(())
}

fn crop_windows(qs: &MapBatch, sizes: &[usize]) -> Vec<Vec<CropWindow>> {
    let (h, w) = (qs.height(), qs.width());
    (0..qs.len())
        .map(|n| {
            let (r, c) = peak(qs.map(n), w);
            sizes.iter().map(|&k| CropWindow::centered(r, c, k, h, w)).collect()
        })
        .collect()
}

/// Crops both maps at windows centered on the source map's peak, one pair
/// per sample and size.
pub fn crop_attention(qs: &MapBatch, qt: &MapBatch, sizes: &[usize]) -> Result<Vec<Vec<CropPair>>, Error> {
    check_map_pair(qs, qt)?;
    check_crop_sizes(sizes, qs.height(), qs.width())?;
    let w = qs.width();
    Ok(crop_windows(qs, sizes)
        .into_iter()
        .enumerate()
        .map(|(n, windows)| {
            windows
                .into_iter()
                .map(|window| CropPair {
                    q_s: window.extract(qs.map(n), w),
                    q_t: window.extract(qt.map(n), w),
                    window,
                })
                .collect()
        })
        .collect())
}

fn check_map_pair(qs: &MapBatch, qt: &MapBatch) -> Result<(), Error> {
    if (qs.len(), qs.height(), qs.width()) != (qt.len(), qt.height(), qt.width()) {
        return Err(Error::Shape {
            expected: qs.as_slice().len(),
            found: qt.as_slice().len(),
        });
    }
    Ok(())
}

fn mse_pair(p: &CropPair) -> f64 {
    let a = normalize(&p.q_s);
    let b = normalize(&p.q_t);
    a.unit.iter().zip(&b.unit).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_over_crops(pairs: &[Vec<CropPair>], f: impl Fn(&CropPair) -> f64) -> Vec<f64> {
    pairs
        .iter()
        .map(|crops| crops.iter().map(&f).sum::<f64>() / crops.len().max(1) as f64)
        .collect()
}

/// Squared distance of L2-normalized crops, averaged over crop sizes.
pub fn attn_mse(pairs: &[Vec<CropPair>]) -> Vec<f64> {
    mean_over_crops(pairs, mse_pair)
}

/// Cosine similarity of crops, averaged over crop sizes.
pub fn attn_cosine(pairs: &[Vec<CropPair>]) -> Vec<f64> {
    mean_over_crops(pairs, |p| cosine_row(&p.q_s, &p.q_t))
}

/// Cross-entropy of logits against integer labels, per sample.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>, Error> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape {
            expected: logits.rows(),
            found: labels.len(),
        });
    }
    let mut out = Vec::with_capacity(labels.len());
    for (row, &y) in logits.iter_rows().zip(labels) {
        if y >= row.len() {
            return Err(Error::Contract(alloc::format!(
                "label {y} out of range for {} classes",
                row.len()
            )));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(row.iter().map(|&z| libm::exp(z - max)).sum::<f64>());
        out.push(lse - row[y]);
    }
    Ok(out)
}

/// Gradient of `Σ_n weights[n] · CE_n` w.r.t. the logits.
pub fn cross_entropy_grad(logits: &Matrix, labels: &[usize], weights: &[f64]) -> Result<Matrix, Error> {
    cross_entropy(logits, labels)?;
    check_len(weights.len(), logits.rows())?;
    let mut g = softmax(logits);
    for (n, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        let row = g.row_mut(n);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= w);
    }
    Ok(g)
}

/// Shannon entropy of each probability row, in nats.
pub fn entropy(probs: &Matrix) -> Vec<f64> {
    probs
        .iter_rows()
        .map(|p| -p.iter().map(|&x| x * libm::log(x.max(PROB_EPS))).sum::<f64>())
        .collect()
}

fn check_len(found: usize, expected: usize) -> Result<(), Error> {
    if found != expected {
        return Err(Error::Shape { expected, found });
    }
    Ok(())
}

fn check_pair(s: &NodeOutput, t: &NodeOutput) -> Result<(), Error> {
    s.logits.check_same_shape(&t.logits)?;
    check_map_pair(&s.attention, &t.attention)
}

/// Per-sample loss of a node-edge design, `L_p(x_n) + L_map(x_n)` with
/// absent terms contributing zero.
pub fn design_loss(design: LossDesign, s: &NodeOutput, t: &NodeOutput, crop_sizes: &[usize]) -> Result<Vec<f64>, Error> {
    let ones = vec![1.0; s.batch_size()];
    design_loss_grad(design, s, t, crop_sizes, &ones).map(|g| g.per_sample)
}

/// Per-sample losses plus the gradient of their weighted sum w.r.t. the
/// target's logits and attention map.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetGrad {
    pub per_sample: Vec<f64>,
    pub logits: Matrix,
    pub attention: MapBatch,
}

/// Evaluates `design` and differentiates `Σ_n weights[n] · L_n` w.r.t. the
/// target. Samples with zero weight still report their loss but are skipped
/// in the backward pass.
pub fn design_loss_grad(
    design: LossDesign,
    s: &NodeOutput,
    t: &NodeOutput,
    crop_sizes: &[usize],
    weights: &[f64],
) -> Result<TargetGrad, Error> {
    if design == LossDesign::LabelHard {
        return Err(Error::Contract(
            "LabelHard is a label-edge loss, not a node-edge design".into(),
        ));
    }
    check_pair(s, t)?;
    let n = s.batch_size();
    check_len(weights.len(), n)?;
    let (h, w) = (t.attention.height(), t.attention.width());
    let mut out = TargetGrad {
        per_sample: vec![0.0; n],
        logits: Matrix::zeros(n, t.logits.cols()),
        attention: MapBatch::zeros(n, h, w),
    };

    if let Some(term) = design.prob_term() {
        for i in 0..n {
            let (ps, pt) = (s.probs.row(i), t.probs.row(i));
            let (loss, grad_p) = match term {
                ProbTerm::Kl => {
                    let g: Vec<f64> = ps
                        .iter()
                        .zip(pt)
                        .map(|(&a, &b)| if b > PROB_EPS { -a / b } else { 0.0 })
                        .collect();
                    (kl_row(ps, pt), g)
                }
                ProbTerm::Cosine => {
                    let a = normalize(ps);
                    let b = normalize(pt);
                    let cos = dot(&a.unit, &b.unit);
                    let g_unit: Vec<f64> = a.unit.clone();
                    (cos, b.backward(&g_unit))
                }
            };
            out.per_sample[i] += loss;
            if weights[i] != 0.0 {
                softmax_backward(pt, &grad_p, out.logits.row_mut(i), weights[i]);
            }
        }
    }

    if let Some(term) = design.attn_term() {
        check_crop_sizes(crop_sizes, h, w)?;
        let k = crop_sizes.len() as f64;
        for (i, windows) in crop_windows(&s.attention, crop_sizes).into_iter().enumerate() {
            let (qs, qt) = (s.attention.map(i), t.attention.map(i));
            let mut loss = 0.0;
            for window in windows {
                let a = normalize(&window.extract(qs, w));
                let b = normalize(&window.extract(qt, w));
                let g_unit: Vec<f64> = match term {
                    AttnTerm::Mse => {
                        loss += a.unit.iter().zip(&b.unit).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                        a.unit.iter().zip(&b.unit).map(|(x, y)| -2.0 * (x - y)).collect()
                    }
                    AttnTerm::Cosine => {
                        loss += dot(&a.unit, &b.unit);
                        a.unit.clone()
                    }
                };
                if weights[i] != 0.0 {
                    let g = b.backward(&g_unit);
                    let scale = weights[i] / k;
                    let map = out.attention.map_mut(i);
                    for (idx, gv) in window.indices(w).zip(g) {
                        map[idx] += scale * gv;
                    }
                }
            }
            out.per_sample[i] += loss / k;
        }
    }

    Ok(out)
}
