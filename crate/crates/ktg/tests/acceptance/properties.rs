//! Criteria that only touch pure computation: gates, losses, gradients, the
//! crop identity and ensemble averaging.

use ktg::models::{BackboneConfig, ModelSpec};
use ktg::training::GraphTrainer;
use ktg_core::ensemble::{ensemble_logits, predictions};
use ktg_core::gates::{apply_gate, gate_weights, GateContext};
use ktg_core::losses::{
    attn_cosine, attn_mse, crop_attention, design_loss, design_loss_grad, prob_cosine, prob_kl, softmax,
};
use ktg_core::objective::{node_loss, ObjectiveConfig, StepClock};
use ktg_core::{Arch, EdgeSpec, GateKind, GraphSpec, LossDesign, MapBatch, Matrix, NodeOutput, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracle;
use crate::{ensure, Outcome};

fn rel_err(x: f64, o: f64) -> f64 {
    if x == o {
        0.0
    } else {
        (x - o).abs() / x.abs().max(o.abs())
    }
}

// ---------------------------------------------------------------- gates

pub fn gates() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_linear = 0.0f64;
    for case in 0..500 {
        let n = rng.gen_range(1..40);
        let losses: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..8.0) })
            .collect();
        let total = rng.gen_range(1..20_000u64);
        let k = match case % 5 {
            0 => 0,
            1 => total,
            _ => rng.gen_range(0..=total),
        };
        let correct: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let ctx = GateContext::new(k, total).with_source_correct(&correct);
        let label_ctx = GateContext::new(k, total);
        let lam = rng.gen_range(0.0..10.0);
        let scaled: Vec<f64> = losses.iter().map(|l| lam * l).collect();

        let through = apply_gate(GateKind::Through, &losses, &ctx).unwrap();
        ensure(through == losses, "Through is not the identity")?;
        let cut = apply_gate(GateKind::Cutoff, &losses, &ctx).unwrap();
        ensure(cut.iter().all(|&v| v == 0.0), "Cutoff is not identically zero")?;
        let corr = apply_gate(GateKind::Correct, &losses, &ctx).unwrap();
        for i in 0..n {
            let want = if correct[i] { losses[i] } else { 0.0 };
            ensure(corr[i] == want, "Correct mask mismatch")?;
        }
        let corr_label = apply_gate(GateKind::Correct, &losses, &label_ctx).unwrap();
        ensure(corr_label == losses, "Correct from a label source is not Through")?;

        let lin = apply_gate(GateKind::Linear, &losses, &ctx).unwrap();
        for i in 0..n {
            let want = losses[i] * k as f64 / total as f64;
            let e = rel_err(lin[i], want);
            worst_linear = worst_linear.max(e);
            ensure(e <= 1e-12, format!("Linear off by {e:e} (k={k}, total={total})"))?;
        }
        if k == 0 {
            ensure(lin.iter().all(|&v| v == 0.0), "Linear at k=0 is not zero")?;
        }
        if k == total {
            ensure(lin == losses, "Linear at k=k_end is not the identity")?;
        }

        for kind in [GateKind::Through, GateKind::Cutoff, GateKind::Correct, GateKind::Linear] {
            let a = apply_gate(kind, &scaled, &ctx).unwrap();
            let b: Vec<f64> = apply_gate(kind, &losses, &ctx).unwrap().iter().map(|v| lam * v).collect();
            let w = gate_weights(kind, n, &ctx).unwrap();
            for i in 0..n {
                if kind == GateKind::Linear {
                    ensure(rel_err(a[i], b[i]) <= 1e-12, "Linear is not homogeneous")?;
                } else {
                    ensure(a[i] == b[i], format!("{} is not homogeneous", kind.name()))?;
                }
                let via_w = w[i] * losses[i];
                ensure(rel_err(via_w, apply_gate(kind, &losses, &ctx).unwrap()[i]) <= 1e-12, "weights disagree with gate")?;
            }
        }
    }
    ensure(apply_gate(GateKind::Linear, &[1.0], &GateContext::new(5, 4)).is_err(), "k > k_end accepted")?;
    Ok(format!("500 random cases, worst Linear relative error {worst_linear:.1e}"))
}

// ---------------------------------------------------------------- losses

struct Batch {
    h: usize,
    w: usize,
    sizes: Vec<usize>,
    s: Vec<oracle::Sample>,
    t: Vec<oracle::Sample>,
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    // a coarse grid every few maps so peaks tie and the tie rule is exercised
    let coarse = rng.gen_bool(0.3);
    (0..h * w)
        .map(|_| {
            if coarse {
                rng.gen_range(0..4) as f64
            } else {
                rng.gen_range(0.0..2.0)
            }
        })
        .collect()
}

fn random_batch(rng: &mut ChaCha8Rng, classes: usize) -> Batch {
    let h = rng.gen_range(3..=12);
    let w = rng.gen_range(3..=12);
    let side = h.min(w);
    let odd: Vec<usize> = (1..=side).filter(|k| k % 2 == 1).collect();
    let count = rng.gen_range(1..=odd.len().min(3));
    let mut sizes: Vec<usize> = (0..count).map(|_| odd[rng.gen_range(0..odd.len())]).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let n = rng.gen_range(1..=6);
    let scale = [0.5, 3.0, 12.0][rng.gen_range(0..3)];
    let sample = |rng: &mut ChaCha8Rng| oracle::Sample {
        logits: (0..classes).map(|_| rng.gen_range(-scale..scale)).collect(),
        map: random_map(rng, h, w),
    };
    let s = (0..n).map(|_| sample(rng)).collect();
    let t = (0..n).map(|_| sample(rng)).collect();
    Batch { h, w, sizes, s, t }
}

fn node_output(samples: &[oracle::Sample], classes: usize, h: usize, w: usize) -> NodeOutput {
    let logits: Vec<f64> = samples.iter().flat_map(|s| s.logits.iter().copied()).collect();
    let maps: Vec<f64> = samples.iter().flat_map(|s| s.map.iter().copied()).collect();
    NodeOutput::new(
        Matrix::new(samples.len(), classes, logits).unwrap(),
        MapBatch::new(samples.len(), h, w, maps).unwrap(),
    )
    .unwrap()
}

fn close(x: f64, o: f64, tol: f64) -> bool {
    (x - o).abs() <= tol
}

pub fn loss_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for b in 0..100 {
        let classes = [2, 5, 10][b % 3];
        let batch = random_batch(&mut rng, classes);
        let (h, w) = (batch.h, batch.w);
        let s = node_output(&batch.s, classes, h, w);
        let t = node_output(&batch.t, classes, h, w);
        let mut check = |what: &str, got: &[f64], want: &dyn Fn(usize) -> f64| -> Result<(), String> {
            for (i, &g) in got.iter().enumerate() {
                let o = want(i);
                worst = worst.max((g - o).abs());
                checked += 1;
                ensure(close(g, o, 1e-9), format!("batch {b}: {what}[{i}] = {g}, oracle {o}"))?;
            }
            Ok(())
        };
        let ps = |i: usize| oracle::softmax(&batch.s[i].logits);
        let pt = |i: usize| oracle::softmax(&batch.t[i].logits);
        check("prob_kl", &prob_kl(&s.probs, &t.probs).unwrap(), &|i| oracle::kl(&ps(i), &pt(i)))?;
        check("prob_cosine", &prob_cosine(&s.probs, &t.probs).unwrap(), &|i| oracle::cosine(&ps(i), &pt(i)))?;
        let sm = softmax(&t.logits);
        for i in 0..batch.t.len() {
            check("softmax", sm.row(i), &|c| pt(i)[c])?;
        }
        let pairs = crop_attention(&s.attention, &t.attention, &batch.sizes).unwrap();
        let crops = |i: usize| oracle::crops(&batch.s[i].map, &batch.t[i].map, h, w, &batch.sizes);
        for (i, per) in pairs.iter().enumerate() {
            let want = crops(i);
            ensure(per.len() == want.len(), "wrong number of crop pairs")?;
            for (p, (qs, qt)) in per.iter().zip(&want) {
                ensure(&p.q_s == qs && &p.q_t == qt, format!("batch {b}: crop windows differ from oracle"))?;
            }
        }
        check("attn_mse", &attn_mse(&pairs), &|i| oracle::attn_mse(&crops(i)))?;
        check("attn_cosine", &attn_cosine(&pairs), &|i| oracle::attn_cos(&crops(i)))?;
        for d in LossDesign::NODE_EDGE {
            let got = design_loss(d, &s, &t, &batch.sizes).unwrap();
            check(d.name(), &got, &|i| oracle::design(d.name(), &batch.s[i], &batch.t[i], h, w, &batch.sizes))?;
        }
    }

    // spot values
    let m = |rows: &[&[f64]]| Matrix::from_rows(rows).unwrap();
    let kl = prob_kl(&m(&[&[0.5, 0.5]]), &m(&[&[0.25, 0.75]])).unwrap()[0];
    ensure(close(kl, 0.143841, 5e-7), format!("KL spot value {kl}"))?;
    let kl_hot = prob_kl(&m(&[&[1.0, 0.0]]), &m(&[&[0.5, 0.5]])).unwrap()[0];
    ensure(close(kl_hot, std::f64::consts::LN_2, 1e-12), format!("KL one-hot spot value {kl_hot}"))?;
    let cos = prob_cosine(&m(&[&[0.5, 0.5]]), &m(&[&[1.0, 0.0]])).unwrap()[0];
    ensure(close(cos, 0.707107, 5e-7), format!("cosine spot value {cos}"))?;
    let map3 = |v: &[f64]| {
        let mut d = vec![0.0; 9];
        d[..v.len()].copy_from_slice(v);
        MapBatch::new(1, 3, 3, d).unwrap()
    };
    let orth = crop_attention(&map3(&[0.0, 0.0, 0.0, 0.0, 1.0]), &map3(&[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]), &[3]).unwrap();
    let mse = attn_mse(&orth)[0];
    ensure(close(mse, 2.0, 1e-12), format!("orthogonal attn_mse {mse}"))?;
    let tilted = crop_attention(&map3(&[1.0]), &map3(&[0.6, 0.8]), &[3]).unwrap();
    ensure(close(attn_mse(&tilted)[0], 0.8, 1e-12), "attn_mse (1,0) vs (0.6,0.8)")?;
    ensure(close(attn_cosine(&tilted)[0], 0.6, 1e-12), "attn_cosine (1,0) vs (0.6,0.8)")?;
    Ok(format!(
        "100 batches, {checked} values, max |diff| {worst:.1e}; spots KL {kl:.6} cos {cos:.6} mse {mse:.1}"
    ))
}

// ---------------------------------------------------------------- gradients

fn norm_rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn weighted(d: LossDesign, s: &NodeOutput, logits: &Matrix, maps: &MapBatch, sizes: &[usize], w: &[f64]) -> f64 {
    let t = NodeOutput::new(logits.clone(), maps.clone()).unwrap();
    design_loss(d, s, &t, sizes).unwrap().iter().zip(w).map(|(l, w)| l * w).sum()
}

const STEP: f64 = 1e-6;

fn central<F: Fn(&[f64]) -> f64>(x: &[f64], f: F) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for j in 0..x.len() {
        probe[j] = x[j] + STEP;
        let up = f(&probe);
        probe[j] = x[j] - STEP;
        let down = f(&probe);
        probe[j] = x[j];
        out.push((up - down) / (2.0 * STEP));
    }
    out
}

fn tiny_spec() -> ModelSpec {
    ModelSpec {
        arch: Arch::AtSmallResnet,
        num_classes: 4,
        input: (3, 16, 16),
        backbone: BackboneConfig::tiny(),
    }
}

/// Parameters of node `m` after `steps` SGD steps of `graph` on a fixed batch.
fn params_after(graph: GraphSpec, steps: u64) -> Vec<Vec<u32>> {
    use candle_core::{Device, Tensor};
    let seeds = vec![11, 12];
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut tr = GraphTrainer::with_init_seeds(graph, tiny_spec(), cfg, seeds).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f32> = (0..8 * 3 * 16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = Tensor::from_vec(x, (8, 3, 16, 16), &Device::Cpu).unwrap();
    let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
    for k in 1..=steps {
        tr.step(&x, &labels, StepClock::new(k, steps), 0.1).unwrap();
    }
    tr.nodes()
        .iter()
        .map(|n| n.state_vec().unwrap().iter().map(|v| v.to_bits()).collect())
        .collect()
}

pub fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, c, h, w) = (3, 5, 6, 6);
    let sizes = [3, 5];
    let mut worst = 0.0f64;
    for d in LossDesign::NODE_EDGE {
        for case in 0..10 {
            let out = |rng: &mut ChaCha8Rng| {
                let logits = Matrix::new(n, c, (0..n * c).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
                let maps = MapBatch::new(n, h, w, (0..n * h * w).map(|_| rng.gen_range(0.05..2.0)).collect()).unwrap();
                (logits, maps)
            };
            let (sl, sm) = out(&mut rng);
            let (tl, tm) = out(&mut rng);
            let s = NodeOutput::new(sl, sm).unwrap();
            let t = NodeOutput::new(tl.clone(), tm.clone()).unwrap();
            let wts: Vec<f64> = (0..n).map(|i| if case % 3 == 0 && i == 0 { 0.0 } else { rng.gen_range(0.1..1.0) }).collect();
            let g = design_loss_grad(d, &s, &t, &sizes, &wts).unwrap();

            let fd_logits = central(tl.as_slice(), |z| {
                weighted(d, &s, &Matrix::new(n, c, z.to_vec()).unwrap(), &tm, &sizes, &wts)
            });
            let fd_maps = central(tm.as_slice(), |q| {
                weighted(d, &s, &tl, &MapBatch::new(n, h, w, q.to_vec()).unwrap(), &sizes, &wts)
            });
            let e1 = norm_rel_err(g.logits.as_slice(), &fd_logits);
            let e2 = norm_rel_err(g.attention.as_slice(), &fd_maps);
            worst = worst.max(e1).max(e2);
            ensure(e1 <= 1e-5, format!("{}: logit gradient relative error {e1:e}", d.name()))?;
            ensure(e2 <= 1e-5, format!("{}: attention gradient relative error {e2:e}", d.name()))?;
        }
    }

    // The source of an edge receives nothing from it: node 0 only feeds node
    // 1, so its own objective (label gate cut) has an exactly-zero gradient.
    for d in LossDesign::NODE_EDGE {
        let mut g = GraphSpec::uniform(2, Arch::AtSmallResnet, 0, d, GateKind::Through);
        g.edges = vec![
            EdgeSpec::between(0, 1, d, GateKind::Through),
            EdgeSpec::between(1, 0, d, GateKind::Cutoff),
        ];
        g.label_gates = vec![GateKind::Cutoff, GateKind::Through];
        let mk = |rng: &mut ChaCha8Rng| {
            NodeOutput::new(
                Matrix::new(4, 3, (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap(),
                MapBatch::new(4, 5, 5, (0..100).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap(),
            )
            .unwrap()
        };
        let outs = [mk(&mut rng), mk(&mut rng)];
        let cfg = ObjectiveConfig {
            crop_sizes: &[3, 5],
            aux_weight: 1.0,
        };
        let labels = [0, 1, 2, 0];
        let src = node_loss(0, &g, &outs, &labels, StepClock::new(1, 10), &cfg).unwrap();
        ensure(src.total == 0.0, "source node picked up a loss")?;
        ensure(
            src.grad.logits.as_slice().iter().all(|&v| v == 0.0) && src.grad.attention_is_zero(),
            format!("{}: nonzero gradient at the source", d.name()),
        )?;
        let dst = node_loss(1, &g, &outs, &labels, StepClock::new(1, 10), &cfg).unwrap();
        ensure(dst.edges.len() == 1, "target lost its incoming edge")?;
    }

    // Same check through the real networks: switching the edge into node 1
    // on or off leaves node 0's parameter trajectory bit-for-bit unchanged.
    let mut trained = 0;
    for d in LossDesign::NODE_EDGE {
        let base = GraphSpec::independent(2, Arch::AtSmallResnet, 0);
        let mut linked = base.clone();
        linked.edge_mut(0, 1).unwrap().loss = d;
        linked.edge_mut(0, 1).unwrap().gate = GateKind::Through;
        let a = params_after(base, 3);
        let b = params_after(linked, 3);
        ensure(a[0] == b[0], format!("{}: source parameters moved", d.name()))?;
        ensure(a[1] != b[1], format!("{}: edge had no effect on the target", d.name()))?;
        trained += 1;
    }
    Ok(format!(
        "6 designs x 10 cases, worst relative error {worst:.1e}; source gradients exactly zero ({trained} network pairs)"
    ))
}

// ---------------------------------------------------------------- identity

pub fn crop_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let mut batch = random_batch(&mut rng, 2);
        // the identity needs normalizable crops; the offset keeps peaks and ties
        for smp in batch.s.iter_mut().chain(batch.t.iter_mut()) {
            smp.map.iter_mut().for_each(|v| *v += 0.01);
        }
        let (h, w) = (batch.h, batch.w);
        let s = node_output(&batch.s, 2, h, w);
        let t = node_output(&batch.t, 2, h, w);
        let pairs = crop_attention(&s.attention, &t.attention, &batch.sizes).unwrap();
        for (m, c) in attn_mse(&pairs).iter().zip(attn_cosine(&pairs)) {
            let d = (m - 2.0 * (1.0 - c)).abs();
            worst = worst.max(d);
            ensure(d <= 1e-9, format!("attn_mse {m} vs 2(1-cos) {}", 2.0 * (1.0 - c)))?;
        }
    }
    Ok(format!("200 random crop sets, max |diff| {worst:.1e}"))
}

// ---------------------------------------------------------------- ensemble

pub fn ensemble() -> Outcome {
    let m = |rows: &[&[f64]]| Matrix::from_rows(rows).unwrap();
    let a = m(&[&[3.0, 1.0]]);
    let b = m(&[&[0.0, 4.0]]);
    let mean = ensemble_logits(&[&a, &b]).unwrap();
    ensure(mean == m(&[&[1.5, 2.5]]), format!("mean of (3,1),(0,4) is {:?}", mean.as_slice()))?;
    ensure(predictions(&a) == [0] && predictions(&mean) == [1], "averaged logits should predict class 1")?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut perms = 0;
    for case in 0..200 {
        let count = 1 + case % 5;
        let (rows, cols) = (rng.gen_range(1..6), rng.gen_range(2..8));
        let nodes: Vec<Matrix> = (0..count)
            .map(|_| Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-50.0..50.0)).collect()).unwrap())
            .collect();
        let refs: Vec<&Matrix> = nodes.iter().collect();
        let base = ensemble_logits(&refs).unwrap();
        if count == 1 {
            ensure(base == nodes[0], "single-node ensemble is not the identity")?;
        }
        for perm in permutations(count) {
            let r: Vec<&Matrix> = perm.iter().map(|&i| &nodes[i]).collect();
            ensure(ensemble_logits(&r).unwrap() == base, "ensemble depends on node order")?;
            perms += 1;
        }
        let same: Vec<&Matrix> = vec![&nodes[0]; count];
        ensure(ensemble_logits(&same).unwrap() == nodes[0], "ensemble of identical nodes changed them")?;
    }
    Ok(format!("example holds; {perms} permutations bitwise equal; identity and idempotence exact"))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}
