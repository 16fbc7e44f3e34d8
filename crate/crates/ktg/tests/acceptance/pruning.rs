//! Scripted trial curves against a hand-simulated pruning oracle.

use std::collections::BTreeMap;

use ktg::data::{builtin, synthetic_dataset};
use ktg::models::{BackboneConfig, ModelSpec};
use ktg::training::{GraphTrainer, Outcome as RunOutcome};
use ktg_core::schedule::checkpoint_epochs;
use ktg_core::{Arch, CheckpointMode, Decision, GraphSpec, PrunerState, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

const GUARD: usize = 2;
const EPOCHS: u32 = 16;

/// Accuracies are multiples of 1/64 so sums are exact and ties are common.
fn scripted_curves(rng: &mut ChaCha8Rng, count: usize, epochs: &[u32]) -> Vec<Vec<u32>> {
    (0..count)
        .map(|_| {
            let mut k: u32 = rng.gen_range(8..40);
            epochs
                .iter()
                .map(|_| {
                    k = (k + rng.gen_range(0..6)).min(64);
                    k
                })
                .collect()
        })
        .collect()
}

/// Sequential trials; each reports until the oracle stops it.
fn oracle(curves: &[Vec<u32>], epochs: &[u32], guard: usize) -> Vec<Vec<bool>> {
    let mut history: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    let mut out = Vec::new();
    for curve in curves {
        let mut stops = Vec::new();
        for (&e, &k) in epochs.iter().zip(curve) {
            let past = history.entry(e).or_default();
            // k/64 < sum/(64·count)  <=>  k·count < sum, in integers
            let sum: u32 = past.iter().sum();
            let stop = past.len() >= guard && (k as u64) * (past.len() as u64) < sum as u64;
            past.push(k);
            stops.push(stop);
            if stop && e != *epochs.last().unwrap() {
                break;
            }
        }
        out.push(stops);
    }
    out
}

pub fn pruner() -> Outcome {
    let epochs = checkpoint_epochs(EPOCHS, CheckpointMode::PowersOfTwo);
    ensure(epochs == [1, 2, 4, 8, 16], format!("checkpoints {epochs:?}"))?;
    ensure(checkpoint_epochs(8, CheckpointMode::PowersOfTwo) == [1, 2, 4, 8], "8-epoch checkpoints")?;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let curves = scripted_curves(&mut rng, 50, &epochs);
    let want = oracle(&curves, &epochs, GUARD);

    let mut state = PrunerState::new(GUARD);
    let mut reports = Vec::new();
    let mut pruned = 0;
    let mut worst_mean = 0.0f64;
    for (t, curve) in curves.iter().enumerate() {
        let mut seen = Vec::new();
        let mut got = Vec::new();
        for (&e, &k) in epochs.iter().zip(curve) {
            let acc = k as f64 / 64.0;
            let d = state.decide(e, acc);
            reports.push((e, acc));
            seen.push(e);
            got.push(d == Decision::Stop);
            if d == Decision::Stop && e != EPOCHS {
                break;
            }
        }
        ensure(got == want[t], format!("trial {t}: decisions {got:?}, oracle {:?}", want[t]))?;

        // A trial that stops at e has reported exactly the checkpoints up to e.
        let last = *seen.last().unwrap();
        ensure(seen == epochs.iter().copied().take_while(|&x| x <= last).collect::<Vec<_>>(), "checkpoint prefix")?;
        ensure(seen.windows(2).all(|w| w[0] < w[1]), "checkpoints not increasing")?;
        if last != EPOCHS {
            pruned += 1;
        }

        // Running means against a from-scratch recompute.
        for &e in &epochs {
            let at: Vec<f64> = reports.iter().filter(|r| r.0 == e).map(|r| r.1).collect();
            ensure(state.count_at(e) == at.len(), "report count")?;
            if !at.is_empty() {
                let m = at.iter().sum::<f64>() / at.len() as f64;
                let d = (state.mean_at(e).unwrap() - m).abs();
                worst_mean = worst_mean.max(d);
                ensure(d <= 1e-12, format!("running mean off by {d:e}"))?;
            }
        }
    }
    ensure(pruned > 0 && pruned < 50, format!("scripted curves pruned {pruned} of 50"))?;
    let replayed = PrunerState::replay(GUARD, reports.iter().copied());
    ensure(replayed == state, "replaying the reports does not rebuild the state")?;

    // Documented examples.
    let mut p = PrunerState::new(2);
    ensure(p.decide(1, 0.6) == Decision::Continue, "first report pruned")?;
    p.decide(1, 0.7);
    ensure(p.peek(1, 0.3) == Decision::Stop, "0.3 below mean 0.65 not pruned")?;
    let mut p = PrunerState::new(2);
    p.decide(1, 0.6);
    p.decide(1, 0.6);
    ensure(p.peek(1, 0.6) == Decision::Continue, "tie with the mean pruned")?;
    ensure(p.peek(1, 0.55) == Decision::Stop, "0.55 below 0.60 not pruned")?;

    let runs = fit_respects_checkpoints()?;
    Ok(format!(
        "50 curves match the oracle ({pruned} pruned), means within {worst_mean:.1e}; {runs}"
    ))
}

/// Real training loops stopped by a scripted hook end exactly at the stop.
fn fit_respects_checkpoints() -> Outcome {
    let data = synthetic_dataset(&builtin("shapes-tiny").unwrap()).map_err(|e| e.to_string())?;
    let train = data.train.subset(&(0..16).collect::<Vec<_>>());
    let test = data.test.subset(&(0..16).collect::<Vec<_>>());
    let spec = ModelSpec {
        arch: Arch::AtSmallResnet,
        num_classes: train.num_classes,
        input: (train.channels, train.height, train.width),
        backbone: BackboneConfig::tiny(),
    };
    let cfg = TrainConfig {
        epochs: 8,
        ..TrainConfig::default()
    };
    for stop_at in [1, 2, 4, 8, 0] {
        let graph = GraphSpec::mutual_learning(2, Arch::AtSmallResnet, 0);
        let mut tr = GraphTrainer::new(graph, spec.clone(), cfg.clone()).map_err(|e| e.to_string())?;
        let report = tr
            .fit(&train, &test, &mut |e, _| if e == stop_at { Decision::Stop } else { Decision::Continue })
            .map_err(|e| e.to_string())?;
        let seen: Vec<u32> = report.checkpoints.iter().map(|c| c.epoch).collect();
        let expect: Vec<u32> = match stop_at {
            1 => vec![1],
            2 => vec![1, 2],
            4 => vec![1, 2, 4],
            _ => vec![1, 2, 4, 8],
        };
        ensure(seen == expect, format!("stop at {stop_at}: checkpoints {seen:?}"))?;
        let pruned = matches!(report.outcome, RunOutcome::Pruned { epoch } if epoch == stop_at);
        let completed = report.outcome == RunOutcome::Completed;
        ensure(
            if stop_at == 1 || stop_at == 2 || stop_at == 4 { pruned } else { completed },
            format!("stop at {stop_at}: outcome {:?}", report.outcome),
        )?;
    }
    Ok("training stops exactly at scripted checkpoints".into())
}
