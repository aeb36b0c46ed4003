//! Loss aggregation, two-phase training, and persistence.

pub mod checkpoint;
pub mod optim;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::pipeline::Pipeline;
use crate::toyworld::Dataset;

pub use checkpoint::{
    load_checkpoint, restore_pipeline, save_checkpoint, Checkpoint, CheckpointError, TrainPhase,
};
pub use optim::AdamW;

/// L = L_N + 10 * L_D.
pub const DEPTH_LOSS_WEIGHT: f64 = 10.0;

pub fn total_loss<S: Scalar>(g: &mut Graph<S>, l_n: Var, l_d: Var) -> Var {
    let weighted = g.scale(l_d, S::of(DEPTH_LOSS_WEIGHT));
    g.add(l_n, weighted)
}

/// Per-step metrics row: step, L_N, L_D, L, lr (the CSV schema).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub l_n: f64,
    pub l_d: f64,
    pub total: f64,
    pub lr: f64,
}

pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        MetricsLog { rows: Vec::new() }
    }

    pub fn append_csv(&self, path: &Path) -> std::io::Result<()> {
        let exists = path.exists();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if !exists {
            writeln!(f, "step,l_n,l_d,l,lr")?;
        }
        for r in &self.rows {
            writeln!(f, "{},{},{},{},{}", r.step, r.l_n, r.l_d, r.total, r.lr)?;
        }
        Ok(())
    }
}

impl Default for MetricsLog {
    fn default() -> Self {
        Self::new()
    }
}

/// Deterministic epoch-reshuffled sample order.
fn batch_indices(seed: u64, phase_tag: u64, n_samples: usize, step: usize, batch: usize) -> Vec<usize> {
    let per_epoch = n_samples.max(1);
    let start = step * batch;
    let mut out = Vec::with_capacity(batch);
    let mut epoch = start / per_epoch;
    let mut offset = start % per_epoch;
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ phase_tag ^ (epoch as u64).wrapping_mul(0x2545F491));
    order.shuffle(&mut rng);
    for _ in 0..batch {
        if offset >= per_epoch {
            epoch += 1;
            offset = 0;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ phase_tag ^ (epoch as u64).wrapping_mul(0x2545F491));
            order = (0..n_samples).collect();
            order.shuffle(&mut rng);
        }
        out.push(order[offset]);
        offset += 1;
    }
    out
}

struct StepOut<S> {
    grads: Vec<Option<Tensor<S>>>,
    l_n: f64,
    l_d: f64,
}

/// One optimizer step: per-sample graphs run in parallel, gradients reduce
/// in fixed sample order, then average over the batch.
fn run_step<S: Scalar>(
    pipe: &Pipeline<S>,
    dataset: &Dataset,
    indices: &[usize],
    phase_a: bool,
    step_mix: u64,
) -> StepOut<S> {
    let per_sample: Vec<(Vec<Option<Tensor<S>>>, f64, f64)> = indices
        .par_iter()
        .map(|&i| {
            let sample = &dataset.samples[i];
            let mut g = Graph::new();
            let (l_n_val, l_d_val, loss) = if phase_a {
                let (l_d, _warn) = pipe.phase_a_loss(&mut g, sample);
                (0.0, g.value(l_d).item().as_f64(), l_d)
            } else {
                let out = pipe.joint_forward(&mut g, sample, step_mix);
                let total = total_loss(&mut g, out.l_n, out.l_d);
                (g.value(out.l_n).item().as_f64(), g.value(out.l_d).item().as_f64(), total)
            };
            g.backward(loss).expect("scalar loss");
            let mut grads = vec![None; pipe.store.len()];
            pipe.store.collect_grads(&g, &mut grads);
            (grads, l_n_val, l_d_val)
        })
        .collect();

    let mut grads: Vec<Option<Tensor<S>>> = vec![None; pipe.store.len()];
    let mut l_n = 0.0;
    let mut l_d = 0.0;
    for (sample_grads, ln, ld) in per_sample {
        l_n += ln;
        l_d += ld;
        for (slot, g) in grads.iter_mut().zip(sample_grads) {
            match (slot.as_mut(), g) {
                (Some(acc), Some(g)) => acc.add_assign(&g),
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
    }
    let inv = S::of(1.0 / indices.len() as f64);
    for slot in grads.iter_mut().flatten() {
        slot.scale_in_place(inv);
    }
    StepOut { grads, l_n: l_n / indices.len() as f64, l_d: l_d / indices.len() as f64 }
}

pub struct PhaseReport {
    pub metrics: MetricsLog,
    pub final_l_d: f64,
}

/// Mean frame-0 depth L1 over a set of scenes (evaluation helper used to
/// track phase-A progress).
pub fn mean_frame0_depth_l1<S: Scalar>(pipe: &Pipeline<S>, dataset: &Dataset, limit: usize) -> f64 {
    let n = dataset.samples.len().min(limit);
    let mut total = 0.0;
    let mut count = 0usize;
    for sample in dataset.samples.iter().take(n) {
        let mut g = Graph::no_grad();
        let (l_d, warn) = pipe.phase_a_loss(&mut g, sample);
        if !warn {
            total += g.value(l_d).item().as_f64();
            count += 1;
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    }
}

/// Phase A: train the tokenizer and renderer on current-frame reconstruction.
/// The sequence model, projections, and link stay frozen.
///
/// `stop_step` is where this call stops; the learning-rate schedule always
/// spans the configured `steps_phase_a`, so interrupted runs resume exactly.
pub fn train_phase_a<S: Scalar>(
    pipe: &mut Pipeline<S>,
    dataset: &Dataset,
    opt: &mut AdamW<S>,
    start_step: usize,
    stop_step: usize,
) -> PhaseReport {
    pipe.store.set_trainable(|n| n.starts_with("bevtok.") || n.starts_with("render."));
    let cfg = pipe.cfg.train.clone();
    let schedule_total = cfg.steps_phase_a.max(stop_step);
    let mut metrics = MetricsLog::new();
    let mut last = f64::NAN;
    for step in start_step..stop_step {
        let indices = batch_indices(cfg.seed, 0xA, dataset.samples.len(), step, cfg.batch_size);
        let out = run_step(pipe, dataset, &indices, true, cfg.seed ^ step as u64);
        let lr = AdamW::<S>::lr_at(&cfg, step, schedule_total);
        opt.step(&mut pipe.store, &out.grads, &cfg, lr);
        last = out.l_d;
        metrics.rows.push(MetricsRow { step, l_n: out.l_n, l_d: out.l_d, total: out.l_d, lr });
    }
    pipe.store.set_trainable(|_| true);
    PhaseReport { metrics, final_l_d: last }
}

/// Joint phase: all parameters train on L_N + 10 L_D over the configured
/// supervised frames. Returns per-step metrics.
///
/// `stop_step` is where this call stops; the schedule spans `steps_joint`.
pub fn train_joint<S: Scalar>(
    pipe: &mut Pipeline<S>,
    dataset: &Dataset,
    opt: &mut AdamW<S>,
    start_step: usize,
    stop_step: usize,
    mut early_stop: Option<&mut dyn FnMut(usize, &MetricsRow, &Pipeline<S>) -> bool>,
) -> PhaseReport {
    pipe.store.set_trainable(|_| true);
    let cfg = pipe.cfg.train.clone();
    let schedule_total = cfg.steps_joint.max(stop_step);
    let mut metrics = MetricsLog::new();
    let mut last = f64::NAN;
    for step in start_step..stop_step {
        let indices = batch_indices(cfg.seed, 0xB, dataset.samples.len(), step, cfg.batch_size);
        let out = run_step(pipe, dataset, &indices, false, cfg.seed ^ step as u64);
        let lr = AdamW::<S>::lr_at(&cfg, step, schedule_total);
        opt.step(&mut pipe.store, &out.grads, &cfg, lr);
        last = out.l_d;
        let row = MetricsRow {
            step,
            l_n: out.l_n,
            l_d: out.l_d,
            total: out.l_n + DEPTH_LOSS_WEIGHT * out.l_d,
            lr,
        };
        metrics.rows.push(row);
        if let Some(cb) = early_stop.as_mut() {
            if cb(step, &row, pipe) {
                break;
            }
        }
    }
    PhaseReport { metrics, final_l_d: last }
}
