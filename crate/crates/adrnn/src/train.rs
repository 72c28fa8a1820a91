//! Training loop: Adam with optional warmup + step decay, gradient-norm
//! clipping, a deterministic validation split by index hash, JSONL
//! metrics, and best-by-validation checkpointing. Everything is serial
//! and seeded, so a (config, seed) pair reproduces losses bitwise.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write as _;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::shard::Shard;
use crate::error::{AdrnnError, Result};
use crate::eval::{accuracy_pathfinder, exact_solve_mazes};
use crate::model::{bind_params, eval_batch, forward_train, task_loss, Model, TaskKind};
use crate::tape::{all_finite, Tape};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over `warmup_steps`, then multiply by 0.1 at each
    /// epoch milestone.
    WarmupStepDecay {
        warmup_steps: usize,
        milestones: Vec<usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: f64,
    pub seed: u64,
    /// Validation pass every this many optimizer steps; 0 = per epoch only.
    pub eval_every: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Cap on validation samples per pass (0 = all).
    pub max_val_samples: usize,
    /// Hard cap on optimizer steps across all epochs (0 = unlimited).
    #[serde(default)]
    pub max_steps: usize,
    /// Linearly ramp the ponder weight from 0 to `tau` over this many
    /// steps (0 = full strength immediately). Under Adam a full-strength
    /// ponder gradient saturates the halting head long before the task
    /// is learned, and a sudden switch-on moves the halting point faster
    /// than the readout can follow it.
    #[serde(default)]
    pub tau_warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            schedule: LrSchedule::Constant,
            batch_size: 16,
            epochs: 10,
            tau: 0.01,
            seed: 0,
            eval_every: 0,
            clip_norm: 5.0,
            max_val_samples: 256,
            max_steps: 0,
            tau_warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(AdrnnError::Config(format!(
                "need lr >= 0, batch_size >= 1, epochs >= 1; got {} / {} / {}",
                self.lr, self.batch_size, self.epochs
            )));
        }
        Ok(())
    }
}

/// Learning rate at a global step (0-based), given epoch length.
pub fn lr_at(cfg: &TrainConfig, step: usize, steps_per_epoch: usize) -> f64 {
    match &cfg.schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::WarmupStepDecay {
            warmup_steps,
            milestones,
        } => {
            let warm = if *warmup_steps > 0 && step < *warmup_steps {
                step as f64 / *warmup_steps as f64
            } else {
                1.0
            };
            let epoch = if steps_per_epoch > 0 {
                step / steps_per_epoch
            } else {
                0
            };
            let decays = milestones.iter().filter(|&&m| epoch >= m).count();
            cfg.lr * warm * 0.1f64.powi(decays as i32)
        }
    }
}

/// Bias-corrected Adam state.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, ArrayD<f32>>,
    pub v: BTreeMap<String, ArrayD<f32>>,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, ArrayD<f32>>,
        grads: &BTreeMap<String, ArrayD<f32>>,
        lr: f64,
    ) {
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("param for grad");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            for ((pi, gi), (mi, vi)) in p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = (b1 * *mi as f64 + (1.0 - b1) * *gi as f64) as f32;
                *vi = (b2 * *vi as f64 + (1.0 - b2) * (*gi as f64) * (*gi as f64)) as f32;
                let mhat = *mi as f64 / bc1;
                let vhat = *vi as f64 / bc2;
                *pi = (*pi as f64 - lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

/// Scale all gradients so their global L2 norm is at most `clip`.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, ArrayD<f32>>, clip: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &x in g.iter() {
            sq += (x as f64) * (x as f64);
        }
    }
    let norm = sq.sqrt();
    if clip > 0.0 && norm > clip {
        let s = (clip / norm) as f32;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub task_loss: f64,
    pub ponder: f64,
    pub mean_t_halt: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
}

pub struct TrainReport {
    pub metrics: Vec<MetricRecord>,
    pub best_val_acc: f64,
    pub final_val_acc: f64,
    pub steps: usize,
}

fn scalar_val(t: &ArrayD<f32>) -> f64 {
    t.iter().copied().next().unwrap_or(0.0) as f64
}

/// Deterministic validation membership: ~10% of each shard by index hash.
pub fn is_val(seed: u64, shard_idx: usize, row: usize) -> bool {
    let mut h = seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add((shard_idx as u64) << 32)
        .wrapping_add(row as u64);
    // splitmix64 finalizer.
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58476D1CE4E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D049BB133111EB);
    h ^= h >> 31;
    h % 10 == 0
}

fn gather_batch(task: TaskKind, shard: &Shard, rows: &[usize]) -> (ArrayD<f32>, ArrayD<f32>) {
    let ishape = shard.images.shape();
    let mut xs = ArrayD::<f32>::zeros(IxDyn(
        &[&[rows.len()], &ishape[1..]].concat(),
    ));
    let lshape = shard.labels.shape();
    let mut ys = ArrayD::<f32>::zeros(IxDyn(&[&[rows.len()], &lshape[1..]].concat()));
    for (i, &r) in rows.iter().enumerate() {
        xs.index_axis_mut(ndarray::Axis(0), i)
            .assign(&shard.images.index_axis(ndarray::Axis(0), r));
        ys.index_axis_mut(ndarray::Axis(0), i)
            .assign(&shard.labels.index_axis(ndarray::Axis(0), r));
    }
    let _ = task;
    (xs, ys)
}

fn batch_accuracy(task: TaskKind, logits: &ArrayD<f32>, labels: &ArrayD<f32>) -> (usize, usize) {
    match task {
        TaskKind::Pathfinder => {
            let n = logits.len();
            let correct = accuracy_pathfinder(
                logits.as_slice().expect("contig"),
                labels.as_slice().expect("contig"),
            ) / 100.0
                * n as f64;
            (correct.round() as usize, n)
        }
        TaskKind::Mazes => {
            let n = logits.shape()[0];
            let correct =
                exact_solve_mazes(logits, labels) / 100.0 * n as f64;
            (correct.round() as usize, n)
        }
    }
}

/// Accuracy of `model` on the validation rows of `shards`.
pub fn validate(
    model: &Model,
    shards: &[Shard],
    cfg: &TrainConfig,
    budget: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let per_shard_cap = if cfg.max_val_samples == 0 {
        usize::MAX
    } else {
        cfg.max_val_samples.div_ceil(shards.len().max(1))
    };
    for (si, shard) in shards.iter().enumerate() {
        let rows: Vec<usize> = (0..shard.count())
            .filter(|&r| is_val(cfg.seed, si, r))
            .take(per_shard_cap)
            .collect();
        for chunk in rows.chunks(16) {
            let (xs, ys) = gather_batch(model.config.task, shard, chunk);
            let out = eval_batch(model, &xs, model.config.halt_mode, budget)?;
            let (c, n) = batch_accuracy(model.config.task, &out.logits, &ys);
            correct += c;
            total += n;
        }
    }
    if total == 0 {
        return Err(AdrnnError::Config("empty validation split".into()));
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// Run the optimization loop. Mutates `model` in place (final params)
/// and returns metrics; the best-by-validation parameters are restored
/// into the model at the end.
pub fn train_loop(
    model: &mut Model,
    shards: &[Shard],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    model.config.validate()?;
    if shards.is_empty() {
        return Err(AdrnnError::Config("no training shards".into()));
    }
    let budget = model.config.halting.t_train;
    let mut metrics_file = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(File::create(d.join("metrics.jsonl"))?)
        }
        None => None,
    };

    // Train rows per shard (val rows held out).
    let train_rows: Vec<Vec<usize>> = shards
        .iter()
        .enumerate()
        .map(|(si, s)| {
            (0..s.count())
                .filter(|&r| !is_val(cfg.seed, si, r))
                .collect()
        })
        .collect();
    let steps_per_epoch: usize = train_rows
        .iter()
        .map(|r| r.len().div_ceil(cfg.batch_size))
        .sum();

    let mut adam = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5A5_5A5A_0F0F_F0F0);
    let mut metrics = Vec::new();
    let mut step = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_params = model.params.clone();
    let mut last_val = 0.0;

    for epoch in 0..cfg.epochs {
        // Batches stay within a shard (images may differ in size across
        // shards); batch order is shuffled across shards.
        let mut batches: Vec<(usize, Vec<usize>)> = Vec::new();
        for (si, rows) in train_rows.iter().enumerate() {
            let mut rows = rows.clone();
            rows.shuffle(&mut rng);
            for chunk in rows.chunks(cfg.batch_size) {
                batches.push((si, chunk.to_vec()));
            }
        }
        batches.shuffle(&mut rng);

        for (si, rows) in &batches {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break;
            }
            let shard = &shards[*si];
            let (xs, ys) = gather_batch(model.config.task, shard, rows);
            let lr = lr_at(cfg, step, steps_per_epoch);

            let mut tape = Tape::<f32>::new();
            let refs = bind_params(&mut tape, &model.params);
            let x = tape.constant(xs);
            let y = tape.constant(ys);
            let fwd = forward_train(&mut tape, &model.config, &refs, x, budget)?;
            let t_loss = task_loss(&mut tape, &model.config, fwd.logits, y)?;
            let tau_now = if step < cfg.tau_warmup_steps {
                cfg.tau * step as f64 / cfg.tau_warmup_steps as f64
            } else {
                cfg.tau
            };
            let (loss, ponder_val) = match fwd.ponder {
                Some(p) => {
                    let tau = tape.scale(p, tau_now as f32);
                    let l = tape.add(t_loss, tau)?;
                    let pv = scalar_val(tape.value(p));
                    (l, pv)
                }
                None => (t_loss, 0.0),
            };
            let loss_val = scalar_val(tape.value(loss));
            let task_val = scalar_val(tape.value(t_loss));
            if !loss_val.is_finite() {
                return Err(AdrnnError::Diverged(format!(
                    "non-finite loss {loss_val} at step {step} (lr {lr:.3e}, epoch {epoch})"
                )));
            }
            tape.backward(loss)?;

            let mut grads = BTreeMap::new();
            for (name, r) in &refs {
                if let Some(g) = tape.grad(*r) {
                    if !all_finite(g.view()) {
                        return Err(AdrnnError::Diverged(format!(
                            "non-finite gradient in '{name}' at step {step} (lr {lr:.3e})"
                        )));
                    }
                    grads.insert(name.clone(), g.clone());
                }
            }
            drop(tape);
            clip_grad_norm(&mut grads, cfg.clip_norm);
            adam.step(&mut model.params, &grads, lr);
            step += 1;

            let mean_t_halt =
                fwd.t_halt.iter().sum::<usize>() as f64 / fwd.t_halt.len().max(1) as f64;
            let val_acc = if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                let acc = validate(model, shards, cfg, budget)?;
                if acc > best_val {
                    best_val = acc;
                    best_params = model.params.clone();
                }
                Some(acc)
            } else {
                None
            };
            let rec = MetricRecord {
                step,
                epoch,
                lr,
                loss: loss_val,
                task_loss: task_val,
                ponder: ponder_val,
                mean_t_halt,
                val_acc,
            };
            if let Some(f) = metrics_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            }
            metrics.push(rec);
        }

        let acc = validate(model, shards, cfg, budget)?;
        last_val = acc;
        if acc > best_val {
            best_val = acc;
            best_params = model.params.clone();
        }
        if let Some(f) = metrics_file.as_mut() {
            let rec = serde_json::json!({"epoch_end": epoch, "val_acc": acc});
            writeln!(f, "{rec}")?;
        }
        if cfg.max_steps > 0 && step >= cfg.max_steps {
            break;
        }
    }

    model.params = best_params;
    if let Some(d) = out_dir {
        model.save(d.join("checkpoint").as_path(), cfg.seed, "best by validation")?;
    }
    Ok(TrainReport {
        metrics,
        best_val_acc: best_val,
        final_val_acc: last_val,
        steps: step,
    })
}
