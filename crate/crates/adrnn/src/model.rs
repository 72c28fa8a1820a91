//! The full three-stage pipeline: a 7x7 input convolution with ReLU, a
//! recurrent block run under one of three halting regimes (learned
//! adaptive halting, fixed unroll, stability heuristic), and a task
//! readout — per-sample classification logit for PathFinder, per-pixel
//! segmentation logits for Mazes.
//!
//! Two forward paths share the same parameters and halting bookkeeping:
//! a differentiable one building a single tape (training), and a
//! streaming one using a fresh gradient-free tape per step so memory
//! stays bounded for long inference budgets.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{conv_init, BoundConv, CellArch, CellKind, CellState};
use crate::error::{AdrnnError, Result};
use crate::halting::{
    run_act, run_stability_halt, HaltAccumulator, HaltingConfig, HaltingTrace,
    StabilityAccumulator,
};
use crate::tape::{LnScope, Scalar, Tape, TensorRef};
use crate::tensor::{crc32, read_tensor, to_le_bytes, write_tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Mazes,
    Pathfinder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltMode {
    Act,
    Fixed,
    Stability,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub task: TaskKind,
    pub cell: CellArch,
    pub in_channels: usize,
    pub input_kernel: usize,
    pub halting: HaltingConfig,
    pub halt_mode: HaltMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.halting.validate()?;
        if self.input_kernel % 2 == 0 || self.cell.k % 2 == 0 {
            return Err(AdrnnError::Config(format!(
                "kernel sizes must be odd, got input {} / lateral {}",
                self.input_kernel, self.cell.k
            )));
        }
        let want = match self.task {
            TaskKind::Mazes => 3,
            TaskKind::Pathfinder => 1,
        };
        if self.in_channels != want {
            return Err(AdrnnError::Config(format!(
                "task expects {want} input channels, got {}",
                self.in_channels
            )));
        }
        Ok(())
    }

    /// Parameter-parity presets: hidden widths chosen so all three cells
    /// land within 5% of each other in learnable-parameter count.
    pub fn preset(task: TaskKind, kind: CellKind) -> ModelConfig {
        let (in_channels, k, t_train) = match task {
            TaskKind::Mazes => (3, 3, 15),
            TaskKind::Pathfinder => (1, 5, 12),
        };
        let d = match (task, kind) {
            (TaskKind::Mazes, CellKind::LocRnn) => 16,
            (TaskKind::Mazes, CellKind::ConvGru) => 22,
            (TaskKind::Mazes, CellKind::TiedResnet) => 28,
            (TaskKind::Pathfinder, CellKind::LocRnn) => 16,
            (TaskKind::Pathfinder, CellKind::ConvGru) => 22,
            (TaskKind::Pathfinder, CellKind::TiedResnet) => 28,
        };
        ModelConfig {
            task,
            cell: CellArch {
                kind,
                d,
                k,
                ln_scope: LnScope::Channels,
                ln_eps: 1e-5,
            },
            in_channels,
            input_kernel: 7,
            halting: HaltingConfig {
                t_train,
                t_inference: t_train,
                // Normalized mixture weights: with raw-score weighting
                // the task gradient can inflate every halting score to
                // scale the logits, which pins halting at the earliest
                // step before anything is learned.
                remainder_mode: crate::halting::RemainderMode::Remainder,
                ..HaltingConfig::default()
            },
            halt_mode: HaltMode::Act,
        }
    }

    /// (name, shape) for every learnable parameter of the full model.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.cell.d;
        let ik = self.input_kernel;
        let mut out = vec![
            ("input.w".to_string(), vec![d, self.in_channels, ik, ik]),
            ("input.b".to_string(), vec![d]),
            ("halt.w".to_string(), vec![1, d, 1, 1]),
            ("halt.b".to_string(), vec![1]),
        ];
        match self.task {
            TaskKind::Mazes => {
                out.push(("readout.w".to_string(), vec![1, d, 1, 1]));
                out.push(("readout.b".to_string(), vec![1]));
            }
            TaskKind::Pathfinder => {
                out.push(("readout.w".to_string(), vec![d, 1]));
                out.push(("readout.b".to_string(), vec![1]));
            }
        }
        for (name, shape) in self.cell.param_shapes() {
            out.push((format!("cell.{name}"), shape));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> BTreeMap<String, ArrayD<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = BTreeMap::new();
        for (name, shape) in self.param_shapes() {
            let arr: ArrayD<T> = if name == "halt.w" {
                // Small but nonzero: a full-scale random kernel under the
                // global max pool saturates the score and collapses halting
                // to the earliest step, while an all-zero kernel makes the
                // score map spatially constant, so the max pool ties
                // everywhere and gradient only ever flows through one
                // arbitrary pixel. A downscaled random kernel keeps the
                // initial score near the bias while letting the max pool
                // select content-dependent locations.
                let scale = T::from_f64(0.4).expect("scale");
                conv_init::<T>(&mut rng, shape[0], shape[1], shape[2]).mapv_into(|v| v * scale)
            } else if name.ends_with(".w") && shape.len() == 4 {
                conv_init(&mut rng, shape[0], shape[1], shape[2])
            } else if name == "readout.w" {
                // FC weight [d, 1], same fan-in scaling.
                let flat = conv_init::<T>(&mut rng, shape[1], shape[0], 1);
                flat.into_shape_with_order(IxDyn(&shape)).expect("fc shape")
            } else if name.ends_with(".gain") {
                ArrayD::from_elem(IxDyn(&shape), T::one())
            } else if name == "halt.b" {
                // Biased low (score ~0.12) so untrained models ponder
                // most of the budget before the first halt.
                ArrayD::from_elem(IxDyn(&shape), -(T::one() + T::one()))
            } else {
                ArrayD::zeros(IxDyn(&shape))
            };
            out.insert(name, arr);
        }
        out
    }
}

/// A configured model plus its parameter values.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: BTreeMap<String, ArrayD<f32>>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let params = config.init_params(seed);
        Ok(Model { config, params })
    }
}

/// Bind every parameter as a gradient-carrying leaf; returns refs by name.
pub fn bind_params<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BTreeMap<String, ArrayD<T>>,
) -> BTreeMap<String, TensorRef> {
    params
        .iter()
        .map(|(n, v)| (n.clone(), tape.leaf(v.clone())))
        .collect()
}

/// Bind every parameter as a constant (evaluation).
pub fn bind_constants<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BTreeMap<String, ArrayD<T>>,
) -> BTreeMap<String, TensorRef> {
    params
        .iter()
        .map(|(n, v)| (n.clone(), tape.constant(v.clone())))
        .collect()
}

fn cell_refs(refs: &BTreeMap<String, TensorRef>) -> BTreeMap<String, TensorRef> {
    refs.iter()
        .filter_map(|(n, r)| n.strip_prefix("cell.").map(|s| (s.to_string(), *r)))
        .collect()
}

fn get(refs: &BTreeMap<String, TensorRef>, n: &str) -> TensorRef {
    *refs.get(n).unwrap_or_else(|| panic!("missing param {n}"))
}

/// Apply the task readout to a hidden tensor [B, d, H, W].
pub fn apply_readout<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    refs: &BTreeMap<String, TensorRef>,
    h: TensorRef,
) -> Result<TensorRef> {
    match cfg.task {
        TaskKind::Mazes => tape.conv2d(h, get(refs, "readout.w"), get(refs, "readout.b")),
        TaskKind::Pathfinder => {
            let pooled = tape.global_avg_pool(h)?;
            let b = tape.shape(pooled)[0];
            let logit = tape.fc(pooled, get(refs, "readout.w"), get(refs, "readout.b"))?;
            tape.reshape(logit, &[b])
        }
    }
}

/// Task loss: mean binary cross-entropy over logits vs targets
/// (per-pixel for segmentation, per-sample for classification).
pub fn task_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    logits: TensorRef,
    targets: TensorRef,
) -> Result<TensorRef> {
    let logits = match cfg.task {
        TaskKind::Mazes => {
            let s = tape.shape(logits).to_vec();
            tape.reshape(logits, &[s[0], s[2], s[3]])?
        }
        TaskKind::Pathfinder => logits,
    };
    tape.bce_logits(logits, targets)
}

/// Output of the differentiable forward pass.
pub struct TrainForward {
    /// [B] classification logits or [B,1,H,W] segmentation logits.
    pub logits: TensorRef,
    /// Present under adaptive halting; multiply by tau in the loss.
    pub ponder: Option<TensorRef>,
    pub traces: Option<Vec<HaltingTrace>>,
    pub t_halt: Vec<usize>,
    pub halted: Vec<bool>,
    pub steps_executed: usize,
}

/// Single-tape forward pass; gradients flow through halting scores and
/// hidden states alike.
pub fn forward_train<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    refs: &BTreeMap<String, TensorRef>,
    x: TensorRef,
    budget: usize,
) -> Result<TrainForward> {
    let conv = tape.conv2d(x, get(refs, "input.w"), get(refs, "input.b"))?;
    let h0 = tape.relu(conv);
    let batch = tape.shape(h0)[0];
    let cell = cfg.cell.bind(tape, &cell_refs(refs));
    match cfg.halt_mode {
        HaltMode::Act => {
            let halt = BoundConv {
                w: get(refs, "halt.w"),
                b: get(refs, "halt.b"),
            };
            let run = run_act(tape, &cell, h0, halt, &cfg.halting, budget)?;
            let logits = apply_readout(tape, cfg, refs, run.h_act)?;
            let t_halt = run.traces.iter().map(|t| t.t_halt).collect();
            let halted = run.traces.iter().map(|t| t.halted).collect();
            Ok(TrainForward {
                logits,
                ponder: Some(run.ponder),
                traces: Some(run.traces),
                t_halt,
                halted,
                steps_executed: run.steps_executed,
            })
        }
        HaltMode::Fixed => {
            let mut state = cell.init_state(tape, h0);
            for _ in 0..budget {
                state = cell.step(tape, &state, h0)?;
            }
            let logits = apply_readout(tape, cfg, refs, state.readout_view())?;
            Ok(TrainForward {
                logits,
                ponder: None,
                traces: None,
                t_halt: vec![budget; batch],
                halted: vec![true; batch],
                steps_executed: budget,
            })
        }
        HaltMode::Stability => {
            let (final_vals, t_halt, halted) = run_stability_halt(tape, &cell, h0, budget)?;
            let steps = t_halt.iter().copied().max().unwrap_or(budget);
            let h = tape.constant(final_vals);
            let logits = apply_readout(tape, cfg, refs, h)?;
            Ok(TrainForward {
                logits,
                ponder: None,
                traces: None,
                t_halt,
                halted,
                steps_executed: steps,
            })
        }
    }
}

// ---- streaming evaluation ----

/// Value-level cell state for the streaming evaluator.
#[derive(Clone)]
enum StateVals {
    Single(ArrayD<f32>),
    Dual(ArrayD<f32>, ArrayD<f32>),
}

impl StateVals {
    fn readout(&self) -> &ArrayD<f32> {
        match self {
            StateVals::Single(h) => h,
            StateVals::Dual(l, _) => l,
        }
    }
}

pub struct EvalOutput {
    /// [B] classification logits or [B,S,S] segmentation logits.
    pub logits: ArrayD<f32>,
    pub t_halt: Vec<usize>,
    pub halted: Vec<bool>,
    pub traces: Option<Vec<HaltingTrace>>,
}

/// Evaluate a batch with a fresh gradient-free tape per recurrent step,
/// so peak memory is independent of the inference budget. Produces the
/// same numbers as the single-tape path (both are plain f32 forward
/// arithmetic in the same order).
pub fn eval_batch(model: &Model, images: &ArrayD<f32>, mode: HaltMode, budget: usize) -> Result<EvalOutput> {
    let cfg = &model.config;
    cfg.validate()?;
    let batch = images.shape()[0];

    // Stage 1 once: h0 = ReLU(input conv).
    let h0_vals: ArrayD<f32> = {
        let mut tape = Tape::<f32>::no_grad();
        let x = tape.constant(images.clone());
        let w = tape.constant(model.params["input.w"].clone());
        let b = tape.constant(model.params["input.b"].clone());
        let conv = tape.conv2d(x, w, b)?;
        let h0 = tape.relu(conv);
        tape.value(h0).clone()
    };

    let mut state = init_state_vals(cfg, &h0_vals);
    match mode {
        HaltMode::Act => {
            let mut acc = HaltAccumulator::new(
                batch,
                cfg.halting.epsilon,
                cfg.halting.remainder_mode,
                budget,
            );
            let mut h_act = ArrayD::<f32>::zeros(h0_vals.raw_dim());
            for _ in 1..=budget {
                let (next, p) = step_once(model, &h0_vals, &state, true)?;
                let outcome = acc.step(&p.expect("act scores"));
                let next_view = next.readout();
                for (bi, &w) in outcome.weights.iter().enumerate() {
                    if w != 0.0 {
                        let mut slab = h_act.index_axis_mut(ndarray::Axis(0), bi);
                        slab.scaled_add(w as f32, &next_view.index_axis(ndarray::Axis(0), bi));
                    }
                }
                state = next;
                if acc.all_stopped() {
                    break;
                }
            }
            let traces = acc.finish();
            let logits = readout_vals(model, &h_act)?;
            let t_halt = traces.iter().map(|t| t.t_halt).collect();
            let halted = traces.iter().map(|t| t.halted).collect();
            Ok(EvalOutput {
                logits,
                t_halt,
                halted,
                traces: Some(traces),
            })
        }
        HaltMode::Fixed => {
            for _ in 0..budget {
                let (next, _) = step_once(model, &h0_vals, &state, false)?;
                state = next;
            }
            let logits = readout_vals(model, state.readout())?;
            Ok(EvalOutput {
                logits,
                t_halt: vec![budget; batch],
                halted: vec![true; batch],
                traces: None,
            })
        }
        HaltMode::Stability => {
            if budget < 2 {
                return Err(AdrnnError::Config(format!(
                    "stability halting needs budget >= 2, got {budget}"
                )));
            }
            let init = flatten_batch(state.readout());
            let mut acc = StabilityAccumulator::new(&init, budget);
            for _ in 1..=budget {
                let (next, _) = step_once(model, &h0_vals, &state, false)?;
                let done = acc.feed(&flatten_batch(next.readout()));
                state = next;
                if done {
                    break;
                }
            }
            let shape = state.readout().shape().to_vec();
            let h = ArrayD::from_shape_vec(IxDyn(&shape), acc.final_states().to_vec())
                .expect("final state");
            let logits = readout_vals(model, &h)?;
            Ok(EvalOutput {
                logits,
                t_halt: acc.t_halt.clone(),
                halted: acc.halted.clone(),
                traces: None,
            })
        }
    }
}

fn init_state_vals(cfg: &ModelConfig, h0: &ArrayD<f32>) -> StateVals {
    let zeros = || ArrayD::<f32>::zeros(h0.raw_dim());
    match cfg.cell.kind {
        CellKind::LocRnn => StateVals::Dual(zeros(), zeros()),
        CellKind::ConvGru => StateVals::Single(zeros()),
        CellKind::TiedResnet => StateVals::Single(h0.clone()),
    }
}

/// One recurrent step on a throwaway tape; optionally also computes the
/// halting score from the pre-step state.
fn step_once(
    model: &Model,
    h0_vals: &ArrayD<f32>,
    state: &StateVals,
    want_p: bool,
) -> Result<(StateVals, Option<Vec<f64>>)> {
    let cfg = &model.config;
    let mut tape = Tape::<f32>::no_grad();
    let refs = bind_constants(&mut tape, &model.params);
    let h0 = tape.constant(h0_vals.clone());
    let cell = cfg.cell.bind(&mut tape, &cell_refs(&refs));
    let tape_state = match state {
        StateVals::Single(h) => CellState::Single {
            h: tape.constant(h.clone()),
        },
        StateVals::Dual(l, s) => CellState::Dual {
            l: tape.constant(l.clone()),
            s: tape.constant(s.clone()),
        },
    };
    let p = if want_p {
        let hc = tape.conv2d(
            tape_state.readout_view(),
            get(&refs, "halt.w"),
            get(&refs, "halt.b"),
        )?;
        let pooled = tape.global_max_pool(hc)?;
        let sig = tape.sigmoid(pooled);
        Some(tape.value(sig).iter().map(|&v| v as f64).collect())
    } else {
        None
    };
    let next = cell.step(&mut tape, &tape_state, h0)?;
    let out = match next {
        CellState::Single { h } => StateVals::Single(tape.value(h).clone()),
        CellState::Dual { l, s } => StateVals::Dual(tape.value(l).clone(), tape.value(s).clone()),
    };
    Ok((out, p))
}

fn readout_vals(model: &Model, h: &ArrayD<f32>) -> Result<ArrayD<f32>> {
    let cfg = &model.config;
    let mut tape = Tape::<f32>::no_grad();
    let refs = bind_constants(&mut tape, &model.params);
    let hc = tape.constant(h.clone());
    let logits = apply_readout(&mut tape, cfg, &refs, hc)?;
    let v = tape.value(logits).clone();
    Ok(match cfg.task {
        TaskKind::Mazes => {
            let s = v.shape().to_vec();
            v.into_shape_with_order(IxDyn(&[s[0], s[2], s[3]]))
                .expect("squeeze")
        }
        TaskKind::Pathfinder => v,
    })
}

fn flatten_batch(a: &ArrayD<f32>) -> ArrayD<f32> {
    let batch = a.shape()[0];
    let per = a.len() / batch;
    a.clone()
        .into_shape_with_order(IxDyn(&[batch, per]))
        .expect("flatten")
}

// ---- checkpointing ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    /// CRC over (name, bytes) of all parameters in sorted order.
    pub content_crc: u32,
    pub note: String,
}

fn params_crc(params: &BTreeMap<String, ArrayD<f32>>) -> u32 {
    let mut buf = Vec::new();
    for (name, v) in params {
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&to_le_bytes(v.as_slice().expect("contiguous")));
    }
    crc32(&buf)
}

impl Model {
    pub fn save(&self, dir: &Path, seed: u64, note: &str) -> Result<()> {
        let pdir = dir.join("params");
        fs::create_dir_all(&pdir)?;
        for (name, v) in &self.params {
            write_tensor(&pdir.join(format!("{name}.tns")), v)?;
        }
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            seed,
            content_crc: params_crc(&self.params),
            note: note.to_string(),
        };
        let tmp = dir.join("model.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&meta)?)?;
        fs::rename(&tmp, dir.join("model.json"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Model> {
        let meta: CheckpointMeta = serde_json::from_slice(&fs::read(dir.join("model.json"))?)?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(AdrnnError::FormatVersion {
                found: meta.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let mut params = BTreeMap::new();
        for (name, shape) in meta.config.param_shapes() {
            let t: ArrayD<f32> = read_tensor(&dir.join("params").join(format!("{name}.tns")))?;
            if t.shape() != shape.as_slice() {
                return Err(AdrnnError::ShardFormat(format!(
                    "checkpoint param '{name}' has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            params.insert(name, t);
        }
        let crc = params_crc(&params);
        if crc != meta.content_crc {
            return Err(AdrnnError::ChecksumFailure {
                blob: "params".to_string(),
                stored: meta.content_crc,
                computed: crc,
            });
        }
        Ok(Model {
            config: meta.config,
            params,
        })
    }

    pub fn meta(dir: &Path) -> Result<CheckpointMeta> {
        Ok(serde_json::from_slice(&fs::read(dir.join("model.json"))?)?)
    }
}
