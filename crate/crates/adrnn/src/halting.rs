//! Adaptive Computation Time: per-step halting scores from a shared
//! 1-channel conv head, cumulative-score thresholding at 1 - epsilon,
//! and the adaptive hidden state as a score-weighted sum of the states
//! visited. Also the stability-heuristic halting baseline.
//!
//! The score at step t is computed from the state *before* the step
//! (the t=1 score sees the initial state). Once a sample halts, its
//! later scores are recorded as zero and it stops contributing weight;
//! batched and single-sample evaluation therefore agree.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::cells::{BoundCell, BoundConv};
use crate::error::{AdrnnError, Result};
use crate::tape::{Scalar, Tape, TensorRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemainderMode {
    /// Weights are the raw halting scores (the equations verbatim);
    /// their sum may exceed 1.
    Literal,
    /// The final step's weight is replaced by 1 - P_{t_halt - 1}, so
    /// weights sum to exactly 1.
    Remainder,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HaltingConfig {
    pub epsilon: f64,
    pub t_train: usize,
    pub t_inference: usize,
    pub tau: f64,
    pub remainder_mode: RemainderMode,
}

impl Default for HaltingConfig {
    fn default() -> Self {
        HaltingConfig {
            epsilon: 0.01,
            t_train: 15,
            t_inference: 15,
            tau: 0.01,
            remainder_mode: RemainderMode::Literal,
        }
    }
}

impl HaltingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(AdrnnError::Config(format!(
                "epsilon must be in (0,1), got {}",
                self.epsilon
            )));
        }
        if self.t_train < 1 || self.t_inference < self.t_train {
            return Err(AdrnnError::Config(format!(
                "need t_inference >= t_train >= 1, got {} / {}",
                self.t_inference, self.t_train
            )));
        }
        Ok(())
    }
}

/// Per-sample record of one adaptive run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HaltingTrace {
    /// Halting scores; zero after the halting step.
    pub p: Vec<f64>,
    /// Cumulative sums of `p`.
    pub cum: Vec<f64>,
    /// 1-based halting step (== budget when the threshold was not reached).
    pub t_halt: usize,
    /// Contribution weights used in the adaptive state.
    pub weights: Vec<f64>,
    /// Whether the threshold was reached within the budget.
    pub halted: bool,
}

impl HaltingTrace {
    /// Ponder cost contribution: -sum of scores before the halting step.
    pub fn ponder(&self) -> f64 {
        -self.p[..self.t_halt.saturating_sub(1)].iter().sum::<f64>()
    }
}

/// Mean ponder cost over a batch of traces (before scaling by tau).
pub fn ponder_cost(traces: &[HaltingTrace]) -> f64 {
    if traces.is_empty() {
        return 0.0;
    }
    traces.iter().map(|t| t.ponder()).sum::<f64>() / traces.len() as f64
}

/// Numeric per-step weights and masks for one step of a batch.
pub struct StepOutcome {
    /// 1.0 where the sample was still running when this step began.
    pub active_before: Vec<f64>,
    /// 1.0 where the sample stops at this step (threshold or budget).
    pub stops_now: Vec<f64>,
    /// 1.0 where the sample continues after this step.
    pub continues: Vec<f64>,
    /// Numeric contribution weight per sample.
    pub weights: Vec<f64>,
}

/// Batch bookkeeping for the halting semantics; shared between the
/// differentiable training path and the streaming evaluation path.
pub struct HaltAccumulator {
    eps: f64,
    mode: RemainderMode,
    budget: usize,
    t: usize,
    active: Vec<bool>,
    cum: Vec<f64>,
    traces: Vec<HaltingTrace>,
}

impl HaltAccumulator {
    pub fn new(batch: usize, eps: f64, mode: RemainderMode, budget: usize) -> Self {
        HaltAccumulator {
            eps,
            mode,
            budget,
            t: 0,
            active: vec![true; batch],
            cum: vec![0.0; batch],
            traces: vec![
                HaltingTrace {
                    p: Vec::new(),
                    cum: Vec::new(),
                    t_halt: 0,
                    weights: Vec::new(),
                    halted: false,
                };
                batch
            ],
        }
    }

    pub fn step_index(&self) -> usize {
        self.t
    }

    /// Consume the raw halting scores for the next step.
    pub fn step(&mut self, p_raw: &[f64]) -> StepOutcome {
        assert_eq!(p_raw.len(), self.active.len(), "batch size");
        self.t += 1;
        let t = self.t;
        assert!(t <= self.budget, "stepped past budget");
        let threshold = 1.0 - self.eps;
        let n = p_raw.len();
        let mut out = StepOutcome {
            active_before: vec![0.0; n],
            stops_now: vec![0.0; n],
            continues: vec![0.0; n],
            weights: vec![0.0; n],
        };
        for i in 0..n {
            let tr = &mut self.traces[i];
            if !self.active[i] {
                tr.p.push(0.0);
                tr.cum.push(self.cum[i]);
                tr.weights.push(0.0);
                continue;
            }
            out.active_before[i] = 1.0;
            let p = p_raw[i];
            let prev_cum = self.cum[i];
            let new_cum = prev_cum + p;
            let crosses = new_cum >= threshold;
            let exhausts = t == self.budget;
            tr.p.push(p);
            tr.cum.push(new_cum);
            self.cum[i] = new_cum;
            if crosses || exhausts {
                out.stops_now[i] = 1.0;
                tr.t_halt = t;
                tr.halted = crosses;
                let w = match self.mode {
                    RemainderMode::Literal => p,
                    RemainderMode::Remainder => 1.0 - prev_cum,
                };
                tr.weights.push(w);
                out.weights[i] = w;
                self.active[i] = false;
            } else {
                out.continues[i] = 1.0;
                tr.weights.push(p);
                out.weights[i] = p;
            }
        }
        out
    }

    pub fn all_stopped(&self) -> bool {
        self.active.iter().all(|a| !a)
    }

    pub fn finish(self) -> Vec<HaltingTrace> {
        self.traces
    }
}

/// Result of a differentiable adaptive run.
pub struct ActRun {
    /// Score-weighted sum of readout views up to each sample's halt.
    pub h_act: TensorRef,
    /// Mean over batch of -sum_{t < t_halt} p_t; multiply by tau in the loss.
    pub ponder: TensorRef,
    pub traces: Vec<HaltingTrace>,
    /// Steps actually executed (the batch max).
    pub steps_executed: usize,
}

/// Run a cell under ACT on the tape, fully differentiable through both
/// the halting scores and the hidden states.
pub fn run_act<T: Scalar>(
    tape: &mut Tape<T>,
    cell: &BoundCell,
    h0: TensorRef,
    halt_conv: BoundConv,
    cfg: &HaltingConfig,
    budget: usize,
) -> Result<ActRun> {
    cfg.validate()?;
    let batch = tape.shape(h0)[0];
    let mut acc = HaltAccumulator::new(batch, cfg.epsilon, cfg.remainder_mode, budget);
    let mut state = cell.init_state(tape, h0);
    let mut h_act: Option<TensorRef> = None;
    let mut ponder_sum: Option<TensorRef> = None;
    let mut cum: Option<TensorRef> = None;
    let mut steps = 0usize;
    for _t in 1..=budget {
        steps += 1;
        // Score from the state before the step.
        let view = state.readout_view();
        let hc = tape.conv2d(view, halt_conv.w, halt_conv.b)?;
        let pooled = tape.global_max_pool(hc)?;
        let flat = tape.reshape(pooled, &[batch])?;
        let p_full = tape.sigmoid(flat);
        let p_vals: Vec<f64> = tape
            .value(p_full)
            .iter()
            .map(|v| v.to_f64().expect("p"))
            .collect();
        let outcome = acc.step(&p_vals);

        let active = tape.constant(vec_to_arr::<T>(&outcome.active_before));
        let p_masked = tape.mul(p_full, active)?;
        let continues = tape.constant(vec_to_arr::<T>(&outcome.continues));
        let stops = tape.constant(vec_to_arr::<T>(&outcome.stops_now));
        let w_ref = match cfg.remainder_mode {
            RemainderMode::Literal => p_masked,
            RemainderMode::Remainder => {
                let rem = match cum {
                    Some(c) => {
                        let om = tape.one_minus(c);
                        tape.mul(om, stops)?
                    }
                    None => {
                        // First step: remainder is exactly 1.
                        stops
                    }
                };
                let keep = tape.mul(p_masked, continues)?;
                tape.add(keep, rem)?
            }
        };
        cum = Some(match cum {
            Some(c) => tape.add(c, p_masked)?,
            None => p_masked,
        });
        let contrib_p = tape.mul(p_masked, continues)?;
        ponder_sum = Some(match ponder_sum {
            Some(s) => tape.add(s, contrib_p)?,
            None => contrib_p,
        });

        // Advance the cell and accumulate its weighted contribution.
        state = cell.step(tape, &state, h0)?;
        let contrib = tape.scale_per_sample(state.readout_view(), w_ref)?;
        h_act = Some(match h_act {
            Some(h) => tape.add(h, contrib)?,
            None => contrib,
        });

        if acc.all_stopped() {
            break;
        }
    }
    let ponder_sum = ponder_sum.expect("at least one step");
    let mean_p = tape.mean_all(ponder_sum);
    let ponder = tape.scale(mean_p, -T::one());
    Ok(ActRun {
        h_act: h_act.expect("at least one step"),
        ponder,
        traces: acc.finish(),
        steps_executed: steps,
    })
}

fn vec_to_arr<T: Scalar>(v: &[f64]) -> ArrayD<T> {
    ArrayD::from_shape_vec(
        IxDyn(&[v.len()]),
        v.iter().map(|&x| T::from_f64(x).expect("mask")).collect(),
    )
    .expect("mask shape")
}

/// Stability-heuristic halting bookkeeping: halt a sample at the first
/// t >= 2 where meanabs(h_t - h_{t-1}) drops below a tenth of
/// meanabs(h_1 - h_0).
pub struct StabilityAccumulator<T: Scalar> {
    budget: usize,
    t: usize,
    per: usize,
    prev: Vec<T>,
    ref_diff: Vec<f64>,
    pub t_halt: Vec<usize>,
    pub halted: Vec<bool>,
    done: Vec<bool>,
    final_state: Vec<T>,
}

impl<T: Scalar> StabilityAccumulator<T> {
    /// `init` is the initial state's readout view, flattened [B, per].
    pub fn new(init: &ArrayD<T>, budget: usize) -> Self {
        let batch = init.shape()[0];
        let per = init.len() / batch;
        StabilityAccumulator {
            budget,
            t: 0,
            per,
            prev: init.as_slice().expect("contig").to_vec(),
            ref_diff: vec![0.0; batch],
            t_halt: vec![0; batch],
            halted: vec![false; batch],
            done: vec![false; batch],
            final_state: vec![T::zero(); batch * per],
        }
    }

    /// Feed the state after step t; returns true when every sample is done.
    pub fn feed(&mut self, state: &ArrayD<T>) -> bool {
        self.t += 1;
        let t = self.t;
        let batch = self.ref_diff.len();
        let s = state.as_slice().expect("contig");
        for b in 0..batch {
            if self.done[b] {
                continue;
            }
            let seg = &s[b * self.per..(b + 1) * self.per];
            let prev = &self.prev[b * self.per..(b + 1) * self.per];
            let mut diff = 0.0f64;
            for (x, y) in seg.iter().zip(prev.iter()) {
                diff += (*x - *y).abs().to_f64().expect("diff");
            }
            diff /= self.per as f64;
            if t == 1 {
                self.ref_diff[b] = diff;
            }
            // `<=` so a cell that is already a fixed point (zero change
            // from the start) still halts at t = 2.
            let stable = t >= 2 && diff <= 0.1 * self.ref_diff[b];
            if stable || t == self.budget {
                self.done[b] = true;
                self.halted[b] = stable;
                self.t_halt[b] = t;
                self.final_state[b * self.per..(b + 1) * self.per].copy_from_slice(seg);
            }
        }
        self.prev.copy_from_slice(s);
        self.done.iter().all(|&d| d)
    }

    /// Per-sample states captured at their halting steps, [B, per] flat.
    pub fn final_states(&self) -> &[T] {
        &self.final_state
    }
}

/// Run a cell under stability halting on a tape (values only; callers
/// needing memory frugality should use the streaming evaluator).
pub fn run_stability_halt<T: Scalar>(
    tape: &mut Tape<T>,
    cell: &BoundCell,
    h0: TensorRef,
    budget: usize,
) -> Result<(ArrayD<T>, Vec<usize>, Vec<bool>)> {
    if budget < 2 {
        return Err(AdrnnError::Config(format!(
            "stability halting needs budget >= 2, got {budget}"
        )));
    }
    let mut state = cell.init_state(tape, h0);
    let init = flatten_batch(tape.value(state.readout_view()));
    let mut acc = StabilityAccumulator::new(&init, budget);
    for _ in 1..=budget {
        state = cell.step(tape, &state, h0)?;
        if acc.feed(&flatten_batch(tape.value(state.readout_view()))) {
            break;
        }
    }
    let shape = tape.shape(state.readout_view()).to_vec();
    let out = ArrayD::from_shape_vec(IxDyn(&shape), acc.final_states().to_vec()).expect("final");
    Ok((out, acc.t_halt, acc.halted))
}

fn flatten_batch<T: Scalar>(a: &ArrayD<T>) -> ArrayD<T> {
    let batch = a.shape()[0];
    let per = a.len() / batch;
    a.clone()
        .into_shape_with_order(IxDyn(&[batch, per]))
        .expect("flatten")
}
