//! Recurrent cell implementations sharing one step interface: a
//! weight-tied residual block, a layer-normed ConvGRU, and LocRNN with
//! its two populations (L projects out, S is interneurons and never
//! leaves the cell).
//!
//! Cells are bound to a tape per forward pass: parameters enter as
//! leaves, the step methods only compose tape ops. The constant input
//! `h0` is fed at every step; only the residual block consumes it once
//! (its state is initialized to h0).

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tape::{LnScope, Scalar, Tape, TensorRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    LocRnn,
    ConvGru,
    TiedResnet,
}

/// Architecture of one recurrent cell, independent of any tape.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CellArch {
    pub kind: CellKind,
    /// Hidden channels.
    pub d: usize,
    /// Lateral/recurrent kernel size (odd).
    pub k: usize,
    pub ln_scope: LnScope,
    pub ln_eps: f64,
}

/// Per-timestep hidden state; `Dual` carries (L, S) for LocRNN.
#[derive(Debug, Clone, Copy)]
pub enum CellState {
    Single { h: TensorRef },
    Dual { l: TensorRef, s: TensorRef },
}

impl CellState {
    /// The view downstream consumers (readout, halting) may see:
    /// h for Single, L for Dual. S never escapes the cell.
    pub fn readout_view(&self) -> TensorRef {
        match self {
            CellState::Single { h } => *h,
            CellState::Dual { l, .. } => *l,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub w: TensorRef,
    pub b: TensorRef,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLn {
    pub gain: TensorRef,
    pub shift: TensorRef,
}

pub struct LocRnnCell {
    pub u_l: BoundConv,
    pub u_ll: BoundConv,
    pub u_s: BoundConv,
    pub u_ss: BoundConv,
    pub w_l: BoundConv,
    pub w_ll: BoundConv,
    pub w_sl: BoundConv,
    pub w_s: BoundConv,
    pub w_ls: BoundConv,
    pub w_ss: BoundConv,
    pub ln_gl_h: BoundLn,
    pub ln_gl_l: BoundLn,
    pub ln_gs_h: BoundLn,
    pub ln_gs_s: BoundLn,
    pub ln_state_l: BoundLn,
    pub ln_state_s: BoundLn,
    pub scope: LnScope,
    pub eps: f64,
}

pub struct ConvGruCell {
    pub u_z: BoundConv,
    pub u_r: BoundConv,
    pub u_c: BoundConv,
    pub w_z: BoundConv,
    pub w_r: BoundConv,
    pub w_c: BoundConv,
    pub ln_z_h: BoundLn,
    pub ln_z_s: BoundLn,
    pub ln_r_h: BoundLn,
    pub ln_r_s: BoundLn,
    pub ln_c_h: BoundLn,
    pub ln_c_s: BoundLn,
    pub scope: LnScope,
    pub eps: f64,
}

pub struct TiedResCell {
    pub conv1: BoundConv,
    pub conv2: BoundConv,
}

pub enum BoundCell {
    LocRnn(LocRnnCell),
    ConvGru(ConvGruCell),
    TiedRes(TiedResCell),
}

impl BoundCell {
    /// Zero state for the gated cells; the residual block starts from h0.
    pub fn init_state<T: Scalar>(&self, tape: &mut Tape<T>, h0: TensorRef) -> CellState {
        let shape = tape.shape(h0).to_vec();
        match self {
            BoundCell::LocRnn(_) => {
                let l = tape.constant(ArrayD::<T>::zeros(IxDyn(&shape)));
                let s = tape.constant(ArrayD::<T>::zeros(IxDyn(&shape)));
                CellState::Dual { l, s }
            }
            BoundCell::ConvGru(_) => {
                let h = tape.constant(ArrayD::<T>::zeros(IxDyn(&shape)));
                CellState::Single { h }
            }
            BoundCell::TiedRes(_) => CellState::Single { h: h0 },
        }
    }

    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        state: &CellState,
        h0: TensorRef,
    ) -> Result<CellState> {
        match (self, state) {
            (BoundCell::LocRnn(c), CellState::Dual { l, s }) => c.step(tape, *l, *s, h0),
            (BoundCell::ConvGru(c), CellState::Single { h }) => c.step(tape, *h, h0),
            (BoundCell::TiedRes(c), CellState::Single { h }) => c.step(tape, *h),
            _ => unreachable!("state variant does not match cell"),
        }
    }
}

impl LocRnnCell {
    fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        l: TensorRef,
        s: TensorRef,
        h0: TensorRef,
    ) -> Result<CellState> {
        let eps = T::from_f64(self.eps).expect("eps");
        let ln = |tape: &mut Tape<T>, x: TensorRef, p: &BoundLn| -> Result<TensorRef> {
            tape.layer_norm(x, p.gain, p.shift, self.scope, eps)
        };
        // Gates.
        let gl = {
            let a = tape.conv2d(h0, self.u_l.w, self.u_l.b)?;
            let a = ln(tape, a, &self.ln_gl_h)?;
            let b = tape.conv2d(l, self.u_ll.w, self.u_ll.b)?;
            let b = ln(tape, b, &self.ln_gl_l)?;
            let sum = tape.add(a, b)?;
            tape.sigmoid(sum)
        };
        let gs = {
            let a = tape.conv2d(h0, self.u_s.w, self.u_s.b)?;
            let a = ln(tape, a, &self.ln_gs_h)?;
            let b = tape.conv2d(s, self.u_ss.w, self.u_ss.b)?;
            let b = ln(tape, b, &self.ln_gs_s)?;
            let sum = tape.add(a, b)?;
            tape.sigmoid(sum)
        };
        // Lateral candidates.
        let l_tilde = {
            let a = tape.conv2d(h0, self.w_l.w, self.w_l.b)?;
            let b = tape.conv2d(l, self.w_ll.w, self.w_ll.b)?;
            let c = tape.conv2d(s, self.w_sl.w, self.w_sl.b)?;
            let ab = tape.add(a, b)?;
            let abc = tape.add(ab, c)?;
            tape.relu(abc)
        };
        let s_tilde = {
            let a = tape.conv2d(h0, self.w_s.w, self.w_s.b)?;
            let b = tape.conv2d(l, self.w_ls.w, self.w_ls.b)?;
            let c = tape.conv2d(s, self.w_ss.w, self.w_ss.b)?;
            let ab = tape.add(a, b)?;
            let abc = tape.add(ab, c)?;
            tape.relu(abc)
        };
        // Gated mixing, LN inside the output nonlinearity.
        let l_next = {
            let a = tape.mul(gl, l_tilde)?;
            let og = tape.one_minus(gl);
            let b = tape.mul(og, l)?;
            let mix = tape.add(a, b)?;
            let normed = ln(tape, mix, &self.ln_state_l)?;
            tape.relu(normed)
        };
        let s_next = {
            let a = tape.mul(gs, s_tilde)?;
            let og = tape.one_minus(gs);
            let b = tape.mul(og, s)?;
            let mix = tape.add(a, b)?;
            let normed = ln(tape, mix, &self.ln_state_s)?;
            tape.relu(normed)
        };
        Ok(CellState::Dual { l: l_next, s: s_next })
    }
}

impl ConvGruCell {
    fn step<T: Scalar>(&self, tape: &mut Tape<T>, h: TensorRef, h0: TensorRef) -> Result<CellState> {
        let eps = T::from_f64(self.eps).expect("eps");
        let ln = |tape: &mut Tape<T>, x: TensorRef, p: &BoundLn| -> Result<TensorRef> {
            tape.layer_norm(x, p.gain, p.shift, self.scope, eps)
        };
        let z = {
            let a = tape.conv2d(h0, self.u_z.w, self.u_z.b)?;
            let a = ln(tape, a, &self.ln_z_h)?;
            let b = tape.conv2d(h, self.w_z.w, self.w_z.b)?;
            let b = ln(tape, b, &self.ln_z_s)?;
            let sum = tape.add(a, b)?;
            tape.sigmoid(sum)
        };
        let r = {
            let a = tape.conv2d(h0, self.u_r.w, self.u_r.b)?;
            let a = ln(tape, a, &self.ln_r_h)?;
            let b = tape.conv2d(h, self.w_r.w, self.w_r.b)?;
            let b = ln(tape, b, &self.ln_r_s)?;
            let sum = tape.add(a, b)?;
            tape.sigmoid(sum)
        };
        let cand = {
            let a = tape.conv2d(h0, self.u_c.w, self.u_c.b)?;
            let a = ln(tape, a, &self.ln_c_h)?;
            let rh = tape.mul(r, h)?;
            let b = tape.conv2d(rh, self.w_c.w, self.w_c.b)?;
            let b = ln(tape, b, &self.ln_c_s)?;
            let sum = tape.add(a, b)?;
            tape.tanh(sum)
        };
        // h' = (1 - z) . h + z . cand
        let oz = tape.one_minus(z);
        let keep = tape.mul(oz, h)?;
        let upd = tape.mul(z, cand)?;
        let h_next = tape.add(keep, upd)?;
        Ok(CellState::Single { h: h_next })
    }
}

impl TiedResCell {
    fn step<T: Scalar>(&self, tape: &mut Tape<T>, h: TensorRef) -> Result<CellState> {
        let a = tape.conv2d(h, self.conv1.w, self.conv1.b)?;
        let a = tape.relu(a);
        let f = tape.conv2d(a, self.conv2.w, self.conv2.b)?;
        let h_next = tape.add(h, f)?;
        Ok(CellState::Single { h: h_next })
    }
}

// ---- parameter creation / binding ----

/// Fan-in-scaled uniform init for a conv weight [o, c, k, k].
pub fn conv_init<T: Scalar>(rng: &mut ChaCha8Rng, o: usize, c: usize, k: usize) -> ArrayD<T> {
    let fan_in = (c * k * k) as f64;
    let bound = 1.0 / fan_in.sqrt();
    let data: Vec<T> = (0..o * c * k * k)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)).expect("init"))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&[o, c, k, k]), data).expect("conv init")
}

impl CellArch {
    /// (name, shape) of every learnable parameter, in binding order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d;
        let k = self.k;
        let conv = |n: &str, kk: usize| (format!("{n}.w"), vec![d, d, kk, kk]);
        let bias = |n: &str| (format!("{n}.b"), vec![d]);
        let ln = |n: &str| {
            vec![
                (format!("{n}.gain"), vec![d]),
                (format!("{n}.shift"), vec![d]),
            ]
        };
        let mut out = Vec::new();
        match self.kind {
            CellKind::LocRnn => {
                for n in ["u_l", "u_ll", "u_s", "u_ss"] {
                    out.push(conv(n, 1));
                }
                for n in ["w_l", "w_ll", "w_sl", "w_s", "w_ls", "w_ss"] {
                    out.push(conv(n, k));
                    out.push(bias(n));
                }
                for n in ["ln_gl_h", "ln_gl_l", "ln_gs_h", "ln_gs_s", "ln_state_l", "ln_state_s"] {
                    out.extend(ln(n));
                }
            }
            CellKind::ConvGru => {
                for n in ["u_z", "u_r", "u_c"] {
                    out.push(conv(n, 1));
                }
                for n in ["w_z", "w_r", "w_c"] {
                    out.push(conv(n, k));
                    out.push(bias(n));
                }
                for n in ["ln_z_h", "ln_z_s", "ln_r_h", "ln_r_s", "ln_c_h", "ln_c_s"] {
                    out.extend(ln(n));
                }
            }
            CellKind::TiedResnet => {
                for n in ["conv1", "conv2"] {
                    out.push(conv(n, k));
                    out.push(bias(n));
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn init_params<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> BTreeMap<String, ArrayD<T>> {
        let mut out = BTreeMap::new();
        for (name, shape) in self.param_shapes() {
            let arr = if name.ends_with(".w") {
                conv_init::<T>(rng, shape[0], shape[1], shape[2])
            } else if name.ends_with(".gain") {
                ArrayD::from_elem(IxDyn(&shape), T::one())
            } else {
                ArrayD::zeros(IxDyn(&shape))
            };
            out.insert(name, arr);
        }
        out
    }

    /// Bind cell parameters already present on a tape (by name lookup).
    pub fn bind<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        refs: &BTreeMap<String, TensorRef>,
    ) -> BoundCell {
        let d = self.d;
        let get = |n: &str| *refs.get(n).unwrap_or_else(|| panic!("missing param {n}"));
        // Gate convs carry no learnable bias; LN shift plays that role.
        let mut zb = || tape.constant(ArrayD::<T>::zeros(IxDyn(&[d])));
        let gate = |zb: TensorRef, n: &str| BoundConv { w: get(&format!("{n}.w")), b: zb };
        let conv = |n: &str| BoundConv {
            w: get(&format!("{n}.w")),
            b: get(&format!("{n}.b")),
        };
        let ln = |n: &str| BoundLn {
            gain: get(&format!("{n}.gain")),
            shift: get(&format!("{n}.shift")),
        };
        match self.kind {
            CellKind::LocRnn => {
                let z = zb();
                BoundCell::LocRnn(LocRnnCell {
                    u_l: gate(z, "u_l"),
                    u_ll: gate(z, "u_ll"),
                    u_s: gate(z, "u_s"),
                    u_ss: gate(z, "u_ss"),
                    w_l: conv("w_l"),
                    w_ll: conv("w_ll"),
                    w_sl: conv("w_sl"),
                    w_s: conv("w_s"),
                    w_ls: conv("w_ls"),
                    w_ss: conv("w_ss"),
                    ln_gl_h: ln("ln_gl_h"),
                    ln_gl_l: ln("ln_gl_l"),
                    ln_gs_h: ln("ln_gs_h"),
                    ln_gs_s: ln("ln_gs_s"),
                    ln_state_l: ln("ln_state_l"),
                    ln_state_s: ln("ln_state_s"),
                    scope: self.ln_scope,
                    eps: self.ln_eps,
                })
            }
            CellKind::ConvGru => {
                let z = zb();
                BoundCell::ConvGru(ConvGruCell {
                    u_z: gate(z, "u_z"),
                    u_r: gate(z, "u_r"),
                    u_c: gate(z, "u_c"),
                    w_z: conv("w_z"),
                    w_r: conv("w_r"),
                    w_c: conv("w_c"),
                    ln_z_h: ln("ln_z_h"),
                    ln_z_s: ln("ln_z_s"),
                    ln_r_h: ln("ln_r_h"),
                    ln_r_s: ln("ln_r_s"),
                    ln_c_h: ln("ln_c_h"),
                    ln_c_s: ln("ln_c_s"),
                    scope: self.ln_scope,
                    eps: self.ln_eps,
                })
            }
            CellKind::TiedResnet => BoundCell::TiedRes(TiedResCell {
                conv1: conv("conv1"),
                conv2: conv("conv2"),
            }),
        }
    }
}
