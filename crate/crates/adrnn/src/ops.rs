//! Neural-network building blocks on top of the tape: 2-D convolution,
//! layer normalization, pooling, the fully-connected readout and the
//! stabilized binary cross-entropy loss.
//!
//! Convolution is same-padded, stride-1 cross-correlation with odd
//! kernels, realized as im2col + the deterministic matmul kernel. The
//! im2col row order is (channel, ky, kx), so per-output-element
//! accumulation order equals the naive 6-loop reference convolution.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{AdrnnError, Result};
use crate::tape::{matmul_into, LnScope, Op, Scalar, Tape, TensorRef};

impl<T: Scalar> Tape<T> {
    /// x: [B,C,H,W], w: [O,C,k,k] (k odd), b: [O] -> [B,O,H,W].
    pub fn conv2d(&mut self, x: TensorRef, w: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(AdrnnError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (batch, c, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, ci, k) = (ws[0], ws[1], ws[2]);
        if k % 2 == 0 {
            return Err(AdrnnError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel size {k} must be odd for exact same padding"),
            });
        }
        if ci != c || bs != [o] {
            return Err(AdrnnError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let pad = (k - 1) / 2;
        let wmat = to_matrix(self.value(w), o, c * k * k);
        let wsl = wmat.as_slice().expect("contig");
        let bias = self.value(b).as_slice().expect("contig").to_vec();
        let hw = h * wdt;
        let ckk = c * k * k;
        let mut out = ArrayD::<T>::zeros(IxDyn(&[batch, o, h, wdt]));
        {
            let xsl = self.value(x).as_slice().expect("contig").to_vec();
            let osl = out.as_slice_mut().expect("contig");
            let mut col = vec![T::zero(); ckk * hw];
            let mut res = vec![T::zero(); o * hw];
            for bi in 0..batch {
                // A 1x1 kernel's column matrix is the input itself.
                let colref: &[T] = if k == 1 {
                    &xsl[bi * c * hw..(bi + 1) * c * hw]
                } else {
                    im2col(&xsl[bi * c * hw..(bi + 1) * c * hw], c, h, wdt, k, pad, &mut col);
                    &col
                };
                for r in res.iter_mut() {
                    *r = T::zero();
                }
                matmul_into(wsl, colref, &mut res, o, ckk, hw);
                let dst = &mut osl[bi * o * hw..(bi + 1) * o * hw];
                for oc in 0..o {
                    let bv = bias[oc];
                    for (d, &r) in dst[oc * hw..(oc + 1) * hw]
                        .iter_mut()
                        .zip(&res[oc * hw..(oc + 1) * hw])
                    {
                        *d = r + bv;
                    }
                }
            }
        }
        let rg = self.node_rg(x.0) || self.node_rg(w.0) || self.node_rg(b.0);
        Ok(self.push_node(out, rg, Op::Conv2d { x: x.0, w: w.0, b: b.0 }))
    }

    pub(crate) fn conv2d_backward(
        &mut self,
        _id: usize,
        x: usize,
        w: usize,
        b: usize,
        dy: &ArrayD<T>,
    ) -> Result<()> {
        let xs = self.node_value(x).shape().to_vec();
        let ws = self.node_value(w).shape().to_vec();
        let (batch, c, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let pad = (k - 1) / 2;
        let hw = h * wdt;
        let ckk = c * k * k;
        let dys = dy.as_slice().expect("contig");

        if self.node_rg(b) {
            let mut db = vec![T::zero(); o];
            for bi in 0..batch {
                for oc in 0..o {
                    let seg = &dys[(bi * o + oc) * hw..(bi * o + oc + 1) * hw];
                    let mut acc = T::zero();
                    for &d in seg {
                        acc = acc + d;
                    }
                    db[oc] = db[oc] + acc;
                }
            }
            self.add_grad(b, ArrayD::from_shape_vec(IxDyn(&[o]), db).expect("db"));
        }

        let need_w = self.node_rg(w);
        let need_x = self.node_rg(x);
        if !need_w && !need_x {
            return Ok(());
        }
        let xsl = self.node_value(x).as_slice().expect("contig").to_vec();
        let wmat_t = {
            let wm = to_matrix(self.node_value(w), o, ckk);
            let mut t = Array2::<T>::zeros((ckk, o));
            for i in 0..o {
                for j in 0..ckk {
                    t[(j, i)] = wm[(i, j)];
                }
            }
            t
        };
        let mut dw = Array2::<T>::zeros((o, ckk));
        let mut dx = if need_x {
            Some(ArrayD::<T>::zeros(IxDyn(&xs)))
        } else {
            None
        };
        let wt_s = wmat_t.as_slice().expect("contig").to_vec();
        let mut col = vec![T::zero(); ckk * hw];
        let mut col_t = vec![T::zero(); hw * ckk];
        let mut part = vec![T::zero(); o * ckk];
        let mut colgrad = vec![T::zero(); ckk * hw];
        for bi in 0..batch {
            let dy_b = &dys[bi * o * hw..(bi + 1) * o * hw];
            if need_w {
                let colref: &[T] = if k == 1 {
                    &xsl[bi * c * hw..(bi + 1) * c * hw]
                } else {
                    im2col(&xsl[bi * c * hw..(bi + 1) * c * hw], c, h, wdt, k, pad, &mut col);
                    &col
                };
                for r in 0..ckk {
                    for q in 0..hw {
                        col_t[q * ckk + r] = colref[r * hw + q];
                    }
                }
                for p in part.iter_mut() {
                    *p = T::zero();
                }
                matmul_into(dy_b, &col_t, &mut part, o, hw, ckk);
                let dwsl = dw.as_slice_mut().expect("contig");
                for (d, &p) in dwsl.iter_mut().zip(part.iter()) {
                    *d = *d + p;
                }
            }
            if let Some(dx) = dx.as_mut() {
                for g in colgrad.iter_mut() {
                    *g = T::zero();
                }
                matmul_into(&wt_s, dy_b, &mut colgrad, ckk, o, hw);
                let dst = &mut dx.as_slice_mut().expect("contig")[bi * c * hw..(bi + 1) * c * hw];
                col2im(&colgrad, c, h, wdt, k, pad, dst);
            }
        }
        if need_w {
            self.add_grad(w, dw.into_shape_with_order(IxDyn(&ws)).expect("dw").into_dyn());
        }
        if let Some(dx) = dx {
            self.add_grad(x, dx);
        }
        Ok(())
    }

    /// Layer normalization of [B,C,H,W]; statistics per the configured
    /// scope, then per-channel gain/shift.
    pub fn layer_norm(
        &mut self,
        x: TensorRef,
        gain: TensorRef,
        shift: TensorRef,
        scope: LnScope,
        eps: T,
    ) -> Result<TensorRef> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(AdrnnError::ShapeMismatch {
                op: "layer_norm",
                lhs: xs,
                rhs: vec![],
            });
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return Err(AdrnnError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(gain).to_vec(),
                rhs: vec![c],
            });
        }
        let hw = h * w;
        let xv = self.value(x).as_slice().expect("contig").to_vec();
        let gv = self.value(gain).as_slice().expect("contig").to_vec();
        let sv = self.value(shift).as_slice().expect("contig").to_vec();
        let mut out = vec![T::zero(); xv.len()];
        let (mut means, mut inv_stds);
        match scope {
            LnScope::Channels => {
                means = vec![T::zero(); batch * hw];
                inv_stds = vec![T::zero(); batch * hw];
                let nc = T::from_usize(c).expect("c");
                for bi in 0..batch {
                    for loc in 0..hw {
                        let mut mean = T::zero();
                        for ch in 0..c {
                            mean = mean + xv[(bi * c + ch) * hw + loc];
                        }
                        mean = mean / nc;
                        let mut var = T::zero();
                        for ch in 0..c {
                            let d = xv[(bi * c + ch) * hw + loc] - mean;
                            var = var + d * d;
                        }
                        var = var / nc;
                        let inv = T::one() / (var + eps).sqrt();
                        means[bi * hw + loc] = mean;
                        inv_stds[bi * hw + loc] = inv;
                        for ch in 0..c {
                            let idx = (bi * c + ch) * hw + loc;
                            let xhat = (xv[idx] - mean) * inv;
                            out[idx] = gv[ch] * xhat + sv[ch];
                        }
                    }
                }
            }
            LnScope::Chw => {
                means = vec![T::zero(); batch];
                inv_stds = vec![T::zero(); batch];
                let n = T::from_usize(c * hw).expect("chw");
                for bi in 0..batch {
                    let seg = &xv[bi * c * hw..(bi + 1) * c * hw];
                    let mut mean = T::zero();
                    for &v in seg {
                        mean = mean + v;
                    }
                    mean = mean / n;
                    let mut var = T::zero();
                    for &v in seg {
                        let d = v - mean;
                        var = var + d * d;
                    }
                    var = var / n;
                    let inv = T::one() / (var + eps).sqrt();
                    means[bi] = mean;
                    inv_stds[bi] = inv;
                    for ch in 0..c {
                        for loc in 0..hw {
                            let idx = (bi * c + ch) * hw + loc;
                            out[idx] = gv[ch] * ((xv[idx] - mean) * inv) + sv[ch];
                        }
                    }
                }
            }
        }
        let rg = self.node_rg(x.0) || self.node_rg(gain.0) || self.node_rg(shift.0);
        Ok(self.push_node(
            ArrayD::from_shape_vec(IxDyn(&xs), out).expect("ln"),
            rg,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                shift: shift.0,
                scope,
                mean: means,
                inv_std: inv_stds,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn layer_norm_backward(
        &mut self,
        x: usize,
        gain: usize,
        shift: usize,
        scope: LnScope,
        means: &[T],
        inv_stds: &[T],
        dy: &ArrayD<T>,
    ) -> Result<()> {
        let xs = self.node_value(x).shape().to_vec();
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let xv = self.node_value(x).as_slice().expect("contig").to_vec();
        let gv = self.node_value(gain).as_slice().expect("contig").to_vec();
        let dys = dy.as_slice().expect("contig");
        let mut dx = vec![T::zero(); xv.len()];
        let mut dgain = vec![T::zero(); c];
        let mut dshift = vec![T::zero(); c];
        match scope {
            LnScope::Channels => {
                let nc = T::from_usize(c).expect("c");
                for bi in 0..batch {
                    for loc in 0..hw {
                        let mean = means[bi * hw + loc];
                        let inv = inv_stds[bi * hw + loc];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for ch in 0..c {
                            let idx = (bi * c + ch) * hw + loc;
                            let xhat = (xv[idx] - mean) * inv;
                            let dxh = dys[idx] * gv[ch];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xhat;
                            dgain[ch] = dgain[ch] + dys[idx] * xhat;
                            dshift[ch] = dshift[ch] + dys[idx];
                        }
                        for ch in 0..c {
                            let idx = (bi * c + ch) * hw + loc;
                            let xhat = (xv[idx] - mean) * inv;
                            let dxh = dys[idx] * gv[ch];
                            dx[idx] = inv * (dxh - s1 / nc - xhat * s2 / nc);
                        }
                    }
                }
            }
            LnScope::Chw => {
                let n = T::from_usize(c * hw).expect("chw");
                for bi in 0..batch {
                    let mean = means[bi];
                    let inv = inv_stds[bi];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for ch in 0..c {
                        for loc in 0..hw {
                            let idx = (bi * c + ch) * hw + loc;
                            let xhat = (xv[idx] - mean) * inv;
                            let dxh = dys[idx] * gv[ch];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xhat;
                            dgain[ch] = dgain[ch] + dys[idx] * xhat;
                            dshift[ch] = dshift[ch] + dys[idx];
                        }
                    }
                    for ch in 0..c {
                        for loc in 0..hw {
                            let idx = (bi * c + ch) * hw + loc;
                            let xhat = (xv[idx] - mean) * inv;
                            let dxh = dys[idx] * gv[ch];
                            dx[idx] = inv * (dxh - s1 / n - xhat * s2 / n);
                        }
                    }
                }
            }
        }
        self.add_grad(x, ArrayD::from_shape_vec(IxDyn(&xs), dx).expect("dx"));
        self.add_grad(gain, ArrayD::from_shape_vec(IxDyn(&[c]), dgain).expect("dgain"));
        self.add_grad(shift, ArrayD::from_shape_vec(IxDyn(&[c]), dshift).expect("dshift"));
        Ok(())
    }

    /// [B,C,H,W] -> [B,C], spatial mean.
    pub fn global_avg_pool(&mut self, x: TensorRef) -> Result<TensorRef> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(AdrnnError::ShapeMismatch {
                op: "global_avg_pool",
                lhs: xs,
                rhs: vec![],
            });
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).expect("hw");
        let xv = self.value(x).as_slice().expect("contig");
        let mut out = vec![T::zero(); batch * c];
        for (bc, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for &v in &xv[bc * hw..(bc + 1) * hw] {
                acc = acc + v;
            }
            *o = acc * inv;
        }
        let rg = self.node_rg(x.0);
        Ok(self.push_node(
            ArrayD::from_shape_vec(IxDyn(&[batch, c]), out).expect("gap"),
            rg,
            Op::GlobalAvgPool { x: x.0 },
        ))
    }

    /// [B,C,H,W] -> [B,C], spatial max, gradient to the first maximal
    /// element per (sample, channel).
    pub fn global_max_pool(&mut self, x: TensorRef) -> Result<TensorRef> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(AdrnnError::ShapeMismatch {
                op: "global_max_pool",
                lhs: xs,
                rhs: vec![],
            });
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let xv = self.value(x).as_slice().expect("contig");
        let mut out = vec![T::zero(); batch * c];
        let mut argmax = vec![0usize; batch * c];
        for bc in 0..batch * c {
            let seg = &xv[bc * hw..(bc + 1) * hw];
            let mut best = seg[0];
            let mut best_i = 0usize;
            for (i, &v) in seg.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            out[bc] = best;
            argmax[bc] = bc * hw + best_i;
        }
        let rg = self.node_rg(x.0);
        Ok(self.push_node(
            ArrayD::from_shape_vec(IxDyn(&[batch, c]), out).expect("gmp"),
            rg,
            Op::GlobalMaxPool { x: x.0, argmax },
        ))
    }

    /// Fully-connected layer: x [B,in] . w [in,out] + b [out].
    pub fn fc(&mut self, x: TensorRef, w: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Mean softplus-stabilized binary cross-entropy over all elements.
    /// Targets must be exactly 0 or 1.
    pub fn bce_logits(&mut self, logits: TensorRef, targets: TensorRef) -> Result<TensorRef> {
        let zs = self.shape(logits).to_vec();
        let ts = self.shape(targets).to_vec();
        if zs != ts {
            return Err(AdrnnError::ShapeMismatch {
                op: "bce_logits",
                lhs: zs,
                rhs: ts,
            });
        }
        let zero = T::zero();
        let one = T::one();
        for &t in self.value(targets).iter() {
            if t != zero && t != one {
                return Err(AdrnnError::InvalidArgument {
                    op: "bce_logits",
                    msg: format!("target {t} not in {{0,1}}"),
                });
            }
        }
        let n = T::from_usize(self.value(logits).len()).expect("len");
        let mut acc = T::zero();
        for (&z, &t) in self.value(logits).iter().zip(self.value(targets).iter()) {
            let pos = if z > zero { z } else { zero };
            acc = acc + pos - z * t + (one + (-z.abs()).exp()).ln();
        }
        let rg = self.node_rg(logits.0);
        Ok(self.push_node(
            ArrayD::from_elem(IxDyn(&[]), acc / n),
            rg,
            Op::BceLogits {
                logits: logits.0,
                targets: targets.0,
            },
        ))
    }
}

fn to_matrix<T: Scalar>(a: &ArrayD<T>, rows: usize, cols: usize) -> Array2<T> {
    Array2::from_shape_vec((rows, cols), a.as_slice().expect("contig").to_vec()).expect("matrix")
}

/// col[(c*k+ky)*k+kx, y*w+x] = x[c, y+ky-pad, x+kx-pad], zero outside.
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, col: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        for d in drow.iter_mut() {
                            *d = T::zero();
                        }
                        continue;
                    }
                    let src_row = &x[ch * hw + sy as usize * w..ch * hw + (sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    // Valid destination range: xi with 0 <= xi+shift < w.
                    let lo = (-shift).max(0) as usize;
                    let hi = ((w as isize - shift).min(w as isize)).max(0) as usize;
                    for d in drow[..lo].iter_mut() {
                        *d = T::zero();
                    }
                    drow[lo..hi].copy_from_slice(
                        &src_row[(lo as isize + shift) as usize..(hi as isize + shift) as usize],
                    );
                    for d in drow[hi..].iter_mut() {
                        *d = T::zero();
                    }
                }
            }
        }
    }
}

/// Scatter-add the column gradient back onto the input layout.
pub fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, dx: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let shift = kx as isize - pad as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = ((w as isize - shift).min(w as isize)).max(0) as usize;
                    if lo >= hi {
                        continue;
                    }
                    let dst_base = ch * hw + sy as usize * w;
                    let drow = &mut dx
                        [dst_base + (lo as isize + shift) as usize..dst_base + (hi as isize + shift) as usize];
                    let srow = &src[y * w + lo..y * w + hi];
                    for (d, &s) in drow.iter_mut().zip(srow.iter()) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}
