//! Shared test utilities: central finite-difference gradient oracle and
//! deterministic random tensors.
#![allow(dead_code)]

use adrnn::tape::{Scalar, Tape, TensorRef};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic tensor with entries uniform in (lo, hi).
pub fn rand_arr(seed: u64, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
        .expect("rand_arr")
}

pub fn to_f32(a: &ArrayD<f64>) -> ArrayD<f32> {
    a.mapv(|x| x as f32)
}

/// Evaluate `f` once on fresh leaves and return the scalar loss value.
fn eval_loss<F>(params: &[ArrayD<f64>], f: &F) -> f64
where
    F: Fn(&mut Tape<f64>, &[TensorRef]) -> TensorRef,
{
    let mut tape = Tape::<f64>::new();
    let refs: Vec<TensorRef> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &refs);
    assert!(tape.shape(loss).is_empty(), "loss must be scalar");
    *tape.value(loss).iter().next().expect("scalar")
}

/// Check analytic gradients of a scalar-valued graph against central
/// finite differences over every element of every parameter.
///
/// Relative error per element must stay below `tol`
/// (|g - fd| / max(1, |g|, |fd|)).
pub fn finite_diff_check<F>(params: &[ArrayD<f64>], f: F, eps: f64, tol: f64)
where
    F: Fn(&mut Tape<f64>, &[TensorRef]) -> TensorRef,
{
    // Analytic gradients.
    let mut tape = Tape::<f64>::new();
    let refs: Vec<TensorRef> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &refs);
    tape.backward(loss).expect("backward");
    let grads: Vec<ArrayD<f64>> = refs
        .iter()
        .zip(params.iter())
        .map(|(r, p)| {
            tape.grad(*r)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(p.raw_dim()))
        })
        .collect();

    for (pi, p) in params.iter().enumerate() {
        let n = p.len();
        for i in 0..n {
            let mut plus = params.to_vec();
            let mut minus = params.to_vec();
            plus[pi].as_slice_mut().expect("contig")[i] += eps;
            minus[pi].as_slice_mut().expect("contig")[i] -= eps;
            let fd = (eval_loss(&plus, &f) - eval_loss(&minus, &f)) / (2.0 * eps);
            let g = grads[pi].as_slice().expect("contig")[i];
            let denom = 1.0f64.max(g.abs()).max(fd.abs());
            let rel = (g - fd).abs() / denom;
            assert!(
                rel < tol,
                "param {pi} elem {i}: analytic {g:.9e} vs finite-diff {fd:.9e} (rel {rel:.3e})"
            );
        }
    }
}

/// f32 variant used by a handful of checks that exercise the training
/// dtype end to end; looser tolerance.
pub fn finite_diff_check_f32<F>(params: &[ArrayD<f32>], f: F, eps: f32, tol: f32)
where
    F: Fn(&mut Tape<f32>, &[TensorRef]) -> TensorRef,
{
    let eval = |ps: &[ArrayD<f32>]| -> f32 {
        let mut tape = Tape::<f32>::new();
        let refs: Vec<TensorRef> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&mut tape, &refs);
        *tape.value(loss).iter().next().expect("scalar")
    };
    let mut tape = Tape::<f32>::new();
    let refs: Vec<TensorRef> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &refs);
    tape.backward(loss).expect("backward");
    let grads: Vec<ArrayD<f32>> = refs
        .iter()
        .zip(params.iter())
        .map(|(r, p)| {
            tape.grad(*r)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(p.raw_dim()))
        })
        .collect();
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.len() {
            let mut plus = params.to_vec();
            let mut minus = params.to_vec();
            plus[pi].as_slice_mut().expect("contig")[i] += eps;
            minus[pi].as_slice_mut().expect("contig")[i] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let g = grads[pi].as_slice().expect("contig")[i];
            let denom = 1.0f32.max(g.abs()).max(fd.abs());
            let rel = (g - fd).abs() / denom;
            assert!(
                rel < tol,
                "param {pi} elem {i}: analytic {g:.6e} vs finite-diff {fd:.6e} (rel {rel:.3e})"
            );
        }
    }
}

pub fn scalar_of<T: Scalar>(tape: &Tape<T>, t: TensorRef) -> T {
    *tape.value(t).iter().next().expect("scalar")
}
