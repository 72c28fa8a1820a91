use adrnn::tape::matmul2;
use ndarray::Array2;
use std::time::Instant;

fn old_matmul2(a: &Array2<f32>, b: &Array2<f32>) -> Array2<f32> {
    let (m, k) = a.dim();
    let (_, n) = b.dim();
    let mut out = Array2::<f32>::zeros((m, n));
    let a_s = a.as_slice().unwrap();
    let b_s = b.as_slice().unwrap();
    let out_s = out.as_slice_mut().unwrap();
    const NB: usize = 512;
    const MB: usize = 8;
    let mut j0 = 0;
    while j0 < n {
        let jw = NB.min(n - j0);
        let mut i0 = 0;
        while i0 < m {
            let iw = MB.min(m - i0);
            for kk in 0..k {
                let brow = &b_s[kk * n + j0..kk * n + j0 + jw];
                for i in i0..i0 + iw {
                    let aik = a_s[i * k + kk];
                    let orow = &mut out_s[i * n + j0..i * n + j0 + jw];
                    for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                        *o = *o + aik * bv;
                    }
                }
            }
            i0 += iw;
        }
        j0 += jw;
    }
    out
}

fn main() {
    // conv shapes from the maze model: fwd 16x144x400, dw 16x400x144, dx 144x16x400
    for (m, k, n) in [(16usize, 144usize, 400usize), (16, 400, 144), (144, 16, 400), (22, 198, 400)] {
        let a = Array2::from_shape_fn((m, k), |(i, j)| ((i * 7 + j) % 13) as f32 * 0.1 - 0.6);
        let b = Array2::from_shape_fn((k, n), |(i, j)| ((i * 5 + j) % 11) as f32 * 0.1 - 0.5);
        let iters = 3000;
        let t = Instant::now();
        let mut s = 0.0f32;
        for _ in 0..iters { s += old_matmul2(&a, &b)[[0, 0]]; }
        let t_old = t.elapsed().as_secs_f64();
        let t = Instant::now();
        for _ in 0..iters { s += matmul2(&a, &b)[[0, 0]]; }
        let t_new = t.elapsed().as_secs_f64();
        let eq = old_matmul2(&a, &b) == matmul2(&a, &b);
        println!("{m}x{k}x{n}: old {:.2} us, new {:.2} us ({:.2}x), bitwise_eq {eq}  [{s}]",
            1e6 * t_old / iters as f64, 1e6 * t_new / iters as f64, t_old / t_new);
    }
}
