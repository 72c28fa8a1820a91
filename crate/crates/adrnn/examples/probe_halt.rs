use adrnn::data::maze::MazeSpec;
use adrnn::data::shard::generate_maze_shard;
use adrnn::model::{eval_batch, HaltMode, Model};
use ndarray::{ArrayD, Axis, IxDyn};
use std::path::Path;

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "/tmp/calib_K_ckpt".into());
    let model = Model::load(Path::new(&dir)).unwrap();
    for grid in [5usize, 7] {
        let shard = generate_maze_shard(&MazeSpec { grid_n: grid, count: 200, seed: 211 }).unwrap();
        let images = shard.images.clone();
        let n = images.shape()[0];

        // Earliest fixed budget at which each sample is solved exactly.
        let mut t_complete = vec![usize::MAX; n];
        for budget in (2..=45).step_by(1) {
            let out = eval_batch(&model, &images, HaltMode::Fixed, budget).unwrap();
            for i in 0..n {
                if t_complete[i] != usize::MAX {
                    continue;
                }
                let logit = out.logits.index_axis(Axis(0), i);
                let lab = shard.labels.index_axis(Axis(0), i);
                let exact = logit
                    .iter()
                    .zip(lab.iter())
                    .all(|(&l, &y)| (l > 0.0) == (y > 0.5));
                if exact {
                    t_complete[i] = budget;
                }
            }
        }

        // ACT halting traces at budget 45.
        let out = eval_batch(&model, &images, HaltMode::Act, 45).unwrap();
        let traces = out.traces.unwrap();

        // Mean p_t profile (only steps before halting are nonzero).
        let mut mean_p = vec![0.0f64; 45];
        let mut cnt = vec![0usize; 45];
        for tr in &traces {
            for (t, &p) in tr.p.iter().enumerate() {
                if t + 1 <= tr.t_halt {
                    mean_p[t] += p;
                    cnt[t] += 1;
                }
            }
        }
        let prof: Vec<String> = (0..30)
            .map(|t| {
                if cnt[t] > 0 {
                    format!("{:.3}", mean_p[t] / cnt[t] as f64)
                } else {
                    "-".into()
                }
            })
            .collect();
        println!("grid {grid}: mean p profile (steps 1..30): {}", prof.join(" "));

        // p aligned to completion: mean p at offsets relative to t_complete.
        let mut aligned = vec![0.0f64; 11];
        let mut acnt = vec![0usize; 11];
        for (i, tr) in traces.iter().enumerate() {
            let tc = t_complete[i];
            if tc == usize::MAX {
                continue;
            }
            for off in 0..11usize {
                let t = tc as i64 + off as i64 - 5;
                if t < 1 || t as usize > tr.t_halt || t as usize > 45 {
                    continue;
                }
                aligned[off] += tr.p[(t - 1) as usize];
                acnt[off] += 1;
            }
        }
        let ap: Vec<String> = (0..11)
            .map(|o| {
                if acnt[o] > 0 {
                    format!("{:+}:{:.3}(n={})", o as i64 - 5, aligned[o] / acnt[o] as f64, acnt[o])
                } else {
                    format!("{:+}:-", o as i64 - 5)
                }
            })
            .collect();
        println!("grid {grid}: p aligned to completion: {}", ap.join(" "));

        let solved = t_complete.iter().filter(|&&t| t != usize::MAX).count();
        let mean_tc: f64 = t_complete
            .iter()
            .filter(|&&t| t != usize::MAX)
            .map(|&t| t as f64)
            .sum::<f64>()
            / solved.max(1) as f64;
        let mean_th: f64 =
            traces.iter().map(|t| t.t_halt as f64).sum::<f64>() / traces.len() as f64;
        // Correlation between completion step and halting step on solved samples.
        let pairs: Vec<(f64, f64)> = traces
            .iter()
            .enumerate()
            .filter(|(i, _)| t_complete[*i] != usize::MAX)
            .map(|(i, tr)| (t_complete[i] as f64, tr.t_halt as f64))
            .collect();
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let rho = adrnn::eval::spearman(&xs, &ys);
        println!(
            "grid {grid}: solved {solved}/{n}, mean t_complete {mean_tc:.2}, mean t_halt {mean_th:.2}, rho(t_complete, t_halt) {rho:.3}"
        );
    }
}
