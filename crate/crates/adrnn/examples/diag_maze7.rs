use adrnn::cells::CellKind;
use adrnn::data::maze::MazeSpec;
use adrnn::data::shard::{generate_maze_shard, Shard};
use adrnn::model::{eval_batch, HaltMode, Model, ModelConfig, TaskKind};
use adrnn::train::{train_loop, TrainConfig};
use ndarray::Axis;
use std::time::Instant;

fn probe(model: &Model, shard: &Shard, name: &str) {
    let n = shard.manifest.count;
    let mut exact = 0usize;
    let mut wrong_px = Vec::new();
    for start in (0..n).step_by(50) {
        let end = (start + 50).min(n);
        let imgs = shard.images.slice_axis(Axis(0), ndarray::Slice::from(start..end)).to_owned().into_dyn();
        let out = eval_batch(model, &imgs, HaltMode::Fixed, 15).unwrap();
        for i in 0..(end - start) {
            let p = out.logits.index_axis(Axis(0), i);
            let m = shard.labels.index_axis(Axis(0), start + i);
            let wrong = p.iter().zip(m.iter()).filter(|(&z, &y)| (z > 0.0) != (y > 0.5)).count();
            if wrong == 0 { exact += 1; } else { wrong_px.push(wrong); }
        }
    }
    wrong_px.sort_unstable();
    let mean = wrong_px.iter().sum::<usize>() as f64 / wrong_px.len().max(1) as f64;
    let med = wrong_px.get(wrong_px.len() / 2).copied().unwrap_or(0);
    let le2 = wrong_px.iter().filter(|&&w| w <= 2).count();
    println!(
        "{name}: exact {:.1}% | failures: mean wrong px {mean:.1}, median {med}, <=2px {le2}/{}",
        100.0 * exact as f64 / n as f64, wrong_px.len()
    );
}

fn main() {
    let grid: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let count: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2500);
    let epochs: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(6);
    let lr: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let batch: usize = std::env::var("BATCH").ok().and_then(|s| s.parse().ok()).unwrap_or(16);

    let train = generate_maze_shard(&MazeSpec { grid_n: grid, count, seed: 102 }).unwrap();
    let train_probe = generate_maze_shard(&MazeSpec { grid_n: grid, count: 400, seed: 102 }).unwrap();
    let held = generate_maze_shard(&MazeSpec { grid_n: grid, count: 400, seed: 202 }).unwrap();

    let mut cfg = ModelConfig::preset(TaskKind::Mazes, CellKind::LocRnn);
    cfg.halt_mode = HaltMode::Fixed; // isolate task learning from halting dynamics
    let mut model = Model::new(cfg, 0).unwrap();
    let tc = TrainConfig { epochs, eval_every: 200, lr, tau: 0.0, batch_size: batch, ..Default::default() };
    let t0 = Instant::now();
    let rep = train_loop(&mut model, std::slice::from_ref(&train), &tc, None).unwrap();
    println!("[{:.0}s] fixed-15 grid {grid} count {count} lr {lr} batch {batch}: {} steps, best val {:.2}%, final {:.2}%",
        t0.elapsed().as_secs_f64(), rep.steps, rep.best_val_acc, rep.final_val_acc);
    for m in rep.metrics.iter().filter(|m| m.val_acc.is_some()) {
        println!("  step {} loss {:.4} val {:.2}%", m.step, m.loss, m.val_acc.unwrap());
    }
    probe(&model, &train_probe, "train-subset");
    probe(&model, &held, "held-out");
}
