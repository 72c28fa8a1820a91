use adrnn::cells::CellKind;
use adrnn::data::maze::MazeSpec;
use adrnn::data::shard::generate_maze_shard;
use adrnn::eval::{evaluate_shards, run_extrapolation, welch_one_sided_p};
use adrnn::model::{HaltMode, Model, ModelConfig, TaskKind};
use adrnn::train::{train_loop, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind = match args.get(1).map(|s| s.as_str()) {
        Some("convgru") => CellKind::ConvGru,
        Some("tiedres") => CellKind::TiedResnet,
        _ => CellKind::LocRnn,
    };
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let per_level: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let tau: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let t0 = Instant::now();
    let train5 = generate_maze_shard(&MazeSpec { grid_n: 5, count: per_level, seed: 101 }).unwrap();
    let train7 = generate_maze_shard(&MazeSpec { grid_n: 7, count: per_level, seed: 102 }).unwrap();

    let cfg = ModelConfig::preset(TaskKind::Mazes, kind);
    let mut model = Model::new(cfg, 0).unwrap();
    let warm: usize = std::env::var("TAU_WARMUP").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    let batch: usize = std::env::var("BATCH").ok().and_then(|s| s.parse().ok()).unwrap_or(16);
    let schedule = match std::env::var("MILESTONES") {
        Ok(ms) => adrnn::train::LrSchedule::WarmupStepDecay {
            warmup_steps: std::env::var("LR_WARMUP").ok().and_then(|s| s.parse().ok()).unwrap_or(300),
            milestones: ms.split(',').filter_map(|s| s.parse().ok()).collect(),
        },
        Err(_) => adrnn::train::LrSchedule::Constant,
    };
    let tc = TrainConfig {
        epochs, eval_every: 200, tau, lr, tau_warmup_steps: warm,
        batch_size: batch, schedule, ..Default::default()
    };
    eprintln!("train config: {tc:?}");
    let rep = train_loop(&mut model, &[train5, train7], &tc, None).unwrap();
    println!(
        "[{:.0}s] {kind:?} tau={tau} lr={lr}: {} steps, best val {:.2}%, final val {:.2}%",
        t0.elapsed().as_secs_f64(), rep.steps, rep.best_val_acc, rep.final_val_acc
    );
    for m in rep.metrics.iter().filter(|m| m.val_acc.is_some()) {
        println!("  step {} loss {:.4} t_halt {:.2} ponder {:.3} val {:.2}%",
            m.step, m.loss, m.mean_t_halt, m.ponder, m.val_acc.unwrap());
    }
    let hw = &model.params["halt.w"];
    let hb = &model.params["halt.b"];
    println!("halt.w l2 {:.4}, halt.b {:.4}",
        hw.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt(), hb.iter().next().unwrap());
    if let Ok(dir) = std::env::var("SAVE_DIR") {
        model.save(std::path::Path::new(&dir), 0, "calib").unwrap();
    }

    let test5 = generate_maze_shard(&MazeSpec { grid_n: 5, count: 600, seed: 201 }).unwrap();
    let test7 = generate_maze_shard(&MazeSpec { grid_n: 7, count: 600, seed: 202 }).unwrap();
    for budget in [15usize, 30, 45] {
        let (_, recs5) = evaluate_shards(&model, std::slice::from_ref(&test5), HaltMode::Act, budget).unwrap();
        let (_, recs7) = evaluate_shards(&model, std::slice::from_ref(&test7), HaltMode::Act, budget).unwrap();
        let (f5, _) = evaluate_shards(&model, std::slice::from_ref(&test5), HaltMode::Fixed, budget).unwrap();
        let (f7, _) = evaluate_shards(&model, std::slice::from_ref(&test7), HaltMode::Fixed, budget).unwrap();
        let exact5 = 100.0 * recs5.iter().filter(|r| r.correct).count() as f64 / recs5.len() as f64;
        let exact7 = 100.0 * recs7.iter().filter(|r| r.correct).count() as f64 / recs7.len() as f64;
        let th5: Vec<f64> = recs5.iter().map(|r| r.t_halt as f64).collect();
        let th7: Vec<f64> = recs7.iter().map(|r| r.t_halt as f64).collect();
        let m5 = th5.iter().sum::<f64>() / th5.len() as f64;
        let m7 = th7.iter().sum::<f64>() / th7.len() as f64;
        let p = welch_one_sided_p(&th5, &th7);
        println!(
            "[{:.0}s] budget {budget}: ACT exact 5x5 {exact5:.1}% 7x7 {exact7:.1}% | fixed exact {:.1}% {:.1}% | t_halt {m5:.2} vs {m7:.2}, p {p:.2e}",
            t0.elapsed().as_secs_f64(), f5.accuracy, f7.accuracy
        );
    }

    let test9 = generate_maze_shard(&MazeSpec { grid_n: 9, count: 500, seed: 203 }).unwrap();
    for mode in [HaltMode::Act, HaltMode::Fixed] {
        for budget in [30usize, 45] {
            let (ex, recs9) = run_extrapolation(&model, std::slice::from_ref(&test9), budget, mode).unwrap();
            let m9 = recs9.iter().map(|r| r.t_halt as f64).sum::<f64>() / recs9.len() as f64;
            println!(
                "[{:.0}s] 9x9 {mode:?} budget {budget}: full {:.1}% (rho {:.3}) truncated {:.1}% | mean t_halt(9) {m9:.2}",
                t0.elapsed().as_secs_f64(), ex.full.accuracy, ex.full.spearman_rho, ex.truncated.accuracy
            );
        }
    }
}
