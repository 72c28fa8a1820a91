use adrnn::cells::CellKind;
use adrnn::data::maze::MazeSpec;
use adrnn::data::shard::generate_maze_shard;
use adrnn::model::{Model, ModelConfig, TaskKind};
use adrnn::train::{train_loop, TrainConfig};
use std::time::Instant;

fn main() {
    for kind in [CellKind::LocRnn, CellKind::ConvGru] {
        let shard5 = generate_maze_shard(&MazeSpec { grid_n: 5, count: 64, seed: 1 }).unwrap();
        let shard7 = generate_maze_shard(&MazeSpec { grid_n: 7, count: 64, seed: 2 }).unwrap();
        let cfg = ModelConfig::preset(TaskKind::Mazes, kind);
        let mut model = Model::new(cfg, 0).unwrap();
        let tc = TrainConfig { batch_size: 16, epochs: 1, eval_every: 0, max_val_samples: 8, ..Default::default() };
        let t0 = Instant::now();
        let rep = train_loop(&mut model, &[shard5, shard7], &tc, None).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!("{kind:?}: {} steps (128 samples) in {dt:.2}s -> {:.1} ms/sample", rep.steps, dt / 128.0 * 1000.0);
    }
}
