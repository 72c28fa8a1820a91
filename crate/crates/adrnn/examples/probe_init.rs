use adrnn::cells::CellKind;
use adrnn::data::maze::MazeSpec;
use adrnn::data::shard::generate_maze_shard;
use adrnn::model::{eval_batch, HaltMode, Model, ModelConfig, TaskKind};

fn main() {
    let shard = generate_maze_shard(&MazeSpec { grid_n: 7, count: 32, seed: 211 }).unwrap();
    let model = Model::new(ModelConfig::preset(TaskKind::Mazes, CellKind::LocRnn), 0).unwrap();
    let out = eval_batch(&model, &shard.images, HaltMode::Act, 15).unwrap();
    let tr = out.traces.unwrap();
    let p0: Vec<f64> = tr.iter().take(6).map(|t| t.p[0]).collect();
    let th: Vec<usize> = tr.iter().map(|t| t.t_halt).collect();
    println!("p_1 of first samples: {p0:?}");
    println!("t_halt: {th:?}");
}
