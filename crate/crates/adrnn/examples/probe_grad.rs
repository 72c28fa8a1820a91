use adrnn::cells::CellKind;
use adrnn::data::maze::MazeSpec;
use adrnn::data::shard::generate_maze_shard;
use adrnn::model::{bind_params, forward_train, task_loss, Model, ModelConfig, TaskKind, HaltMode};
use adrnn::tape::Tape;
use adrnn::train::{clip_grad_norm, Adam};
use ndarray::Axis;

fn main() {
    let shard = generate_maze_shard(&MazeSpec { grid_n: 7, count: 512, seed: 102 }).unwrap();
    let mut cfg = ModelConfig::preset(TaskKind::Mazes, CellKind::LocRnn);
    cfg.halt_mode = HaltMode::Fixed;
    let mut model = Model::new(cfg, 0).unwrap();
    let mut adam = Adam::new();
    for step in 0..60 {
        let s = (step * 16) % 496;
        let xs = shard.images.slice_axis(Axis(0), ndarray::Slice::from(s..s + 16)).to_owned().into_dyn();
        let ys = shard.labels.slice_axis(Axis(0), ndarray::Slice::from(s..s + 16)).to_owned().into_dyn();
        let mut tape = Tape::<f32>::new();
        let refs = bind_params(&mut tape, &model.params);
        let x = tape.constant(xs);
        let y = tape.constant(ys);
        let fwd = forward_train(&mut tape, &model.config, &refs, x, 15).unwrap();
        let loss = task_loss(&mut tape, &model.config, fwd.logits, y).unwrap();
        let lv = tape.value(loss).iter().next().copied().unwrap();
        tape.backward(loss).unwrap();
        let mut grads = std::collections::BTreeMap::new();
        for (name, r) in &refs {
            if let Some(g) = tape.grad(*r) { grads.insert(name.clone(), g.clone()); }
        }
        drop(tape);
        let norm = clip_grad_norm(&mut grads, 5.0);
        adam.step(&mut model.params, &grads, 1e-3);
        if step % 5 == 0 { println!("step {step} loss {lv:.4} grad_norm {norm:.3}"); }
    }
}
