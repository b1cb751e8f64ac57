use std::sync::Arc;
use std::time::Instant;

use recyclenet::model::{UNetConfig, UNetModel};
use recyclenet::tasks::{generate_dataset, SyntheticTaskSpec};
use recyclenet::trainer::{assemble_batch, train_step, SgdMomentum, TrainGradMode};

fn main() {
    let spec = SyntheticTaskSpec::default();
    let data = generate_dataset(&spec, 8).unwrap();
    let cfg = UNetConfig::default();
    let mut model = UNetModel::<f32>::new(cfg, 1).unwrap();
    let mut opt = SgdMomentum::new(&model, 0.9);
    let batch: Vec<_> = data[..2].to_vec();
    let (x, target) = assemble_batch(&batch);
    let _ = Arc::strong_count(&target);

    // Warm up.
    for _ in 0..2 {
        train_step(&mut model, &mut opt, &x, &target, 1, TrainGradMode::DetachLastOnly, 1e-3).unwrap();
    }
    for cycles in [1usize, 2, 3] {
        let n = 6;
        let t0 = Instant::now();
        for _ in 0..n {
            train_step(&mut model, &mut opt, &x, &target, cycles, TrainGradMode::DetachLastOnly, 1e-3).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / n as f64;
        println!("batch=2 cycles={cycles}: {:.3}s per step", dt);
    }
    // Inference sweep cost: batch of 4 at 7 cycles.
    let batch4: Vec<_> = data[..4].to_vec();
    let (x4, _) = assemble_batch(&batch4);
    let t0 = Instant::now();
    let _ = model.forward_with_cycles(&x4, 7, recyclenet::model::GradMode::Inference).unwrap();
    println!("batch=4 7-cycle inference: {:.3}s", t0.elapsed().as_secs_f64());
}
