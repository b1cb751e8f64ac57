use std::sync::Arc;
use std::time::Instant;

use recyclenet::engine as eng;
use recyclenet::model::{GradMode, UNetConfig, UNetModel};
use recyclenet::tasks::{dice_ce_loss, generate_dataset, SyntheticTaskSpec};
use recyclenet::trainer::assemble_batch;

fn main() {
    let spec = SyntheticTaskSpec::default();
    let data = generate_dataset(&spec, 4).unwrap();
    let model = UNetModel::<f32>::new(UNetConfig::default(), 1).unwrap();
    let (x, target) = assemble_batch(&data[..2].to_vec());

    // warmup
    for _ in 0..2 {
        let l = model.forward_final(&x, 1, GradMode::DetachLastOnly).unwrap();
        let loss = dice_ce_loss(&l, &target).unwrap();
        loss.backward().unwrap();
        model.zero_grads();
    }

    let n = 10;
    let t0 = Instant::now();
    for _ in 0..n {
        let _ = model.forward_final(&x, 1, GradMode::Inference).unwrap();
    }
    println!("forward (inference, no graph): {:.4}s", t0.elapsed().as_secs_f64() / n as f64);

    let t0 = Instant::now();
    for _ in 0..n {
        let l = model.forward_final(&x, 1, GradMode::DetachLastOnly).unwrap();
        drop(l);
    }
    println!("forward (graph): {:.4}s", t0.elapsed().as_secs_f64() / n as f64);

    let t0 = Instant::now();
    for _ in 0..n {
        let l = model.forward_final(&x, 1, GradMode::DetachLastOnly).unwrap();
        let loss = dice_ce_loss(&l, &target).unwrap();
        loss.backward().unwrap();
        model.zero_grads();
    }
    println!("forward+loss+backward: {:.4}s", t0.elapsed().as_secs_f64() / n as f64);

    // isolated big conv fwd/bwd timing via gradcheck-style toy
    let w = eng::Tensor::<f32>::from_vec(vec![16, 16, 3, 3], vec![0.01; 16*16*9]).unwrap();
    let b = eng::Tensor::<f32>::from_vec(vec![16], vec![0.0; 16]).unwrap();
    let big = eng::Tensor::<f32>::from_vec(vec![2, 16, 64, 64], vec![0.5; 2*16*64*64]).unwrap();
    let t0 = Instant::now();
    for _ in 0..50 {
        let _ = eng::conv2d(&big, &w, &b, 1, 1).unwrap();
    }
    println!("single 16->16 conv fwd @64x64 batch2: {:.5}s", t0.elapsed().as_secs_f64() / 50.0);
}
