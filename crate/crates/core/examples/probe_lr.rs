use recyclenet::evaluate::{eval_sweep, mean_curve};
use recyclenet::model::{UNetConfig, UNetModel};
use recyclenet::schedule::SchedulePolicy;
use recyclenet::tasks::{generate_range, AbsentClassPolicy, SyntheticTaskSpec};
use recyclenet::trainer::{train_with_hook, TrainConfig, TrainGradMode};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(60);
    let noise: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let task = SyntheticTaskSpec { noise_std: noise, boundary_jitter: 0.0, ..Default::default() };
    let train_data = generate_range(&task, 0, 96).unwrap();
    let eval_data = generate_range(&task, 96, 16).unwrap();
    let cfg = TrainConfig {
        epochs,
        minibatches_per_epoch: std::env::args().nth(4).map(|s| s.parse().unwrap()).unwrap_or(8),
        batch_size: 2,
        learning_rate: lr,
        momentum: 0.9,
        lr_decay_exponent: 0.9,
        seed: 1,
        schedule: SchedulePolicy::fixed(1),
        grad_mode: TrainGradMode::DetachLastOnly,
        augment_flips: true,
    };
    let mut model = UNetModel::<f32>::new(UNetConfig::default(), 1).unwrap();
    let mut marks = vec![];
    train_with_hook(&mut model, &train_data, &cfg, &mut |_, log| {
        if log.epoch % 10 == 9 {
            marks.push((log.epoch, log.mean_loss));
        }
        Ok(())
    })
    .unwrap();
    let report = eval_sweep(&model, &eval_data, 1, AbsentClassPolicy::Exclude).unwrap();
    let losses: Vec<String> = marks.iter().map(|(e, l)| format!("e{e}:{l:.3}")).collect();
    println!("lr={lr} dice={:.4} | {}", mean_curve(&[report])[0], losses.join(" "));
}
