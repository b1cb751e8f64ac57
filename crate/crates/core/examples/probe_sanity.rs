use recyclenet::evaluate::{eval_sweep, mean_curve};
use recyclenet::model::{UNetConfig, UNetModel};
use recyclenet::schedule::SchedulePolicy;
use recyclenet::tasks::{generate_range, AbsentClassPolicy, SyntheticTaskSpec};
use recyclenet::trainer::{train, TrainConfig, TrainGradMode};

fn main() {
    let task = SyntheticTaskSpec { noise_std: 0.0, boundary_jitter: 0.0, ..Default::default() };
    let train_data = generate_range(&task, 0, 96).unwrap();
    let eval_data = generate_range(&task, 96, 32).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        minibatches_per_epoch: 8,
        batch_size: 2,
        learning_rate: 0.01,
        momentum: 0.9,
        lr_decay_exponent: 0.9,
        seed: 1,
        schedule: SchedulePolicy::fixed(1),
        grad_mode: TrainGradMode::DetachLastOnly,
        augment_flips: true,
    };
    let mut model = UNetModel::<f32>::new(UNetConfig::default(), 1).unwrap();
    let logs = train(&mut model, &train_data, &cfg).unwrap();
    let report = eval_sweep(&model, &eval_data, 1, AbsentClassPolicy::Exclude).unwrap();
    println!(
        "sanity noise-free: dice(1)={:.4} loss={:.4}",
        mean_curve(&[report])[0],
        logs.last().unwrap().mean_loss
    );
}
