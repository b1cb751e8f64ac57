use std::time::Instant;

use recyclenet::evaluate::AblationSetup;
use recyclenet::model::UNetConfig;
use recyclenet::schedule::SchedulePolicy;
use recyclenet::tasks::{generate_range, AbsentClassPolicy, SyntheticTaskSpec};
use recyclenet::trainer::{TrainConfig, TrainGradMode};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(100);
    let noise: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.35);
    let jitter: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.35);
    let seeds: Vec<u64> = args.get(4).map(|s| s.split(',').map(|x| x.parse().unwrap()).collect()).unwrap_or(vec![1]);
    let which: Option<usize> = args.get(5).map(|s| s.parse().unwrap());
    let mb: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(16);
    let lr: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(0.03);
    let warm = epochs / 5;

    let task = SyntheticTaskSpec { noise_std: noise, boundary_jitter: jitter, ..Default::default() };
    let train_data = generate_range(&task, 0, 96).unwrap();
    let eval_data = generate_range(&task, 96, 32).unwrap();

    let base_train = TrainConfig {
        epochs,
        minibatches_per_epoch: mb,
        batch_size: 2,
        learning_rate: lr,
        momentum: 0.9,
        lr_decay_exponent: 0.9,
        seed: 0,
        schedule: SchedulePolicy::robust(warm, warm, 3),
        grad_mode: TrainGradMode::DetachLastOnly,
        augment_flips: true,
    };
    let setup = AblationSetup {
        unet: UNetConfig::default(),
        base_train,
        train_data: &train_data,
        eval_data: &eval_data,
        max_inference_cycles: 7,
        seeds,
        absent_policy: AbsentClassPolicy::Exclude,
    };
    let policies = [
        SchedulePolicy::robust(warm, warm, 3),
        SchedulePolicy::fixed(1),
        SchedulePolicy::fixed(2),
        SchedulePolicy::incremental_no_sampling(warm, warm, 3),
    ];
    for (pi, p) in policies.into_iter().enumerate() {
        if let Some(w) = which {
            if w != pi {
                continue;
            }
        }
        let t0 = Instant::now();
        let runs = recyclenet::evaluate::run_policy(p, &setup).unwrap();
        let curve = runs.mean_curve();
        let curve_str: Vec<String> = curve.iter().map(|d| format!("{d:.4}")).collect();
        let final_loss = runs.logs[0].last().map(|l| l.mean_loss).unwrap_or(f64::NAN);
        println!(
            "{:<40} [{}]  loss={final_loss:.3} ({:.0}s)",
            runs.name,
            curve_str.join(" "),
            t0.elapsed().as_secs_f64()
        );
    }
}
