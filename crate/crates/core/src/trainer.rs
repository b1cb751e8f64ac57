//! The recycling training loop: per-minibatch cycle sampling, detach-all-
//! but-last gradients, SGD with momentum and polynomial LR decay.
//!
//! Per-minibatch RNG draw order (one stream per run, seeded from the
//! train config): the cycle count (robust schedules with a non-degenerate
//! range consume one draw, all other cases none), then `batch_size`
//! sample-index draws, then one flip draw per sample when flip
//! augmentation is on. Keeping degenerate ranges draw-free makes a
//! warm-up-phase robust run step-identical to a static(1) run with the
//! same seed.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use crate::engine::{self as eng, Tensor};
use crate::error::{Error, Result};
use crate::model::{GradMode, UNetModel};
use crate::rng::PortableRng;
use crate::schedule::{sample_cycles, SchedulePolicy};
use crate::tasks::{dice_ce_loss, LabeledSample};

/// Gradient policy during training (inference mode is not a training
/// option).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainGradMode {
    DetachLastOnly,
    FullBptt,
}

impl TrainGradMode {
    pub fn as_grad_mode(self) -> GradMode {
        match self {
            TrainGradMode::DetachLastOnly => GradMode::DetachLastOnly,
            TrainGradMode::FullBptt => GradMode::FullBptt,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainGradMode::DetachLastOnly => "detach_last_only",
            TrainGradMode::FullBptt => "full_bptt",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// An epoch is a fixed number of minibatch updates.
    pub epochs: usize,
    pub minibatches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Polynomial decay: `lr(e) = lr0 * (1 - e / epochs)^exponent`.
    pub lr_decay_exponent: f64,
    pub seed: u64,
    pub schedule: SchedulePolicy,
    pub grad_mode: TrainGradMode,
    pub augment_flips: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.minibatches_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config("all training counts must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let t = 1.0 - epoch as f64 / self.epochs as f64;
        self.learning_rate * t.max(0.0).powf(self.lr_decay_exponent)
    }
}

/// One epoch's record; histogram slot `k` counts minibatches that used
/// `k + 1` cycles.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub cycle_histogram: Vec<usize>,
    pub wall_time_seconds: f64,
    pub peak_retained_activations: usize,
}

/// SGD with classical momentum; velocity buffers align with the model's
/// fixed parameter order.
pub struct SgdMomentum {
    momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl SgdMomentum {
    pub fn new(model: &UNetModel<f32>, momentum: f64) -> Self {
        let mut velocity = Vec::new();
        model.visit_params(&mut |_, t| velocity.push(vec![0f32; t.numel()]));
        SgdMomentum {
            momentum: momentum as f32,
            velocity,
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// Parameters without a gradient (unreached by backward) are skipped.
    pub fn step(&mut self, model: &mut UNetModel<f32>, lr: f64) {
        let lr = lr as f32;
        let momentum = self.momentum;
        let velocity = &mut self.velocity;
        let mut idx = 0usize;
        model.visit_params_mut(&mut |_, t| {
            let v = &mut velocity[idx];
            idx += 1;
            let Some(grad) = t.grad() else {
                return;
            };
            let data = t.data_mut();
            for ((d, v), g) in data.iter_mut().zip(v.iter_mut()).zip(grad.iter()) {
                *v = momentum * *v + g;
                *d -= lr * *v;
            }
            t.zero_grad();
        });
    }
}

/// Flips a sample horizontally and/or vertically (the only augmentation).
fn flip_sample(s: &LabeledSample, h: bool, v: bool) -> LabeledSample {
    if !h && !v {
        return s.clone();
    }
    let n = s.size;
    let mut image = vec![0f32; n * n];
    let mut mask = vec![0u32; n * n];
    for y in 0..n {
        for x in 0..n {
            let sy = if v { n - 1 - y } else { y };
            let sx = if h { n - 1 - x } else { x };
            image[y * n + x] = s.image[sy * n + sx];
            mask[y * n + x] = s.mask[sy * n + sx];
        }
    }
    LabeledSample {
        image,
        mask,
        size: n,
    }
}

/// Stacks samples into a `[b, 1, h, w]` input and a flat target mask.
pub fn assemble_batch(samples: &[LabeledSample]) -> (Tensor<f32>, Arc<Vec<u32>>) {
    let n = samples[0].size;
    let b = samples.len();
    let mut image = Vec::with_capacity(b * n * n);
    let mut mask = Vec::with_capacity(b * n * n);
    for s in samples {
        image.extend_from_slice(&s.image);
        mask.extend_from_slice(&s.mask);
    }
    (
        Tensor::from_vec(vec![b, 1, n, n], image).expect("consistent sample sizes"),
        Arc::new(mask),
    )
}

/// One optimizer update from the final-cycle loss. Returns the loss value;
/// a non-finite loss aborts with a diagnostic instead of updating.
pub fn train_step(
    model: &mut UNetModel<f32>,
    optimizer: &mut SgdMomentum,
    x: &Tensor<f32>,
    target: &Arc<Vec<u32>>,
    n_cycles: usize,
    grad_mode: TrainGradMode,
    lr: f64,
) -> Result<f64> {
    let loss_value = {
        let logits = model.forward_final(x, n_cycles, grad_mode.as_grad_mode())?;
        let loss = dice_ce_loss(&logits, target)?;
        let v = loss.item() as f64;
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: 0,
                step: 0,
                value: v,
            });
        }
        loss.backward()?;
        v
        // Graph dropped here, so the update below mutates buffers in place.
    };
    optimizer.step(model, lr);
    Ok(loss_value)
}

/// Runs the full training loop; `epoch_hook` fires after every epoch (for
/// checkpointing and log streaming).
pub fn train_with_hook(
    model: &mut UNetModel<f32>,
    dataset: &[LabeledSample],
    cfg: &TrainConfig,
    epoch_hook: &mut dyn FnMut(&UNetModel<f32>, &EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    let mut rng = PortableRng::seed_from_u64(cfg.seed);
    let mut optimizer = SgdMomentum::new(model, cfg.momentum);
    let cap = cfg.schedule.max_cycles_cap.max(cfg.schedule.static_cycles);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        eng::reset_peak_stats();
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0f64;
        let mut histogram = vec![0usize; cap];
        for step in 0..cfg.minibatches_per_epoch {
            let n_cycles = sample_cycles(epoch, &cfg.schedule, &mut rng);
            histogram[n_cycles - 1] += 1;
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let idx = rng.range_usize(0, dataset.len() - 1);
                batch.push(&dataset[idx]);
            }
            let samples: Vec<LabeledSample> = if cfg.augment_flips {
                batch
                    .iter()
                    .map(|s| {
                        let bits = rng.bounded(4);
                        flip_sample(s, bits & 1 == 1, bits & 2 == 2)
                    })
                    .collect()
            } else {
                batch.iter().map(|&s| s.clone()).collect()
            };
            let (x, target) = assemble_batch(&samples);
            let loss = train_step(
                model,
                &mut optimizer,
                &x,
                &target,
                n_cycles,
                cfg.grad_mode,
                lr,
            )
            .map_err(|e| match e {
                Error::NonFiniteLoss { value, .. } => Error::NonFiniteLoss {
                    epoch,
                    step,
                    value,
                },
                other => other,
            })?;
            loss_sum += loss;
        }
        let log = EpochLog {
            epoch,
            mean_loss: loss_sum / cfg.minibatches_per_epoch as f64,
            cycle_histogram: histogram,
            wall_time_seconds: started.elapsed().as_secs_f64(),
            peak_retained_activations: eng::activation_stats().peak_buffers,
        };
        epoch_hook(model, &log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Training loop without an epoch hook.
pub fn train(
    model: &mut UNetModel<f32>,
    dataset: &[LabeledSample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    train_with_hook(model, dataset, cfg, &mut |_, _| Ok(()))
}

/// CSV schema: epoch, mean_loss, n1..nK, wall_time_s,
/// peak_retained_activations.
pub fn epoch_log_csv(logs: &[EpochLog]) -> String {
    let cap = logs.iter().map(|l| l.cycle_histogram.len()).max().unwrap_or(0);
    let mut out = String::from("epoch,mean_loss");
    for k in 1..=cap {
        out.push_str(&format!(",n{k}"));
    }
    out.push_str(",wall_time_s,peak_retained_activations\n");
    for log in logs {
        out.push_str(&format!("{},{}", log.epoch, log.mean_loss));
        for k in 0..cap {
            let c = log.cycle_histogram.get(k).copied().unwrap_or(0);
            out.push_str(&format!(",{c}"));
        }
        out.push_str(&format!(
            ",{:.3},{}\n",
            log.wall_time_seconds, log.peak_retained_activations
        ));
    }
    out
}

/// The CSV with wall-time fields blanked, for reproducibility comparisons.
pub fn epoch_log_csv_stable(logs: &[EpochLog]) -> String {
    let mut stripped = logs.to_vec();
    for l in stripped.iter_mut() {
        l.wall_time_seconds = 0.0;
    }
    epoch_log_csv(&stripped)
}

/// Ratio of mean epoch time at the schedule's final phase (current max at
/// cap) to mean warm-up epoch time; reported, never asserted.
pub fn epoch_time_ratio(logs: &[EpochLog], policy: &SchedulePolicy) -> Option<f64> {
    let mut warm = Vec::new();
    let mut late = Vec::new();
    for log in logs {
        let m = crate::schedule::current_max_cycles(log.epoch, policy);
        if m == 1 {
            warm.push(log.wall_time_seconds);
        } else if m == policy.max_cycles_cap {
            late.push(log.wall_time_seconds);
        }
    }
    if warm.is_empty() || late.is_empty() {
        return None;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Some(mean(&late) / mean(&warm))
}

/// Writes a checkpoint whose metadata echoes the run configuration.
pub fn save_run_checkpoint(
    model: &UNetModel<f32>,
    cfg: &TrainConfig,
    epoch: usize,
    path: &Path,
) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("epoch".into(), epoch.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("schedule".into(), cfg.schedule.describe());
    meta.insert("grad_mode".into(), cfg.grad_mode.name().into());
    meta.insert("learning_rate".into(), cfg.learning_rate.to_string());
    meta.insert("momentum".into(), cfg.momentum.to_string());
    meta.insert("epochs".into(), cfg.epochs.to_string());
    meta.insert(
        "minibatches_per_epoch".into(),
        cfg.minibatches_per_epoch.to_string(),
    );
    meta.insert("batch_size".into(), cfg.batch_size.to_string());
    crate::model::save_checkpoint(model, &meta, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UNetConfig;
    use crate::schedule::ScheduleKind;
    use crate::tasks::{generate_dataset, SyntheticTaskSpec};

    fn tiny_unet() -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            num_classes: 3,
            base_channels: 4,
            num_stages: 2,
            leaky_slope: 0.01,
            norm_epsilon: 1e-5,
        }
    }

    fn tiny_task() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            image_size: 16,
            num_classes: 3,
            contrast: 1.0,
            noise_std: 0.0,
            boundary_jitter: 0.0,
            seed: 5,
        }
    }

    fn tiny_train(seed: u64, schedule: SchedulePolicy, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            minibatches_per_epoch: 4,
            batch_size: 2,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay_exponent: 0.9,
            seed,
            schedule,
            grad_mode: TrainGradMode::DetachLastOnly,
            augment_flips: false,
        }
    }

    #[test]
    fn lr_decay_is_polynomial() {
        let cfg = tiny_train(1, SchedulePolicy::fixed(1), 100);
        assert!((cfg.lr_at(0) - 0.01).abs() < 1e-12);
        let half = cfg.lr_at(50);
        assert!((half - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!(cfg.lr_at(99) > 0.0);
    }

    #[test]
    fn one_cycle_step_equals_plain_step() {
        // A recycling step at one cycle must match a hand-rolled plain
        // U-Net step (forward_plain + loss + backward + SGD).
        let data = generate_dataset(&tiny_task(), 8).unwrap();
        let (x, target) = assemble_batch(&data[..2].to_vec());

        let mut m1 = UNetModel::<f32>::new(tiny_unet(), 3).unwrap();
        let mut opt1 = SgdMomentum::new(&m1, 0.9);
        train_step(&mut m1, &mut opt1, &x, &target, 1, TrainGradMode::DetachLastOnly, 0.01)
            .unwrap();

        let mut m2 = UNetModel::<f32>::new(tiny_unet(), 3).unwrap();
        let mut opt2 = SgdMomentum::new(&m2, 0.9);
        {
            let logits = m2.forward_plain(&x).unwrap();
            let loss = dice_ce_loss(&logits, &target).unwrap();
            loss.backward().unwrap();
        }
        opt2.step(&mut m2, 0.01);

        assert_eq!(
            crate::model::parameter_bytes(&m1),
            crate::model::parameter_bytes(&m2)
        );
    }

    #[test]
    fn peak_retained_equal_for_two_and_seven_cycles() {
        let data = generate_dataset(&tiny_task(), 4).unwrap();
        let (x, target) = assemble_batch(&data[..2].to_vec());
        let mut model = UNetModel::<f32>::new(tiny_unet(), 4).unwrap();
        let mut opt = SgdMomentum::new(&model, 0.9);
        let mut peak_for = |n: usize| {
            eng::reset_peak_stats();
            train_step(&mut model, &mut opt, &x, &target, n, TrainGradMode::DetachLastOnly, 1e-3)
                .unwrap();
            eng::activation_stats().peak_buffers
        };
        let p2 = peak_for(2);
        let p7 = peak_for(7);
        assert_eq!(p2, p7);
    }

    #[test]
    fn epoch_zero_robust_uses_single_cycle_only() {
        let data = generate_dataset(&tiny_task(), 8).unwrap();
        let mut model = UNetModel::<f32>::new(tiny_unet(), 5).unwrap();
        let cfg = tiny_train(7, SchedulePolicy::robust(2, 2, 3), 1);
        let logs = train(&mut model, &data, &cfg).unwrap();
        assert_eq!(logs[0].cycle_histogram[0], cfg.minibatches_per_epoch);
        assert_eq!(logs[0].cycle_histogram[1..].iter().sum::<usize>(), 0);
    }

    #[test]
    fn histogram_totals_match_minibatches() {
        let data = generate_dataset(&tiny_task(), 8).unwrap();
        let mut model = UNetModel::<f32>::new(tiny_unet(), 6).unwrap();
        let cfg = tiny_train(8, SchedulePolicy::robust(1, 1, 3), 4);
        let logs = train(&mut model, &data, &cfg).unwrap();
        assert_eq!(logs.len(), 4);
        for log in &logs {
            assert_eq!(
                log.cycle_histogram.iter().sum::<usize>(),
                cfg.minibatches_per_epoch
            );
        }
    }

    #[test]
    fn training_is_reproducible() {
        let data = generate_dataset(&tiny_task(), 8).unwrap();
        let run = || {
            let mut model = UNetModel::<f32>::new(tiny_unet(), 9).unwrap();
            let cfg = tiny_train(10, SchedulePolicy::robust(1, 1, 2), 2);
            let logs = train(&mut model, &data, &cfg).unwrap();
            (crate::model::parameter_bytes(&model), epoch_log_csv_stable(&logs))
        };
        let (p1, l1) = run();
        let (p2, l2) = run();
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn warmup_run_is_step_identical_to_static_one() {
        let data = generate_dataset(&tiny_task(), 8).unwrap();
        let robust_in_warmup = {
            let mut model = UNetModel::<f32>::new(tiny_unet(), 11).unwrap();
            let cfg = tiny_train(12, SchedulePolicy::robust(100, 100, 3), 3);
            train(&mut model, &data, &cfg).unwrap();
            crate::model::parameter_bytes(&model)
        };
        let static_one = {
            let mut model = UNetModel::<f32>::new(tiny_unet(), 11).unwrap();
            let mut policy = SchedulePolicy::fixed(1);
            policy.kind = ScheduleKind::Static;
            let cfg = tiny_train(12, policy, 3);
            train(&mut model, &data, &cfg).unwrap();
            crate::model::parameter_bytes(&model)
        };
        assert_eq!(robust_in_warmup, static_one);
    }

    #[test]
    fn csv_has_expected_schema() {
        let log = EpochLog {
            epoch: 0,
            mean_loss: 1.25,
            cycle_histogram: vec![3, 1, 0],
            wall_time_seconds: 0.5,
            peak_retained_activations: 42,
        };
        let csv = epoch_log_csv(&[log]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,mean_loss,n1,n2,n3,wall_time_s,peak_retained_activations"
        );
        assert_eq!(lines.next().unwrap(), "0,1.25,3,1,0,0.500,42");
    }
}
