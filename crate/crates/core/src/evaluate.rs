//! Evaluation machinery: per-cycle Dice sweeps, retained-activation
//! memory reports, the schedule ablation, and CSV/figure export.

use std::sync::Arc;

use crate::engine::{self as eng, Tensor};
use crate::error::{Error, Result};
use crate::model::{GradMode, UNetConfig, UNetModel};
use crate::schedule::SchedulePolicy;
use crate::tasks::{argmax_masks, dice_ce_loss, AbsentClassPolicy, LabeledSample};
use crate::trainer::{self, EpochLog, TrainConfig, TrainGradMode};

pub mod figures;

/// Per-cycle Dice curves for one model over one dataset.
#[derive(Clone, Debug)]
pub struct EvalSweepReport {
    pub max_cycles: usize,
    pub num_classes: usize,
    /// `(sample_id, cycle, class, dice)` rows; classes absent from both
    /// masks are excluded under [`AbsentClassPolicy::Exclude`].
    pub rows: Vec<(usize, usize, usize, f64)>,
    /// Per-sample mean foreground Dice per cycle (samples with no scored
    /// class yield `None`).
    pub per_sample: Vec<Vec<Option<f64>>>,
    /// Mean over samples of the per-sample foreground mean, per cycle
    /// (index 0 is one cycle).
    pub mean_foreground: Vec<f64>,
    /// Mean Dice of an optional 1-cycle plain baseline model.
    pub baseline_mean: Option<f64>,
}

impl EvalSweepReport {
    pub fn dice_at(&self, cycles: usize) -> f64 {
        self.mean_foreground[cycles - 1]
    }
}

/// Batch width of the sweep forward; samples are processed in fixed
/// index order either way, so this only affects throughput.
const SWEEP_BATCH: usize = 4;

/// One inference pass per batch at the maximum cycle count; every
/// intermediate cycle's projection is harvested from that same pass.
pub fn eval_sweep(
    model: &UNetModel<f32>,
    dataset: &[LabeledSample],
    max_inference_cycles: usize,
    absent_policy: AbsentClassPolicy,
) -> Result<EvalSweepReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset".into()));
    }
    if max_inference_cycles < 1 {
        return Err(Error::Graph("max_inference_cycles must be >= 1".into()));
    }
    let num_classes = model.config.num_classes;
    // per_class_scores[sample][cycle][class]
    let mut per_class_scores: Vec<Vec<Vec<Option<f64>>>> = Vec::with_capacity(dataset.len());
    for chunk in dataset.chunks(SWEEP_BATCH) {
        let (x, _) = trainer::assemble_batch(&chunk.to_vec());
        let logits = model.forward_with_cycles(&x, max_inference_cycles, GradMode::Inference)?;
        let mut per_sample_cycles: Vec<Vec<Vec<Option<f64>>>> =
            vec![Vec::with_capacity(max_inference_cycles); chunk.len()];
        for l in &logits {
            let masks = argmax_masks(l)?;
            for (si, (mask, sample)) in masks.iter().zip(chunk.iter()).enumerate() {
                let score =
                    crate::tasks::dice_score(mask, &sample.mask, num_classes, absent_policy)?;
                per_sample_cycles[si].push(score.per_class);
            }
        }
        per_class_scores.extend(per_sample_cycles);
    }

    let mut rows = Vec::new();
    let mut per_sample = Vec::with_capacity(dataset.len());
    for (sid, cycles) in per_class_scores.into_iter().enumerate() {
        let mut sample_curve = Vec::with_capacity(max_inference_cycles);
        for (ci, per_class) in cycles.iter().enumerate() {
            let mut included = Vec::new();
            for (k, d) in per_class.iter().enumerate() {
                if let Some(d) = d {
                    rows.push((sid, ci + 1, k + 1, *d));
                    included.push(*d);
                }
            }
            sample_curve.push(if included.is_empty() {
                None
            } else {
                Some(included.iter().sum::<f64>() / included.len() as f64)
            });
        }
        per_sample.push(sample_curve);
    }

    let mut mean_foreground = Vec::with_capacity(max_inference_cycles);
    for c in 0..max_inference_cycles {
        let vals: Vec<f64> = per_sample.iter().filter_map(|s| s[c]).collect();
        if vals.is_empty() {
            return Err(Error::Empty("no scored samples in sweep".into()));
        }
        mean_foreground.push(vals.iter().sum::<f64>() / vals.len() as f64);
    }

    Ok(EvalSweepReport {
        max_cycles: max_inference_cycles,
        num_classes,
        rows,
        per_sample,
        mean_foreground,
        baseline_mean: None,
    })
}

/// Mean of per-cycle mean-foreground curves across seed reports.
pub fn mean_curve(reports: &[EvalSweepReport]) -> Vec<f64> {
    if reports.is_empty() {
        return Vec::new();
    }
    let n = reports[0].mean_foreground.len();
    (0..n)
        .map(|c| reports.iter().map(|r| r.mean_foreground[c]).sum::<f64>() / reports.len() as f64)
        .collect()
}

/// CSV schema: sample_id, cycle, class, dice.
pub fn sweep_csv(report: &EvalSweepReport) -> String {
    let mut out = String::from("sample_id,cycle,class,dice\n");
    for (sid, cycle, class, dice) in &report.rows {
        out.push_str(&format!("{sid},{cycle},{class},{dice}\n"));
    }
    out
}

// ---------------------------------------------------------------------------
// Memory accounting

#[derive(Clone, Debug)]
pub struct MemoryReport {
    /// `(mode, n_cycles, retained_count, retained_bytes)` rows, both modes.
    pub rows: Vec<(TrainGradMode, usize, usize, usize)>,
}

impl MemoryReport {
    pub fn counts(&self, mode: TrainGradMode) -> Vec<(usize, usize)> {
        self.rows
            .iter()
            .filter(|r| r.0 == mode)
            .map(|r| (r.1, r.2))
            .collect()
    }
}

/// Runs one training-style forward + backward per mode and cycle count on
/// a fixed batch, recording the peak retained-activation counters. The
/// model's gradients are cleared afterwards; parameters are untouched.
pub fn memory_report(
    model: &UNetModel<f32>,
    max_n: usize,
    x: &Tensor<f32>,
    target: &Arc<Vec<u32>>,
) -> Result<MemoryReport> {
    if max_n < 2 {
        return Err(Error::Graph("memory_report needs max_n >= 2".into()));
    }
    let mut rows = Vec::new();
    for mode in [TrainGradMode::DetachLastOnly, TrainGradMode::FullBptt] {
        for n in 1..=max_n {
            eng::reset_peak_stats();
            {
                let logits = model.forward_final(x, n, mode.as_grad_mode())?;
                let loss = dice_ce_loss(&logits, target)?;
                loss.backward()?;
            }
            let stats = eng::activation_stats();
            model.zero_grads();
            rows.push((mode, n, stats.peak_buffers, stats.peak_bytes));
        }
    }
    Ok(MemoryReport { rows })
}

/// CSV schema: mode, n_cycles, retained_count, retained_bytes.
pub fn memory_csv(report: &MemoryReport) -> String {
    let mut out = String::from("mode,n_cycles,retained_count,retained_bytes\n");
    for (mode, n, count, bytes) in &report.rows {
        out.push_str(&format!("{},{n},{count},{bytes}\n", mode.name()));
    }
    out
}

// ---------------------------------------------------------------------------
// Ablation

/// Everything needed to train-and-sweep one model per (policy, seed).
pub struct AblationSetup<'a> {
    pub unet: UNetConfig,
    pub base_train: TrainConfig,
    pub train_data: &'a [LabeledSample],
    pub eval_data: &'a [LabeledSample],
    pub max_inference_cycles: usize,
    pub seeds: Vec<u64>,
    pub absent_policy: AbsentClassPolicy,
}

#[derive(Clone, Debug)]
pub struct PolicyRuns {
    pub policy: SchedulePolicy,
    pub name: String,
    /// One sweep report per seed, in seed order.
    pub reports: Vec<EvalSweepReport>,
    /// Epoch logs per seed (for time accounting).
    pub logs: Vec<Vec<EpochLog>>,
}

impl PolicyRuns {
    pub fn mean_curve(&self) -> Vec<f64> {
        mean_curve(&self.reports)
    }
}

/// Trains one model per (policy, seed) and sweeps each over the
/// evaluation set. Runs execute sequentially in the given order, so the
/// outcome is deterministic.
pub fn ablation_run(policies: &[SchedulePolicy], setup: &AblationSetup) -> Result<Vec<PolicyRuns>> {
    if policies.len() < 2 {
        return Err(Error::Config("ablation needs at least two policies".into()));
    }
    policies
        .iter()
        .map(|&policy| run_policy(policy, setup))
        .collect()
}

/// Trains and sweeps a single policy across the setup's seeds.
pub fn run_policy(policy: SchedulePolicy, setup: &AblationSetup) -> Result<PolicyRuns> {
    let mut reports = Vec::new();
    let mut logs = Vec::new();
    for &seed in &setup.seeds {
        let mut cfg = setup.base_train.clone();
        cfg.schedule = policy;
        cfg.seed = seed;
        let mut model = UNetModel::<f32>::new(setup.unet.clone(), seed)?;
        logs.push(trainer::train(&mut model, setup.train_data, &cfg)?);
        reports.push(eval_sweep(
            &model,
            setup.eval_data,
            setup.max_inference_cycles,
            setup.absent_policy,
        )?);
    }
    Ok(PolicyRuns {
        policy,
        name: policy.describe(),
        reports,
        logs,
    })
}

/// CSV schema: policy, seed, cycle, mean_dice.
pub fn ablation_csv(runs: &[PolicyRuns], seeds: &[u64]) -> String {
    let mut out = String::from("policy,seed,cycle,mean_dice\n");
    for pr in runs {
        for (si, report) in pr.reports.iter().enumerate() {
            for (ci, dice) in report.mean_foreground.iter().enumerate() {
                out.push_str(&format!("{},{},{},{dice}\n", pr.name, seeds[si], ci + 1));
            }
        }
    }
    out
}
