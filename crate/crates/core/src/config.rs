//! Run configuration: a flat plain-text `key = value` file, strictly
//! validated. Unknown keys are errors (no silent typos), and every
//! offending key is reported in one pass.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::UNetConfig;
use crate::schedule::{ScheduleKind, SchedulePolicy};
use crate::tasks::{AbsentClassPolicy, SyntheticTaskSpec};
use crate::trainer::{TrainConfig, TrainGradMode};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: SyntheticTaskSpec,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    /// When set, subcommands read cached splits from this directory
    /// instead of generating in memory.
    pub data_dir: Option<PathBuf>,
    pub max_inference_cycles: usize,
    pub memory_max_cycles: usize,
    pub eval_seeds: Vec<u64>,
    pub absent_policy: AbsentClassPolicy,
    /// Checkpoint every N epochs (0 = final checkpoint only).
    pub checkpoint_interval: usize,
}

impl RunConfig {
    /// The shipped desk-scale defaults: the standard hard synthetic task
    /// and a 200-epoch robust schedule (warm-up 40, +1 cycle each 40).
    pub fn desk_default() -> Self {
        let task = SyntheticTaskSpec::default();
        let unet = UNetConfig {
            in_channels: 1,
            num_classes: task.num_classes,
            ..UNetConfig::default()
        };
        let train = TrainConfig {
            epochs: 200,
            minibatches_per_epoch: 8,
            batch_size: 2,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay_exponent: 0.9,
            seed: 1,
            schedule: SchedulePolicy::robust(40, 40, 3),
            grad_mode: TrainGradMode::DetachLastOnly,
            augment_flips: true,
        };
        RunConfig {
            task,
            unet,
            train,
            train_samples: 96,
            val_samples: 32,
            test_samples: 32,
            data_dir: None,
            max_inference_cycles: 7,
            memory_max_cycles: 7,
            eval_seeds: vec![1, 2, 3],
            absent_policy: AbsentClassPolicy::Exclude,
            checkpoint_interval: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.unet.validate()?;
        self.train.validate()?;
        if self.unet.num_classes != self.task.num_classes {
            return Err(Error::Config(format!(
                "num_classes mismatch: task has {}, model has {}",
                self.task.num_classes, self.unet.num_classes
            )));
        }
        if self.unet.in_channels != 1 {
            return Err(Error::Config(
                "synthetic tasks produce single-channel images".into(),
            ));
        }
        if self.task.image_size % self.unet.spatial_divisor() != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by 2^(num_stages-1) = {}",
                self.task.image_size,
                self.unet.spatial_divisor()
            )));
        }
        if self.train_samples == 0 || self.val_samples == 0 {
            return Err(Error::Config("train/val splits must be non-empty".into()));
        }
        if self.max_inference_cycles == 0 || self.memory_max_cycles < 2 {
            return Err(Error::Config(
                "max_inference_cycles must be >= 1, memory_max_cycles >= 2".into(),
            ));
        }
        if self.eval_seeds.is_empty() {
            return Err(Error::Config("eval_seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Serializes in the same key set `parse` accepts.
    pub fn to_file_string(&self) -> String {
        let b = |v: bool| if v { "true" } else { "false" };
        let seeds: Vec<String> = self.eval_seeds.iter().map(|s| s.to_string()).collect();
        format!(
            "# synthetic task\n\
             image_size = {}\n\
             num_classes = {}\n\
             contrast = {}\n\
             noise_std = {}\n\
             boundary_jitter = {}\n\
             task_seed = {}\n\
             \n\
             # data\n\
             train_samples = {}\n\
             val_samples = {}\n\
             test_samples = {}\n\
             data_dir = {}\n\
             \n\
             # model\n\
             base_channels = {}\n\
             num_stages = {}\n\
             leaky_slope = {}\n\
             norm_epsilon = {}\n\
             \n\
             # training\n\
             epochs = {}\n\
             minibatches_per_epoch = {}\n\
             batch_size = {}\n\
             learning_rate = {}\n\
             momentum = {}\n\
             lr_decay_exponent = {}\n\
             train_seed = {}\n\
             grad_mode = {}\n\
             augment_flips = {}\n\
             checkpoint_interval = {}\n\
             \n\
             # cycle schedule\n\
             schedule_kind = {}\n\
             warmup_epochs = {}\n\
             increment_interval = {}\n\
             max_cycles_cap = {}\n\
             static_cycles = {}\n\
             \n\
             # evaluation\n\
             max_inference_cycles = {}\n\
             memory_max_cycles = {}\n\
             eval_seeds = {}\n\
             absent_class_scores_one = {}\n",
            self.task.image_size,
            self.task.num_classes,
            self.task.contrast,
            self.task.noise_std,
            self.task.boundary_jitter,
            self.task.seed,
            self.train_samples,
            self.val_samples,
            self.test_samples,
            self.data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            self.unet.base_channels,
            self.unet.num_stages,
            self.unet.leaky_slope,
            self.unet.norm_epsilon,
            self.train.epochs,
            self.train.minibatches_per_epoch,
            self.train.batch_size,
            self.train.learning_rate,
            self.train.momentum,
            self.train.lr_decay_exponent,
            self.train.seed,
            self.train.grad_mode.name(),
            b(self.train.augment_flips),
            self.checkpoint_interval,
            schedule_kind_name(self.train.schedule.kind),
            self.train.schedule.warmup_epochs,
            self.train.schedule.increment_interval,
            self.train.schedule.max_cycles_cap,
            self.train.schedule.static_cycles,
            self.max_inference_cycles,
            self.memory_max_cycles,
            seeds.join(","),
            b(self.absent_policy == AbsentClassPolicy::ScoreOne),
        )
    }

    /// Parses and fully validates a config file. Collects every unknown
    /// key and every malformed value into a single error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::desk_default();
        let mut entries: BTreeMap<String, String> = BTreeMap::new();
        let mut problems: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    let key = k.trim().to_string();
                    if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                        problems.push(format!("duplicate key `{key}`"));
                    }
                }
                None => problems.push(format!("line {}: not `key = value`", lineno + 1)),
            }
        }

        macro_rules! take {
            ($key:literal, $slot:expr, $ty:ty) => {
                if let Some(v) = entries.remove($key) {
                    match v.parse::<$ty>() {
                        Ok(parsed) => $slot = parsed,
                        Err(_) => problems.push(format!("bad value for `{}`: {v:?}", $key)),
                    }
                }
            };
        }

        take!("image_size", cfg.task.image_size, usize);
        take!("num_classes", cfg.task.num_classes, usize);
        take!("contrast", cfg.task.contrast, f64);
        take!("noise_std", cfg.task.noise_std, f64);
        take!("boundary_jitter", cfg.task.boundary_jitter, f64);
        take!("task_seed", cfg.task.seed, u64);
        take!("train_samples", cfg.train_samples, usize);
        take!("val_samples", cfg.val_samples, usize);
        take!("test_samples", cfg.test_samples, usize);
        if let Some(v) = entries.remove("data_dir") {
            cfg.data_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        }
        take!("base_channels", cfg.unet.base_channels, usize);
        take!("num_stages", cfg.unet.num_stages, usize);
        take!("leaky_slope", cfg.unet.leaky_slope, f64);
        take!("norm_epsilon", cfg.unet.norm_epsilon, f64);
        take!("epochs", cfg.train.epochs, usize);
        take!("minibatches_per_epoch", cfg.train.minibatches_per_epoch, usize);
        take!("batch_size", cfg.train.batch_size, usize);
        take!("learning_rate", cfg.train.learning_rate, f64);
        take!("momentum", cfg.train.momentum, f64);
        take!("lr_decay_exponent", cfg.train.lr_decay_exponent, f64);
        take!("train_seed", cfg.train.seed, u64);
        if let Some(v) = entries.remove("grad_mode") {
            match v.as_str() {
                "detach_last_only" => cfg.train.grad_mode = TrainGradMode::DetachLastOnly,
                "full_bptt" => cfg.train.grad_mode = TrainGradMode::FullBptt,
                other => problems.push(format!("bad value for `grad_mode`: {other:?}")),
            }
        }
        if let Some(v) = entries.remove("augment_flips") {
            match parse_bool(&v) {
                Some(b) => cfg.train.augment_flips = b,
                None => problems.push(format!("bad value for `augment_flips`: {v:?}")),
            }
        }
        take!("checkpoint_interval", cfg.checkpoint_interval, usize);
        if let Some(v) = entries.remove("schedule_kind") {
            match v.as_str() {
                "robust" => cfg.train.schedule.kind = ScheduleKind::Robust,
                "static" => cfg.train.schedule.kind = ScheduleKind::Static,
                "incremental_no_sampling" => {
                    cfg.train.schedule.kind = ScheduleKind::IncrementalNoSampling
                }
                other => problems.push(format!("bad value for `schedule_kind`: {other:?}")),
            }
        }
        take!("warmup_epochs", cfg.train.schedule.warmup_epochs, usize);
        take!(
            "increment_interval",
            cfg.train.schedule.increment_interval,
            usize
        );
        take!("max_cycles_cap", cfg.train.schedule.max_cycles_cap, usize);
        take!("static_cycles", cfg.train.schedule.static_cycles, usize);
        take!("max_inference_cycles", cfg.max_inference_cycles, usize);
        take!("memory_max_cycles", cfg.memory_max_cycles, usize);
        if let Some(v) = entries.remove("eval_seeds") {
            let parsed: std::result::Result<Vec<u64>, _> =
                v.split(',').map(|s| s.trim().parse::<u64>()).collect();
            match parsed {
                Ok(seeds) if !seeds.is_empty() => cfg.eval_seeds = seeds,
                _ => problems.push(format!("bad value for `eval_seeds`: {v:?}")),
            }
        }
        if let Some(v) = entries.remove("absent_class_scores_one") {
            match parse_bool(&v) {
                Some(true) => cfg.absent_policy = AbsentClassPolicy::ScoreOne,
                Some(false) => cfg.absent_policy = AbsentClassPolicy::Exclude,
                None => problems.push(format!("bad value for `absent_class_scores_one`: {v:?}")),
            }
        }

        for key in entries.keys() {
            problems.push(format!("unknown key `{key}`"));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        cfg.unet.num_classes = cfg.task.num_classes;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

fn schedule_kind_name(kind: ScheduleKind) -> &'static str {
    match kind {
        ScheduleKind::Robust => "robust",
        ScheduleKind::Static => "static",
        ScheduleKind::IncrementalNoSampling => "incremental_no_sampling",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_text() {
        let cfg = RunConfig::desk_default();
        let text = cfg.to_file_string();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn unknown_keys_are_all_reported() {
        let mut text = RunConfig::desk_default().to_file_string();
        text.push_str("warmup_epohcs = 40\nbatchsize = 2\n");
        let err = RunConfig::parse(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("warmup_epohcs"), "{msg}");
        assert!(msg.contains("batchsize"), "{msg}");
    }

    #[test]
    fn bad_values_are_reported_with_key() {
        let text = "epochs = soon\n";
        let err = RunConfig::parse(text).unwrap_err();
        assert!(err.to_string().contains("epochs"));
    }

    #[test]
    fn validation_catches_inconsistency() {
        let text = "image_size = 60\n"; // not divisible by 8
        assert!(RunConfig::parse(text).is_err());
        let text = "num_classes = 9\n";
        assert!(RunConfig::parse(text).is_err());
    }

    #[test]
    fn partial_configs_inherit_defaults() {
        let cfg = RunConfig::parse("noise_std = 0.5\nepochs = 10\n").unwrap();
        assert_eq!(cfg.task.noise_std, 0.5);
        assert_eq!(cfg.train.epochs, 10);
        assert_eq!(cfg.train.batch_size, RunConfig::desk_default().train.batch_size);
    }
}
