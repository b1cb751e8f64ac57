//! Command-line entry point: data generation, training, evaluation
//! sweeps, memory reports, gradient checking and the schedule ablation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use recyclenet::config::RunConfig;
use recyclenet::error::{Error, Result};
use recyclenet::evaluate::{self, figures, AblationSetup};
use recyclenet::model::{load_checkpoint, UNetModel};
use recyclenet::schedule::SchedulePolicy;
use recyclenet::tasks::{self, LabeledSample};
use recyclenet::trainer;

#[derive(Parser)]
#[command(name = "recyclenet", about = "Latent feature recycling laboratory", version)]
struct Cli {
    /// Run configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Checkpoint to evaluate (eval-sweep, memory-report).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Bound on worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Overrides the config's train_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and cache the dataset splits.
    GenData,
    /// Train a model per the configuration.
    Train,
    /// Per-cycle Dice sweep of a checkpoint.
    EvalSweep,
    /// Retained-activation accounting per grad mode and cycle count.
    MemoryReport,
    /// Finite-difference checks for every op and the full network loss.
    Gradcheck,
    /// Train-and-sweep the schedule variants against the robust policy.
    Ablation,
}

fn main() {
    let cli = Cli::parse();
    if cli.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: &Cli) -> Result<()> {
    let started = Instant::now();
    let out = cli
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out DIR is required".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;

    let mut cfg = load_config(cli)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }

    let name = match &cli.command {
        Command::GenData => "gen-data",
        Command::Train => "train",
        Command::EvalSweep => "eval-sweep",
        Command::MemoryReport => "memory-report",
        Command::Gradcheck => "gradcheck",
        Command::Ablation => "ablation",
    };

    let mut manifest_extra = Vec::new();
    match &cli.command {
        Command::GenData => gen_data(&cfg, &out)?,
        Command::Train => manifest_extra = train(&cfg, &out)?,
        Command::EvalSweep => eval_sweep_cmd(cli, &cfg, &out)?,
        Command::MemoryReport => memory_report_cmd(cli, &cfg, &out)?,
        Command::Gradcheck => gradcheck_cmd(&out)?,
        Command::Ablation => ablation_cmd(&cfg, &out)?,
    }

    write_manifest(&cfg, &out, name, started.elapsed().as_secs_f64(), &manifest_extra)?;
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        None => Ok(RunConfig::desk_default()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            RunConfig::parse(&text)
        }
    }
}

/// Writes bytes to a temp file in the target directory, then renames into
/// place so partial outputs never shadow good ones.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn write_manifest(
    cfg: &RunConfig,
    out: &Path,
    command: &str,
    seconds: f64,
    extra: &[(String, String)],
) -> Result<()> {
    let mut m = String::new();
    m.push_str(&format!("command = {command}\n"));
    m.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
    m.push_str(&format!("train_seed = {}\n", cfg.train.seed));
    m.push_str(&format!("wall_time_s = {seconds:.3}\n"));
    for (k, v) in extra {
        m.push_str(&format!("{k} = {v}\n"));
    }
    m.push_str("\n# --- config echo ---\n");
    m.push_str(&cfg.to_file_string());
    write_atomic(&out.join("manifest.txt"), m.as_bytes())
}

fn split_ranges(cfg: &RunConfig) -> [(&'static str, usize, usize); 3] {
    [
        ("train", 0, cfg.train_samples),
        ("val", cfg.train_samples, cfg.val_samples),
        ("test", cfg.train_samples + cfg.val_samples, cfg.test_samples),
    ]
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut manifest = String::from("split,offset,count,file\n");
    for (split, offset, count) in split_ranges(cfg) {
        let samples = tasks::generate_range(&cfg.task, offset, count)?;
        let file = out.join(format!("{split}.rcyd"));
        let tmp = out.join(format!(".{split}.rcyd.tmp"));
        tasks::save_split(&cfg.task, split, offset, &samples, &tmp)?;
        std::fs::rename(&tmp, &file).map_err(|e| Error::io(file.display().to_string(), e))?;
        manifest.push_str(&format!("{split},{offset},{count},{split}.rcyd\n"));
        println!("wrote {} ({count} samples)", file.display());
    }
    write_atomic(&out.join("dataset-manifest.csv"), manifest.as_bytes())
}

/// Loads a split from the config's data_dir, or generates it in memory.
fn obtain_split(cfg: &RunConfig, split: &str) -> Result<Vec<LabeledSample>> {
    let (offset, count) = match split {
        "train" => (0, cfg.train_samples),
        "val" => (cfg.train_samples, cfg.val_samples),
        _ => (cfg.train_samples + cfg.val_samples, cfg.test_samples),
    };
    match &cfg.data_dir {
        Some(dir) => tasks::load_split(&dir.join(format!("{split}.rcyd")), &cfg.task),
        None => tasks::generate_range(&cfg.task, offset, count),
    }
}

fn train(cfg: &RunConfig, out: &Path) -> Result<Vec<(String, String)>> {
    let data = obtain_split(cfg, "train")?;
    let mut model = UNetModel::<f32>::new(cfg.unet.clone(), cfg.train.seed)?;
    let interval = cfg.checkpoint_interval;
    let ckpt_cfg = cfg.train.clone();
    let out_dir = out.to_path_buf();
    let logs = trainer::train_with_hook(&mut model, &data, &cfg.train, &mut |m, log| {
        if interval > 0 && (log.epoch + 1) % interval == 0 && log.epoch + 1 < ckpt_cfg.epochs {
            let path = out_dir.join(format!("checkpoint-epoch{:05}.rcyn", log.epoch + 1));
            trainer::save_run_checkpoint(m, &ckpt_cfg, log.epoch + 1, &path)?;
        }
        Ok(())
    })?;

    let final_path = out.join("checkpoint.rcyn");
    let tmp = out.join(".checkpoint.rcyn.tmp");
    trainer::save_run_checkpoint(&model, &cfg.train, cfg.train.epochs, &tmp)?;
    std::fs::rename(&tmp, &final_path)
        .map_err(|e| Error::io(final_path.display().to_string(), e))?;

    write_atomic(&out.join("epochs.csv"), trainer::epoch_log_csv(&logs).as_bytes())?;

    let mut extra = vec![(
        "final_mean_loss".to_string(),
        logs.last().map(|l| l.mean_loss.to_string()).unwrap_or_default(),
    )];
    if let Some(ratio) = trainer::epoch_time_ratio(&logs, &cfg.train.schedule) {
        println!("epoch-time ratio (cap phase / warm-up): {ratio:.3}");
        extra.push(("epoch_time_ratio".to_string(), format!("{ratio:.4}")));
    }
    println!(
        "trained {} epochs; final loss {:.4}; checkpoint at {}",
        logs.len(),
        logs.last().map(|l| l.mean_loss).unwrap_or(f64::NAN),
        final_path.display()
    );
    Ok(extra)
}

fn eval_sweep_cmd(cli: &Cli, cfg: &RunConfig, out: &Path) -> Result<()> {
    let ckpt = cli
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("--checkpoint PATH is required for eval-sweep".into()))?;
    let (model, _meta) = load_checkpoint(&ckpt, &cfg.unet)?;
    let data = obtain_split(cfg, "val")?;
    let report = evaluate::eval_sweep(&model, &data, cfg.max_inference_cycles, cfg.absent_policy)?;
    let csv = evaluate::sweep_csv(&report);
    write_atomic(&out.join("sweep.csv"), csv.as_bytes())?;
    let svg = figures::convergence_figure_from_csv(&csv)?;
    write_atomic(&out.join("convergence.svg"), svg.as_bytes())?;
    for (i, d) in report.mean_foreground.iter().enumerate() {
        println!("cycles {:>2}: mean foreground Dice {d:.4}", i + 1);
    }
    Ok(())
}

fn memory_report_cmd(cli: &Cli, cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = match &cli.checkpoint {
        Some(ckpt) => load_checkpoint(ckpt, &cfg.unet)?.0,
        None => UNetModel::<f32>::new(cfg.unet.clone(), cfg.train.seed)?,
    };
    let data = obtain_split(cfg, "val")?;
    let batch: Vec<LabeledSample> = data
        .into_iter()
        .take(cfg.train.batch_size)
        .collect();
    let (x, target) = trainer::assemble_batch(&batch);
    let report = evaluate::memory_report(&model, cfg.memory_max_cycles, &x, &target)?;
    let csv = evaluate::memory_csv(&report);
    write_atomic(&out.join("memory.csv"), csv.as_bytes())?;
    let svg = figures::memory_figure_from_csv(&csv)?;
    write_atomic(&out.join("memory.svg"), svg.as_bytes())?;
    for (mode, n, count, bytes) in &report.rows {
        println!(
            "{:<17} n={n}: {count} retained buffers, {:.2} MiB",
            mode.name(),
            *bytes as f64 / (1024.0 * 1024.0)
        );
    }
    Ok(())
}

fn gradcheck_cmd(out: &Path) -> Result<()> {
    let mut reports = recyclenet::diagnostics::op_gradcheck_suite(24);
    reports.push(recyclenet::diagnostics::unet_loss_gradcheck(50)?);
    let mut text = String::new();
    let mut all_pass = true;
    for r in &reports {
        println!("{r}");
        text.push_str(&format!("{r}\n"));
        all_pass &= r.passed;
    }
    write_atomic(&out.join("gradcheck.txt"), text.as_bytes())?;
    if !all_pass {
        return Err(Error::Graph("gradient check failed".into()));
    }
    Ok(())
}

fn ablation_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let train_data = obtain_split(cfg, "train")?;
    let eval_data = obtain_split(cfg, "val")?;
    let setup = AblationSetup {
        unet: cfg.unet.clone(),
        base_train: cfg.train.clone(),
        train_data: &train_data,
        eval_data: &eval_data,
        max_inference_cycles: cfg.max_inference_cycles,
        seeds: cfg.eval_seeds.clone(),
        absent_policy: cfg.absent_policy,
    };
    let sched = cfg.train.schedule;
    let policies = [
        SchedulePolicy::robust(
            sched.warmup_epochs,
            sched.increment_interval,
            sched.max_cycles_cap,
        ),
        SchedulePolicy::fixed(1),
        SchedulePolicy::fixed(2),
        SchedulePolicy::incremental_no_sampling(
            sched.warmup_epochs,
            sched.increment_interval,
            sched.max_cycles_cap,
        ),
    ];
    let runs = evaluate::ablation_run(&policies, &setup)?;
    let csv = evaluate::ablation_csv(&runs, &setup.seeds);
    write_atomic(&out.join("ablation.csv"), csv.as_bytes())?;
    let svg = figures::ablation_figure_from_csv(&csv, Some("static(1)"))?;
    write_atomic(&out.join("ablation.svg"), svg.as_bytes())?;
    for pr in &runs {
        let curve: Vec<String> = pr.mean_curve().iter().map(|d| format!("{d:.4}")).collect();
        println!("{:<40} [{}]", pr.name, curve.join(" "));
    }
    Ok(())
}
