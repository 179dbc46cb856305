use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualbranch::config::RunConfig;
use dualbranch::data::synth::label_counts;
use dualbranch::data::{synth_generate, ClassMix, FoldAssignment, SynthParams};
use dualbranch::dataset::Dataset;
use dualbranch::model::Task;
use dualbranch::pipeline::{self, ABLATION_MODES};
use dualbranch::{Error, Result};

#[derive(Parser)]
#[command(name = "dualbranch", version, about = "Weakly supervised dual-branch region model")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-lesion dataset.
    Synth(SynthArgs),
    /// Extract region features with the built-in featurizer.
    Extract(ExtractArgs),
    /// Cross-validated training.
    Train(TrainArgs),
    /// Evaluate a trained run on one task.
    Eval(EvalArgs),
    /// Overlay the top-scoring regions of one image.
    Localize(LocalizeArgs),
    /// Train and evaluate the model against its baselines.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 800)]
    n: usize,
    /// Benign:malignant:normal ratios.
    #[arg(long, default_value = "3:3:4")]
    mix: String,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
}

/// Configuration file plus `key=value` overrides.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    run: PathBuf,
    /// Continue an existing run up to the configured epoch count.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long)]
    breast_level: bool,
    /// Dataset override (default: the run's).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Output directory (default: inside the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    image: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
    /// Number of consecutive seeds starting at the configured seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

fn build_config(args: &ConfigArgs, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for s in &args.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got `{s}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn synth(a: SynthArgs) -> Result<()> {
    let params = SynthParams {
        width: a.width,
        height: a.height,
        mix: ClassMix::parse_bmn(&a.mix)?,
        ..SynthParams::default()
    };
    let mut ds = synth_generate(a.seed, a.n, &params)?;
    ds.write(&a.out)?;
    let [normal, m, b, both] = label_counts(&ds.manifest);
    println!(
        "{} images: normal {normal}, malignant {m}, benign {b}, malignant+benign {both}",
        ds.manifest.len()
    );
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<()> {
    let cfg = build_config(
        &a.config,
        &[
            ("window", a.window.map(|v| v.to_string())),
            ("stride", a.stride.map(|v| v.to_string())),
        ],
    )?;
    let (store, counts) = pipeline::extract_features(&a.data, &cfg)?;
    store.write(&a.out)?;
    let empty = counts.iter().filter(|&&c| c == 0).count();
    if empty > 0 {
        log::warn!("{empty} images yield no regions at window {}", cfg.geometry.window);
    }
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for c in counts {
        *histogram.entry(c).or_default() += 1;
    }
    println!("{} feature vectors of dimension {}", store.len(), store.dim());
    println!("regions,images");
    for (regions, images) in histogram {
        println!("{regions},{images}");
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = build_config(
        &a.config,
        &[
            ("data", path_flag(&a.data)),
            ("features", path_flag(&a.features)),
            ("mode", a.mode.clone()),
            ("folds", a.folds.map(|v| v.to_string())),
            ("seed", a.seed.map(|v| v.to_string())),
            ("epochs", a.epochs.map(|v| v.to_string())),
        ],
    )?;
    cfg.run = Some(a.run.clone());
    let dataset = pipeline::load_dataset(&cfg)?;
    let bank = pipeline::build_bank(&dataset, &cfg)?;
    let run = if a.resume {
        pipeline::resume_run(&dataset, &cfg, bank.as_ref(), &a.run)?
    } else {
        pipeline::train_run(&dataset, &cfg, bank.as_ref(), Some(&a.run))?
    };
    println!("fold hash {}", run.folds.digest());
    for o in &run.outcomes {
        println!(
            "fold {}: {} train / {} validation / {} test images, epoch {}, best epoch {}",
            o.split.fold,
            o.split.train.len(),
            o.split.validation.len(),
            o.split.test.len(),
            o.state.epoch,
            o.state.best_epoch
        );
    }
    Ok(())
}

/// Run configuration with dataset overrides, loaded without pixels.
fn run_dataset(run: &Path, data: &Option<PathBuf>, features: &Option<PathBuf>) -> Result<(RunConfig, Dataset, FoldAssignment)> {
    let (mut cfg, folds) = pipeline::load_run(run)?;
    if let Some(d) = data {
        cfg.data = Some(d.clone());
    }
    if let Some(f) = features {
        cfg.features = Some(f.clone());
    }
    let mut load_cfg = cfg.clone();
    load_cfg.train.augment = false;
    let dataset = pipeline::load_dataset(&load_cfg)?;
    Ok((cfg, dataset, folds))
}

fn eval(a: EvalArgs) -> Result<()> {
    let task: Task = a.task.parse()?;
    let (_, dataset, folds) = run_dataset(&a.run, &a.data, &a.features)?;
    let models = pipeline::load_fold_models(&a.run, &dataset, &folds)?;
    let ev = dualbranch::eval::evaluate_run(&dataset, &models, task, a.breast_level)?;
    let out = a
        .out
        .unwrap_or_else(|| a.run.join(pipeline::eval_dir_name(task, a.breast_level)));
    pipeline::write_evaluation(&ev, &out)?;
    let r = &ev.report;
    println!("task {} ({} mode{})", task.as_str(), r.mode, if a.breast_level { ", breast level" } else { "" });
    println!("AUROC {:.4} ± {:.4}", r.auroc.mean, r.auroc.std);
    println!("pAUCR {:.4} ± {:.4}", r.pauc_ratio.mean, r.pauc_ratio.std);
    println!("specificity@0.85 {:.4} ± {:.4}", r.op_specificity.mean, r.op_specificity.std);
    println!(
        "FROC {} recall {:.4} at <= {} FP/image ({} images)",
        r.froc.class, r.froc.recall, r.froc.max_fp_per_image, r.froc.n_evaluated
    );
    println!("written to {}", out.display());
    Ok(())
}

fn localize(a: LocalizeArgs) -> Result<()> {
    let (cfg, dataset, folds) = run_dataset(&a.run, &a.data, &a.features)?;
    let loc = pipeline::localize(&a.run, &cfg, &dataset, &folds, &a.image)?;
    loc.overlay.write_ppm(&a.out)?;
    let csv = a.out.with_extension("csv");
    std::fs::write(&csv, &loc.csv).map_err(|e| Error::Data(format!("{}: {e}", csv.display())))?;
    println!("image {} scored by fold {}; overlay {}, scores {}", a.image, loc.fold, a.out.display(), csv.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = build_config(
        &a.config,
        &[
            ("data", path_flag(&a.data)),
            ("features", path_flag(&a.features)),
            ("folds", a.folds.map(|v| v.to_string())),
        ],
    )?;
    if a.seeds == 0 {
        return Err(Error::InvalidArgument("--seeds must be at least 1".into()));
    }
    let dataset = pipeline::load_dataset(&cfg)?;
    let bank = pipeline::build_bank(&dataset, &cfg)?;
    let seeds: Vec<u64> = (0..a.seeds).map(|s| cfg.train.seed + s).collect();
    let table = pipeline::ablate(&dataset, &cfg, bank.as_ref(), &ABLATION_MODES, &seeds, Some(&a.out))?;
    let write = |name: &str, text: String| {
        let path = a.out.join(name);
        std::fs::write(&path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    };
    write("ablation.csv", table.to_csv())?;
    write("ablation_seeds.csv", table.seeds_csv())?;
    for seed in table.seeds() {
        let digest = &table.cell(seed, ABLATION_MODES[0]).expect("cell").fold_digest;
        println!("seed {seed}: fold hash {digest}");
    }
    print!("{}", table.to_csv());
    for task in [Task::MbVsN, Task::MVsBn] {
        println!(
            "{}: full mode at or above both baselines in {} of {} seeds",
            task.as_str(),
            table.wins(ABLATION_MODES[0], task),
            seeds.len()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Extract(a) => extract(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Localize(a) => localize(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
