mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ordcon::error::{Error, Result};
use ordcon::eval::{self, FeatureSpace, Metrics};
use ordcon::gradcheck;
use ordcon::synth::{self, write_atomic, Dataset};
use ordcon::train::{self, Checkpoint, Mode};
use serde_json::Value;

use config::RunConfig;

/// Order-enhanced contrastive learning on synthetic ordinal data.
///
/// Any config field can be overridden with a dotted flag, e.g.
/// `--train.lr 0.01` or `--data.n_samples=500`. Overrides apply after the
/// config file and the named flags.
#[derive(Parser)]
#[command(name = "ordcon", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (CSV plus JSON spec sidecar).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output CSV; defaults to `<out-dir>/data.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contrastive pretraining for age estimation.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, value_enum, default_value = "full")]
        ablation: Ablation,
    },
    /// Fit the age regression head on a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Identity training with the age branch behind gradient reversal.
    ///
    /// `--epochs N` also moves the reversal onset to epoch N / 2.
    TrainAifr {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, value_enum, default_value = "full")]
        ablation: Ablation,
    },
    /// Recompute metrics of a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        export_features: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "age")]
        space: Space,
    },
    /// Check every loss gradient against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Flip the sign of one case's analytic gradient (negative control).
        #[arg(long)]
        inject: Option<String>,
    },
    /// Write per-sample features of a checkpoint.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output CSV; defaults to `<out-dir>/features.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "age")]
        space: Space,
        #[arg(long, value_enum, default_value = "heldout")]
        split: Split,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for data, initialization and batching.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Dataset CSV; generated from the `data` section when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct RunFlags {
    #[arg(long)]
    epochs: Option<usize>,
    /// Also write features of the held-out split to this CSV.
    #[arg(long)]
    export_features: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    Full,
    /// Metric weight zero.
    OrderOnly,
    /// No order term.
    MetricOnly,
    /// Unweighted negatives in the metric term.
    Hard,
    /// End-to-end L1 regression without the contrastive stage.
    L1Only,
}

#[derive(Clone, Copy, ValueEnum)]
enum Space {
    Age,
    Id,
}

impl From<Space> for FeatureSpace {
    fn from(s: Space) -> Self {
        match s {
            Space::Age => FeatureSpace::Age,
            Space::Id => FeatureSpace::Id,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Heldout,
    All,
}

const CHECK_FAILED: u8 = 1;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Malformed { .. } => 3,
        Error::NumericalFailure { .. }
        | Error::NonFinite(_)
        | Error::NearZeroNorm { .. }
        | Error::DivisionByZero { .. }
        | Error::Domain { .. } => 4,
        Error::Incompatible(_) | Error::DimensionMismatch { .. } => 5,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let (argv, overrides) = match config::split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(argv);
    match run(cli.cmd, &overrides) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve(
    base: RunConfig,
    common: &Common,
    overrides: &[(String, String)],
    edit: impl FnOnce(&mut RunConfig),
) -> Result<RunConfig> {
    config::resolve(
        base,
        common.config.as_deref(),
        |c| {
            if let Some(s) = common.seed {
                c.data.warp_seed = s;
                c.data.sample_seed = s;
                c.train.seed = s;
            }
            if let Some(d) = &common.out_dir {
                c.paths.out_dir = d.clone();
            }
            if let Some(d) = &common.data {
                c.paths.data = Some(d.clone());
            }
            edit(c);
        },
        overrides,
    )
}

fn apply_ablation(cfg: &mut RunConfig, a: Ablation) {
    match a {
        Ablation::Full | Ablation::L1Only => {}
        Ablation::OrderOnly => cfg.train.loss.lambda_metric = 0.0,
        Ablation::MetricOnly => cfg.train.loss.use_order = false,
        Ablation::Hard => cfg.train.loss.soft_weights = false,
    }
}

/// Loads or generates the dataset and aligns the config with it.
fn load_data(cfg: &mut RunConfig) -> Result<Dataset> {
    let d = match &cfg.paths.data {
        Some(p) => synth::load_csv(p)?,
        None => {
            cfg.data.validate()?;
            synth::generate(&cfg.data)?
        }
    };
    if let Some(spec) = &d.spec {
        cfg.data = spec.clone();
    }
    if let Some(dim) = d.input_dim() {
        cfg.train.model.input_dim = dim;
    }
    Ok(d)
}

/// Training and held-out parts; a zero holdout evaluates on everything.
fn split(d: &Dataset, cfg: &RunConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = d.split(cfg.eval.holdout_fraction, seed)?;
    if test.is_empty() {
        return Ok((train.clone(), train));
    }
    Ok((train, test))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn echo(cfg: &RunConfig, path: &Path) -> Result<()> {
    write_atomic(path, cfg.to_json().as_bytes())
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg
        .paths
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig {
            field: "paths.checkpoint".into(),
            msg: "a checkpoint is required (--checkpoint)".into(),
        })?;
    Checkpoint::load(path)
}

fn report(m: &Metrics) {
    let mut v = serde_json::to_value(m).expect("metrics serialize");
    if let Value::Object(o) = &mut v {
        o.remove("loss_trace");
    }
    println!("{}", serde_json::to_string_pretty(&v).expect("metrics serialize"));
}

/// Writes checkpoint, metrics and loss trace of a finished run.
fn finish(cfg: &RunConfig, ckpt: &Checkpoint, test: &Dataset, space: FeatureSpace) -> Result<u8> {
    let dir = &cfg.paths.out_dir;
    ckpt.save(&dir.join("checkpoint.json"))?;
    let m = eval::evaluate(ckpt, test)?;
    eval::export_metrics(&m, &dir.join("metrics.json"))?;
    eval::export_trace(&ckpt.trace, &dir.join("trace.csv"))?;
    if let Some(p) = &cfg.paths.export_features {
        eval::export_features(ckpt, test, space, p)?;
    }
    report(&m);
    Ok(0)
}

fn prepare(mut cfg: RunConfig) -> Result<(RunConfig, Dataset)> {
    let d = load_data(&mut cfg)?;
    cfg.validate()?;
    create_dir(&cfg.paths.out_dir)?;
    echo(&cfg, &cfg.paths.out_dir.join("config.json"))?;
    Ok((cfg, d))
}

fn threads() -> Result<usize> {
    match std::env::var("ORDCON_THREADS") {
        Ok(s) => s.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or(Error::InvalidConfig {
            field: "ORDCON_THREADS".into(),
            msg: format!("`{s}` is not a positive integer"),
        }),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn run(cmd: Cmd, overrides: &[(String, String)]) -> Result<u8> {
    match cmd {
        Cmd::GenData { common, out } => {
            let mut cfg = resolve(RunConfig::default(), &common, overrides, |_| {})?;
            cfg.data.validate()?;
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.join("data.csv"));
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            let d = synth::generate(&cfg.data)?;
            synth::save_csv(&d, &out)?;
            cfg.paths.data = Some(out.clone());
            echo(&cfg, &out.with_extension("config.json"))?;
            println!("wrote {} samples to {}", d.len(), out.display());
            Ok(0)
        }
        Cmd::Pretrain { common, run, ablation } => {
            let cfg = resolve(RunConfig::default(), &common, overrides, |c| {
                if let Some(n) = run.epochs {
                    c.train.epochs_pretrain = n;
                }
                if let Some(p) = run.export_features {
                    c.paths.export_features = Some(p);
                }
                apply_ablation(c, ablation);
            })?;
            let (cfg, d) = prepare(cfg)?;
            let (train_set, test) = split(&d, &cfg, cfg.train.seed)?;
            let ckpt = if ablation == Ablation::L1Only {
                train::train_l1_baseline(&train_set, &cfg.train)?
            } else {
                train::pretrain_age(&train_set, &cfg.train)?
            };
            finish(&cfg, &ckpt, &test, FeatureSpace::Age)
        }
        Cmd::Finetune { common, run, checkpoint } => {
            let cfg = resolve(RunConfig::default(), &common, overrides, |c| {
                if let Some(n) = run.epochs {
                    c.train.epochs_finetune = n;
                }
                if let Some(p) = run.export_features {
                    c.paths.export_features = Some(p);
                }
                if let Some(p) = checkpoint {
                    c.paths.checkpoint = Some(p);
                }
            })?;
            let (cfg, d) = prepare(cfg)?;
            let ckpt = load_checkpoint(&cfg)?;
            ckpt.check_compatible(&d)?;
            let (train_set, test) = split(&d, &cfg, ckpt.config.seed)?;
            let (out, space) = match ckpt.config.mode {
                Mode::Age => (train::finetune_age(&ckpt, &train_set, &cfg.train)?, FeatureSpace::Age),
                Mode::Aifr => (
                    train::finetune_identity(&ckpt, &train_set, &cfg.train)?,
                    FeatureSpace::Id,
                ),
            };
            finish(&cfg, &out, &test, space)
        }
        Cmd::TrainAifr { common, run, ablation } => {
            if ablation == Ablation::L1Only {
                return Err(Error::InvalidConfig {
                    field: "ablation".into(),
                    msg: "l1-only applies to age estimation only".into(),
                });
            }
            let cfg = resolve(RunConfig::aifr(), &common, overrides, |c| {
                c.train.mode = Mode::Aifr;
                if let Some(n) = run.epochs {
                    c.train.epochs_pretrain = n;
                    c.train.grl_start_epoch = n / 2;
                }
                if let Some(p) = run.export_features {
                    c.paths.export_features = Some(p);
                }
                apply_ablation(c, ablation);
            })?;
            let (cfg, d) = prepare(cfg)?;
            let (train_set, test) = split(&d, &cfg, cfg.train.seed)?;
            let mut ckpt = train::train_aifr(&train_set, &cfg.train)?;
            if cfg.train.epochs_finetune > 0 {
                ckpt = train::finetune_identity(&ckpt, &train_set, &cfg.train)?;
            }
            finish(&cfg, &ckpt, &test, FeatureSpace::Id)
        }
        Cmd::Eval {
            common,
            checkpoint,
            export_features,
            space,
        } => {
            let mut cfg = resolve(RunConfig::default(), &common, overrides, |c| {
                if let Some(p) = checkpoint {
                    c.paths.checkpoint = Some(p);
                }
                if let Some(p) = export_features {
                    c.paths.export_features = Some(p);
                }
            })?;
            let ckpt = load_checkpoint(&cfg)?;
            let d = load_data(&mut cfg)?;
            cfg.validate()?;
            create_dir(&cfg.paths.out_dir)?;
            echo(&cfg, &cfg.paths.out_dir.join("eval_config.json"))?;
            let (_, test) = split(&d, &cfg, ckpt.config.seed)?;
            let m = eval::evaluate(&ckpt, &test)?;
            eval::export_metrics(&m, &cfg.paths.out_dir.join("eval_metrics.json"))?;
            if let Some(p) = &cfg.paths.export_features {
                eval::export_features(&ckpt, &test, space.into(), p)?;
            }
            report(&m);
            Ok(0)
        }
        Cmd::Gradcheck { seeds, inject } => {
            let reports = gradcheck::run_suite(seeds, threads()?, inject.as_deref())?;
            println!("{:<20} {:>14} {:>6}  status", "loss", "max_rel_err", "seed");
            for r in &reports {
                let status = if r.passed { "ok" } else { "FAIL" };
                println!("{:<20} {:>14.3e} {:>6}  {status}", r.name, r.max_rel_err, r.worst_seed);
            }
            let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
            for r in &failed {
                eprintln!(
                    "gradient check failed: {} (seed {}, rel err {:.3e})",
                    r.name, r.worst_seed, r.max_rel_err
                );
            }
            Ok(if failed.is_empty() { 0 } else { CHECK_FAILED })
        }
        Cmd::Export {
            common,
            checkpoint,
            out,
            space,
            split: which,
        } => {
            let mut cfg = resolve(RunConfig::default(), &common, overrides, |c| {
                if let Some(p) = checkpoint {
                    c.paths.checkpoint = Some(p);
                }
                if let Some(p) = out {
                    c.paths.export_features = Some(p);
                }
            })?;
            let ckpt = load_checkpoint(&cfg)?;
            let d = load_data(&mut cfg)?;
            cfg.validate()?;
            let out = cfg
                .paths
                .export_features
                .clone()
                .unwrap_or_else(|| cfg.paths.out_dir.join("features.csv"));
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            echo(&cfg, &out.with_extension("config.json"))?;
            let rows = match which {
                Split::All => d,
                Split::Heldout => split(&d, &cfg, ckpt.config.seed)?.1,
            };
            eval::export_features(&ckpt, &rows, space.into(), &out)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
            Ok(0)
        }
    }
}
