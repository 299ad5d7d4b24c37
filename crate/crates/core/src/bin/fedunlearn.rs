use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use fedunlearn::config::{RunConfig, Variant};
use fedunlearn::error::{Error, Result};
use fedunlearn::numkit::ParamVector;
use fedunlearn::pipeline::{run_pipeline, Experiment, StageInputs, StageSelection};
use fedunlearn::rundir::{self, read_model, write_run_dir, MODEL_PRE};
use fedunlearn::sweep::{format_sweep_csv, run_sweep};

#[derive(Parser)]
#[command(name = "fedunlearn", version, about = "Federated unlearning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    All,
    Pretrain,
    Unlearn,
    Posttrain,
}

impl From<StageArg> for StageSelection {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::All => StageSelection::All,
            StageArg::Pretrain => StageSelection::Pretrain,
            StageArg::Unlearn => StageSelection::Unlearn,
            StageArg::Posttrain => StageSelection::Posttrain,
        }
    }
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (flat TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config ablation (M1..M8, or `none`).
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain, unlearn and post-train, writing a run directory.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Starting model: ω⁰ for `unlearn`, the unlearned model for
        /// `posttrain` (whose anchor is the `model_pre.bin` beside it).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value = "fedunlearn-run")]
        out: PathBuf,
    },
    /// Runs the config's sweep axis and writes an aggregated CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "fedunlearn-sweep")]
        out: PathBuf,
    },
    /// Evaluates a saved model on the config's data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Prints a model file's header and norms.
    Inspect { model: PathBuf },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(v) = &common.ablation {
        cfg.ablation = v.parse::<Variant>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn anchor_beside(init: &Path) -> PathBuf {
    init.parent().unwrap_or(Path::new(".")).join(MODEL_PRE)
}

fn cmd_run(common: &Common, stage: StageArg, init: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let stage: StageSelection = stage.into();
    let mut inputs = StageInputs::default();
    if let Some(path) = init {
        inputs.init = Some(read_model(path)?);
        if stage == StageSelection::Posttrain {
            inputs.anchor = Some(read_model(&anchor_beside(path))?);
        }
    } else if matches!(stage, StageSelection::Unlearn | StageSelection::Posttrain) {
        return Err(Error::Config("--init is required for this stage".into()));
    }
    let start = Instant::now();
    let exp = Experiment::build(&cfg)?;
    let run = run_pipeline(&exp, stage, inputs);
    let wall = start.elapsed().as_secs_f64();
    write_run_dir(out, &cfg.to_resolved(), &run, wall)?;
    if let Some(e) = run.error {
        return Err(e);
    }
    println!("{}", rundir::summary_line(&run, wall));
    Ok(())
}

fn cmd_sweep(common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let rows = run_sweep(&cfg)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.resolved"), cfg.to_resolved())?;
    let csv = format_sweep_csv(&rows);
    std::fs::write(out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_eval(common: &Common, model: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let exp = Experiment::build(&cfg)?;
    let w = read_model(model)?;
    if w.len() != exp.spec.param_count() {
        return Err(Error::DimensionMismatch {
            expected: exp.spec.param_count(),
            actual: w.len(),
        });
    }
    let m = exp.metrics(&w)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "asr={} racc={:.4}+-{:.4} mia_auc={}",
        fmt(m.asr),
        m.racc_mean,
        m.racc_std,
        fmt(m.mia_auc)
    );
    Ok(())
}

fn cmd_inspect(model: &Path) -> Result<()> {
    let w: ParamVector = read_model(model)?;
    let max_abs = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("magic=FUPM version={} n={}", rundir::MODEL_VERSION, w.len());
    println!("l2_norm={} max_abs={max_abs} finite={}", w.norm(), w.is_finite());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            common,
            stage,
            init,
            out,
        } => cmd_run(common, *stage, init.as_deref(), out),
        Command::Sweep { common, out } => cmd_sweep(common, out),
        Command::Eval { common, model } => cmd_eval(common, model),
        Command::Inspect { model } => cmd_inspect(model),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
