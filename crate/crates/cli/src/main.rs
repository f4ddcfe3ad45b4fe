use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rotens_cli::config::{ExperimentConfig, DATA_DIR_ENV};
use rotens_cli::{analyze, generate, grid, report, selftest, surrogate, CliError, Result};

#[derive(Parser)]
#[command(
    name = "rotens",
    version,
    about = "Rotation ensembles for CNNs: datasets, training grids and analyses"
)]
struct Args {
    /// Experiment config (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replaces the config seed and every seed derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Grid cells trained at once.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// No per-epoch progress on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write transformed train/test splits with per-image parameter sidecars.
    Generate,
    /// Train every cell of the config's grid, one run directory per cell.
    Train,
    /// Accuracy of trained runs on the test set turned by 0/90/180/270 degrees.
    #[command(name = "analyze-c4")]
    AnalyzeC4 { dir: Option<PathBuf> },
    /// Accuracy tables over a grid directory.
    Report { dir: Option<PathBuf> },
    /// Invariance, equivariance, gradient and ensemble checks.
    Selftest,
    /// Build the mnist-rot stand-in from MNIST under the data directory.
    #[command(name = "make-mnist-rot")]
    MakeMnistRot {
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

fn load_config(args: &Args) -> Result<ExperimentConfig> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("this command needs --config PATH".into()))?;
    let cfg = ExperimentConfig::load(path)?;
    Ok(match args.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn out_dir(args: &Args, cfg: Option<&ExperimentConfig>) -> Result<PathBuf> {
    args.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.out_dir.clone()))
        .ok_or_else(|| {
            CliError::Config("no output directory: pass --out DIR or set out_dir".into())
        })
}

fn target_dir(args: &Args, dir: &Option<PathBuf>) -> Result<PathBuf> {
    match dir {
        Some(d) => Ok(d.clone()),
        None => {
            let cfg = args
                .config
                .as_ref()
                .map(|_| load_config(args))
                .transpose()?;
            out_dir(args, cfg.as_ref())
        }
    }
}

fn run(args: &Args) -> Result<bool> {
    match &args.command {
        Command::Generate => {
            let cfg = load_config(args)?;
            let g = generate::run_generate(&cfg, &out_dir(args, Some(&cfg))?)?;
            println!(
                "wrote {} train and {} test images to {}",
                g.train,
                g.test,
                g.dir.display()
            );
        }
        Command::Train => {
            let cfg = load_config(args)?;
            let out = out_dir(args, Some(&cfg))?;
            for o in grid::run_train(&cfg, &out, args.jobs, !args.quiet)? {
                println!(
                    "{:<12} seed {:<6} accuracy {:.4}  {}",
                    o.summary.label,
                    o.summary.seed,
                    o.summary.test_accuracy,
                    o.dir.display()
                );
            }
        }
        Command::AnalyzeC4 { dir } => {
            let (rows, path) = analyze::analyze_c4(&target_dir(args, dir)?)?;
            for r in &rows {
                println!(
                    "{:<12} seed {:<6} {:>3} deg  {:.4}",
                    r.label, r.seed, r.angle, r.accuracy
                );
            }
            println!("wrote {}", path.display());
        }
        Command::Report { dir } => {
            let (_, text) = report::run_report(&target_dir(args, dir)?)?;
            print!("{text}");
        }
        Command::Selftest => {
            let checks = selftest::run_all(args.seed.unwrap_or(0))?;
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            return Ok(failed == 0);
        }
        Command::MakeMnistRot { data_dir } => {
            let dir = match data_dir {
                Some(d) => d.clone(),
                None => std::env::var_os(DATA_DIR_ENV)
                    .map(PathBuf::from)
                    .ok_or_else(|| {
                        CliError::Config(format!("pass --data-dir or set {DATA_DIR_ENV}"))
                    })?,
            };
            let (train, test) = surrogate::make_mnist_rot(Path::new(&dir), args.seed.unwrap_or(0))?;
            println!("wrote {} and {}", train.display(), test.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
