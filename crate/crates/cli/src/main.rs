use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pcn::fusion::CalibKind;
use pcn_cli::{commands, ExperimentConfig, Failure, RunDir, EXIT_NUMERIC};

#[derive(Parser, Debug)]
#[command(name = "pcn", version, about = "Generalized few-shot segmentation with prediction calibration")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root for run directories; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and print its SHA-256.
    GenData,
    /// Train the backbone and base classifier.
    TrainBase,
    /// Meta-train calibrators on fake-novel episodes.
    MetaTrain {
        /// Base checkpoint from `train-base`.
        #[arg(long)]
        base: PathBuf,
        /// Calibrators to train on a shared episode stream (default: the
        /// config's calibration variant).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Evaluate fusion and calibration modes on paired test tasks.
    Eval {
        #[arg(long)]
        base: PathBuf,
        /// Calibrator checkpoints from `meta-train`.
        #[arg(long = "calib")]
        calibs: Vec<PathBuf>,
        /// Modes: plain, npf, nsf, pcn, selfattn, linear, linear_nores,
        /// oracle, background; a calibrator may be pinned as `pcn@layer3`.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
        /// Export heatmaps of the first task's queries.
        #[arg(long)]
        heatmaps: bool,
        /// Sum overlaps over all tasks before dividing.
        #[arg(long)]
        global_accumulate: bool,
    },
    /// Meta-train and evaluate the calibrator once per feature tap.
    AblateFeatures {
        #[arg(long)]
        base: PathBuf,
    },
    /// Compare tape gradients against central differences.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainBase => "train-base",
            Command::MetaTrain { .. } => "meta-train",
            Command::Eval { .. } => "eval",
            Command::AblateFeatures { .. } => "ablate-features",
            Command::GradCheck { .. } => "grad-check",
        }
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Command::Eval { heatmaps, global_accumulate, .. } = &cli.command {
        cfg.evaluation.heatmaps |= heatmaps;
        cfg.evaluation.global_accumulate |= global_accumulate;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::config("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(format!("cannot size thread pool: {e}")))?;
    }
    let cfg = resolve(&cli)?;
    let run = RunDir::create(&cfg.out_dir, cli.command.name(), &cfg)?;
    println!("run directory: {}", run.path.display());
    match &cli.command {
        Command::GenData => {
            let out = commands::gen_data(&cfg, &run)?;
            println!("dataset: {}", out.dir.display());
            println!("sha256: {}", out.sha256);
        }
        Command::TrainBase => {
            let out = commands::train_base(&cfg, &run)?;
            let first = out.losses.first().copied().unwrap_or(f64::NAN);
            let last = out.losses.last().copied().unwrap_or(f64::NAN);
            println!("loss {first:.4} -> {last:.4}, train pixel accuracy {:.4}", out.train_pixel_accuracy);
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Command::MetaTrain { base, variants } => {
            let kinds: Vec<CalibKind> = variants.iter().map(|v| v.parse()).collect::<Result<_, _>>()?;
            for t in commands::meta_train(&cfg, &run, base, &kinds)? {
                let n = t.losses.len();
                let k = (n / 10).max(1);
                let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
                println!(
                    "{} [{}]: loss first 10% {:.4}, last 10% {:.4}; {}",
                    t.kind,
                    t.tap.name(),
                    mean(&t.losses[..k]),
                    mean(&t.losses[n - k..]),
                    t.checkpoint.display()
                );
            }
        }
        Command::Eval { base, calibs, modes, .. } => {
            let out = commands::eval(&cfg, &run, base, calibs, modes)?;
            print!("{}", out.table);
        }
        Command::AblateFeatures { base } => {
            let out = commands::ablate_features(&cfg, &run, base)?;
            print!("{}", out.table);
        }
        Command::GradCheck { seeds, tolerance } => {
            let out = commands::grad_check(&cfg, &run, *seeds, *tolerance)?;
            for (name, r) in &out.cases {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{name:<28} max rel {:.2e}  max abs {:.2e}  {:>5} entries  {verdict}", r.max_rel_error, r.max_abs_error, r.checked);
            }
            if !out.passed() {
                return Err(Failure { code: EXIT_NUMERIC, msg: "gradient check exceeded tolerance".into() });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code as u8)
        }
    }
}
