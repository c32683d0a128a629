use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pucl_core::config::ExperimentConfig;
use pucl_core::envs::Bounds;
use pucl_core::experiment::{evaluate, train_run};
use pucl_core::io::{load_constraint, load_demos, load_policy, save_demos, write_grid};
use pucl_core::pipeline::generate_expert;
use pucl_core::{Error, Result};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "pucl", version, about = "Positive-unlabeled constraint learning from demonstrations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an expert against the true constraint and write feasible demonstrations.
    GenExpert {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides `expert_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Demonstration file; defaults to `demo_file` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the learning loop, writing metrics, statistics, memory and snapshots.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Demonstration file; defaults to `demo_file` from the config.
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Run a single seed instead of every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        no_cmr: bool,
        #[arg(long)]
        no_filter: bool,
        #[arg(long)]
        iterations: Option<usize>,
        /// Output directory; each seed writes to `<out>/seed_<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a constraint snapshot (and optionally a policy snapshot).
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        constraint: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Defaults to `eval_episodes` from the config.
        #[arg(long)]
        episodes: Option<usize>,
        /// Defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Report file; defaults to `evaluation.txt` beside the constraint snapshot.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write ζ and the feasibility label over a lattice.
    ExportGrid {
        #[arg(long)]
        constraint: PathBuf,
        #[arg(long, default_value_t = 200)]
        resolution: usize,
        /// `x_min,x_max,y_min,y_max`
        #[arg(long, value_parser = parse_bounds, default_value = "-12,12,-12,12")]
        bounds: Bounds,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
}

fn parse_bounds(s: &str) -> std::result::Result<Bounds, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let [x_min, x_max, y_min, y_max] = v[..] else {
        return Err("expected four comma-separated numbers".into());
    };
    let b = Bounds {
        x_min,
        x_max,
        y_min,
        y_max,
    };
    if b.is_valid() {
        Ok(b)
    } else {
        Err("empty box".into())
    }
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenExpert { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config.config)?;
            let seed = seed.unwrap_or(cfg.expert_seed);
            let out = out.unwrap_or(cfg.demo_file);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (demos, _) = generate_expert(&cfg.run, &mut rng)?;
            save_demos(&out, &demos)?;
            println!(
                "wrote {} demonstrations to {} (r_D={:.6}, sigma_D={:.6})",
                demos.trajectories().len(),
                out.display(),
                demos.return_mean(),
                demos.return_std()
            );
        }
        Command::Train {
            config,
            demos,
            seed,
            no_cmr,
            no_filter,
            iterations,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config.config)?;
            if no_cmr {
                cfg.run.cmr_enabled = false;
            }
            if no_filter {
                cfg.run.filter_enabled = false;
            }
            if let Some(n) = iterations {
                cfg.run.iterations = n;
            }
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            cfg.validate()?;
            let demo_file = demos.unwrap_or_else(|| cfg.demo_file.clone());
            let demos = load_demos(&demo_file, &cfg.run.env)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            for &s in &cfg.seeds {
                let dir = seed_dir(&out, s);
                let outcome = train_run(&cfg.run, &demos, s, &dir, cfg.snapshots)?;
                if let Some(r) = outcome.reports.last() {
                    println!(
                        "seed {s}: iou={:.4} violation_rate={:.4} mean_return={:.4} memory={} -> {}",
                        r.iou,
                        r.violation_rate,
                        r.mean_return,
                        r.memory_size,
                        dir.display()
                    );
                }
            }
        }
        Command::Evaluate {
            config,
            constraint,
            policy,
            episodes,
            seed,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config.config)?;
            let model = load_constraint(&constraint)?;
            let policy = policy.as_deref().map(load_policy).transpose()?;
            let episodes = episodes.unwrap_or(cfg.run.eval_episodes);
            if episodes == 0 {
                return Err(Error::Usage("--episodes must be at least 1".into()));
            }
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let report = evaluate(&cfg.run, &model, policy.as_ref(), episodes, seed)?;
            let out = out.unwrap_or_else(|| constraint.with_file_name("evaluation.txt"));
            report.save(&out)?;
            print!("{}", report.to_text());
        }
        Command::ExportGrid {
            constraint,
            resolution,
            bounds,
            out,
        } => {
            let model = load_constraint(&constraint)?;
            let rows = write_grid(&out, &model, &bounds, resolution)?;
            println!("wrote {rows} grid rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::Usage(_) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::from(EXIT_RUNTIME),
            }
        }
    }
}
