use adrrl::config::RunConfig;
use adrrl::env::EnvParams;
use adrrl::eval_suite::{
    property_battery, robustness_experiment, sample_trajectories, BatteryScale,
};
use adrrl::guidance::GuidanceConfig;
use adrrl::orchestrator::{
    adrrl_train, eval_to_csv, eval_to_plot_tsv, evaluate_policy, persist_run, Agent,
};
use adrrl::checkpoint::Checkpoint;
use clap::{Parser, Subcommand};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "adrrl", about = "Risk-guided trajectory diffusion for robust policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write checkpoint + metrics
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory in the config file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint across an environment-parameter sweep
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sweep spec `param=lo:hi:steps` over mass, friction, gravity or dt
        #[arg(long)]
        sweep: String,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Risk level for the reported tail statistic
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        /// Execute the policy mean instead of sampling actions
        #[arg(long)]
        deterministic: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write CSV and plot TSV files into this directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample model trajectories and dump them with their chain weights
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the property-verification suites
    Verify {
        /// One of envelope, density, cvar, grad; all when omitted
        #[arg(long)]
        suite: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a packaged experiment recipe and write its report
    Report {
        /// One of robustness, battery
        #[arg(long)]
        recipe: String,
        #[arg(long)]
        out: PathBuf,
        /// Training config; a small built-in default is used when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 0.1])]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
    },
    /// Print the version
    Version,
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::load(&config).map_err(|e| e.to_string())?;
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            if let Some(o) = &out {
                cfg.run.out_dir = o.clone();
            }
            let (agent, rows) = adrrl_train(&cfg).map_err(|e| e.to_string())?;
            let dir = PathBuf::from(&cfg.run.out_dir);
            persist_run(&agent, &rows, &dir).map_err(|e| e.to_string())?;
            println!(
                "trained {} iterations; checkpoint at {}",
                rows.len(),
                dir.join("checkpoint.adrl").display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            sweep,
            episodes,
            alpha,
            deterministic,
            seed,
            out,
        } => {
            let agent = load_agent(&checkpoint)?;
            let (param, grid) = parse_sweep(&sweep, agent.config.env.env_params())?;
            let rows = evaluate_policy(&agent, agent.kind, &grid, episodes, alpha, deterministic, seed)
                .map_err(|e| e.to_string())?;
            let csv = eval_to_csv(&rows);
            print!("{csv}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
                std::fs::write(dir.join("eval.csv"), &csv).map_err(|e| e.to_string())?;
                std::fs::write(dir.join("eval.tsv"), eval_to_plot_tsv(&rows, &param))
                    .map_err(|e| e.to_string())?;
            }
            Ok(())
        }
        Command::Sample {
            checkpoint,
            alpha,
            count,
            seed,
            out,
        } => {
            let agent = load_agent(&checkpoint)?;
            let mut cfg = GuidanceConfig::new(alpha).map_err(|e| e.to_string())?;
            cfg.action_scale = agent.config.guidance.action_scale;
            let samples =
                sample_trajectories(&agent, &cfg, count, seed).map_err(|e| e.to_string())?;
            let mut csv = String::from("index,return,xi_log_total,cert_log_total,tensor...\n");
            for (i, s) in samples.iter().enumerate() {
                let _ = write!(
                    csv,
                    "{i},{},{},{}",
                    s.ret, s.xi_log_total, s.cert_log_total
                );
                for x in s.traj.to_tensor() {
                    let _ = write!(csv, ",{x}");
                }
                csv.push('\n');
            }
            std::fs::write(&out, csv).map_err(|e| e.to_string())?;
            let returns: Vec<f64> = samples.iter().map(|s| s.ret).collect();
            let max_cert = samples
                .iter()
                .map(|s| s.cert_log_total)
                .fold(f64::NEG_INFINITY, f64::max);
            println!(
                "sampled {count} trajectories at alpha {alpha}: mean return {:.4}, max certified log weight {:.4} (budget {:.4})",
                adrrl::stats::mean(&returns),
                max_cert,
                (1.0 / alpha).ln()
            );
            Ok(())
        }
        Command::Verify { suite, seed } => {
            let names: Vec<&str> = match &suite {
                Some(s) => vec![s.as_str()],
                None => adrrl::verify::SUITE_NAMES.to_vec(),
            };
            let mut all_pass = true;
            for name in names {
                let report = adrrl::verify::run_suite(name, seed)
                    .ok_or_else(|| format!("unknown suite {name}"))?;
                print!("{report}");
                all_pass &= report.passed();
            }
            if all_pass {
                Ok(())
            } else {
                Err("verification failed".into())
            }
        }
        Command::Report {
            recipe,
            out,
            config,
            alphas,
            seeds,
            episodes,
        } => {
            let base = match config {
                Some(p) => RunConfig::load(&p).map_err(|e| e.to_string())?,
                None => BatteryScale::default().train_config,
            };
            match recipe.as_str() {
                "robustness" => {
                    let seed_list: Vec<u64> = (0..seeds as u64).collect();
                    let report = robustness_experiment(
                        &base,
                        &alphas,
                        &seed_list,
                        &[0.5, 0.75, 1.0, 1.5, 2.0],
                        episodes,
                    )
                    .map_err(|e| e.to_string())?;
                    report.write(&out).map_err(|e| e.to_string())?;
                    print!("{}", report.to_markdown());
                    Ok(())
                }
                "battery" => {
                    let report =
                        property_battery(&BatteryScale::default(), 0).map_err(|e| e.to_string())?;
                    std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
                    std::fs::write(out.join("battery.txt"), format!("{report}"))
                        .map_err(|e| e.to_string())?;
                    print!("{report}");
                    if report.passed() {
                        Ok(())
                    } else {
                        Err("property battery failed".into())
                    }
                }
                other => Err(format!("unknown recipe {other}")),
            }
        }
        Command::Version => {
            println!("adrrl {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

fn load_agent(path: &PathBuf) -> Result<Agent, String> {
    let ckpt = Checkpoint::load(path).map_err(|e| e.to_string())?;
    Agent::from_checkpoint(&ckpt).map_err(|e| e.to_string())
}

fn parse_sweep(spec: &str, base: EnvParams) -> Result<(String, Vec<EnvParams>), String> {
    let (param, range) = spec
        .split_once('=')
        .ok_or("sweep must look like param=lo:hi:steps")?;
    let parts: Vec<&str> = range.split(':').collect();
    if parts.len() != 3 {
        return Err("sweep must look like param=lo:hi:steps".into());
    }
    let lo: f64 = parts[0].parse().map_err(|_| "bad sweep lower bound")?;
    let hi: f64 = parts[1].parse().map_err(|_| "bad sweep upper bound")?;
    let steps: usize = parts[2].parse().map_err(|_| "bad sweep step count")?;
    if steps == 0 {
        return Err("sweep needs at least one step".into());
    }
    let grid = (0..steps)
        .map(|i| {
            let x = if steps == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (steps - 1) as f64
            };
            let mut p = base;
            match param {
                "mass" => p.mass = x,
                "friction" => p.friction = x,
                "gravity" => p.gravity = x,
                "dt" => p.dt = x,
                _ => {}
            }
            p
        })
        .collect();
    match param {
        "mass" | "friction" | "gravity" | "dt" => Ok((param.to_string(), grid)),
        other => Err(format!("unknown sweep parameter {other}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
