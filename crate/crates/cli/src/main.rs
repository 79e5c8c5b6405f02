use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use mlvamp::experiment::{run_baseline_comparison, run_iteration_experiment, run_measurement_sweep, ExperimentResult};
use mlvamp::network::trajectory_from_layers;
use mlvamp::{build_synthetic_network, run, run_se, sample_trajectory, statistics_from_network, ExperimentConfig, NetworkSpec};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "mlvamp", version, about = "ML-VAMP inference and state evolution for deep generative networks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); missing fields take the default setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use the reference synthetic-network setup; cannot be combined with --config.
    #[arg(long, global = true, conflicts_with = "config")]
    paper: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build a random network and write it as JSON.
    Generate {
        /// Store the factor matrices instead of the recipe to rebuild them.
        #[arg(long)]
        explicit: bool,
    },
    /// Draw one trajectory through a network.
    Sample {
        #[arg(long)]
        network: PathBuf,
    },
    /// Run ML-VAMP on an observation.
    Infer {
        #[arg(long)]
        network: PathBuf,
        /// A file written by `sample`; its truth is used to report NMSE.
        #[arg(long, conflicts_with = "observation")]
        trajectory: Option<PathBuf>,
        /// JSON array with the network output.
        #[arg(long)]
        observation: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Run state evolution and write the predicted errors.
    Se {
        /// Network file; without it the configured synthetic network is built.
        #[arg(long)]
        network: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// NMSE against half-iterations, simulated and predicted.
    ExperimentIters,
    /// Final NMSE against the number of measurements.
    ExperimentSweep,
    /// ML-VAMP, MAP and SGLD on the same trajectories.
    Baselines {
        /// Comma-separated subset of mlvamp,map,sgld.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<mlvamp::Method>>,
    },
}

#[derive(Serialize, Deserialize)]
struct SampleFile {
    seed: u64,
    /// Layers `z₀ … z_L`; the last one is the observation.
    layers: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct InferFile {
    z_hat: Vec<Vec<f64>>,
    nmse_db: Option<Vec<f64>>,
    clamp_events: usize,
}

fn load_config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) if !c.paper => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        _ => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
        cfg.network.seed = seed;
    }
    if let Some(t) = c.trials {
        cfg.n_trials = t;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_network(path: &Path) -> anyhow::Result<NetworkSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    NetworkSpec::from_json(&text).with_context(|| format!("loading network {}", path.display()))
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn summarize(res: &ExperimentResult) {
    for (h, gap) in res.median_abs_gap(0) {
        if h % 10 == 9 {
            log::info!("half-iteration {h}: median |sim - SE| on layer 0 = {gap:.2} dB");
        }
    }
    for p in &res.sweep {
        log::info!(
            "M = {} ({}): median final NMSE {} dB, SE {} dB",
            p.n_meas,
            p.method,
            p.median_db.map_or("n/a".into(), |v| format!("{v:.2}")),
            p.se_final_db.map_or("n/a".into(), |v| format!("{v:.2}")),
        );
    }
    for f in &res.failures {
        eprintln!("trial {} failed ({:?}, M = {}): {}", f.trial, f.method, f.n_meas, f.message);
    }
}

fn execute(cli: Cli) -> anyhow::Result<bool> {
    let c = &cli.common;
    match cli.command {
        Command::Generate { explicit } => {
            let cfg = load_config(c)?;
            let net = build_synthetic_network(&cfg.network)?;
            write_or_print(c.out.as_deref(), &net.to_json(explicit)?)?;
        }
        Command::Sample { network } => {
            let net = read_network(&network)?;
            let seed = c.seed.unwrap_or(0);
            let traj = sample_trajectory(&net, seed);
            let file = SampleFile {
                seed,
                layers: traj.z.iter().map(|v| v.as_slice().to_vec()).collect(),
            };
            write_or_print(c.out.as_deref(), &serde_json::to_string(&file)?)?;
        }
        Command::Infer {
            network,
            trajectory,
            observation,
            iterations,
        } => {
            let net = read_network(&network)?;
            let (y, truth) = match (trajectory, observation) {
                (Some(path), _) => {
                    let s: SampleFile = serde_json::from_str(&fs::read_to_string(&path)?)
                        .with_context(|| format!("parsing {}", path.display()))?;
                    let layers = s.layers.into_iter().map(DVector::from_vec).collect();
                    let traj = trajectory_from_layers(&net, layers)?;
                    (traj.observation().clone(), Some(traj))
                }
                (None, Some(path)) => {
                    let v: Vec<f64> = serde_json::from_str(&fs::read_to_string(&path)?)
                        .with_context(|| format!("parsing {}", path.display()))?;
                    (DVector::from_vec(v), None)
                }
                (None, None) => bail!("infer needs --trajectory or --observation"),
            };
            let mut cfg = load_config(c)?;
            if let Some(n) = iterations {
                cfg.n_iter = n;
            }
            let opts = mlvamp::EngineOptions {
                max_iter: cfg.n_iter,
                ..cfg.engine
            };
            let recs = run(&net, &y, &opts, truth.as_ref())?;
            let last = &recs.last().context("no iterations run")?.reverse;
            let file = InferFile {
                z_hat: last.layers.iter().map(|l| l.z_hat.as_slice().to_vec()).collect(),
                nmse_db: truth.as_ref().map(|_| last.nmse_db.clone()),
                clamp_events: recs.iter().map(|r| r.forward.clamp_events() + r.reverse.clamp_events()).sum(),
            };
            if let Some(n) = &file.nmse_db {
                log::info!("final NMSE per layer (dB): {n:.2?}");
            }
            write_or_print(c.out.as_deref(), &serde_json::to_string(&file)?)?;
        }
        Command::Se { network, iterations } => {
            let cfg = load_config(c)?;
            let net = match network {
                Some(path) => read_network(&path)?,
                None => build_synthetic_network(&cfg.network)?,
            };
            let se = run_se(&statistics_from_network(&net), iterations.unwrap_or(cfg.n_iter), &cfg.se)?;
            write_or_print(c.out.as_deref(), &se.to_json()?)?;
        }
        Command::ExperimentIters => {
            let cfg = load_config(c)?;
            let res = run_iteration_experiment(&cfg)?;
            summarize(&res);
            return Ok(res.failures.is_empty());
        }
        Command::ExperimentSweep => {
            let cfg = load_config(c)?;
            let res = run_measurement_sweep(&cfg)?;
            summarize(&res);
            return Ok(res.failures.is_empty());
        }
        Command::Baselines { methods } => {
            let mut cfg = load_config(c)?;
            cfg.methods = methods.unwrap_or_else(|| vec![mlvamp::Method::Mlvamp, mlvamp::Method::Map, mlvamp::Method::Sgld]);
            cfg.validate()?;
            let res = run_baseline_comparison(&cfg)?;
            summarize(&res);
            return Ok(res.failures.is_empty());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
