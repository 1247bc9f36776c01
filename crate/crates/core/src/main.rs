use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use powertrain_cbf::config::{ControllerKind, ExperimentConfig, FilterChoice};
use powertrain_cbf::controllers::PolicyParams;
use powertrain_cbf::harness::{self, Checkpoint};
use powertrain_cbf::safety;

#[derive(Parser)]
#[command(
    name = "powertrain-cbf",
    about = "Car-following powertrain laboratory with barrier-filtered torque control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run episodes with the configured controller and filter.
    Simulate {
        #[command(flatten)]
        common: ConfigArg,
        /// Override the number of episodes.
        #[arg(long)]
        episodes: Option<usize>,
        /// Override the safety filter (hocbf|ecbf|none).
        #[arg(long)]
        filter: Option<FilterChoice>,
        /// Override the controller (rl|baseline|adversarial).
        #[arg(long)]
        controller: Option<ControllerKind>,
        /// Checkpoint for the rl controller (fresh seeded policy when absent).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the RL policy in the filtered environment.
    Train {
        #[command(flatten)]
        common: ConfigArg,
    },
    /// Compare a trained policy against the model-based baseline.
    Evaluate {
        #[command(flatten)]
        common: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export the safe-set geometry grid as CSV.
    Safeset {
        #[command(flatten)]
        common: ConfigArg,
        /// Grid resolution per axis.
        #[arg(long, default_value_t = 100)]
        resolution: usize,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate {
            common,
            episodes,
            filter,
            controller,
            checkpoint,
        } => simulate(common, episodes, filter, controller, checkpoint),
        Command::Train { common } => train(common),
        Command::Evaluate { common, checkpoint } => evaluate(common, checkpoint),
        Command::Safeset { common, resolution } => safeset(common, resolution),
    }
}

fn load_config(common: &ConfigArg) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(out) = &common.out {
        cfg.run.output_dir = out.clone();
    }
    Ok(cfg)
}

fn rl_policy(cfg: &ExperimentConfig, checkpoint: Option<&PathBuf>) -> Result<PolicyParams> {
    match checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            Ok(ck.policy)
        }
        None => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.run.seed ^ 0x7261_696e);
            Ok(PolicyParams::new(
                cfg.training.hidden_width,
                &cfg.vehicle,
                &mut rng,
            ))
        }
    }
}

fn simulate(
    common: ConfigArg,
    episodes: Option<usize>,
    filter: Option<FilterChoice>,
    controller: Option<ControllerKind>,
    checkpoint: Option<PathBuf>,
) -> Result<ExitCode> {
    let mut cfg = load_config(&common)?;
    if let Some(n) = episodes {
        cfg.run.episodes = n;
    }
    if let Some(f) = filter {
        cfg.run.filter = f;
    }
    if let Some(c) = controller {
        cfg.run.controller = c;
    }

    let policy = if cfg.run.controller == ControllerKind::Rl {
        Some(rl_policy(&cfg, checkpoint.as_ref())?)
    } else {
        None
    };
    let (results, traces) = harness::simulate(&cfg, policy.as_ref())?;

    let dir = cfg.run.output_dir.clone();
    harness::emit_outputs(&results, &traces, &dir)?;
    let cells = safety::safe_set_grid(
        &cfg.safety,
        (cfg.safety.z0_m, cfg.safety.z0_m + 148.0),
        (0.0, cfg.safety.v_host_max_m_s),
        100,
    );
    harness::emit_safeset(&cfg, &cells, &dir.join("safeset.csv"))?;

    let a = &results.aggregate;
    println!("episodes            {}", a.episodes);
    println!("steps               {}", a.total_steps);
    println!("crash steps         {}", a.total_crash_count);
    println!("min gap             {:.3} m", a.min_gap_m);
    println!("fuel                {:.1} g over {:.1} m ({:.2} mpg)", a.total_fuel_g, a.total_distance_m, a.mpg);
    println!("a_rms               {:.4} m/s^2", a.a_rms_m_s2);
    println!("mean reward         {:.4}", a.mean_reward);
    println!("intervention rate   {:.4}", a.intervention_rate);
    println!("outputs             {}", dir.display());

    let failures = harness::run_checks(&cfg, &results, &traces);
    if failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for f in &failures {
            eprintln!("check failed: {f}");
        }
        Ok(ExitCode::FAILURE)
    }
}

fn train(common: ConfigArg) -> Result<ExitCode> {
    let cfg = load_config(&common)?;
    if cfg.run.controller != ControllerKind::Rl {
        bail!("train requires run.controller = \"rl\"");
    }
    let outcome = harness::train(&cfg)?;
    let dir = cfg.run.output_dir.clone();
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))?;
    outcome.checkpoint.save(&dir.join("checkpoint.json"))?;
    harness::emit_learning_curve(&cfg, &outcome.curve, &dir.join("learning_curve.csv"))?;

    if let (Some(first), Some(last)) = (outcome.curve.first(), outcome.curve.last()) {
        println!("epochs              {}", outcome.curve.len());
        println!("first epoch reward  {:.4}", first.mean_reward);
        println!("last epoch reward   {:.4}", last.mean_reward);
    }
    println!("crash steps         {}", outcome.total_crash_steps);
    println!("steps trained       {}", outcome.checkpoint.steps_done);
    println!("checkpoint          {}", dir.join("checkpoint.json").display());

    if let Some(reason) = outcome.aborted {
        eprintln!("training aborted: {reason} (checkpoint holds the last good state)");
        return Ok(ExitCode::FAILURE);
    }
    if cfg.checks.no_crash && outcome.total_crash_steps > 0 {
        eprintln!(
            "check failed: no_crash: {} crash steps during training",
            outcome.total_crash_steps
        );
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn evaluate(common: ConfigArg, checkpoint: PathBuf) -> Result<ExitCode> {
    let cfg = load_config(&common)?;
    let ck = Checkpoint::load(&checkpoint)?;
    let report = harness::evaluate(&cfg, &ck.policy)?;

    let dir = cfg.run.output_dir.clone();
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("comparison.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .with_context(|| format!("writing {}", path.display()))?;

    println!(
        "{:<12} {:<7} {:>8} {:>10} {:>8} {:>7} {:>9} {:>10}",
        "controller", "filter", "mpg", "g/km", "a_rms", "crash", "interv", "approach"
    );
    for r in &report.rows {
        println!(
            "{:<12} {:<7} {:>8.3} {:>10.2} {:>8.4} {:>7} {:>9.4} {:>10.4}",
            r.controller,
            r.filter,
            r.mpg,
            r.fuel_g_per_km,
            r.a_rms_m_s2,
            r.crash_count,
            r.intervention_rate,
            r.mean_approach_rate_m_s
        );
    }
    println!("report              {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn safeset(common: ConfigArg, resolution: usize) -> Result<ExitCode> {
    let cfg = load_config(&common)?;
    let cells = safety::safe_set_grid(
        &cfg.safety,
        (cfg.safety.z0_m, cfg.safety.z0_m + 148.0),
        (0.0, cfg.safety.v_host_max_m_s),
        resolution,
    );
    let path = cfg.run.output_dir.join("safeset.csv");
    harness::emit_safeset(&cfg, &cells, &path)?;
    println!("{} cells -> {}", cells.len(), path.display());
    Ok(ExitCode::SUCCESS)
}
