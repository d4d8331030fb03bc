//! Command-line front end for the gain-tuning benchmark: full campaigns,
//! single tuning sessions, bound reports, and raw cost sweeps.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use mftune_core::bayesopt::Formulation;
use mftune_core::bench::{
    emit_outputs, plant_for_gains, run_campaign, sweep_truth, CampaignResult, ExperimentConfig,
};
use mftune_core::sim::OperatorGains;

/// Environment override for the campaign seed; takes precedence over both
/// `--seed` and the config file so wrapper scripts can force reproduction.
const SEED_ENV: &str = "MFTUNE_SEED";

#[derive(Parser)]
#[command(
    name = "mftune",
    version,
    about = "Impedance-gain tuning benchmark: multi-fidelity Bayesian optimization \
             over a simulated human-robot manipulation task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full multi-trial campaign and write CSVs, metadata, and plots.
    Benchmark(CommonArgs),
    /// Run one tuning session with a single formulation and print its trace.
    Tune(CommonArgs),
    /// Run one multi-fidelity session and print the model's bound report.
    Bounds(CommonArgs),
    /// Sweep the controller grid for fixed operator gains and write the costs.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (TOML). Omitted: the built-in reference profile.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Campaign seed. MFTUNE_SEED, when set, wins over this flag.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory for generated artifacts.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma-separated formulations to run: mff, csf, lsf.
    #[arg(long, value_delimiter = ',', value_parser = parse_formulation)]
    formulations: Option<Vec<Formulation>>,
    /// Apply the configured disturbance to the tuned operator's plant.
    #[arg(long)]
    disturbed: bool,
    /// Number of trials.
    #[arg(long, value_name = "N")]
    trials: Option<usize>,
    /// Optimization iterations per trial.
    #[arg(long, value_name = "T")]
    horizon: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Operator damping gain; defaults to the configured population mean.
    #[arg(long, value_name = "KD")]
    kd: Option<f64>,
    /// Operator stiffness gain; defaults to the configured population mean.
    #[arg(long, value_name = "KP")]
    kp: Option<f64>,
}

fn parse_formulation(s: &str) -> Result<Formulation, String> {
    s.parse::<Formulation>().map_err(|e| e.to_string())
}

fn load_config(args: &CommonArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_path(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::paper_default(),
    };
    if let Ok(text) = std::env::var(SEED_ENV) {
        cfg.seed = text
            .trim()
            .parse::<u64>()
            .with_context(|| format!("{SEED_ENV} must be an unsigned integer, got {text:?}"))?;
    } else if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = args.trials {
        cfg.trials = trials;
    }
    if let Some(horizon) = args.horizon {
        cfg.horizon = horizon;
    }
    if let Some(formulations) = &args.formulations {
        cfg.formulations = formulations.clone();
    }
    if args.disturbed {
        cfg.disturbed = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(args: &CommonArgs) -> PathBuf {
    args.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn print_trial_errors(campaign: &CampaignResult) {
    for trial in &campaign.trials {
        if let Some(err) = &trial.error {
            eprintln!("trial {} failed: {err}", trial.trial + 1);
        }
        for (kind, trace) in &trial.traces {
            if let Some(failure) = &trace.failure {
                eprintln!(
                    "trial {} {}: stopped after {} iterations: {failure}",
                    trial.trial + 1,
                    kind.code(),
                    trace.len()
                );
            }
        }
    }
}

fn completion_status(campaign: &CampaignResult) -> ExitCode {
    if campaign.all_complete {
        ExitCode::SUCCESS
    } else {
        print_trial_errors(campaign);
        eprintln!("campaign incomplete: some trials or traces did not finish");
        ExitCode::from(2)
    }
}

fn run_benchmark(args: &CommonArgs) -> anyhow::Result<ExitCode> {
    let cfg = load_config(args)?;
    let campaign = run_campaign(&cfg)?;
    let dir = out_dir(args);
    let files = emit_outputs(&cfg, &campaign, &dir)?;

    println!(
        "campaign: seed {}, {} trials, horizon {}, grid {} points, {} prior operators{}",
        cfg.seed,
        cfg.trials,
        cfg.horizon,
        cfg.design_grid()?.len(),
        campaign.history.len(),
        if cfg.disturbed { ", disturbed" } else { "" }
    );
    for kind in cfg.unique_formulations() {
        let last = campaign
            .aggregates
            .iter()
            .filter(|r| r.formulation == kind)
            .next_back();
        match last {
            Some(row) => println!(
                "  {}: final cumulative regret {:.4} +/- {:.4}, best regret {:.4} +/- {:.4} \
                 ({} complete trials)",
                kind.code(),
                row.cum_mean,
                row.cum_std,
                row.best_mean,
                row.best_std,
                row.trials
            ),
            None => println!("  {}: no complete trials", kind.code()),
        }
    }
    let bound_rows: Vec<_> = campaign.trials.iter().filter_map(|t| t.bound.as_ref()).collect();
    if !bound_rows.is_empty() {
        let within = bound_rows.iter().filter(|b| b.within_linear).count();
        let gain_ok = bound_rows.iter().filter(|b| b.report.info_gain_ok).count();
        println!(
            "  bounds: regret ceiling held in {within}/{} runs, \
             information-gain ceiling in {gain_ok}/{}",
            bound_rows.len(),
            bound_rows.len()
        );
    }
    for path in &files {
        println!("  wrote {}", path.display());
    }
    Ok(completion_status(&campaign))
}

fn run_tune(args: &CommonArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = load_config(args)?;
    if cfg.unique_formulations().len() != 1 {
        bail!("tune runs a single formulation; pass --formulations with one of mff, csf, lsf");
    }
    if let Some(trials) = args.trials {
        if trials != 1 {
            bail!("tune is a single session; --trials {trials} is not meaningful here");
        }
    }
    cfg.trials = 1;
    let kind = cfg.unique_formulations()[0];
    let campaign = run_campaign(&cfg)?;
    let trial = &campaign.trials[0];

    if let Some(gains) = &trial.gains {
        println!(
            "operator: k_d {:.4}, k_p {:.4}{}",
            gains.k_d(),
            gains.k_p(),
            if cfg.disturbed { " (disturbed plant)" } else { "" }
        );
    }
    println!("optimum: f* {:.6} at grid index {}", trial.f_star, trial.argmax);
    if let Some(reference) = trial.reference_regret {
        println!("undisturbed-optimal controller regret here: {reference:.6}");
    }
    if let Some((_, trace)) = trial.traces.iter().find(|(k, _)| *k == kind) {
        println!(
            "{:>4} {:>8} {:>8} {:>8} {:>12} {:>12} {:>10} {:>10} {:>10}",
            "iter", "x1", "x2", "x3", "y_noisy", "f_true", "r_t", "R_t", "r*_t"
        );
        for t in 0..trace.len() {
            let p = &trace.points[t];
            println!(
                "{:>4} {:>8.4} {:>8.4} {:>8.4} {:>12.5} {:>12.5} {:>10.5} {:>10.5} {:>10.5}{}",
                t + 1,
                p[0],
                p[1],
                p[2],
                trace.y_noisy[t],
                trace.f_true[t],
                trace.instantaneous[t],
                trace.cumulative[t],
                trace.best[t],
                if trace.diverged[t] { "  diverged" } else { "" }
            );
        }
    }
    if args.out.is_some() {
        for path in emit_outputs(&cfg, &campaign, &out_dir(args))? {
            println!("wrote {}", path.display());
        }
    }
    Ok(completion_status(&campaign))
}

fn run_bounds(args: &CommonArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = load_config(args)?;
    cfg.formulations = vec![Formulation::MultiFidelity];
    cfg.bounds.enabled = true;
    if args.trials.is_none() {
        cfg.trials = 1;
    }
    let campaign = run_campaign(&cfg)?;

    let mut reported = 0usize;
    for trial in &campaign.trials {
        let Some(bound) = &trial.bound else { continue };
        reported += 1;
        let r = &bound.report;
        println!("trial {}", trial.trial + 1);
        println!("  rho (fitted correlation):        {:.6}", r.rho);
        println!("  lambda_min of low-design gram:   {:.6e}", r.lambda_min_low);
        println!("  noise < lambda_min precondition: {}", r.precondition_ok);
        println!("  covariance dominance margin:     {:.3e}", r.dominance_margin);
        println!("  max conditional variance:        {:.6e}", r.lambda_max_conditional);
        println!("  max variance without low data:   {:.6e}", r.lambda_max_induced);
        println!("  prior data tightened posterior:  {}", r.mf_benefit);
        println!("  information-gain ceiling:        {:.6}", r.gamma_bound);
        println!("  realized information gain:       {:.6}", r.realized_info_gain);
        println!("  gain within ceiling:             {}", r.info_gain_ok);
        println!("  beta_T:                          {:.6}", r.beta_t);
        println!("  regret ceiling (rho variance):   {:.4}", r.regret_bound_linear);
        println!("  regret ceiling (rho^2 variance): {:.4}", r.regret_bound_squared);
        println!("  realized cumulative regret:      {:.4}", bound.cum_regret_model_units);
        println!(
            "  regret within ceiling:           {} / {}",
            bound.within_linear, bound.within_squared
        );
    }
    if reported == 0 {
        print_trial_errors(&campaign);
        bail!("no completed multi-fidelity run to report bounds for");
    }
    if args.out.is_some() {
        for path in emit_outputs(&cfg, &campaign, &out_dir(args))? {
            println!("wrote {}", path.display());
        }
    }
    Ok(completion_status(&campaign))
}

fn run_simulate(args: &SimulateArgs) -> anyhow::Result<ExitCode> {
    let cfg = load_config(&args.common)?;
    let k_d = args.kd.unwrap_or(cfg.operators.kd_mean);
    let k_p = args.kp.unwrap_or(cfg.operators.kp_mean);
    let gains = OperatorGains::new(k_d, k_p)?;
    let plant = plant_for_gains(&cfg, gains, cfg.disturbed)?;
    let grid = cfg.design_grid()?;
    let truth = sweep_truth(&plant, &grid, &cfg.sim_settings())?;

    let dir = out_dir(&args.common);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("sweep.csv");
    let mut csv = String::from("index,x1,x2,x3,j,diverged_flag\n");
    for (i, point) in grid.points().iter().enumerate() {
        use std::fmt::Write as _;
        let _ = writeln!(
            csv,
            "{i},{},{},{},{},{}",
            point[0],
            point[1],
            point[2],
            -truth.values()[i],
            u8::from(truth.diverged()[i])
        );
    }
    std::fs::write(&path, csv)?;

    let diverged = truth.diverged().iter().filter(|d| **d).count();
    let best = grid.point(truth.argmax());
    println!(
        "sweep: k_d {:.4}, k_p {:.4}{}, {} grid points, {} diverged",
        k_d,
        k_p,
        if cfg.disturbed { ", disturbed" } else { "" },
        grid.len(),
        diverged
    );
    println!(
        "lowest cost {:.6} at index {} (x1 {:.4}, x2 {:.4}, x3 {:.4})",
        -truth.f_star(),
        truth.argmax(),
        best[0],
        best[1],
        best[2]
    );
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Benchmark(args) => run_benchmark(args),
        Command::Tune(args) => run_tune(args),
        Command::Bounds(args) => run_bounds(args),
        Command::Simulate(args) => run_simulate(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
