//! Seeded trial execution: history generation, per-trial tuning runs for the
//! requested formulations, bound validation, and aggregation.
//!
//! Every random draw comes from a ChaCha stream addressed by (seed, purpose,
//! trial), so trials are reproducible independently of execution order and of
//! which formulations run.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::bayesopt::{
    assemble_mff_model, beta_schedule, run_formulation, DesignGrid, EvalOutcome, Formulation,
    ModelSettings, RegretTrace, TruthTable,
};
use crate::bench::config::ExperimentConfig;
use crate::bounds::{bound_report, BoundReport};
use crate::error::{MfError, Result};
use crate::gp::{fit_kernel, Dataset, FitOptions};
use crate::sim::{
    build_controller, build_plant, default_initial_condition, evaluate_cost, sample_operator,
    ControllerParams, HriPlant, OperatorGains, SimSettings,
};

/// Stream addresses; trial index is added to the per-trial bases.
const STREAM_HISTORY: u64 = 1;
const STREAM_OPERATOR_BASE: u64 = 0x0001_0000;
const STREAM_EVAL_BASE: u64 = 0x0002_0000;

fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One previous operator: the sampled gains, the grid indices visited, and
/// the noisy cost dataset those visits produced.
#[derive(Debug, Clone)]
pub struct OperatorHistory {
    pub gains: OperatorGains,
    pub indices: Vec<usize>,
    pub dataset: Dataset,
}

/// Builds the undisturbed or disturbed plant described by the config.
pub fn plant_from_config(cfg: &ExperimentConfig, disturbed: bool) -> Result<HriPlant> {
    let n = cfg.plant.n;
    let dim = 3 * n;
    let q = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(
        cfg.plant.q_diag.clone(),
    ));
    let r = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(
        cfg.plant.r_diag.clone(),
    ));
    let d = if disturbed {
        nalgebra::DVector::from_vec(cfg.plant.disturbance.clone())
    } else {
        nalgebra::DVector::zeros(dim)
    };
    let dist = cfg.operator_distribution();
    // The plant here is operator-independent scaffolding; gains are attached
    // per call site. Use distribution means as a placeholder.
    let gains = OperatorGains::new(dist.mean_k_d, dist.mean_k_p)?;
    build_plant(n, gains, q, r, default_initial_condition(n), d)
}

/// Builds the configured plant coupled to one operator's gains.
pub fn plant_for_gains(
    cfg: &ExperimentConfig,
    gains: OperatorGains,
    disturbed: bool,
) -> Result<HriPlant> {
    let n = cfg.plant.n;
    let dim = 3 * n;
    let q = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(
        cfg.plant.q_diag.clone(),
    ));
    let r = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(
        cfg.plant.r_diag.clone(),
    ));
    let d = if disturbed {
        nalgebra::DVector::from_vec(cfg.plant.disturbance.clone())
    } else {
        nalgebra::DVector::zeros(dim)
    };
    build_plant(n, gains, q, r, default_initial_condition(n), d)
}

/// Noiseless cost sweep over the whole grid for one plant: the per-trial
/// regret reference.
pub fn sweep_truth(
    plant: &HriPlant,
    grid: &DesignGrid,
    sim: &SimSettings,
) -> Result<TruthTable> {
    let mut values = Vec::with_capacity(grid.len());
    let mut diverged = Vec::with_capacity(grid.len());
    for point in grid.points() {
        let params = ControllerParams::from_slice(point)?;
        let k = build_controller(&params, plant.n());
        let cost = evaluate_cost(plant, &k, sim)?;
        values.push(-cost.j);
        diverged.push(cost.diverged);
    }
    TruthTable::from_values(values, diverged)
}

/// Draws the previous operators and their noisy evaluations. Grid points are
/// sampled without replacement per operator; evaluations run on the
/// undisturbed plant.
pub fn generate_history(
    cfg: &ExperimentConfig,
    grid: &DesignGrid,
) -> Result<Vec<OperatorHistory>> {
    let mut rng = stream_rng(cfg.seed, STREAM_HISTORY);
    let dist = cfg.operator_distribution();
    let sim = cfg.sim_settings();
    let noise_var = cfg.model.measurement_variance;
    let noise = if noise_var > 0.0 {
        Some(Normal::new(0.0, noise_var.sqrt()).map_err(|e| MfError::InvalidInput(e.to_string()))?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(cfg.operators.count);
    for _ in 0..cfg.operators.count {
        let gains = sample_operator(&mut rng, &dist)?;
        let plant = plant_for_gains(cfg, gains, false)?;
        let indices: Vec<usize> = rand::seq::index::sample(
            &mut rng,
            grid.len(),
            cfg.operators.points_per_operator,
        )
        .into_vec();
        let mut dataset = Dataset::empty(noise_var)?;
        for &idx in &indices {
            let params = ControllerParams::from_slice(grid.point(idx))?;
            let k = build_controller(&params, plant.n());
            let cost = evaluate_cost(&plant, &k, &sim)?;
            let eta = noise.as_ref().map(|n| n.sample(&mut rng)).unwrap_or(0.0);
            dataset.push(grid.point(idx).to_vec(), -cost.j + eta)?;
        }
        out.push(OperatorHistory { gains, indices, dataset });
    }
    Ok(out)
}

/// Bound-validation row attached to a completed multi-fidelity run.
#[derive(Debug, Clone)]
pub struct BoundRow {
    pub report: BoundReport,
    /// Final cumulative regret divided by the standardization scale, the
    /// units the regret ceiling lives in.
    pub cum_regret_model_units: f64,
    pub within_linear: bool,
    pub within_squared: bool,
    /// Output standardization scale of the final model.
    pub scale: f64,
}

/// Everything one trial produced.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub trial: usize,
    pub gains: Option<OperatorGains>,
    pub f_star: f64,
    pub argmax: usize,
    pub traces: Vec<(Formulation, RegretTrace)>,
    pub bound: Option<BoundRow>,
    /// Regret of the undisturbed-optimal controller on the disturbed plant;
    /// present only for disturbed campaigns.
    pub reference_regret: Option<f64>,
    pub error: Option<String>,
}

impl TrialOutcome {
    pub fn complete(&self) -> bool {
        self.error.is_none() && self.traces.iter().all(|(_, t)| t.complete)
    }

    fn failed(trial: usize, err: &MfError) -> Self {
        Self {
            trial,
            gains: None,
            f_star: f64::NAN,
            argmax: 0,
            traces: Vec::new(),
            bound: None,
            reference_regret: None,
            error: Some(err.to_string()),
        }
    }
}

/// Per-iteration aggregate of cumulative and best-instantaneous regret.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub formulation: Formulation,
    /// 1-based iteration.
    pub iter: usize,
    pub cum_mean: f64,
    pub cum_std: f64,
    pub best_mean: f64,
    pub best_std: f64,
    /// Number of complete traces aggregated.
    pub trials: usize,
}

#[derive(Debug, Clone)]
pub struct CampaignResult {
    pub history: Vec<OperatorHistory>,
    pub trials: Vec<TrialOutcome>,
    pub aggregates: Vec<AggregateRow>,
    pub all_complete: bool,
}

/// Model settings for one trial, optionally refitting the low-fidelity kernel
/// on the standardized pooled history.
fn trial_model_settings(
    cfg: &ExperimentConfig,
    prior: &[Dataset],
) -> Result<ModelSettings> {
    let mut settings = cfg.model_settings()?;
    if !cfg.model.auto_fit {
        return Ok(settings);
    }
    let mut inputs: Vec<Vec<f64>> = Vec::new();
    let mut outputs: Vec<f64> = Vec::new();
    for d in prior {
        inputs.extend(d.inputs().iter().cloned());
        outputs.extend_from_slice(d.outputs());
    }
    if outputs.len() < 2 {
        return Ok(settings);
    }
    let n = outputs.len() as f64;
    let mean = outputs.iter().sum::<f64>() / n;
    let var = outputs.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let scale = if settings.standardize && var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    let center = if settings.standardize { mean } else { 0.0 };
    let data = Dataset::new(
        inputs,
        outputs.iter().map(|y| (y - center) / scale).collect(),
        cfg.model.measurement_variance / (scale * scale),
    )?;
    let opts = FitOptions { seed: cfg.model.fit_seed, ..FitOptions::default() };
    settings.kernel_low = fit_kernel(&settings.kernel_low, &data, &opts)?;
    Ok(settings)
}

/// Runs one trial: sample the tuned operator, sweep the noiseless truth, run
/// every requested formulation against a shared-seed noisy oracle, and
/// validate the bounds on the multi-fidelity run. Failures are captured in
/// the outcome, never panicked.
pub fn run_trial(
    cfg: &ExperimentConfig,
    grid: &DesignGrid,
    prior: &[Dataset],
    trial: usize,
) -> TrialOutcome {
    match run_trial_inner(cfg, grid, prior, trial) {
        Ok(outcome) => outcome,
        Err(e) => TrialOutcome::failed(trial, &e),
    }
}

fn run_trial_inner(
    cfg: &ExperimentConfig,
    grid: &DesignGrid,
    prior: &[Dataset],
    trial: usize,
) -> Result<TrialOutcome> {
    let mut rng_op = stream_rng(cfg.seed, STREAM_OPERATOR_BASE + trial as u64);
    let gains = sample_operator(&mut rng_op, &cfg.operator_distribution())?;
    let sim = cfg.sim_settings();

    let plant = plant_for_gains(cfg, gains, cfg.disturbed)?;
    let truth = sweep_truth(&plant, grid, &sim)?;

    // Disturbed campaigns compare against the controller that is optimal for
    // the undisturbed plant, evaluated under the disturbance.
    let reference_regret = if cfg.disturbed {
        let nominal = plant_for_gains(cfg, gains, false)?;
        let nominal_truth = sweep_truth(&nominal, grid, &sim)?;
        Some(truth.f_star() - truth.values()[nominal_truth.argmax()])
    } else {
        None
    };

    let settings = trial_model_settings(cfg, prior)?;
    let ucb = cfg.ucb_config();
    let noise_var = cfg.model.measurement_variance;
    let noise = if noise_var > 0.0 {
        Some(Normal::new(0.0, noise_var.sqrt()).map_err(|e| MfError::InvalidInput(e.to_string()))?)
    } else {
        None
    };

    let mut traces = Vec::new();
    for kind in cfg.unique_formulations() {
        // Clone-seeded noise: every formulation sees the same disturbance
        // sequence, so comparisons differ only through the selections.
        let mut rng_eval = stream_rng(cfg.seed, STREAM_EVAL_BASE + trial as u64);
        let values = truth.values();
        let flags = truth.diverged();
        let mut oracle = |idx: usize| -> Result<EvalOutcome> {
            let eta = noise.as_ref().map(|n| n.sample(&mut rng_eval)).unwrap_or(0.0);
            Ok(EvalOutcome {
                y_noisy: values[idx] + eta,
                f_true: values[idx],
                diverged: flags[idx],
            })
        };
        let trace = run_formulation(
            kind,
            prior,
            &Dataset::empty(noise_var)?,
            grid,
            &ucb,
            &settings,
            truth.f_star(),
            &mut oracle,
        )?;
        traces.push((kind, trace));
    }

    let bound = if cfg.bounds.enabled {
        traces
            .iter()
            .find(|(k, t)| *k == Formulation::MultiFidelity && t.complete && !t.is_empty())
            .map(|(_, trace)| bound_row(cfg, grid, prior, &settings, trace, noise_var))
            .transpose()?
    } else {
        None
    };

    Ok(TrialOutcome {
        trial,
        gains: Some(gains),
        f_star: truth.f_star(),
        argmax: truth.argmax(),
        traces,
        bound,
        reference_regret,
        error: None,
    })
}

/// Rebuilds the final fitted model of a completed multi-fidelity run and
/// checks its bound report against the realized regret.
fn bound_row(
    cfg: &ExperimentConfig,
    grid: &DesignGrid,
    prior: &[Dataset],
    settings: &ModelSettings,
    trace: &RegretTrace,
    noise_var: f64,
) -> Result<BoundRow> {
    let mut own = Dataset::empty(noise_var)?;
    for (point, y) in trace.points.iter().zip(&trace.y_noisy) {
        own.push(point.clone(), *y)?;
    }
    let assembly = assemble_mff_model(prior, &own, settings)?;
    let t = trace.len();
    let beta_t = match cfg.ucb.beta_override {
        Some(b) => b,
        None => beta_schedule(t, grid.len(), cfg.ucb.delta)?,
    };
    let report = bound_report(&assembly.model, grid.points(), &trace.indices, beta_t)?;
    let cum = trace.cumulative.last().copied().unwrap_or(0.0);
    let cum_model_units = cum / assembly.scale;
    Ok(BoundRow {
        within_linear: cum_model_units <= report.regret_bound_linear,
        within_squared: cum_model_units <= report.regret_bound_squared,
        cum_regret_model_units: cum_model_units,
        scale: assembly.scale,
        report,
    })
}

/// Mean and sample standard deviation; a single value has zero deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(cfg: &ExperimentConfig, trials: &[TrialOutcome]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for kind in cfg.unique_formulations() {
        let complete: Vec<&RegretTrace> = trials
            .iter()
            .filter_map(|t| {
                t.traces
                    .iter()
                    .find(|(k, trace)| *k == kind && trace.complete)
                    .map(|(_, trace)| trace)
            })
            .collect();
        if complete.is_empty() {
            continue;
        }
        let t_max = complete.iter().map(|t| t.len()).min().unwrap_or(0);
        for t in 0..t_max {
            let cum: Vec<f64> = complete.iter().map(|tr| tr.cumulative[t]).collect();
            let best: Vec<f64> = complete.iter().map(|tr| tr.best[t]).collect();
            let (cum_mean, cum_std) = mean_std(&cum);
            let (best_mean, best_std) = mean_std(&best);
            rows.push(AggregateRow {
                formulation: kind,
                iter: t + 1,
                cum_mean,
                cum_std,
                best_mean,
                best_std,
                trials: complete.len(),
            });
        }
    }
    rows
}

/// Runs the whole campaign: shared history, then independent seeded trials
/// (concurrently; outputs are ordered by trial index, so scheduling cannot
/// change results), then aggregation.
pub fn run_campaign(cfg: &ExperimentConfig) -> Result<CampaignResult> {
    cfg.validate()?;
    let grid = cfg.design_grid()?;
    let history = if cfg.operators.count > 0 {
        generate_history(cfg, &grid)?
    } else {
        Vec::new()
    };
    let prior: Vec<Dataset> = history.iter().map(|h| h.dataset.clone()).collect();
    let trials: Vec<TrialOutcome> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| run_trial(cfg, &grid, &prior, trial))
        .collect();
    let aggregates = aggregate(cfg, &trials);
    let all_complete = trials.iter().all(|t| t.complete());
    Ok(CampaignResult { history, trials, aggregates, all_complete })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// A reduced profile that keeps simulation cost small.
    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::paper_default();
        cfg.seed = 7;
        cfg.trials = 2;
        cfg.horizon = 4;
        cfg.operators.count = 2;
        cfg.operators.points_per_operator = 6;
        cfg.grid.x1.count = 3;
        cfg.grid.x2.count = 3;
        cfg.grid.x3.count = 3;
        cfg.plant.horizon = 2.0;
        cfg.plant.step = 1e-2;
        cfg
    }

    #[test]
    fn history_is_deterministic_and_without_replacement() {
        let cfg = tiny_config();
        let grid = cfg.design_grid().unwrap();
        let a = generate_history(&cfg, &grid).unwrap();
        let b = generate_history(&cfg, &grid).unwrap();
        assert_eq!(a.len(), 2);
        for (ha, hb) in a.iter().zip(&b) {
            assert_eq!(ha.indices, hb.indices);
            assert_eq!(ha.dataset.outputs(), hb.dataset.outputs());
            assert_eq!(ha.gains.k_d(), hb.gains.k_d());
            let mut sorted = ha.indices.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), ha.indices.len(), "replacement draw detected");
            assert_eq!(ha.dataset.len(), cfg.operators.points_per_operator);
        }
    }

    #[test]
    fn zero_operators_yield_empty_history() {
        let mut cfg = tiny_config();
        cfg.operators.count = 0;
        let grid = cfg.design_grid().unwrap();
        assert!(generate_history(&cfg, &grid).unwrap().is_empty());
    }

    #[test]
    fn campaign_traces_are_reproducible_and_complete() {
        let cfg = tiny_config();
        let a = run_campaign(&cfg).unwrap();
        let b = run_campaign(&cfg).unwrap();
        assert!(a.all_complete);
        assert_eq!(a.trials.len(), 2);
        for (ta, tb) in a.trials.iter().zip(&b.trials) {
            assert_eq!(ta.f_star, tb.f_star);
            for ((ka, tra), (kb, trb)) in ta.traces.iter().zip(&tb.traces) {
                assert_eq!(ka, kb);
                assert_eq!(tra.indices, trb.indices);
                assert_eq!(tra.y_noisy, trb.y_noisy);
            }
        }
    }

    #[test]
    fn single_trial_single_formulation_aggregates_equal_trace() {
        let mut cfg = tiny_config();
        cfg.trials = 1;
        cfg.formulations = vec![Formulation::FreshSingleFidelity];
        let result = run_campaign(&cfg).unwrap();
        let (_, trace) = &result.trials[0].traces[0];
        assert_eq!(result.aggregates.len(), cfg.horizon);
        for row in &result.aggregates {
            assert_eq!(row.trials, 1);
            assert_relative_eq!(row.cum_mean, trace.cumulative[row.iter - 1]);
            assert_eq!(row.cum_std, 0.0);
            assert_relative_eq!(row.best_mean, trace.best[row.iter - 1]);
        }
    }

    #[test]
    fn aggregate_deviations_match_direct_recomputation() {
        let cfg = tiny_config();
        let result = run_campaign(&cfg).unwrap();
        for row in &result.aggregates {
            let values: Vec<f64> = result
                .trials
                .iter()
                .filter_map(|t| {
                    t.traces
                        .iter()
                        .find(|(k, _)| *k == row.formulation)
                        .map(|(_, tr)| tr.cumulative[row.iter - 1])
                })
                .collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = if values.len() > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            assert_relative_eq!(row.cum_mean, mean, epsilon = 1e-12);
            assert_relative_eq!(row.cum_std, std, epsilon = 1e-12);
        }
    }

    #[test]
    fn formulation_subset_runs_match_full_runs() {
        // Eval-noise streams are per formulation, so dropping csf/lsf must not
        // change the mff trace.
        let cfg = tiny_config();
        let full = run_campaign(&cfg).unwrap();
        let mut only = tiny_config();
        only.formulations = vec![Formulation::MultiFidelity];
        only.bounds.enabled = false;
        let reduced = run_campaign(&only).unwrap();
        for (tf, tr) in full.trials.iter().zip(&reduced.trials) {
            let full_mff = tf
                .traces
                .iter()
                .find(|(k, _)| *k == Formulation::MultiFidelity)
                .map(|(_, t)| t)
                .unwrap();
            let (_, red_mff) = &tr.traces[0];
            assert_eq!(full_mff.indices, red_mff.indices);
            assert_eq!(full_mff.y_noisy, red_mff.y_noisy);
        }
    }

    #[test]
    fn bound_rows_attach_to_multifidelity_runs() {
        let cfg = tiny_config();
        let result = run_campaign(&cfg).unwrap();
        for trial in &result.trials {
            let row = trial.bound.as_ref().expect("bounds enabled by default");
            assert!(row.scale > 0.0);
            assert!(row.report.gamma_bound.is_finite());
            assert!(row.cum_regret_model_units >= 0.0);
        }
        let mut disabled = tiny_config();
        disabled.bounds.enabled = false;
        let result = run_campaign(&disabled).unwrap();
        assert!(result.trials.iter().all(|t| t.bound.is_none()));
    }

    #[test]
    fn disturbed_campaign_records_reference_regret() {
        let mut cfg = tiny_config();
        cfg.trials = 1;
        cfg.disturbed = true;
        let result = run_campaign(&cfg).unwrap();
        let reference = result.trials[0].reference_regret.expect("disturbed trial");
        assert!(reference >= 0.0);
        let nominal = run_campaign(&tiny_config()).unwrap();
        assert!(nominal.trials[0].reference_regret.is_none());
    }
}
