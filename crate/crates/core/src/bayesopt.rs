//! UCB tuning over a discrete gain grid and the three data-usage
//! formulations:
//!
//! * multi-fidelity (`mff`): AR(1) model, previous operators as low fidelity;
//! * pooled single-fidelity (`csf`): one GP over everyone's data as if it were
//!   the new operator's;
//! * fresh single-fidelity (`lsf`): one GP over the new operator's data only.
//!
//! Outputs can be standardized inside the loop; regret is always accounted in
//! original cost units.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MfError, Result};
use crate::gp::{Dataset, GpPosterior};
use crate::kernel::KernelSpec;
use crate::mfgp::{fit_ar1_hyperparameters, Ar1FitConfig, Ar1Model, Ar1Posterior};

/// One inclusive grid dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridDim {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

/// Cartesian design grid, enumerated in row-major order (last dimension
/// fastest), endpoints included.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignGrid {
    dims: Vec<GridDim>,
    points: Vec<Vec<f64>>,
}

impl DesignGrid {
    pub fn new(dims: Vec<GridDim>) -> Result<Self> {
        if dims.is_empty() {
            return Err(MfError::InvalidInput("grid needs at least one dimension".into()));
        }
        for d in &dims {
            if d.count < 1 {
                return Err(MfError::InvalidInput("grid dimension count must be >= 1".into()));
            }
            if !(d.min.is_finite() && d.max.is_finite() && d.min <= d.max) {
                return Err(MfError::InvalidInput(format!(
                    "grid range [{}, {}] is invalid",
                    d.min, d.max
                )));
            }
        }
        let total: usize = dims.iter().map(|d| d.count).product();
        let mut points = Vec::with_capacity(total);
        let mut idx = vec![0usize; dims.len()];
        for _ in 0..total {
            points.push(
                dims.iter()
                    .zip(&idx)
                    .map(|(d, i)| grid_value(d, *i))
                    .collect(),
            );
            // Odometer increment, last dimension fastest.
            for pos in (0..dims.len()).rev() {
                idx[pos] += 1;
                if idx[pos] < dims[pos].count {
                    break;
                }
                idx[pos] = 0;
            }
        }
        Ok(Self { dims, points })
    }

    pub fn dims(&self) -> &[GridDim] {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// Per-dimension indices of linear index `i`.
    pub fn coordinates(&self, mut i: usize) -> Vec<usize> {
        let mut out = vec![0usize; self.dims.len()];
        for pos in (0..self.dims.len()).rev() {
            out[pos] = i % self.dims[pos].count;
            i /= self.dims[pos].count;
        }
        out
    }
}

fn grid_value(d: &GridDim, i: usize) -> f64 {
    if d.count == 1 {
        return d.min;
    }
    if i == d.count - 1 {
        return d.max;
    }
    d.min + (d.max - d.min) * (i as f64) / ((d.count - 1) as f64)
}

/// Confidence-schedule settings for UCB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UcbConfig {
    /// Failure probability of the confidence bounds, in (0, 1).
    pub delta: f64,
    /// Number of tuning iterations T.
    pub horizon: usize,
    /// Fixed exploration weight overriding the schedule when set.
    pub beta_override: Option<f64>,
}

impl UcbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(MfError::InvalidInput(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if self.horizon < 1 {
            return Err(MfError::InvalidInput("horizon must be >= 1".into()));
        }
        if let Some(b) = self.beta_override {
            if !(b.is_finite() && b >= 0.0) {
                return Err(MfError::InvalidInput(format!(
                    "beta override must be finite and non-negative, got {b}"
                )));
            }
        }
        Ok(())
    }
}

/// Exploration weight `beta_t = 2 log(|X| t^2 pi^2 / (6 delta))`.
pub fn beta_schedule(t: usize, domain_size: usize, delta: f64) -> Result<f64> {
    if t < 1 {
        return Err(MfError::InvalidInput("iteration index starts at 1".into()));
    }
    if domain_size < 1 {
        return Err(MfError::InvalidInput("domain must be non-empty".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(MfError::InvalidInput(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    let t = t as f64;
    let arg = domain_size as f64 * t * t * std::f64::consts::PI.powi(2) / (6.0 * delta);
    Ok(2.0 * arg.ln())
}

/// Argmax of `mean + sqrt(beta) * std`; ties resolve to the lowest index.
pub fn ucb_select(means: &[f64], stds: &[f64], beta: f64) -> Result<usize> {
    if means.is_empty() {
        return Err(MfError::InvalidInput("cannot select from an empty grid".into()));
    }
    if means.len() != stds.len() {
        return Err(MfError::DimensionMismatch {
            context: "ucb select",
            expected: means.len(),
            got: stds.len(),
        });
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(MfError::InvalidInput(format!(
            "beta must be finite and non-negative, got {beta}"
        )));
    }
    let sqrt_beta = beta.sqrt();
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..means.len() {
        if !means[i].is_finite() || !(stds[i].is_finite() && stds[i] >= 0.0) {
            return Err(MfError::InvalidInput(format!(
                "non-finite or negative prediction at index {i}"
            )));
        }
        let score = means[i] + sqrt_beta * stds[i];
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    Ok(best)
}

/// Noiseless objective over the whole grid, computed once per trial by
/// exhaustive evaluation. The regret reference.
#[derive(Debug, Clone)]
pub struct TruthTable {
    values: Vec<f64>,
    diverged: Vec<bool>,
    f_star: f64,
    argmax: usize,
}

impl TruthTable {
    pub fn from_values(values: Vec<f64>, diverged: Vec<bool>) -> Result<Self> {
        if values.is_empty() {
            return Err(MfError::InvalidInput("truth table cannot be empty".into()));
        }
        if values.len() != diverged.len() {
            return Err(MfError::DimensionMismatch {
                context: "truth table",
                expected: values.len(),
                got: diverged.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MfError::InvalidInput("truth values must be finite".into()));
        }
        let mut argmax = 0usize;
        for i in 1..values.len() {
            if values[i] > values[argmax] {
                argmax = i;
            }
        }
        Ok(Self {
            f_star: values[argmax],
            argmax,
            values,
            diverged,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn diverged(&self) -> &[bool] {
        &self.diverged
    }

    pub fn f_star(&self) -> f64 {
        self.f_star
    }

    pub fn argmax(&self) -> usize {
        self.argmax
    }
}

/// Instantaneous, cumulative, and best-so-far regret of a pick sequence.
///
/// Errors when some observed true value exceeds `f_star` beyond `1e-9`,
/// i.e. the claimed optimum was not the grid maximum.
pub fn regret_from_picks(f_true: &[f64], f_star: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut inst = Vec::with_capacity(f_true.len());
    let mut cum = Vec::with_capacity(f_true.len());
    let mut best = Vec::with_capacity(f_true.len());
    let mut running = 0.0;
    let mut low = f64::INFINITY;
    for (t, f) in f_true.iter().enumerate() {
        let r = f_star - f;
        if r < -1e-9 {
            return Err(MfError::Inconsistent(format!(
                "pick {t} has value {f} above the claimed optimum {f_star}"
            )));
        }
        let r = r.max(0.0);
        running += r;
        low = low.min(r);
        inst.push(r);
        cum.push(running);
        best.push(low);
    }
    Ok((inst, cum, best))
}

/// Everything one tuning run produced, in selection order.
#[derive(Debug, Clone)]
pub struct RegretTrace {
    pub indices: Vec<usize>,
    pub points: Vec<Vec<f64>>,
    pub y_noisy: Vec<f64>,
    pub f_true: Vec<f64>,
    pub diverged: Vec<bool>,
    pub instantaneous: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub best: Vec<f64>,
    /// False when the oracle failed before the horizon was reached.
    pub complete: bool,
    pub failure: Option<String>,
}

impl RegretTrace {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// The three data-usage formulations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    /// AR(1) two-fidelity model over previous operators + the new one.
    #[serde(rename = "mff")]
    MultiFidelity,
    /// Single GP over all operators' data pooled as one fidelity.
    #[serde(rename = "csf")]
    PooledSingleFidelity,
    /// Single GP over the new operator's data only.
    #[serde(rename = "lsf")]
    FreshSingleFidelity,
}

impl Formulation {
    pub const ALL: [Formulation; 3] = [
        Formulation::MultiFidelity,
        Formulation::PooledSingleFidelity,
        Formulation::FreshSingleFidelity,
    ];

    pub fn code(&self) -> &'static str {
        match self {
            Formulation::MultiFidelity => "mff",
            Formulation::PooledSingleFidelity => "csf",
            Formulation::FreshSingleFidelity => "lsf",
        }
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Formulation {
    type Err = MfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mff" => Ok(Formulation::MultiFidelity),
            "csf" => Ok(Formulation::PooledSingleFidelity),
            "lsf" => Ok(Formulation::FreshSingleFidelity),
            other => Err(MfError::InvalidInput(format!(
                "unknown formulation '{other}' (expected mff, csf, or lsf)"
            ))),
        }
    }
}

/// Low-fidelity observation-noise policy for the AR(1) model, in the model's
/// (post-standardization) units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLowPolicy {
    Fixed(f64),
    /// Pool the output variance within duplicate-input groups of the previous
    /// operators' data (same grid point evaluated more than once, possibly by
    /// different operators). Falls back to the given value when no input
    /// repeats. The estimate is computed in original units and follows the
    /// standardization scale.
    EstimateFromDuplicates { fallback: f64 },
}

/// Fidelity-scale policy for the AR(1) model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhoPolicy {
    Fixed(f64),
    /// Least-squares slope through the origin of the new operator's outputs
    /// against the low-fidelity posterior mean, clamped into `bounds`;
    /// `default` applies while fewer than 2 own observations exist.
    LeastSquares { default: f64, bounds: (f64, f64) },
}

/// Surrogate-model settings shared by the three formulations.
///
/// Kernels and `NoiseLowPolicy::Fixed` live in the model's unit system: when
/// `standardize` is on, outputs are centered and scaled per refit (constants
/// recomputed from everything the model currently conditions on), and the
/// original-unit measurement noise `noise_high` is rescaled alongside.
#[derive(Debug, Clone)]
pub struct ModelSettings {
    /// Kernel of the low-fidelity process; also the fallback kernel of both
    /// single-fidelity formulations.
    pub kernel_low: KernelSpec,
    pub kernel_delta: KernelSpec,
    /// Measurement-noise variance of the tuned operator's evaluations, in
    /// original output units.
    pub noise_high: f64,
    pub noise_low: NoiseLowPolicy,
    pub rho: RhoPolicy,
    pub standardize: bool,
    /// Per-formulation kernel and noise overrides. The formulations condition
    /// on different data mixtures (pooled archive plus own data vs own data
    /// alone), and a smoothing scale suited to one mixture is not in general
    /// suited to another; `None` falls back to `kernel_low`/`noise_high`.
    pub kernel_csf: Option<KernelSpec>,
    pub kernel_lsf: Option<KernelSpec>,
    pub noise_csf: Option<f64>,
    pub noise_lsf: Option<f64>,
}

impl ModelSettings {
    pub fn csf_kernel(&self) -> &KernelSpec {
        self.kernel_csf.as_ref().unwrap_or(&self.kernel_low)
    }

    pub fn lsf_kernel(&self) -> &KernelSpec {
        self.kernel_lsf.as_ref().unwrap_or(&self.kernel_low)
    }

    pub fn csf_noise(&self) -> f64 {
        self.noise_csf.unwrap_or(self.noise_high)
    }

    pub fn lsf_noise(&self) -> f64 {
        self.noise_lsf.unwrap_or(self.noise_high)
    }
}

/// One oracle answer: the noisy observation, the noiseless truth (for regret
/// accounting), and whether the underlying trajectory diverged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOutcome {
    pub y_noisy: f64,
    pub f_true: f64,
    pub diverged: bool,
}

/// Mean and sample standard deviation used for standardization. Disabled or
/// undersized data degrades to an identity transform on the scale.
fn standardize_constants<I: IntoIterator<Item = f64>>(outputs: I, enabled: bool) -> (f64, f64) {
    if !enabled {
        return (0.0, 1.0);
    }
    let values: Vec<f64> = outputs.into_iter().collect();
    if values.is_empty() {
        return (0.0, 1.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 1.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    if std > 1e-12 {
        (mean, std)
    } else {
        (mean, 1.0)
    }
}

/// An AR(1) model assembled in standardized units, with the constants that
/// map model outputs back to original units.
#[derive(Debug, Clone)]
pub struct MffAssembly {
    pub model: Ar1Model,
    pub center: f64,
    pub scale: f64,
}

/// Builds the AR(1) model the multi-fidelity formulation conditions on:
/// previous operators pooled as the low fidelity, `own` as the high one,
/// outputs standardized per `settings`, and the fidelity scale resolved
/// through the configured policy.
pub fn assemble_mff_model(
    prior_data: &[Dataset],
    own: &Dataset,
    settings: &ModelSettings,
) -> Result<MffAssembly> {
    let mut pooled_inputs: Vec<Vec<f64>> = Vec::new();
    let mut pooled_outputs: Vec<f64> = Vec::new();
    for d in prior_data {
        pooled_inputs.extend(d.inputs().iter().cloned());
        pooled_outputs.extend_from_slice(d.outputs());
    }
    let (center, scale) = standardize_constants(
        pooled_outputs.iter().chain(own.outputs()).copied(),
        settings.standardize,
    );
    let noise_low = match settings.noise_low {
        NoiseLowPolicy::Fixed(v) => v,
        NoiseLowPolicy::EstimateFromDuplicates { fallback } => {
            duplicate_noise_estimate(&prior_data.iter().collect::<Vec<_>>())
                .map(|v| v / (scale * scale))
                .unwrap_or(fallback)
        }
    };
    let data_low = Dataset::new(
        pooled_inputs,
        pooled_outputs.iter().map(|y| (y - center) / scale).collect(),
        noise_low,
    )?;
    let data_high = own.map_outputs(settings.noise_high / (scale * scale), |y| {
        (y - center) / scale
    })?;
    let model = match settings.rho {
        RhoPolicy::Fixed(rho) => Ar1Model::new(
            rho,
            settings.kernel_low.clone(),
            settings.kernel_delta.clone(),
            data_low,
            data_high,
        )?,
        RhoPolicy::LeastSquares { default, bounds } => {
            let mut cfg =
                Ar1FitConfig::new(settings.kernel_low.clone(), settings.kernel_delta.clone());
            cfg.rho_default = default;
            cfg.rho_bounds = bounds;
            cfg.fit_kernels = false;
            fit_ar1_hyperparameters(&data_low, &data_high, &cfg)?
        }
    };
    Ok(MffAssembly { model, center, scale })
}

/// Pooled within-group output variance over exact duplicate inputs, in the
/// units of `datasets`' outputs. `None` when no input repeats.
pub fn duplicate_noise_estimate(datasets: &[&Dataset]) -> Option<f64> {
    // Ordered map: the group summation order must not depend on hash state,
    // or campaign outputs stop being bit-reproducible.
    let mut groups: BTreeMap<Vec<u64>, Vec<f64>> = BTreeMap::new();
    for data in datasets {
        for (x, y) in data.inputs().iter().zip(data.outputs()) {
            let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            groups.entry(key).or_default().push(*y);
        }
    }
    let mut ss = 0.0;
    let mut dof = 0usize;
    for ys in groups.values() {
        if ys.len() < 2 {
            continue;
        }
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        ss += ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>();
        dof += ys.len() - 1;
    }
    if dof == 0 {
        None
    } else {
        Some(ss / dof as f64)
    }
}

/// Run one tuning loop of `ucb.horizon` selections.
///
/// `prior_data` holds one dataset per previous operator (original units);
/// `own` is the tuned operator's starting dataset, normally empty. The oracle
/// maps a grid index to a noisy evaluation; its failure stops the run and the
/// partial trace comes back flagged incomplete. `f_star` is the exhaustive
/// noiseless grid optimum used for regret accounting.
pub fn run_formulation(
    kind: Formulation,
    prior_data: &[Dataset],
    own: &Dataset,
    grid: &DesignGrid,
    ucb: &UcbConfig,
    model: &ModelSettings,
    f_star: f64,
    oracle: &mut dyn FnMut(usize) -> Result<EvalOutcome>,
) -> Result<RegretTrace> {
    ucb.validate()?;
    if grid.is_empty() {
        return Err(MfError::InvalidInput("design grid is empty".into()));
    }
    if grid.dim() != model.kernel_low.dim() {
        return Err(MfError::DimensionMismatch {
            context: "run (grid vs kernel dim)",
            expected: model.kernel_low.dim(),
            got: grid.dim(),
        });
    }
    for noise in [model.noise_high, model.csf_noise(), model.lsf_noise()] {
        if !(noise.is_finite() && noise >= 0.0) {
            return Err(MfError::InvalidInput(format!(
                "measurement noise variance must be non-negative, got {noise}"
            )));
        }
    }
    for kernel in [model.csf_kernel(), model.lsf_kernel()] {
        if kernel.dim() != grid.dim() {
            return Err(MfError::DimensionMismatch {
                context: "run (grid vs formulation kernel dim)",
                expected: grid.dim(),
                got: kernel.dim(),
            });
        }
    }

    // Pooled previous-operator data, shared by the MFF low fidelity and CSF.
    let mut pooled_inputs: Vec<Vec<f64>> = Vec::new();
    let mut pooled_outputs: Vec<f64> = Vec::new();
    for d in prior_data {
        if let Some(dim) = d.dim() {
            if dim != grid.dim() {
                return Err(MfError::DimensionMismatch {
                    context: "run (prior data dim)",
                    expected: grid.dim(),
                    got: dim,
                });
            }
        }
        pooled_inputs.extend(d.inputs().iter().cloned());
        pooled_outputs.extend_from_slice(d.outputs());
    }

    let mut own = own.clone();
    let mut indices = Vec::with_capacity(ucb.horizon);
    let mut points = Vec::with_capacity(ucb.horizon);
    let mut y_noisy = Vec::with_capacity(ucb.horizon);
    let mut f_true = Vec::with_capacity(ucb.horizon);
    let mut diverged = Vec::with_capacity(ucb.horizon);
    let mut failure = None;

    for t in 1..=ucb.horizon {
        let (means, vars) = match kind {
            Formulation::MultiFidelity => {
                let assembly = assemble_mff_model(prior_data, &own, model)?;
                Ar1Posterior::fit(assembly.model)?.predict_batch(grid.points())?
            }
            Formulation::PooledSingleFidelity => {
                let all_outputs = pooled_outputs.iter().chain(own.outputs()).copied();
                let (center, scale) = standardize_constants(all_outputs, model.standardize);
                let inputs: Vec<Vec<f64>> = pooled_inputs
                    .iter()
                    .chain(own.inputs())
                    .cloned()
                    .collect();
                let outputs: Vec<f64> = pooled_outputs
                    .iter()
                    .chain(own.outputs())
                    .map(|y| (y - center) / scale)
                    .collect();
                let data = Dataset::new(inputs, outputs, model.csf_noise() / (scale * scale))?;
                GpPosterior::fit(model.csf_kernel().clone(), data)?.predict_batch(grid.points())?
            }
            Formulation::FreshSingleFidelity => {
                let (center, scale) =
                    standardize_constants(own.outputs().iter().copied(), model.standardize);
                let data = own.map_outputs(model.lsf_noise() / (scale * scale), |y| {
                    (y - center) / scale
                })?;
                GpPosterior::fit(model.lsf_kernel().clone(), data)?.predict_batch(grid.points())?
            }
        };
        let stds: Vec<f64> = vars.iter().map(|v| v.sqrt()).collect();
        let beta = match ucb.beta_override {
            Some(b) => b,
            None => beta_schedule(t, grid.len(), ucb.delta)?,
        };
        let idx = ucb_select(&means, &stds, beta)?;
        match oracle(idx) {
            Ok(out) => {
                indices.push(idx);
                points.push(grid.point(idx).to_vec());
                y_noisy.push(out.y_noisy);
                f_true.push(out.f_true);
                diverged.push(out.diverged);
                own.push(grid.point(idx).to_vec(), out.y_noisy)?;
            }
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        }
    }

    let (instantaneous, cumulative, best) = regret_from_picks(&f_true, f_star)?;
    Ok(RegretTrace {
        indices,
        points,
        y_noisy,
        f_true,
        diverged,
        instantaneous,
        cumulative,
        best,
        complete: failure.is_none(),
        failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn grid_enumeration_order_and_endpoints() {
        let g = DesignGrid::new(vec![
            GridDim { min: 0.0, max: 1.0, count: 2 },
            GridDim { min: 10.0, max: 30.0, count: 3 },
        ])
        .unwrap();
        assert_eq!(g.len(), 6);
        let expect = [
            [0.0, 10.0],
            [0.0, 20.0],
            [0.0, 30.0],
            [1.0, 10.0],
            [1.0, 20.0],
            [1.0, 30.0],
        ];
        for (i, e) in expect.iter().enumerate() {
            assert_eq!(g.point(i), e.as_slice());
            let coords = g.coordinates(i);
            assert_eq!(g.point(i)[0], [0.0, 1.0][coords[0]]);
        }
    }

    #[test]
    fn default_design_ranges_enumerate_exactly() {
        let g = DesignGrid::new(vec![
            GridDim { min: 0.25, max: 0.45, count: 11 },
            GridDim { min: 0.85, max: 0.95, count: 11 },
            GridDim { min: 0.02, max: 0.22, count: 11 },
        ])
        .unwrap();
        assert_eq!(g.len(), 1331);
        assert_eq!(g.point(0), &[0.25, 0.85, 0.02]);
        let last = g.point(1330);
        assert_eq!(last, &[0.45, 0.95, 0.22]);
    }

    #[test]
    fn grid_validation() {
        assert!(DesignGrid::new(vec![]).is_err());
        assert!(DesignGrid::new(vec![GridDim { min: 1.0, max: 0.0, count: 3 }]).is_err());
        assert!(DesignGrid::new(vec![GridDim { min: 0.0, max: 1.0, count: 0 }]).is_err());
        let single = DesignGrid::new(vec![GridDim { min: 0.5, max: 0.5, count: 1 }]).unwrap();
        assert_eq!(single.points(), &[vec![0.5]]);
    }

    #[test]
    fn beta_schedule_frozen_value() {
        // |X| = 1331, t = 1, delta = 0.1.
        let b = beta_schedule(1, 1331, 0.1).unwrap();
        assert_relative_eq!(b, 19.988, max_relative = 1e-4);
        let exact = 2.0 * (1331.0 * std::f64::consts::PI.powi(2) / 0.6f64).ln();
        assert_eq!(b, exact);
    }

    #[test]
    fn beta_schedule_monotone_and_positive() {
        let mut prev = 0.0;
        for t in 1..=30 {
            let b = beta_schedule(t, 1331, 0.1).unwrap();
            assert!(b > prev);
            prev = b;
        }
        // Smallest possible argument with valid delta is pi^2/6 > 1.
        assert!(beta_schedule(1, 1, 0.999).unwrap() > 0.0);
    }

    #[test]
    fn beta_schedule_rejects_bad_delta() {
        assert!(beta_schedule(1, 10, 0.0).is_err());
        assert!(beta_schedule(1, 10, 1.0).is_err());
        assert!(beta_schedule(1, 10, -0.5).is_err());
        assert!(beta_schedule(0, 10, 0.1).is_err());
    }

    #[test]
    fn ucb_select_hand_examples() {
        // Scores 0 + 1*1 = 1.0 vs 0.5 + 1*0.1 = 0.6.
        assert_eq!(ucb_select(&[0.0, 0.5], &[1.0, 0.1], 1.0).unwrap(), 0);
        // Pure exploitation.
        assert_eq!(ucb_select(&[0.1, 0.9, 0.3], &[0.0, 0.0, 0.0], 5.0).unwrap(), 1);
        // Translation invariance.
        let base = ucb_select(&[0.2, 0.8, 0.5], &[0.3, 0.1, 0.2], 2.0).unwrap();
        let shifted: Vec<f64> = [0.2, 0.8, 0.5].iter().map(|m| m + 100.0).collect();
        assert_eq!(ucb_select(&shifted, &[0.3, 0.1, 0.2], 2.0).unwrap(), base);
        // Ties break to the lowest index.
        assert_eq!(ucb_select(&[1.0, 1.0, 1.0], &[0.5, 0.5, 0.5], 1.0).unwrap(), 0);
    }

    #[test]
    fn ucb_select_rejects_bad_input() {
        assert!(ucb_select(&[], &[], 1.0).is_err());
        assert!(ucb_select(&[1.0], &[1.0, 2.0], 1.0).is_err());
        assert!(ucb_select(&[f64::NAN], &[0.0], 1.0).is_err());
        assert!(ucb_select(&[0.0], &[-1.0], 1.0).is_err());
        assert!(ucb_select(&[0.0], &[1.0], -2.0).is_err());
    }

    #[test]
    fn regret_hand_example() {
        // Values {a: 5, b: 3}, picks [b, b, a].
        let (inst, cum, best) = regret_from_picks(&[3.0, 3.0, 5.0], 5.0).unwrap();
        assert_eq!(inst, vec![2.0, 2.0, 0.0]);
        assert_eq!(cum, vec![2.0, 4.0, 4.0]);
        assert_eq!(best, vec![2.0, 2.0, 0.0]);
    }

    #[test]
    fn regret_optimal_play_and_inconsistency() {
        let (inst, cum, _) = regret_from_picks(&[5.0, 5.0], 5.0).unwrap();
        assert_eq!(inst, vec![0.0, 0.0]);
        assert_eq!(cum, vec![0.0, 0.0]);
        assert!(matches!(
            regret_from_picks(&[5.1], 5.0),
            Err(MfError::Inconsistent(_))
        ));
    }

    #[test]
    fn truth_table_argmax_and_validation() {
        let t = TruthTable::from_values(vec![-3.0, -1.0, -2.0], vec![false; 3]).unwrap();
        assert_eq!(t.argmax(), 1);
        assert_eq!(t.f_star(), -1.0);
        assert!(TruthTable::from_values(vec![], vec![]).is_err());
        assert!(TruthTable::from_values(vec![f64::NAN], vec![false]).is_err());
    }

    #[test]
    fn formulation_codes_round_trip() {
        for f in Formulation::ALL {
            assert_eq!(f, f.code().parse().unwrap());
        }
        assert_eq!("MFF".parse::<Formulation>().unwrap(), Formulation::MultiFidelity);
        assert!("abc".parse::<Formulation>().is_err());
    }

    #[test]
    fn duplicate_noise_pools_within_groups() {
        // Two groups with repeats: {1.0, 3.0} at x=0 and {10.0, 10.0, 13.0} at
        // x=1; one singleton. Pooled variance = (2 + 6)/(1 + 2).
        let a = Dataset::new(
            vec![vec![0.0], vec![1.0], vec![2.0]],
            vec![1.0, 10.0, 99.0],
            0.0,
        )
        .unwrap();
        let b = Dataset::new(
            vec![vec![0.0], vec![1.0], vec![1.0]],
            vec![3.0, 10.0, 13.0],
            0.0,
        )
        .unwrap();
        let est = duplicate_noise_estimate(&[&a, &b]).unwrap();
        assert_relative_eq!(est, (2.0 + 6.0) / 3.0, max_relative = 1e-12);

        let c = Dataset::new(vec![vec![5.0]], vec![1.0], 0.0).unwrap();
        assert!(duplicate_noise_estimate(&[&c]).is_none());
    }

    fn small_grid() -> DesignGrid {
        DesignGrid::new(vec![GridDim { min: 0.0, max: 1.0, count: 8 }]).unwrap()
    }

    fn settings(kernel: KernelSpec, delta_signal: f64, noise: f64) -> ModelSettings {
        ModelSettings {
            kernel_delta: kernel.with_signal_variance(delta_signal).unwrap(),
            kernel_low: kernel,
            noise_high: noise,
            noise_low: NoiseLowPolicy::Fixed(noise),
            rho: RhoPolicy::Fixed(1.0),
            standardize: true,
            kernel_csf: None,
            kernel_lsf: None,
            noise_csf: None,
            noise_lsf: None,
        }
    }

    /// Noisy oracle over a fixed truth table using its own rng clone.
    fn table_oracle(
        truth: &TruthTable,
        noise_std: f64,
        mut rng: ChaCha12Rng,
    ) -> impl FnMut(usize) -> Result<EvalOutcome> {
        let values = truth.values().to_vec();
        move |idx: usize| {
            let eta: f64 = rng.random::<f64>() * 2.0 - 1.0;
            Ok(EvalOutcome {
                y_noisy: values[idx] + noise_std * eta,
                f_true: values[idx],
                diverged: false,
            })
        }
    }

    fn synthetic_truth(grid: &DesignGrid) -> TruthTable {
        let values: Vec<f64> = grid
            .points()
            .iter()
            .map(|x| -((x[0] - 0.63) * (x[0] - 0.63)) * 10.0 - 2.0)
            .collect();
        TruthTable::from_values(values, vec![false; grid.len()]).unwrap()
    }

    #[test]
    fn lsf_empty_prior_picks_tie_break_point_first() {
        let grid = small_grid();
        let truth = synthetic_truth(&grid);
        let kernel = KernelSpec::squared_exponential(1.0, vec![0.3]).unwrap();
        let model = settings(kernel, 0.5, 1e-4);
        let ucb = UcbConfig { delta: 0.1, horizon: 1, beta_override: None };
        let own = Dataset::empty(1e-4).unwrap();
        let mut oracle = table_oracle(&truth, 0.0, ChaCha12Rng::seed_from_u64(0));
        let trace = run_formulation(
            Formulation::FreshSingleFidelity,
            &[],
            &own,
            &grid,
            &ucb,
            &model,
            truth.f_star(),
            &mut oracle,
        )
        .unwrap();
        // Constant prior scores tie across the grid; the lowest index wins.
        assert_eq!(trace.indices, vec![0]);
        assert!(trace.complete);
    }

    #[test]
    fn csf_without_history_equals_lsf() {
        let grid = small_grid();
        let truth = synthetic_truth(&grid);
        let kernel = KernelSpec::squared_exponential(1.0, vec![0.3]).unwrap();
        let model = settings(kernel, 0.5, 1e-4);
        let ucb = UcbConfig { delta: 0.1, horizon: 6, beta_override: None };
        let own = Dataset::empty(1e-4).unwrap();
        let mut o1 = table_oracle(&truth, 0.01, ChaCha12Rng::seed_from_u64(77));
        let mut o2 = table_oracle(&truth, 0.01, ChaCha12Rng::seed_from_u64(77));
        let csf = run_formulation(
            Formulation::PooledSingleFidelity,
            &[],
            &own,
            &grid,
            &ucb,
            &model,
            truth.f_star(),
            &mut o1,
        )
        .unwrap();
        let lsf = run_formulation(
            Formulation::FreshSingleFidelity,
            &[],
            &own,
            &grid,
            &ucb,
            &model,
            truth.f_star(),
            &mut o2,
        )
        .unwrap();
        assert_eq!(csf.indices, lsf.indices);
        assert_eq!(csf.y_noisy, lsf.y_noisy);
        assert_eq!(csf.cumulative, lsf.cumulative);
    }

    #[test]
    fn degenerate_mff_equals_lsf_with_pooled_data() {
        // rho = 1, vanishing discrepancy prior, equal noises, and the new
        // operator's objective equal to the low-fidelity one: the AR(1) run
        // must reproduce the single-fidelity run that starts from the pooled
        // data as its own.
        let grid = small_grid();
        let truth = synthetic_truth(&grid);
        let kernel = KernelSpec::squared_exponential(1.0, vec![0.3]).unwrap();
        let noise = 1e-4;
        let mut model = settings(kernel, 1e-12, noise);
        model.noise_low = NoiseLowPolicy::Fixed(noise);
        model.rho = RhoPolicy::Fixed(1.0);

        // Previous-operator data sampled from the same truth.
        let mut hist_rng = ChaCha12Rng::seed_from_u64(5);
        let mut prior_inputs = Vec::new();
        let mut prior_outputs = Vec::new();
        for _ in 0..12 {
            let idx = hist_rng.random_range(0..grid.len());
            prior_inputs.push(grid.point(idx).to_vec());
            prior_outputs.push(truth.values()[idx] + 0.01 * (hist_rng.random::<f64>() - 0.5));
        }
        let prior = Dataset::new(prior_inputs, prior_outputs, noise).unwrap();

        let ucb = UcbConfig { delta: 0.1, horizon: 6, beta_override: None };
        let mut o1 = table_oracle(&truth, 0.01, ChaCha12Rng::seed_from_u64(99));
        let mut o2 = table_oracle(&truth, 0.01, ChaCha12Rng::seed_from_u64(99));

        let mff = run_formulation(
            Formulation::MultiFidelity,
            std::slice::from_ref(&prior),
            &Dataset::empty(noise).unwrap(),
            &grid,
            &ucb,
            &model,
            truth.f_star(),
            &mut o1,
        )
        .unwrap();
        let lsf = run_formulation(
            Formulation::FreshSingleFidelity,
            &[],
            &prior,
            &grid,
            &ucb,
            &model,
            truth.f_star(),
            &mut o2,
        )
        .unwrap();
        assert_eq!(mff.indices, lsf.indices);
        for (a, b) in mff.cumulative.iter().zip(&lsf.cumulative) {
            assert_relative_eq!(a, b, max_relative = 1e-9);
        }
    }

    #[test]
    fn oracle_failure_flags_partial_trace() {
        let grid = small_grid();
        let truth = synthetic_truth(&grid);
        let kernel = KernelSpec::squared_exponential(1.0, vec![0.3]).unwrap();
        let model = settings(kernel, 0.5, 1e-4);
        let ucb = UcbConfig { delta: 0.1, horizon: 5, beta_override: None };
        let mut calls = 0usize;
        let values = truth.values().to_vec();
        let mut oracle = move |idx: usize| {
            calls += 1;
            if calls > 2 {
                return Err(MfError::InvalidInput("instrument offline".into()));
            }
            Ok(EvalOutcome { y_noisy: values[idx], f_true: values[idx], diverged: false })
        };
        let trace = run_formulation(
            Formulation::FreshSingleFidelity,
            &[],
            &Dataset::empty(1e-4).unwrap(),
            &grid,
            &ucb,
            &model,
            truth.f_star(),
            &mut oracle,
        )
        .unwrap();
        assert!(!trace.complete);
        assert_eq!(trace.len(), 2);
        assert!(trace.failure.as_deref().unwrap().contains("instrument offline"));
    }

    #[test]
    fn traces_are_deterministic() {
        let grid = small_grid();
        let truth = synthetic_truth(&grid);
        let kernel = KernelSpec::squared_exponential(1.0, vec![0.3]).unwrap();
        let model = settings(kernel, 0.5, 1e-4);
        let ucb = UcbConfig { delta: 0.1, horizon: 8, beta_override: None };
        let run = || {
            let mut oracle = table_oracle(&truth, 0.01, ChaCha12Rng::seed_from_u64(4));
            run_formulation(
                Formulation::FreshSingleFidelity,
                &[],
                &Dataset::empty(1e-4).unwrap(),
                &grid,
                &ucb,
                &model,
                truth.f_star(),
                &mut oracle,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.y_noisy, b.y_noisy);
        assert_eq!(a.cumulative, b.cumulative);
    }

    #[test]
    fn regret_invariants_on_a_noisier_run() {
        let grid = small_grid();
        let truth = synthetic_truth(&grid);
        let kernel = KernelSpec::squared_exponential(1.0, vec![0.25]).unwrap();
        let model = settings(kernel, 0.5, 1e-2);
        let ucb = UcbConfig { delta: 0.1, horizon: 10, beta_override: None };
        let mut oracle = table_oracle(&truth, 0.1, ChaCha12Rng::seed_from_u64(21));
        let trace = run_formulation(
            Formulation::FreshSingleFidelity,
            &[],
            &Dataset::empty(1e-2).unwrap(),
            &grid,
            &ucb,
            &model,
            truth.f_star(),
            &mut oracle,
        )
        .unwrap();
        assert_eq!(trace.len(), 10);
        for t in 0..trace.len() {
            assert!(trace.instantaneous[t] >= 0.0);
            assert!(trace.best[t] <= trace.instantaneous[t]);
            if t > 0 {
                assert!(trace.cumulative[t] >= trace.cumulative[t - 1]);
                assert!(trace.best[t] <= trace.best[t - 1]);
            }
        }
    }
}
