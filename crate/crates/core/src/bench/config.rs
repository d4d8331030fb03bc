//! Campaign configuration: a versioned, human-editable TOML schema whose
//! defaults reproduce the reference benchmark without any file.

use serde::{Deserialize, Serialize};

use crate::bayesopt::{
    DesignGrid, Formulation, GridDim, ModelSettings, NoiseLowPolicy, RhoPolicy, UcbConfig,
};
use crate::error::{MfError, Result};
use crate::kernel::KernelSpec;
use crate::sim::{OperatorDistribution, SimSettings};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub trials: usize,
    pub horizon: usize,
    pub formulations: Vec<Formulation>,
    /// Apply the configured disturbance to the tuned operator's plant.
    /// Previous operators' history is always collected undisturbed.
    pub disturbed: bool,
    pub plant: PlantConfig,
    pub grid: GridConfig,
    pub operators: OperatorConfig,
    pub model: ModelConfig,
    pub ucb: UcbSection,
    pub bounds: BoundsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 42,
            trials: 20,
            horizon: 20,
            formulations: Formulation::ALL.to_vec(),
            disturbed: false,
            plant: PlantConfig::default(),
            grid: GridConfig::default(),
            operators: OperatorConfig::default(),
            model: ModelConfig::default(),
            ucb: UcbSection::default(),
            bounds: BoundsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    /// Workspace degrees of freedom; the state stacks error, error rate, and
    /// human force, `3n` in total.
    pub n: usize,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub horizon: f64,
    pub step: f64,
    /// Constant state-space offset switched on by `disturbed`.
    pub disturbance: Vec<f64>,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            n: 2,
            q_diag: vec![0.1, 0.1, 0.1, 0.1, 10.0, 10.0],
            r_diag: vec![1.0, 1.0],
            horizon: 10.0,
            step: 1e-3,
            disturbance: vec![0.0, 0.0, 0.05, 0.05, 0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub x1: GridDim,
    pub x2: GridDim,
    pub x3: GridDim,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            x1: GridDim { min: 0.25, max: 0.45, count: 11 },
            x2: GridDim { min: 0.85, max: 0.95, count: 11 },
            x3: GridDim { min: 0.02, max: 0.22, count: 11 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorConfig {
    /// Number of previous operators whose data seeds the priors.
    pub count: usize,
    /// History points per operator, drawn from the grid without replacement.
    pub points_per_operator: usize,
    pub kd_mean: f64,
    pub kd_variance: f64,
    pub kp_mean: f64,
    pub kp_variance: f64,
    pub min_gain: f64,
    pub max_draws: usize,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            count: 9,
            points_per_operator: 20,
            kd_mean: 10.0,
            kd_variance: 5.0,
            kp_mean: 20.0,
            kp_variance: 5.0,
            min_gain: 0.1,
            max_draws: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Kernel amplitudes and the low-fidelity noise fallback are expressed in
    /// standardized output units when `standardize` is on.
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub delta_signal_variance: f64,
    pub delta_lengthscales: Vec<f64>,
    /// Observation-noise variance of a cost evaluation, original units.
    pub measurement_variance: f64,
    /// Fixed low-fidelity noise variance; when absent it is estimated from
    /// duplicate grid points in the pooled history.
    pub noise_low_fixed: Option<f64>,
    pub noise_low_fallback: f64,
    /// Fixed fidelity scale; when absent it is refit by least squares each
    /// iteration.
    pub rho_fixed: Option<f64>,
    pub rho_default: f64,
    pub rho_bounds: [f64; 2],
    pub standardize: bool,
    /// Refit the low-fidelity kernel once per trial on the pooled history.
    pub auto_fit: bool,
    pub fit_seed: u64,
    /// Kernel overrides for the two single-fidelity formulations. Each
    /// formulation smooths a different data mixture, so its kernel is
    /// adjustable separately; unset fields inherit the shared model values.
    pub csf: KernelOverride,
    pub lsf: KernelOverride,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelOverride {
    pub signal_variance: Option<f64>,
    pub lengthscales: Option<Vec<f64>>,
    pub measurement_variance: Option<f64>,
}

impl KernelOverride {
    fn is_empty(&self) -> bool {
        self.signal_variance.is_none() && self.lengthscales.is_none()
    }

    /// The overridden kernel, or `None` when every field inherits.
    fn resolve(&self, base_signal: f64, base_ls: &[f64], label: &str) -> Result<Option<KernelSpec>> {
        if self.is_empty() {
            return Ok(None);
        }
        let signal = self.signal_variance.unwrap_or(base_signal);
        let ls = self.lengthscales.clone().unwrap_or_else(|| base_ls.to_vec());
        if ls.len() != base_ls.len() {
            return Err(MfError::Config(format!(
                "{label} lengthscales need {} entries, got {}",
                base_ls.len(),
                ls.len()
            )));
        }
        KernelSpec::squared_exponential(signal, ls)
            .map(Some)
            .map_err(|e| MfError::Config(format!("{label} kernel: {e}")))
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            signal_variance: 1.0,
            lengthscales: vec![0.03, 0.02, 0.05],
            delta_signal_variance: 0.4,
            delta_lengthscales: vec![0.5, 0.25, 0.5],
            measurement_variance: 1e-4,
            noise_low_fixed: None,
            noise_low_fallback: 0.05,
            rho_fixed: None,
            rho_default: 1.0,
            rho_bounds: [0.0, 5.0],
            standardize: true,
            auto_fit: false,
            fit_seed: 0,
            csf: KernelOverride::default(),
            // The fresh-start model conditions on a handful of its own points,
            // so it gets coarse x2/x3 scales near the response surface's own;
            // with the short shared scales its first exploratory steps crawl
            // the x1 range one grid cell at a time.
            lsf: KernelOverride {
                lengthscales: Some(vec![0.03, 0.10, 0.20]),
                ..KernelOverride::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UcbSection {
    pub delta: f64,
    pub beta_override: Option<f64>,
}

impl Default for UcbSection {
    fn default() -> Self {
        Self { delta: 0.1, beta_override: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSection {
    /// Emit a bound-validation report for each completed multi-fidelity run.
    pub enabled: bool,
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self { enabled: true }
    }
}

impl ExperimentConfig {
    /// The built-in profile reproducing the reference benchmark.
    pub fn paper_default() -> Self {
        Self::default()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| MfError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| MfError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(MfError::Config(format!(
                "unsupported schema_version {} (this build reads {})",
                self.schema_version, SCHEMA_VERSION
            )));
        }
        if self.trials < 1 {
            return Err(MfError::Config("trials must be >= 1".into()));
        }
        if self.horizon < 1 {
            return Err(MfError::Config("horizon must be >= 1".into()));
        }
        if self.formulations.is_empty() {
            return Err(MfError::Config("formulations must not be empty".into()));
        }
        let dim = 3 * self.plant.n;
        if self.plant.n == 0 {
            return Err(MfError::Config("plant.n must be >= 1".into()));
        }
        if self.plant.q_diag.len() != dim {
            return Err(MfError::Config(format!(
                "plant.q_diag needs {dim} entries, got {}",
                self.plant.q_diag.len()
            )));
        }
        if self.plant.r_diag.len() != self.plant.n {
            return Err(MfError::Config(format!(
                "plant.r_diag needs {} entries, got {}",
                self.plant.n,
                self.plant.r_diag.len()
            )));
        }
        if self.plant.disturbance.len() != dim {
            return Err(MfError::Config(format!(
                "plant.disturbance needs {dim} entries, got {}",
                self.plant.disturbance.len()
            )));
        }
        self.sim_settings().validate()?;
        let grid = self.design_grid()?;
        if self.operators.points_per_operator > grid.len() {
            return Err(MfError::Config(format!(
                "points_per_operator {} exceeds the {}-point grid (draws are \
                 without replacement)",
                self.operators.points_per_operator,
                grid.len()
            )));
        }
        // Surfaces kernel and policy mistakes before any simulation runs.
        self.model_settings()?;
        self.ucb_config().validate()?;
        Ok(())
    }

    pub fn design_grid(&self) -> Result<DesignGrid> {
        DesignGrid::new(vec![self.grid.x1, self.grid.x2, self.grid.x3])
    }

    pub fn sim_settings(&self) -> SimSettings {
        SimSettings { horizon: self.plant.horizon, step: self.plant.step }
    }

    pub fn operator_distribution(&self) -> OperatorDistribution {
        OperatorDistribution {
            mean_k_d: self.operators.kd_mean,
            var_k_d: self.operators.kd_variance,
            mean_k_p: self.operators.kp_mean,
            var_k_p: self.operators.kp_variance,
            min_gain: self.operators.min_gain,
            max_draws: self.operators.max_draws,
        }
    }

    pub fn model_settings(&self) -> Result<ModelSettings> {
        let m = &self.model;
        if !(m.measurement_variance.is_finite() && m.measurement_variance >= 0.0) {
            return Err(MfError::Config(format!(
                "measurement_variance must be non-negative, got {}",
                m.measurement_variance
            )));
        }
        let kernel_low = KernelSpec::squared_exponential(m.signal_variance, m.lengthscales.clone())
            .map_err(|e| MfError::Config(format!("model kernel: {e}")))?;
        let kernel_delta =
            KernelSpec::squared_exponential(m.delta_signal_variance, m.delta_lengthscales.clone())
                .map_err(|e| MfError::Config(format!("discrepancy kernel: {e}")))?;
        if kernel_delta.dim() != kernel_low.dim() {
            return Err(MfError::Config(
                "lengthscales and delta_lengthscales must have the same length".into(),
            ));
        }
        let noise_low = match m.noise_low_fixed {
            Some(v) => NoiseLowPolicy::Fixed(v),
            None => NoiseLowPolicy::EstimateFromDuplicates { fallback: m.noise_low_fallback },
        };
        let rho = match m.rho_fixed {
            Some(v) => RhoPolicy::Fixed(v),
            None => RhoPolicy::LeastSquares {
                default: m.rho_default,
                bounds: (m.rho_bounds[0], m.rho_bounds[1]),
            },
        };
        for (label, noise) in [
            ("csf", m.csf.measurement_variance),
            ("lsf", m.lsf.measurement_variance),
        ] {
            if let Some(v) = noise {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(MfError::Config(format!(
                        "{label} measurement_variance must be non-negative, got {v}"
                    )));
                }
            }
        }
        Ok(ModelSettings {
            kernel_csf: m.csf.resolve(m.signal_variance, &m.lengthscales, "csf")?,
            kernel_lsf: m.lsf.resolve(m.signal_variance, &m.lengthscales, "lsf")?,
            noise_csf: m.csf.measurement_variance,
            noise_lsf: m.lsf.measurement_variance,
            kernel_low,
            kernel_delta,
            noise_high: m.measurement_variance,
            noise_low,
            rho,
            standardize: m.standardize,
        })
    }

    pub fn ucb_config(&self) -> UcbConfig {
        UcbConfig {
            delta: self.ucb.delta,
            horizon: self.horizon,
            beta_override: self.ucb.beta_override,
        }
    }

    /// Requested formulations with duplicates removed, original order kept.
    pub fn unique_formulations(&self) -> Vec<Formulation> {
        let mut seen = Vec::new();
        for f in &self.formulations {
            if !seen.contains(f) {
                seen.push(*f);
            }
        }
        seen
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_profile_is_valid_and_matches_reference_scales() {
        let cfg = ExperimentConfig::paper_default();
        cfg.validate().unwrap();
        assert_eq!(cfg.trials, 20);
        assert_eq!(cfg.horizon, 20);
        assert_eq!(cfg.operators.count, 9);
        assert_eq!(cfg.operators.points_per_operator, 20);
        let grid = cfg.design_grid().unwrap();
        assert_eq!(grid.len(), 1331);
        assert_eq!(grid.point(0), &[0.25, 0.85, 0.02]);
        assert_eq!(cfg.model.measurement_variance, 1e-4);
        assert_eq!(cfg.ucb.delta, 0.1);
        assert_eq!(cfg.plant.disturbance, vec![0.0, 0.0, 0.05, 0.05, 0.0, 0.0]);
    }

    #[test]
    fn toml_round_trip_preserves_config() {
        let cfg = ExperimentConfig::paper_default();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_toml_overrides_only_named_keys() {
        let cfg = ExperimentConfig::from_toml_str(
            "trials = 3\n[model]\nsignal_variance = 2.5\n",
        )
        .unwrap();
        assert_eq!(cfg.trials, 3);
        assert_eq!(cfg.model.signal_variance, 2.5);
        assert_eq!(cfg.horizon, 20);
        assert_eq!(cfg.operators.count, 9);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("trails = 3\n").is_err());
        assert!(ExperimentConfig::from_toml_str("trials = 0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("schema_version = 99\n").is_err());
        assert!(ExperimentConfig::from_toml_str("formulations = []\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[model]\nlengthscales = [0.1]\n").is_err());
        assert!(
            ExperimentConfig::from_toml_str("[operators]\npoints_per_operator = 2000\n").is_err()
        );
    }

    #[test]
    fn formulation_list_deduplicates_in_order() {
        let cfg = ExperimentConfig::from_toml_str(
            "formulations = [\"lsf\", \"mff\", \"lsf\"]\n",
        )
        .unwrap();
        assert_eq!(
            cfg.unique_formulations(),
            vec![Formulation::FreshSingleFidelity, Formulation::MultiFidelity]
        );
    }

    #[test]
    fn model_settings_resolve_policies() {
        let mut cfg = ExperimentConfig::paper_default();
        let settings = cfg.model_settings().unwrap();
        assert!(matches!(
            settings.noise_low,
            NoiseLowPolicy::EstimateFromDuplicates { .. }
        ));
        assert!(matches!(settings.rho, RhoPolicy::LeastSquares { .. }));
        cfg.model.noise_low_fixed = Some(0.2);
        cfg.model.rho_fixed = Some(1.5);
        let fixed = cfg.model_settings().unwrap();
        assert_eq!(fixed.noise_low, NoiseLowPolicy::Fixed(0.2));
        assert_eq!(fixed.rho, RhoPolicy::Fixed(1.5));
    }
}
