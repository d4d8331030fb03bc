//! Two-fidelity Gaussian process with an AR(1) coupling:
//! `f_H(x) = rho * f_L(x) + delta(x)`, with independent GP priors on the
//! low-fidelity process `f_L` and the discrepancy `delta`.
//!
//! Low-fidelity data comes from previous operators; high-fidelity data from
//! the operator being tuned. Both carry their own observation-noise variance.

use nalgebra::{DMatrix, DVector};

use crate::error::{MfError, Result};
use crate::gp::{fit_kernel, Dataset, FitOptions, GpPosterior};
use crate::kernel::KernelSpec;
use crate::linalg::{CholeskyFactor, SymMatrix};

/// AR(1) two-fidelity model definition plus its conditioning data.
#[derive(Debug, Clone)]
pub struct Ar1Model {
    rho: f64,
    kernel_low: KernelSpec,
    kernel_delta: KernelSpec,
    data_low: Dataset,
    data_high: Dataset,
}

impl Ar1Model {
    pub fn new(
        rho: f64,
        kernel_low: KernelSpec,
        kernel_delta: KernelSpec,
        data_low: Dataset,
        data_high: Dataset,
    ) -> Result<Self> {
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(MfError::InvalidInput(format!(
                "fidelity scale rho must be finite and non-negative, got {rho}"
            )));
        }
        if kernel_low.dim() != kernel_delta.dim() {
            return Err(MfError::DimensionMismatch {
                context: "ar1 model (kernel dims)",
                expected: kernel_low.dim(),
                got: kernel_delta.dim(),
            });
        }
        for (name, data) in [("low", &data_low), ("high", &data_high)] {
            if let Some(dim) = data.dim() {
                if dim != kernel_low.dim() {
                    return Err(MfError::InvalidInput(format!(
                        "{name}-fidelity data dimension {dim} does not match kernel dimension {}",
                        kernel_low.dim()
                    )));
                }
            }
        }
        Ok(Self {
            rho,
            kernel_low,
            kernel_delta,
            data_low,
            data_high,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn kernel_low(&self) -> &KernelSpec {
        &self.kernel_low
    }

    pub fn kernel_delta(&self) -> &KernelSpec {
        &self.kernel_delta
    }

    pub fn data_low(&self) -> &Dataset {
        &self.data_low
    }

    pub fn data_high(&self) -> &Dataset {
        &self.data_high
    }

    pub fn noise_low(&self) -> f64 {
        self.data_low.noise_variance()
    }

    pub fn noise_high(&self) -> f64 {
        self.data_high.noise_variance()
    }

    /// Replace the high-fidelity dataset (keeps kernels, rho, and low data).
    pub fn with_high_data(&self, data_high: Dataset) -> Result<Self> {
        Self::new(
            self.rho,
            self.kernel_low.clone(),
            self.kernel_delta.clone(),
            self.data_low.clone(),
            data_high,
        )
    }

    /// Joint covariance of the stacked observations `[Y_L; Y_H]`:
    ///
    /// ```text
    /// [ K_LL + xi_L^2 I          rho K_LH               ]
    /// [ rho K_HL                 rho^2 K_HH + K_dd + xi_H^2 I ]
    /// ```
    ///
    /// where every `K` block comes from the low-fidelity kernel except
    /// `K_dd`, the discrepancy kernel on the high-fidelity inputs.
    pub fn joint_covariance(&self) -> Result<SymMatrix> {
        let nl = self.data_low.len();
        let nh = self.data_high.len();
        let n = nl + nh;
        let mut cov = DMatrix::zeros(n, n);
        if nl > 0 {
            let mut k_ll = self.kernel_low.gram(self.data_low.inputs())?;
            for i in 0..nl {
                k_ll[(i, i)] += self.data_low.noise_variance();
            }
            cov.view_mut((0, 0), (nl, nl)).copy_from(&k_ll);
        }
        if nl > 0 && nh > 0 {
            let k_lh = self
                .kernel_low
                .matrix(self.data_low.inputs(), self.data_high.inputs())?;
            let scaled = self.rho * k_lh;
            cov.view_mut((0, nl), (nl, nh)).copy_from(&scaled);
            cov.view_mut((nl, 0), (nh, nl)).copy_from(&scaled.transpose());
        }
        if nh > 0 {
            let k_hh = self.kernel_low.gram(self.data_high.inputs())?;
            let k_dd = self.kernel_delta.gram(self.data_high.inputs())?;
            let mut block = self.rho * self.rho * k_hh + k_dd;
            for i in 0..nh {
                block[(i, i)] += self.data_high.noise_variance();
            }
            cov.view_mut((nl, nl), (nh, nh)).copy_from(&block);
        }
        SymMatrix::new(cov)
    }

    /// Prior variance of the high-fidelity process at `x`:
    /// `rho^2 k_L(x,x) + k_delta(x,x)`.
    pub fn prior_variance(&self, x: &[f64]) -> Result<f64> {
        Ok(self.rho * self.rho * self.kernel_low.eval(x, x)? + self.kernel_delta.eval(x, x)?)
    }

    /// Posterior mean and variance of the high-fidelity process at `x`.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let post = Ar1Posterior::fit(self.clone())?;
        let (m, v) = post.predict_batch(std::slice::from_ref(&x.to_vec()))?;
        Ok((m[0], v[0]))
    }
}

/// Factored AR(1) posterior for repeated prediction.
#[derive(Debug, Clone)]
pub struct Ar1Posterior {
    model: Ar1Model,
    factor: CholeskyFactor,
    alpha: DVector<f64>,
}

impl Ar1Posterior {
    pub fn fit(model: Ar1Model) -> Result<Self> {
        let joint = model.joint_covariance()?;
        let factor = joint.factor()?.clone();
        let y = DVector::from_iterator(
            model.data_low.len() + model.data_high.len(),
            model
                .data_low
                .outputs()
                .iter()
                .chain(model.data_high.outputs())
                .copied(),
        );
        let alpha = factor.solve(&y)?;
        Ok(Self {
            model,
            factor,
            alpha,
        })
    }

    pub fn model(&self) -> &Ar1Model {
        &self.model
    }

    /// Cross-covariance between the latent high-fidelity value at the queries
    /// and the stacked observations. Rows: training points, columns: queries.
    fn cross_covariance(&self, xs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let m = &self.model;
        let nl = m.data_low.len();
        let nh = m.data_high.len();
        let mut cross = DMatrix::zeros(nl + nh, xs.len());
        if nl > 0 {
            let k = m.kernel_low.matrix(m.data_low.inputs(), xs)?;
            cross.view_mut((0, 0), (nl, xs.len())).copy_from(&(m.rho * k));
        }
        if nh > 0 {
            let k_l = m.kernel_low.matrix(m.data_high.inputs(), xs)?;
            let k_d = m.kernel_delta.matrix(m.data_high.inputs(), xs)?;
            cross
                .view_mut((nl, 0), (nh, xs.len()))
                .copy_from(&(m.rho * m.rho * k_l + k_d));
        }
        Ok(cross)
    }

    /// Posterior means and variances of the high-fidelity process.
    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let m = &self.model;
        let n = m.data_low.len() + m.data_high.len();
        if n == 0 {
            let mut means = Vec::with_capacity(xs.len());
            let mut vars = Vec::with_capacity(xs.len());
            for x in xs {
                means.push(0.0);
                vars.push(m.prior_variance(x)?);
            }
            return Ok((means, vars));
        }
        let cross = self.cross_covariance(xs)?;
        let means: Vec<f64> = (cross.transpose() * &self.alpha).iter().copied().collect();
        let w = self.factor.forward_solve_matrix(&cross)?;
        let mut vars = Vec::with_capacity(xs.len());
        for (j, x) in xs.iter().enumerate() {
            let prior = m.prior_variance(x)?;
            let v = prior - w.column(j).norm_squared();
            vars.push(if v < 0.0 { 0.0 } else { v });
        }
        Ok((means, vars))
    }
}

/// Settings for [`fit_ar1_hyperparameters`].
#[derive(Debug, Clone)]
pub struct Ar1FitConfig {
    pub kernel_low_init: KernelSpec,
    pub kernel_delta_init: KernelSpec,
    /// Used when fewer than 2 high-fidelity points are available.
    pub rho_default: f64,
    /// The fitted scale is clamped into this closed interval.
    pub rho_bounds: (f64, f64),
    /// Fit kernel hyperparameters by marginal likelihood; otherwise keep the
    /// initial kernels and only estimate rho.
    pub fit_kernels: bool,
    pub fit: FitOptions,
}

impl Ar1FitConfig {
    pub fn new(kernel_low_init: KernelSpec, kernel_delta_init: KernelSpec) -> Self {
        Self {
            kernel_low_init,
            kernel_delta_init,
            rho_default: 1.0,
            rho_bounds: (0.0, 5.0),
            fit_kernels: true,
            fit: FitOptions::default(),
        }
    }
}

/// Estimate the AR(1) model from data.
///
/// The low kernel is fit by marginal likelihood on the low-fidelity data.
/// The fidelity scale is the least-squares slope through the origin of the
/// high outputs against the low posterior mean at the high inputs (needs at
/// least 2 high points, otherwise the configured default), clamped into
/// `rho_bounds`. The discrepancy kernel is then fit on the residuals.
/// Deterministic for a fixed search seed.
pub fn fit_ar1_hyperparameters(
    data_low: &Dataset,
    data_high: &Dataset,
    cfg: &Ar1FitConfig,
) -> Result<Ar1Model> {
    let kernel_low = if cfg.fit_kernels {
        fit_kernel(&cfg.kernel_low_init, data_low, &cfg.fit)?
    } else {
        cfg.kernel_low_init.clone()
    };

    let low_gp = GpPosterior::fit(kernel_low.clone(), data_low.clone())?;
    let (mu_low, _) = low_gp.predict_batch(data_high.inputs())?;

    let rho = if data_high.len() >= 2 {
        let num: f64 = data_high
            .outputs()
            .iter()
            .zip(&mu_low)
            .map(|(y, m)| y * m)
            .sum();
        let den: f64 = mu_low.iter().map(|m| m * m).sum();
        if den > 1e-12 {
            (num / den).clamp(cfg.rho_bounds.0, cfg.rho_bounds.1)
        } else {
            cfg.rho_default
        }
    } else {
        cfg.rho_default
    };

    let kernel_delta = if cfg.fit_kernels && data_high.len() >= 2 {
        let residuals = Dataset::new(
            data_high.inputs().to_vec(),
            data_high
                .outputs()
                .iter()
                .zip(&mu_low)
                .map(|(y, m)| y - rho * m)
                .collect(),
            data_high.noise_variance(),
        )?;
        fit_kernel(&cfg.kernel_delta_init, &residuals, &cfg.fit)?
    } else {
        cfg.kernel_delta_init.clone()
    };

    Ar1Model::new(
        rho,
        kernel_low,
        kernel_delta,
        data_low.clone(),
        data_high.clone(),
    )
}
