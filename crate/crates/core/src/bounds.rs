//! Numerical validation of the model's covariance dominance, information-gain,
//! and cumulative-regret bounds.
//!
//! Everything here works on explicit matrices so each claimed inequality is
//! checked through an independent computation rather than through the identity
//! that proves it.

use nalgebra::DMatrix;

use crate::error::{MfError, Result};
use crate::kernel::KernelSpec;
use crate::linalg::{sym_eigenvalues_desc, SymMatrix};
use crate::mfgp::Ar1Model;

/// Matrices are accepted as PSD down to this eigenvalue.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Result of checking `(Q + s I)^-1 >= Q^-1 - s Q^-2` for PD `Q` and
/// noise variance `s`.
#[derive(Debug, Clone)]
pub struct PsdBoundCheck {
    /// `(Q + s I)^-1 - Q^-1 + s Q^-2`, the matrix claimed PSD.
    pub difference: DMatrix<f64>,
    pub min_eigenvalue: f64,
    pub holds: bool,
}

/// Checks the resolvent expansion lower bound. The inverses on the two sides
/// are computed through separate factorizations so the comparison is a real
/// numerical test.
///
/// Preconditions: `q` is PD and `noise_variance < lambda_min(q)`.
pub fn psd_bound_check(q: &DMatrix<f64>, noise_variance: f64) -> Result<PsdBoundCheck> {
    if !(noise_variance.is_finite() && noise_variance > 0.0) {
        return Err(MfError::InvalidInput(format!(
            "noise variance must be positive, got {noise_variance}"
        )));
    }
    let sym = SymMatrix::new(q.clone())?;
    let lambda_min = sym.min_eigenvalue();
    if lambda_min <= 0.0 {
        return Err(MfError::Precondition(format!(
            "matrix must be positive definite; smallest eigenvalue is {lambda_min}"
        )));
    }
    if noise_variance >= lambda_min {
        return Err(MfError::Precondition(format!(
            "noise variance {noise_variance} must stay below the smallest eigenvalue {lambda_min}"
        )));
    }
    let n = q.nrows();
    let identity = DMatrix::<f64>::identity(n, n);

    let regularized = SymMatrix::new(q + noise_variance * &identity)?;
    let inv_regularized = regularized.factor()?.solve_matrix(&identity)?;
    let inv_q = sym.factor()?.solve_matrix(&identity)?;
    let inv_q_sq = &inv_q * &inv_q;

    let mut difference = inv_regularized - &inv_q + noise_variance * inv_q_sq;
    // Symmetrize before the eigenvalue read; the solves are only symmetric up
    // to round-off.
    difference = 0.5 * (&difference + difference.transpose());
    let eigs = sym_eigenvalues_desc(&difference);
    let min_eigenvalue = *eigs.last().expect("nonempty spectrum");
    Ok(PsdBoundCheck {
        difference,
        min_eigenvalue,
        holds: min_eigenvalue >= -PSD_TOLERANCE,
    })
}

fn validate_rho(rho: f64) -> Result<()> {
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(MfError::InvalidInput(format!(
            "fidelity scale must be finite and non-negative, got {rho}"
        )));
    }
    Ok(())
}

fn validate_noise(label: &str, v: f64) -> Result<f64> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(MfError::InvalidInput(format!(
            "{label} noise variance must be finite and non-negative, got {v}"
        )));
    }
    Ok(v)
}

/// Covariance of the tuned operator's objective at `x_high` after observing
/// the low-fidelity outputs at `x_low` through noise `noise_low`, including
/// the `noise_high` observation floor:
/// `rho^2 K_HH + K_delta + noise_high I - rho^2 K_HL (K_LL + noise_low I)^-1 K_LH`.
pub fn conditional_cov_exact(
    rho: f64,
    kernel_low: &KernelSpec,
    kernel_delta: &KernelSpec,
    x_low: &[Vec<f64>],
    x_high: &[Vec<f64>],
    noise_low: f64,
    noise_high: f64,
) -> Result<DMatrix<f64>> {
    validate_rho(rho)?;
    validate_noise("low-fidelity", noise_low)?;
    validate_noise("high-fidelity", noise_high)?;
    let n = x_high.len();
    if n == 0 {
        return Err(MfError::InvalidInput("need at least one query point".into()));
    }
    let k_hh = kernel_low.gram(x_high)?;
    let k_d = kernel_delta.gram(x_high)?;
    let mut out = rho * rho * k_hh + k_d + noise_high * DMatrix::<f64>::identity(n, n);
    if !x_low.is_empty() {
        let k_hl = kernel_low.matrix(x_high, x_low)?;
        let m = x_low.len();
        let gram_low =
            kernel_low.gram(x_low)? + noise_low * DMatrix::<f64>::identity(m, m);
        let solved = SymMatrix::new(gram_low)?.factor()?.solve_matrix(&k_hl.transpose())?;
        out -= rho * rho * &k_hl * solved;
    }
    Ok(0.5 * (&out + out.transpose()))
}

/// Eigen-decomposed symmetric inverse powers with an optional eigenvalue
/// floor. Returns `(K^-1 K_LH, K^-2 K_LH)` products.
fn inverse_power_products(
    gram_low: &DMatrix<f64>,
    k_lh: &DMatrix<f64>,
    floor: Option<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let eig = nalgebra::SymmetricEigen::new(0.5 * (gram_low + gram_low.transpose()));
    let v = &eig.eigenvectors;
    let proj = v.transpose() * k_lh;
    let mut inv1 = proj.clone();
    let mut inv2 = proj;
    for (i, lambda) in eig.eigenvalues.iter().enumerate() {
        let l = match floor {
            Some(f) => lambda.max(f),
            None => *lambda,
        };
        let mut row1 = inv1.row_mut(i);
        row1 *= 1.0 / l;
        let mut row2 = inv2.row_mut(i);
        row2 *= 1.0 / (l * l);
    }
    (v * inv1, v * inv2)
}

fn conditional_cov_bound_inner(
    rho: f64,
    kernel_low: &KernelSpec,
    kernel_delta: &KernelSpec,
    x_low: &[Vec<f64>],
    x_high: &[Vec<f64>],
    noise_low: f64,
    noise_high: f64,
    floor: Option<f64>,
) -> Result<DMatrix<f64>> {
    let n = x_high.len();
    let k_hh = kernel_low.gram(x_high)?;
    let k_d = kernel_delta.gram(x_high)?;
    let mut out = rho * rho * k_hh + k_d + noise_high * DMatrix::<f64>::identity(n, n);
    if !x_low.is_empty() {
        let gram_low = kernel_low.gram(x_low)?;
        let k_lh = kernel_low.matrix(x_low, x_high)?;
        let (inv1, inv2) = inverse_power_products(&gram_low, &k_lh, floor);
        out -= rho * rho * k_lh.transpose() * inv1;
        out += noise_low * k_lh.transpose() * inv2;
    }
    Ok(0.5 * (&out + out.transpose()))
}

/// Closed-form upper bound on the conditional covariance obtained by expanding
/// the noisy inverse to first order:
/// `rho^2 K_HH + K_delta + noise_high I - rho^2 K_HL K_LL^-1 K_LH + noise_low K_HL K_LL^-2 K_LH`.
///
/// Valid as a bound for fidelity scales up to 1. Precondition:
/// `noise_low < lambda_min(K_LL)`; the error cites the offending eigenvalue.
pub fn conditional_cov_bound(
    rho: f64,
    kernel_low: &KernelSpec,
    kernel_delta: &KernelSpec,
    x_low: &[Vec<f64>],
    x_high: &[Vec<f64>],
    noise_low: f64,
    noise_high: f64,
) -> Result<DMatrix<f64>> {
    validate_rho(rho)?;
    validate_noise("low-fidelity", noise_low)?;
    validate_noise("high-fidelity", noise_high)?;
    if x_high.is_empty() {
        return Err(MfError::InvalidInput("need at least one query point".into()));
    }
    if !x_low.is_empty() {
        let lambda_min = low_design_min_eigenvalue(kernel_low, x_low)?;
        if noise_low >= lambda_min {
            return Err(MfError::Precondition(format!(
                "low-fidelity noise variance {noise_low} must stay below the design \
                 matrix's smallest eigenvalue {lambda_min}"
            )));
        }
    }
    conditional_cov_bound_inner(
        rho, kernel_low, kernel_delta, x_low, x_high, noise_low, noise_high, None,
    )
}

/// Same expansion computed with inverse eigenvalues floored at `noise_low`.
/// Keeps the report finite when the strict precondition fails; the caller is
/// expected to flag the result.
pub fn conditional_cov_bound_regularized(
    rho: f64,
    kernel_low: &KernelSpec,
    kernel_delta: &KernelSpec,
    x_low: &[Vec<f64>],
    x_high: &[Vec<f64>],
    noise_low: f64,
    noise_high: f64,
) -> Result<DMatrix<f64>> {
    validate_rho(rho)?;
    validate_noise("low-fidelity", noise_low)?;
    validate_noise("high-fidelity", noise_high)?;
    if x_high.is_empty() {
        return Err(MfError::InvalidInput("need at least one query point".into()));
    }
    let floor = if noise_low > 0.0 { noise_low } else { 1e-12 };
    conditional_cov_bound_inner(
        rho,
        kernel_low,
        kernel_delta,
        x_low,
        x_high,
        noise_low,
        noise_high,
        Some(floor),
    )
}

/// Smallest eigenvalue of the noiseless low-fidelity design Gram matrix.
pub fn low_design_min_eigenvalue(kernel_low: &KernelSpec, x_low: &[Vec<f64>]) -> Result<f64> {
    if x_low.is_empty() {
        return Ok(f64::INFINITY);
    }
    let gram = kernel_low.gram(x_low)?;
    let eigs = sym_eigenvalues_desc(&gram);
    Ok(*eigs.last().expect("nonempty spectrum"))
}

/// The bound's simplification when every query point was already visited at
/// low fidelity: `K_delta + noise_high I + noise_low K_HL K_LL^-2 K_LH`.
/// Errors unless `x_high` is a subset of `x_low` (exact coordinates).
pub fn conditional_cov_bound_nested(
    kernel_low: &KernelSpec,
    kernel_delta: &KernelSpec,
    x_low: &[Vec<f64>],
    x_high: &[Vec<f64>],
    noise_low: f64,
    noise_high: f64,
) -> Result<DMatrix<f64>> {
    validate_noise("low-fidelity", noise_low)?;
    validate_noise("high-fidelity", noise_high)?;
    if x_high.is_empty() {
        return Err(MfError::InvalidInput("need at least one query point".into()));
    }
    let seen: std::collections::HashSet<Vec<u64>> = x_low
        .iter()
        .map(|x| x.iter().map(|v| v.to_bits()).collect())
        .collect();
    for x in x_high {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        if !seen.contains(&key) {
            return Err(MfError::Precondition(format!(
                "query point {x:?} does not appear in the low-fidelity design"
            )));
        }
    }
    let lambda_min = low_design_min_eigenvalue(kernel_low, x_low)?;
    if noise_low >= lambda_min {
        return Err(MfError::Precondition(format!(
            "low-fidelity noise variance {noise_low} must stay below the design \
             matrix's smallest eigenvalue {lambda_min}"
        )));
    }
    let n = x_high.len();
    let k_d = kernel_delta.gram(x_high)?;
    let mut out = k_d + noise_high * DMatrix::<f64>::identity(n, n);
    let gram_low = kernel_low.gram(x_low)?;
    let k_lh = kernel_low.matrix(x_low, x_high)?;
    let (_, inv2) = inverse_power_products(&gram_low, &k_lh, None);
    out += noise_low * k_lh.transpose() * inv2;
    Ok(0.5 * (&out + out.transpose()))
}

/// Validated, descending, non-negative spectrum of a PSD matrix. Eigenvalues
/// below `-1e-8 * scale` are rejected; round-off negatives clamp to zero.
pub fn psd_spectrum(cov: &DMatrix<f64>) -> Result<Vec<f64>> {
    if cov.nrows() != cov.ncols() {
        return Err(MfError::DimensionMismatch {
            context: "psd spectrum",
            expected: cov.nrows(),
            got: cov.ncols(),
        });
    }
    let sym = 0.5 * (cov + cov.transpose());
    let mut eigs = sym_eigenvalues_desc(&sym);
    let scale = eigs.first().copied().unwrap_or(0.0).abs().max(1.0);
    for e in &mut eigs {
        if *e < -1e-8 * scale {
            return Err(MfError::InvalidInput(format!(
                "matrix is not positive semidefinite; eigenvalue {e} found"
            )));
        }
        *e = e.max(0.0);
    }
    Ok(eigs)
}

/// Spectral upper bound on the best achievable information gain of `t` noisy
/// observations.
#[derive(Debug, Clone)]
pub struct InfoGainBound {
    pub value: f64,
    /// Observation counts assigned to the leading eigen-directions.
    pub allocation: Vec<usize>,
}

/// Greedy water-filling of `t` observation units over the top `min(t, dim)`
/// eigenvalues, scaled by `1/2 / (1 - 1/e)`:
/// `max sum_i log(1 + m_i lambda_i / noise)` over allocations `sum m_i = t`.
///
/// The per-direction objective is concave in the unit count, so the greedy
/// allocation is exact.
pub fn info_gain_allocation_bound(
    eigenvalues: &[f64],
    noise_variance: f64,
    t: usize,
) -> Result<InfoGainBound> {
    if t < 1 {
        return Err(MfError::InvalidInput("need at least one observation".into()));
    }
    if !(noise_variance.is_finite() && noise_variance > 0.0) {
        return Err(MfError::InvalidInput(format!(
            "noise variance must be positive, got {noise_variance}"
        )));
    }
    if eigenvalues.is_empty() {
        return Err(MfError::InvalidInput("empty spectrum".into()));
    }
    let scale = eigenvalues.iter().fold(0.0f64, |a, e| a.max(e.abs())).max(1.0);
    let mut spectrum: Vec<f64> = Vec::with_capacity(eigenvalues.len());
    for e in eigenvalues {
        if !e.is_finite() || *e < -1e-8 * scale {
            return Err(MfError::InvalidInput(format!(
                "spectrum entry {e} is not a PSD eigenvalue"
            )));
        }
        spectrum.push(e.max(0.0));
    }
    spectrum.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    let h = t.min(spectrum.len());
    let q = 1.0 / noise_variance;
    let mut allocation = vec![0usize; h];
    for _ in 0..t {
        let mut best = 0usize;
        let mut best_gain = f64::NEG_INFINITY;
        for i in 0..h {
            let m = allocation[i] as f64;
            let gain = (1.0 + q * (m + 1.0) * spectrum[i]).ln()
                - (1.0 + q * m * spectrum[i]).ln();
            if gain > best_gain {
                best_gain = gain;
                best = i;
            }
        }
        allocation[best] += 1;
    }
    let total: f64 = allocation
        .iter()
        .zip(&spectrum)
        .map(|(m, l)| (1.0 + q * (*m as f64) * l).ln())
        .sum();
    let value = 0.5 / (1.0 - (-1.0f64).exp()) * total;
    Ok(InfoGainBound { value, allocation })
}

/// `1/2 log det(I + cov_A / noise)` for the (multi)subset `A` of indices.
pub fn info_gain_of_subset(
    cov: &DMatrix<f64>,
    noise_variance: f64,
    subset: &[usize],
) -> Result<f64> {
    if !(noise_variance.is_finite() && noise_variance > 0.0) {
        return Err(MfError::InvalidInput(format!(
            "noise variance must be positive, got {noise_variance}"
        )));
    }
    if subset.is_empty() {
        return Ok(0.0);
    }
    let n = cov.nrows();
    for &i in subset {
        if i >= n {
            return Err(MfError::InvalidInput(format!(
                "subset index {i} outside a {n}-point covariance"
            )));
        }
    }
    let t = subset.len();
    let mut m = DMatrix::<f64>::identity(t, t);
    for (a, &i) in subset.iter().enumerate() {
        for (b, &j) in subset.iter().enumerate() {
            m[(a, b)] += cov[(i, j)] / noise_variance;
        }
    }
    Ok(0.5 * SymMatrix::new(m)?.factor()?.log_det())
}

/// Greedy maximization of the information gain over `t` distinct indices.
/// Submodularity puts the result within a `1 - 1/e` factor of the exhaustive
/// optimum. Errors when `t` exceeds the number of points.
pub fn info_gain_greedy(
    cov: &DMatrix<f64>,
    noise_variance: f64,
    t: usize,
) -> Result<(f64, Vec<usize>)> {
    if !(noise_variance.is_finite() && noise_variance > 0.0) {
        return Err(MfError::InvalidInput(format!(
            "noise variance must be positive, got {noise_variance}"
        )));
    }
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(MfError::DimensionMismatch {
            context: "info gain",
            expected: n,
            got: cov.ncols(),
        });
    }
    if t > n {
        return Err(MfError::InvalidInput(format!(
            "cannot pick {t} distinct points out of {n}"
        )));
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(t);
    let mut total = 0.0;
    for _ in 0..t {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if chosen.contains(&j) {
                continue;
            }
            // Posterior variance of j given the noisy picks so far.
            let var_j = if chosen.is_empty() {
                cov[(j, j)]
            } else {
                let k = chosen.len();
                let mut sub = DMatrix::<f64>::zeros(k, k);
                for (a, &i1) in chosen.iter().enumerate() {
                    for (b, &i2) in chosen.iter().enumerate() {
                        sub[(a, b)] = cov[(i1, i2)];
                        if a == b {
                            sub[(a, b)] += noise_variance;
                        }
                    }
                }
                let cross =
                    nalgebra::DVector::from_iterator(k, chosen.iter().map(|&i| cov[(i, j)]));
                let solved = SymMatrix::new(sub)?.factor()?.solve(&cross)?;
                (cov[(j, j)] - cross.dot(&solved)).max(0.0)
            };
            let gain = 0.5 * (1.0 + var_j / noise_variance).ln();
            if best.map(|(_, g)| gain > g).unwrap_or(true) {
                best = Some((j, gain));
            }
        }
        let (j, gain) = best.expect("t <= n leaves a candidate");
        chosen.push(j);
        total += gain;
    }
    Ok((total, chosen))
}

/// How the two fidelity scales combine into the squared amplitude entering
/// the regret constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceConvention {
    /// `rho * v_low^2 + v_delta^2`, the combination as stated.
    LinearRho,
    /// `rho^2 * v_low^2 + v_delta^2`, the combination matching the generative
    /// variance of the model.
    SquaredRho,
}

#[derive(Debug, Clone, Copy)]
pub struct RegretBound {
    pub value: f64,
    pub c1: f64,
    pub v_mf_sq: f64,
}

/// High-probability cumulative-regret ceiling
/// `sqrt(C1 * T * beta_T * gamma_T)` with
/// `C1 = 8 v^2 / log(1 + v^2 / noise)`.
pub fn regret_bound(
    t: usize,
    beta_t: f64,
    gamma_t: f64,
    rho: f64,
    v_low_sq: f64,
    v_delta_sq: f64,
    noise_high: f64,
    convention: VarianceConvention,
) -> Result<RegretBound> {
    if t < 1 {
        return Err(MfError::InvalidInput("horizon must be >= 1".into()));
    }
    for (label, v) in [("beta", beta_t), ("gamma", gamma_t)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(MfError::InvalidInput(format!(
                "{label} must be finite and non-negative, got {v}"
            )));
        }
    }
    validate_rho(rho)?;
    if !(v_low_sq >= 0.0 && v_delta_sq >= 0.0) {
        return Err(MfError::InvalidInput(
            "signal variances must be non-negative".into(),
        ));
    }
    if !(noise_high.is_finite() && noise_high > 0.0) {
        return Err(MfError::InvalidInput(format!(
            "noise variance must be positive, got {noise_high}"
        )));
    }
    let v_mf_sq = match convention {
        VarianceConvention::LinearRho => rho * v_low_sq + v_delta_sq,
        VarianceConvention::SquaredRho => rho * rho * v_low_sq + v_delta_sq,
    };
    if v_mf_sq <= 0.0 {
        return Err(MfError::InvalidInput(
            "combined signal variance must be positive".into(),
        ));
    }
    let c1 = 8.0 * v_mf_sq / (1.0 + v_mf_sq / noise_high).ln();
    let value = (c1 * t as f64 * beta_t * gamma_t).sqrt();
    Ok(RegretBound { value, c1, v_mf_sq })
}

/// Everything the bound validation produces for one completed tuning run.
#[derive(Debug, Clone)]
pub struct BoundReport {
    pub rho: f64,
    /// Smallest eigenvalue of the noiseless low-fidelity design Gram matrix.
    pub lambda_min_low: f64,
    /// Whether `noise_low < lambda_min_low`, the regime where the closed-form
    /// covariance bound applies. When false the bound columns come from the
    /// eigenvalue-floored expansion.
    pub precondition_ok: bool,
    /// Smallest eigenvalue of `bound - exact` on the visited points.
    pub dominance_margin: f64,
    pub lambda_max_conditional: f64,
    pub lambda_max_induced: f64,
    /// Conditioning on the previous operators shrank the top of the spectrum.
    pub mf_benefit: bool,
    pub gamma_bound: f64,
    pub realized_info_gain: f64,
    pub info_gain_ok: bool,
    pub beta_t: f64,
    pub regret_bound_linear: f64,
    pub regret_bound_squared: f64,
}

/// Builds the per-run validation report for an AR(1) model over a candidate
/// grid: covariance dominance on the visited points, the spectral
/// information-gain ceiling against the realized gain of the picks, and the
/// cumulative-regret ceiling under both variance conventions.
pub fn bound_report(
    model: &Ar1Model,
    grid_points: &[Vec<f64>],
    picks: &[usize],
    beta_t: f64,
) -> Result<BoundReport> {
    if picks.is_empty() {
        return Err(MfError::InvalidInput("need at least one pick".into()));
    }
    if grid_points.is_empty() {
        return Err(MfError::InvalidInput("need a non-empty grid".into()));
    }
    for &p in picks {
        if p >= grid_points.len() {
            return Err(MfError::InvalidInput(format!(
                "pick {p} outside a {}-point grid",
                grid_points.len()
            )));
        }
    }
    let t = picks.len();
    let rho = model.rho();
    let noise_low = model.noise_low();
    let noise_high = model.noise_high();
    let x_low = model.data_low().inputs();

    // Latent conditional covariance of the tuned objective over the grid,
    // given the previous operators' noisy data. No observation noise on the
    // diagonal; that enters through the information-gain normalization.
    let latent = conditional_cov_exact(
        rho,
        model.kernel_low(),
        model.kernel_delta(),
        x_low,
        grid_points,
        noise_low,
        0.0,
    )?;
    let spectrum = psd_spectrum(&latent)?;
    let gamma = info_gain_allocation_bound(&spectrum, noise_high, t)?;
    let realized = info_gain_of_subset(&latent, noise_high, picks)?;

    // Dominance margin on the distinct visited points.
    let mut seen = std::collections::HashSet::new();
    let visited: Vec<Vec<f64>> = picks
        .iter()
        .filter(|&&p| seen.insert(p))
        .map(|&p| grid_points[p].clone())
        .collect();
    let lambda_min_low = low_design_min_eigenvalue(model.kernel_low(), x_low)?;
    let precondition_ok = noise_low < lambda_min_low;
    let exact = conditional_cov_exact(
        rho,
        model.kernel_low(),
        model.kernel_delta(),
        x_low,
        &visited,
        noise_low,
        noise_high,
    )?;
    let bound = if precondition_ok {
        conditional_cov_bound(
            rho,
            model.kernel_low(),
            model.kernel_delta(),
            x_low,
            &visited,
            noise_low,
            noise_high,
        )?
    } else {
        conditional_cov_bound_regularized(
            rho,
            model.kernel_low(),
            model.kernel_delta(),
            x_low,
            &visited,
            noise_low,
            noise_high,
        )?
    };
    let diff = &bound - &exact;
    let sym_diff = 0.5 * (&diff + diff.transpose());
    let dominance_margin = *sym_eigenvalues_desc(&sym_diff)
        .last()
        .expect("nonempty spectrum");

    // Spectral benefit of conditioning, measured on the visited points.
    let conditional_visited = conditional_cov_exact(
        rho,
        model.kernel_low(),
        model.kernel_delta(),
        x_low,
        &visited,
        noise_low,
        noise_high,
    )?;
    let induced_visited = conditional_cov_exact(
        rho,
        model.kernel_low(),
        model.kernel_delta(),
        &[],
        &visited,
        noise_low,
        noise_high,
    )?;
    let lambda_max_conditional = sym_eigenvalues_desc(&conditional_visited)[0];
    let lambda_max_induced = sym_eigenvalues_desc(&induced_visited)[0];

    let v_low_sq = model.kernel_low().signal_variance();
    let v_delta_sq = model.kernel_delta().signal_variance();
    let linear = regret_bound(
        t,
        beta_t,
        gamma.value,
        rho,
        v_low_sq,
        v_delta_sq,
        noise_high,
        VarianceConvention::LinearRho,
    )?;
    let squared = regret_bound(
        t,
        beta_t,
        gamma.value,
        rho,
        v_low_sq,
        v_delta_sq,
        noise_high,
        VarianceConvention::SquaredRho,
    )?;

    Ok(BoundReport {
        rho,
        lambda_min_low,
        precondition_ok,
        dominance_margin,
        lambda_max_conditional,
        lambda_max_induced,
        mf_benefit: lambda_max_conditional < lambda_max_induced,
        gamma_bound: gamma.value,
        realized_info_gain: realized,
        info_gain_ok: realized <= gamma.value + 1e-9,
        beta_t,
        regret_bound_linear: linear.value,
        regret_bound_squared: squared.value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::Dataset;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_pd(rng: &mut ChaCha12Rng, n: usize) -> DMatrix<f64> {
        let g = DMatrix::<f64>::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        g.transpose() * g + 0.3 * DMatrix::<f64>::identity(n, n)
    }

    #[test]
    fn psd_check_scalar_frozen() {
        // Q = [2], s = 0.5: 1/2.5 - 1/2 + 0.5/4 = 0.025.
        let q = DMatrix::from_element(1, 1, 2.0);
        let r = psd_bound_check(&q, 0.5).unwrap();
        assert_relative_eq!(r.difference[(0, 0)], 0.025, max_relative = 1e-12);
        assert!(r.holds);
        assert!(r.min_eigenvalue > 0.0);
    }

    #[test]
    fn psd_check_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for _ in 0..30 {
            let n = rng.random_range(1..=6);
            let q = random_pd(&mut rng, n);
            let lambda_min = *sym_eigenvalues_desc(&q).last().unwrap();
            let r = psd_bound_check(&q, 0.5 * lambda_min).unwrap();
            assert!(r.holds, "min eigenvalue {}", r.min_eigenvalue);
        }
    }

    #[test]
    fn psd_check_preconditions() {
        let q = DMatrix::from_element(1, 1, 2.0);
        assert!(matches!(psd_bound_check(&q, 2.0), Err(MfError::Precondition(_))));
        assert!(psd_bound_check(&q, 0.0).is_err());
        let indef = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(psd_bound_check(&indef, 0.1), Err(MfError::Precondition(_))));
    }

    fn kernels() -> (KernelSpec, KernelSpec) {
        (
            KernelSpec::squared_exponential(1.3, vec![0.7]).unwrap(),
            KernelSpec::squared_exponential(0.4, vec![0.5]).unwrap(),
        )
    }

    fn designs() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let x_low = vec![vec![-1.5], vec![-0.4], vec![0.3], vec![1.1], vec![2.0]];
        let x_high = vec![vec![-0.6], vec![0.8], vec![1.6]];
        (x_low, x_high)
    }

    #[test]
    fn conditional_exact_matches_joint_schur_complement() {
        let (kl, kd) = kernels();
        let (x_low, x_high) = designs();
        let (rho, nl, nh) = (0.9, 0.05, 0.01);
        let exact =
            conditional_cov_exact(rho, &kl, &kd, &x_low, &x_high, nl, nh).unwrap();

        let data_low = Dataset::new(x_low.clone(), vec![0.0; x_low.len()], nl).unwrap();
        let data_high = Dataset::new(x_high.clone(), vec![0.0; x_high.len()], nh).unwrap();
        let model = Ar1Model::new(rho, kl, kd, data_low, data_high).unwrap();
        let joint = model.joint_covariance().unwrap().as_matrix().clone();
        let (m, n) = (x_low.len(), x_high.len());
        let c_ll = joint.view((0, 0), (m, m)).into_owned();
        let c_lh = joint.view((0, m), (m, n)).into_owned();
        let c_hh = joint.view((m, m), (n, n)).into_owned();
        let schur = &c_hh
            - c_lh.transpose() * c_ll.try_inverse().expect("well-conditioned block") * &c_lh;
        for i in 0..n {
            for j in 0..n {
                assert_relative_eq!(exact[(i, j)], schur[(i, j)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn conditional_exact_without_low_data_is_the_prior() {
        let (kl, kd) = kernels();
        let x_high = vec![vec![0.0], vec![1.0]];
        let exact = conditional_cov_exact(0.8, &kl, &kd, &[], &x_high, 0.1, 0.01).unwrap();
        let prior = 0.64 * kl.gram(&x_high).unwrap()
            + kd.gram(&x_high).unwrap()
            + 0.01 * DMatrix::<f64>::identity(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(exact[(i, j)], prior[(i, j)], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn bound_dominates_exact_for_scales_up_to_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let (kl, kd) = kernels();
        let (x_low, x_high) = designs();
        let lambda_min = low_design_min_eigenvalue(&kl, &x_low).unwrap();
        for _ in 0..25 {
            let rho = rng.random::<f64>().max(0.05);
            let nl = rng.random::<f64>() * 0.5 * lambda_min;
            let nh = rng.random::<f64>() * 0.1;
            let exact =
                conditional_cov_exact(rho, &kl, &kd, &x_low, &x_high, nl, nh).unwrap();
            let bound =
                conditional_cov_bound(rho, &kl, &kd, &x_low, &x_high, nl, nh).unwrap();
            let diff = &bound - &exact;
            let min = *sym_eigenvalues_desc(&diff).last().unwrap();
            assert!(
                min >= -PSD_TOLERANCE,
                "dominance violated: rho={rho} nl={nl} min={min}"
            );
        }
    }

    #[test]
    fn bound_precondition_cites_eigenvalue() {
        let (kl, kd) = kernels();
        let (x_low, x_high) = designs();
        let lambda_min = low_design_min_eigenvalue(&kl, &x_low).unwrap();
        let err = conditional_cov_bound(0.9, &kl, &kd, &x_low, &x_high, lambda_min * 2.0, 0.01)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("smallest eigenvalue"));
        assert!(msg.contains(&format!("{lambda_min}")));
    }

    #[test]
    fn nested_design_simplification_matches_general_bound() {
        let (kl, kd) = kernels();
        let x_low = vec![vec![-1.0], vec![-0.2], vec![0.5], vec![1.4]];
        let x_high = vec![vec![-0.2], vec![1.4]];
        let nl = 1e-4;
        let nh = 0.01;
        // The general bound at rho = 1 on a nested design reduces to the
        // simplified form because K_HL K_LL^-1 K_LH = K_HH exactly.
        let general = conditional_cov_bound(1.0, &kl, &kd, &x_low, &x_high, nl, nh).unwrap();
        let nested = conditional_cov_bound_nested(&kl, &kd, &x_low, &x_high, nl, nh).unwrap();
        for i in 0..x_high.len() {
            for j in 0..x_high.len() {
                assert_relative_eq!(general[(i, j)], nested[(i, j)], epsilon = 1e-10);
            }
        }
        let outside = vec![vec![3.0]];
        assert!(matches!(
            conditional_cov_bound_nested(&kl, &kd, &x_low, &outside, nl, nh),
            Err(MfError::Precondition(_))
        ));
    }

    #[test]
    fn allocation_bound_frozen_single_eigenvalue() {
        // One eigenvalue 1, noise 0.01, one observation:
        // (1/2)/(1 - 1/e) * ln(101).
        let b = info_gain_allocation_bound(&[1.0], 0.01, 1).unwrap();
        let expect = 0.5 / (1.0 - (-1.0f64).exp()) * 101.0f64.ln();
        assert_relative_eq!(b.value, expect, max_relative = 1e-12);
        assert_relative_eq!(b.value, 3.650, max_relative = 1e-3);
        assert_eq!(b.allocation, vec![1]);
    }

    fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
        if parts == 1 {
            return vec![vec![total]];
        }
        let mut out = Vec::new();
        for first in 0..=total {
            for mut rest in compositions(total - first, parts - 1) {
                let mut v = vec![first];
                v.append(&mut rest);
                out.push(v);
            }
        }
        out
    }

    #[test]
    fn allocation_greedy_is_exhaustively_optimal() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..20 {
            let dim = rng.random_range(1..=3);
            let spectrum: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 3.0).collect();
            let t = rng.random_range(1..=5);
            let noise = 0.05 + rng.random::<f64>();
            let b = info_gain_allocation_bound(&spectrum, noise, t).unwrap();
            let mut sorted = spectrum.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let h = t.min(dim);
            let q = 1.0 / noise;
            let best = compositions(t, h)
                .into_iter()
                .map(|alloc| {
                    alloc
                        .iter()
                        .zip(&sorted)
                        .map(|(m, l)| (1.0 + q * (*m as f64) * l).ln())
                        .sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let scaled = 0.5 / (1.0 - (-1.0f64).exp()) * best;
            assert_relative_eq!(b.value, scaled, max_relative = 1e-12);
        }
    }

    #[test]
    fn allocation_bound_rejects_indefinite_spectrum() {
        assert!(info_gain_allocation_bound(&[1.0, -0.5], 0.1, 2).is_err());
        assert!(info_gain_allocation_bound(&[1.0], 0.0, 1).is_err());
        assert!(info_gain_allocation_bound(&[], 0.1, 1).is_err());
    }

    #[test]
    fn greedy_info_gain_identity_covariance() {
        let cov = DMatrix::<f64>::identity(5, 5);
        let (value, picks) = info_gain_greedy(&cov, 1.0, 3).unwrap();
        assert_relative_eq!(value, 1.5 * 2.0f64.ln(), max_relative = 1e-12);
        assert_eq!(picks, vec![0, 1, 2]);
        assert!(info_gain_greedy(&cov, 1.0, 6).is_err());
    }

    #[test]
    fn greedy_info_gain_near_exhaustive() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..10 {
            let n = rng.random_range(3..=6);
            let cov = random_pd(&mut rng, n);
            let t = rng.random_range(1..=3.min(n));
            let noise = 0.2;
            let (greedy, picks) = info_gain_greedy(&cov, noise, t).unwrap();
            assert_relative_eq!(
                greedy,
                info_gain_of_subset(&cov, noise, &picks).unwrap(),
                epsilon = 1e-9
            );
            // Exhaustive optimum over distinct subsets.
            let mut best = f64::NEG_INFINITY;
            let mut stack = vec![(Vec::<usize>::new(), 0usize)];
            while let Some((cur, start)) = stack.pop() {
                if cur.len() == t {
                    best = best.max(info_gain_of_subset(&cov, noise, &cur).unwrap());
                    continue;
                }
                for j in start..n {
                    let mut next = cur.clone();
                    next.push(j);
                    stack.push((next, j + 1));
                }
            }
            assert!(greedy <= best + 1e-9);
            assert!(greedy >= (1.0 - (-1.0f64).exp()) * best - 1e-9);
        }
    }

    #[test]
    fn regret_bound_frozen_constant() {
        let r = regret_bound(1, 1.0, 1.0, 1.0, 1.0, 0.0, 0.01, VarianceConvention::LinearRho)
            .unwrap();
        assert_relative_eq!(r.c1, 8.0 / 101.0f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(r.c1, 1.7334, max_relative = 1e-4);
        assert_relative_eq!(r.value, r.c1.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn regret_bound_conventions_ordering() {
        // For rho < 1 the stated combination is the larger one.
        let lin = regret_bound(5, 2.0, 3.0, 0.6, 1.5, 0.2, 0.01, VarianceConvention::LinearRho)
            .unwrap();
        let sq = regret_bound(5, 2.0, 3.0, 0.6, 1.5, 0.2, 0.01, VarianceConvention::SquaredRho)
            .unwrap();
        assert!(lin.v_mf_sq > sq.v_mf_sq);
        assert!(lin.value > sq.value);
        assert_relative_eq!(lin.v_mf_sq, 0.6 * 1.5 + 0.2, max_relative = 1e-12);
        assert_relative_eq!(sq.v_mf_sq, 0.36 * 1.5 + 0.2, max_relative = 1e-12);
    }

    #[test]
    fn report_on_a_small_model() {
        let (kl, kd) = kernels();
        let grid: Vec<Vec<f64>> = (0..9).map(|i| vec![-2.0 + 0.5 * i as f64]).collect();
        let x_low: Vec<Vec<f64>> = vec![vec![-1.9], vec![-0.7], vec![0.4], vec![1.3], vec![1.9]];
        let data_low = Dataset::new(x_low.clone(), vec![0.1; 5], 1e-3).unwrap();
        let data_high = Dataset::new(vec![vec![0.0]], vec![0.2], 1e-4).unwrap();
        let model = Ar1Model::new(0.9, kl, kd, data_low, data_high).unwrap();
        let picks = vec![0, 4, 4, 8];
        let report = bound_report(&model, &grid, &picks, 10.0).unwrap();
        assert!(report.precondition_ok);
        assert!(report.dominance_margin >= -PSD_TOLERANCE);
        assert!(report.info_gain_ok);
        assert!(report.realized_info_gain > 0.0);
        assert!(report.gamma_bound >= report.realized_info_gain);
        // Conditioning on five informative low-fidelity points shrinks the
        // spectrum at the visited sites.
        assert!(report.mf_benefit);
        assert!(report.regret_bound_linear >= report.regret_bound_squared);
        assert!(report.beta_t == 10.0);
    }

    #[test]
    fn report_rejects_bad_picks() {
        let (kl, kd) = kernels();
        let grid = vec![vec![0.0], vec![1.0]];
        let model = Ar1Model::new(
            1.0,
            kl,
            kd,
            Dataset::empty(0.1).unwrap(),
            Dataset::empty(0.01).unwrap(),
        )
        .unwrap();
        assert!(bound_report(&model, &grid, &[], 1.0).is_err());
        assert!(bound_report(&model, &grid, &[5], 1.0).is_err());
    }

    #[test]
    fn report_without_low_data_has_zero_margin_and_no_benefit() {
        let (kl, kd) = kernels();
        let grid = vec![vec![0.0], vec![1.0], vec![2.0]];
        let model = Ar1Model::new(
            0.8,
            kl,
            kd,
            Dataset::empty(0.1).unwrap(),
            Dataset::empty(1e-4).unwrap(),
        )
        .unwrap();
        let report = bound_report(&model, &grid, &[0, 2], 5.0).unwrap();
        assert!(report.lambda_min_low.is_infinite());
        assert!(report.precondition_ok);
        assert_relative_eq!(report.dominance_margin, 0.0, epsilon = 1e-14);
        assert!(!report.mf_benefit);
        assert_relative_eq!(
            report.lambda_max_conditional,
            report.lambda_max_induced,
            epsilon = 1e-12
        );
    }
}
