//! Dense symmetric linear algebra helpers shared by the models.
//!
//! Covariance matrices are handled through [`SymMatrix`], which owns a jitter
//! escalation policy for Cholesky factorization and caches the factor. The
//! Lyapunov solver and matrix exponential live here too because both the
//! simulator and the theory checks need them.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{MfError, Result};

/// Diagonal-loading policy used when a Cholesky factorization fails.
///
/// The first retry adds `initial_scale * mean(diag)` to the diagonal; each
/// further retry multiplies the load by `growth`, up to `max_attempts`
/// escalations. Failure after the last escalation is a hard error carrying a
/// minimum-eigenvalue estimate of the offending matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterPolicy {
    pub initial_scale: f64,
    pub growth: f64,
    pub max_attempts: usize,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            initial_scale: 1e-10,
            growth: 10.0,
            max_attempts: 6,
        }
    }
}

/// Lower-triangular Cholesky factor of `M + jitter * I`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
    jitter: f64,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Diagonal load that was added before factorization (0 when none was needed).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Solve `(M + jitter I) X = B`.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.dim() {
            return Err(MfError::DimensionMismatch {
                context: "cholesky solve",
                expected: self.dim(),
                got: b.nrows(),
            });
        }
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        self.l.tr_solve_lower_triangular_mut(&mut x);
        Ok(x)
    }

    /// Solve `(M + jitter I) x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if b.len() != self.dim() {
            return Err(MfError::DimensionMismatch {
                context: "cholesky solve",
                expected: self.dim(),
                got: b.len(),
            });
        }
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        self.l.tr_solve_lower_triangular_mut(&mut x);
        Ok(x)
    }

    /// Forward substitution only: solve `L y = b`.
    pub fn forward_solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if b.len() != self.dim() {
            return Err(MfError::DimensionMismatch {
                context: "forward solve",
                expected: self.dim(),
                got: b.len(),
            });
        }
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        Ok(x)
    }

    /// Forward substitution with a matrix right-hand side.
    pub fn forward_solve_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.dim() {
            return Err(MfError::DimensionMismatch {
                context: "forward solve",
                expected: self.dim(),
                got: b.nrows(),
            });
        }
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        Ok(x)
    }

    /// `log det(M + jitter I)`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Grow the factor by one row for a bordered matrix
    /// `[[M, c], [c^T, d]]`. The existing jitter is applied to the new
    /// diagonal entry so the factor stays the factor of `M_ext + jitter I`.
    ///
    /// Fails if the Schur complement is not positive; callers then refactor
    /// the bordered matrix from scratch.
    pub fn extend(&self, cross: &DVector<f64>, diag: f64) -> Result<CholeskyFactor> {
        let n = self.dim();
        if cross.len() != n {
            return Err(MfError::DimensionMismatch {
                context: "cholesky extension",
                expected: n,
                got: cross.len(),
            });
        }
        let row = self.forward_solve(cross)?;
        let schur = diag + self.jitter - row.norm_squared();
        if !(schur.is_finite() && schur > 0.0) {
            return Err(MfError::Factorization {
                min_eigenvalue: schur,
                attempts: 0,
            });
        }
        let mut l = DMatrix::zeros(n + 1, n + 1);
        l.view_mut((0, 0), (n, n)).copy_from(&self.l);
        for i in 0..n {
            l[(n, i)] = row[i];
        }
        l[(n, n)] = schur.sqrt();
        Ok(CholeskyFactor {
            l,
            jitter: self.jitter,
        })
    }
}

/// Dense symmetric matrix with a cached, jitter-protected Cholesky factor.
#[derive(Debug)]
pub struct SymMatrix {
    m: DMatrix<f64>,
    policy: JitterPolicy,
    // Ok(factor) or Err((min eigenvalue estimate, attempts)); computed lazily.
    factor: OnceLock<std::result::Result<CholeskyFactor, (f64, usize)>>,
}

impl Clone for SymMatrix {
    fn clone(&self) -> Self {
        Self {
            m: self.m.clone(),
            policy: self.policy,
            factor: OnceLock::new(),
        }
    }
}

impl SymMatrix {
    /// Wrap a square matrix, validating symmetry to round-off
    /// (`|a_ij - a_ji| <= 1e-9 * max(1, max |a|)`), then symmetrizing exactly.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        Self::with_policy(m, JitterPolicy::default())
    }

    pub fn with_policy(m: DMatrix<f64>, policy: JitterPolicy) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(MfError::DimensionMismatch {
                context: "symmetric matrix",
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(MfError::InvalidInput(
                "symmetric matrix entries must be finite".into(),
            ));
        }
        let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let tol = 1e-9 * scale;
        for i in 0..m.nrows() {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > tol {
                    return Err(MfError::InvalidInput(format!(
                        "matrix is not symmetric at ({i}, {j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
        }
        let sym = 0.5 * (&m + m.transpose());
        Ok(Self {
            m: sym,
            policy,
            factor: OnceLock::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn policy(&self) -> JitterPolicy {
        self.policy
    }

    /// Return a copy with `v` added to every diagonal entry.
    pub fn add_diagonal(&self, v: f64) -> SymMatrix {
        let mut m = self.m.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += v;
        }
        SymMatrix {
            m,
            policy: self.policy,
            factor: OnceLock::new(),
        }
    }

    /// Cholesky factor, computed on first use with jitter escalation.
    pub fn factor(&self) -> Result<&CholeskyFactor> {
        let cached = self
            .factor
            .get_or_init(|| factor_with_policy(&self.m, self.policy));
        match cached {
            Ok(f) => Ok(f),
            Err((min_eigenvalue, attempts)) => Err(MfError::Factorization {
                min_eigenvalue: *min_eigenvalue,
                attempts: *attempts,
            }),
        }
    }

    /// Eigenvalues sorted in descending order.
    pub fn eigenvalues_desc(&self) -> Vec<f64> {
        sym_eigenvalues_desc(&self.m)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues_desc()
            .last()
            .copied()
            .unwrap_or(f64::INFINITY)
    }
}

fn factor_with_policy(
    m: &DMatrix<f64>,
    policy: JitterPolicy,
) -> std::result::Result<CholeskyFactor, (f64, usize)> {
    let n = m.nrows();
    let mean_diag = if n == 0 {
        0.0
    } else {
        m.diagonal().iter().sum::<f64>().abs() / n as f64
    };
    let mut jitter = 0.0;
    for attempt in 0..=policy.max_attempts {
        let candidate = if jitter == 0.0 {
            m.clone()
        } else {
            let mut c = m.clone();
            for i in 0..n {
                c[(i, i)] += jitter;
            }
            c
        };
        if let Some(ch) = nalgebra::Cholesky::new(candidate) {
            return Ok(CholeskyFactor {
                l: ch.unpack(),
                jitter,
            });
        }
        if attempt == policy.max_attempts {
            break;
        }
        jitter = if jitter == 0.0 {
            policy.initial_scale * mean_diag
        } else {
            jitter * policy.growth
        };
    }
    let min_eig = sym_eigenvalues_desc(m).last().copied().unwrap_or(0.0);
    Err((min_eig, policy.max_attempts))
}

/// Solve `A X = B` for symmetric positive definite `A` under the jitter policy.
pub fn factor_solve(a: &SymMatrix, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.factor()?.solve_matrix(b)
}

/// Eigenvalues of a symmetric matrix, descending.
pub fn sym_eigenvalues_desc(m: &DMatrix<f64>) -> Vec<f64> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| b.partial_cmp(a).expect("eigenvalues are finite"));
    v
}

/// Solve the continuous Lyapunov equation `A^T P + P A = -S` for symmetric `S`
/// by vectorization: `(I (x) A^T + A^T (x) I) vec(P) = vec(-S)`.
///
/// Fails when the Kronecker system is singular, which happens exactly when
/// `A` has eigenvalues summing to zero in pairs (e.g. `A` not Hurwitz with a
/// mirrored spectrum) and the equation has no unique solution.
pub fn lyapunov_solve(a: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(MfError::DimensionMismatch {
            context: "lyapunov (A square)",
            expected: n,
            got: a.ncols(),
        });
    }
    if s.nrows() != n || s.ncols() != n {
        return Err(MfError::DimensionMismatch {
            context: "lyapunov (S shape)",
            expected: n,
            got: s.nrows().max(s.ncols()),
        });
    }
    let at = a.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let system = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_column_slice((-s).as_slice());
    let lu = system.lu();
    let sol = lu.solve(&rhs).ok_or_else(|| {
        MfError::Precondition("lyapunov system is singular (closed loop not asymptotically stable)".into())
    })?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    // Symmetrize; the exact solution is symmetric, this removes round-off skew.
    Ok(0.5 * (&p + p.transpose()))
}

/// Matrix exponential `e^A` by scaling and squaring with a Taylor core.
///
/// The scaling step halves `A` until its 1-norm is below 0.5, applies a
/// 16-term Taylor series, then squares back. Accuracy on the well-conditioned
/// closed-loop matrices used here is far below the tolerances of any caller.
pub fn matrix_exp(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix exponential needs a square matrix");
    let norm = a.iter().map(|v| v.abs()).fold(0.0f64, f64::max) * n as f64;
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a * (1.0 / f64::powi(2.0, squarings as i32));
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = DMatrix::<f64>::identity(n, n);
    for k in 1..=16 {
        term = (&term * &scaled) / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}
