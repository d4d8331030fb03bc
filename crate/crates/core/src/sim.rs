//! Simulated ground truth: a human-robot cooperative manipulation loop.
//!
//! Per operator, the coupled dynamics of the robot's impedance-controlled
//! error state and a first-order human force model form an augmented LTI
//! system. A structured state-feedback gain closes the loop; tuning quality is
//! the integrated quadratic cost from a fixed set of initial conditions.
//!
//! State layout for `n` degrees of freedom: `z = (e, de, f_h)` with position
//! error, error rate, and human force, each of dimension `n`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MfError, Result};
use crate::linalg::{lyapunov_solve, SymMatrix};

/// Human PD impedance gains. Realized as `K_d = k_d I_n`, `K_p = k_p I_n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorGains {
    k_d: f64,
    k_p: f64,
}

impl OperatorGains {
    /// Both gains must be strictly positive: `K_d` is inverted when building
    /// the plant and the human pole `-k_p/k_d` must be stable.
    pub fn new(k_d: f64, k_p: f64) -> Result<Self> {
        if !(k_d.is_finite() && k_d > 0.0) {
            return Err(MfError::InvalidInput(format!(
                "derivative gain must be strictly positive, got {k_d}"
            )));
        }
        if !(k_p.is_finite() && k_p > 0.0) {
            return Err(MfError::InvalidInput(format!(
                "proportional gain must be strictly positive, got {k_p}"
            )));
        }
        Ok(Self { k_d, k_p })
    }

    pub fn k_d(&self) -> f64 {
        self.k_d
    }

    pub fn k_p(&self) -> f64 {
        self.k_p
    }
}

/// Augmented plant for one operator: state matrix, input matrix, cost weights,
/// initial-condition columns, and a constant disturbance.
#[derive(Debug, Clone)]
pub struct HriPlant {
    n: usize,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    z0: DMatrix<f64>,
    d: DVector<f64>,
}

impl HriPlant {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn state_dim(&self) -> usize {
        3 * self.n
    }

    pub fn state_matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn input_matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn initial_conditions(&self) -> &DMatrix<f64> {
        &self.z0
    }

    pub fn disturbance(&self) -> &DVector<f64> {
        &self.d
    }

    /// Copy of this plant with a different constant disturbance.
    pub fn with_disturbance(&self, d: DVector<f64>) -> Result<HriPlant> {
        if d.len() != self.state_dim() {
            return Err(MfError::DimensionMismatch {
                context: "plant disturbance",
                expected: self.state_dim(),
                got: d.len(),
            });
        }
        let mut p = self.clone();
        p.d = d;
        Ok(p)
    }
}

/// Unit initial position error per axis, zero velocity and human force:
/// the `3n x n` matrix `[I_n; 0; 0]`.
pub fn default_initial_condition(n: usize) -> DMatrix<f64> {
    let mut z0 = DMatrix::zeros(3 * n, n);
    for i in 0..n {
        z0[(i, i)] = 1.0;
    }
    z0
}

/// Assemble the augmented plant
///
/// ```text
/// A_aug = [ A     0   ]      B_aug = [ B ]
///         [ B_h   A_h ]              [ 0 ]
/// ```
///
/// with `A` the `2n` double integrator, `A_h = -(k_p/k_d) I_n`,
/// `B_h = [(1/k_d) I_n, 0]`, and `B = [0; I_n]`.
pub fn build_plant(
    n: usize,
    gains: OperatorGains,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    z0: DMatrix<f64>,
    d: DVector<f64>,
) -> Result<HriPlant> {
    if n == 0 {
        return Err(MfError::InvalidInput("plant needs at least one degree of freedom".into()));
    }
    let dim = 3 * n;
    if q.nrows() != dim || q.ncols() != dim {
        return Err(MfError::DimensionMismatch {
            context: "plant Q",
            expected: dim,
            got: q.nrows().max(q.ncols()),
        });
    }
    if r.nrows() != n || r.ncols() != n {
        return Err(MfError::DimensionMismatch {
            context: "plant R",
            expected: n,
            got: r.nrows().max(r.ncols()),
        });
    }
    if z0.nrows() != dim {
        return Err(MfError::DimensionMismatch {
            context: "plant Z0",
            expected: dim,
            got: z0.nrows(),
        });
    }
    if d.len() != dim {
        return Err(MfError::DimensionMismatch {
            context: "plant disturbance",
            expected: dim,
            got: d.len(),
        });
    }
    // Q must be symmetric PSD, R symmetric PD.
    let q_sym = SymMatrix::new(q)?;
    if q_sym.min_eigenvalue() < -1e-9 {
        return Err(MfError::InvalidInput(format!(
            "Q must be positive semidefinite (min eigenvalue {:.3e})",
            q_sym.min_eigenvalue()
        )));
    }
    let r_sym = SymMatrix::new(r)?;
    if r_sym.min_eigenvalue() <= 0.0 {
        return Err(MfError::InvalidInput(format!(
            "R must be positive definite (min eigenvalue {:.3e})",
            r_sym.min_eigenvalue()
        )));
    }

    let mut a = DMatrix::zeros(dim, dim);
    for i in 0..n {
        // Double integrator: e' = de, de' = u (input enters through B).
        a[(i, n + i)] = 1.0;
        // Human force row block: f' = (1/k_d) e - (k_p/k_d) f.
        a[(2 * n + i, i)] = 1.0 / gains.k_d;
        a[(2 * n + i, 2 * n + i)] = -gains.k_p / gains.k_d;
    }
    let mut b = DMatrix::zeros(dim, n);
    for i in 0..n {
        b[(n + i, i)] = 1.0;
    }
    Ok(HriPlant {
        n,
        a,
        b,
        q: q_sym.as_matrix().clone(),
        r: r_sym.as_matrix().clone(),
        z0,
        d,
    })
}

/// The three structured gains: `x1` on position error, `x2` on error rate,
/// `x3` on human force, each replicated across axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerParams {
    pub x: [f64; 3],
}

impl ControllerParams {
    pub fn new(x1: f64, x2: f64, x3: f64) -> Result<Self> {
        if ![x1, x2, x3].iter().all(|v| v.is_finite()) {
            return Err(MfError::InvalidInput(format!(
                "controller gains must be finite, got ({x1}, {x2}, {x3})"
            )));
        }
        Ok(Self { x: [x1, x2, x3] })
    }

    pub fn from_slice(x: &[f64]) -> Result<Self> {
        if x.len() != 3 {
            return Err(MfError::DimensionMismatch {
                context: "controller parameters",
                expected: 3,
                got: x.len(),
            });
        }
        Self::new(x[0], x[1], x[2])
    }
}

/// Expand the three scalars into the structured `n x 3n` feedback gain
/// `K = [x1 I_n, x2 I_n, x3 I_n]`.
pub fn build_controller(x: &ControllerParams, n: usize) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(n, 3 * n);
    for i in 0..n {
        k[(i, i)] = x.x[0];
        k[(i, n + i)] = x.x[1];
        k[(i, 2 * n + i)] = x.x[2];
    }
    k
}

/// Fixed-step integration settings. Defaults: horizon 10, step 1e-3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSettings {
    pub horizon: f64,
    pub step: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            horizon: 10.0,
            step: 1e-3,
        }
    }
}

impl SimSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(MfError::InvalidInput(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if !(self.step.is_finite() && self.step > 0.0 && self.step <= self.horizon) {
            return Err(MfError::InvalidInput(format!(
                "step must be positive and at most the horizon, got {}",
                self.step
            )));
        }
        Ok(())
    }

    fn n_steps(&self) -> usize {
        (self.horizon / self.step).round().max(1.0) as usize
    }
}

/// Integrated quadratic cost and whether the trajectory blew up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostSample {
    pub j: f64,
    pub diverged: bool,
}

/// State norm beyond which a trajectory is declared divergent.
const DIVERGENCE_NORM: f64 = 1e6;

/// One classic 4th-order Runge-Kutta step of the affine system
/// `z' = A_cl z + d`, together with the matching quadrature increment of
/// `j' = z^T S z`, folded into constant maps:
///
/// `z_next = M z + v`, `j += z^T G z + 2 g^T z + c`.
///
/// `M`, `v`, `G`, `g`, `c` are exact compositions of the four stages, so one
/// application reproduces the classic stage-by-stage step in exact arithmetic
/// while costing two small matrix products per step.
struct Rk4Step {
    m: DMatrix<f64>,
    v: DVector<f64>,
    g: DMatrix<f64>,
    gl: DVector<f64>,
    c: f64,
}

impl Rk4Step {
    fn new(a_cl: &DMatrix<f64>, d: &DVector<f64>, s: &DMatrix<f64>, h: f64) -> Self {
        let dim = a_cl.nrows();
        let eye = DMatrix::<f64>::identity(dim, dim);
        // Stage states as affine maps of the step's initial state:
        // Y_i = P_i z + w_i.
        let p2 = &eye + (h / 2.0) * a_cl;
        let w2 = (h / 2.0) * d;
        let p3 = &eye + (h / 2.0) * a_cl * &p2;
        let w3 = (h / 2.0) * (a_cl * &w2 + d);
        let p4 = &eye + h * a_cl * &p3;
        let w4 = h * (a_cl * &w3 + d);

        let m = &eye + (h / 6.0) * a_cl * (&eye + 2.0 * &p2 + 2.0 * &p3 + &p4);
        let v = (h / 6.0) * (a_cl * (2.0 * &w2 + 2.0 * &w3 + &w4) + 6.0 * d);

        let weighted = |p: &DMatrix<f64>, w: &DVector<f64>, c: f64| {
            let sp = s * p;
            (c * p.transpose() * &sp, c * sp.transpose() * w, c * (w.transpose() * s * w)[(0, 0)])
        };
        let (g1, _, _) = weighted(&eye, &w2, 1.0); // w1 = 0, linear and constant parts vanish
        let (g2, l2, c2) = weighted(&p2, &w2, 2.0);
        let (g3, l3, c3) = weighted(&p3, &w3, 2.0);
        let (g4, l4, c4) = weighted(&p4, &w4, 1.0);
        let g = (h / 6.0) * (g1 + g2 + g3 + g4);
        let gl = (h / 6.0) * (l2 + l3 + l4);
        let c = (h / 6.0) * (c2 + c3 + c4);
        Rk4Step { m, v, g, gl, c }
    }
}

/// Integrate `z' = (A_aug - B_aug K) z + d` from every column of `Z0` over the
/// horizon, accumulating `integral of z^T (Q + K^T R K) z` with the same
/// 4th-order scheme, and sum the per-column costs.
///
/// A trajectory whose state norm exceeds `1e6` stops the integration; the
/// accumulated (large) cost is returned with the divergence flag set.
pub fn evaluate_cost(
    plant: &HriPlant,
    k: &DMatrix<f64>,
    sim: &SimSettings,
) -> Result<CostSample> {
    sim.validate()?;
    let dim = plant.state_dim();
    if k.nrows() != plant.n || k.ncols() != dim {
        return Err(MfError::DimensionMismatch {
            context: "controller shape",
            expected: dim,
            got: k.ncols(),
        });
    }
    let a_cl = &plant.a - &plant.b * k;
    let s = &plant.q + k.transpose() * &plant.r * k;
    let step = Rk4Step::new(&a_cl, &plant.d, &s, sim.step);

    let cols = plant.z0.ncols();
    let mut z = plant.z0.clone();
    let mut znew = DMatrix::zeros(dim, cols);
    let mut gz = DMatrix::zeros(dim, cols);
    let mut j = 0.0;
    let limit_sq = DIVERGENCE_NORM * DIVERGENCE_NORM;

    for _ in 0..sim.n_steps() {
        // Quadrature increment for every column, then the state update.
        step.g.mul_to(&z, &mut gz);
        for col in 0..cols {
            let zc = z.column(col);
            j += zc.dot(&gz.column(col)) + 2.0 * step.gl.dot(&zc) + step.c;
        }
        step.m.mul_to(&z, &mut znew);
        for col in 0..cols {
            let mut c = znew.column_mut(col);
            c += &step.v;
        }
        std::mem::swap(&mut z, &mut znew);
        for col in 0..cols {
            if z.column(col).norm_squared() > limit_sq {
                return Ok(CostSample { j, diverged: true });
            }
        }
    }
    Ok(CostSample { j, diverged: false })
}

/// Closed-loop state matrix `A_aug - B_aug K`.
pub fn closed_loop(plant: &HriPlant, k: &DMatrix<f64>) -> DMatrix<f64> {
    &plant.a - &plant.b * k
}

/// All eigenvalues strictly in the open left half plane.
pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    m.complex_eigenvalues().iter().all(|l| l.re < 0.0)
}

/// Infinite-horizon cost through the Lyapunov equation
/// `A_cl^T P + P A_cl = -(Q + K^T R K)`, summed over the initial-condition
/// columns. Only defined for an asymptotically stable loop with zero
/// disturbance; an independent algebraic cross-check for [`evaluate_cost`].
pub fn lyapunov_cost(plant: &HriPlant, k: &DMatrix<f64>) -> Result<f64> {
    if plant.d.iter().any(|v| *v != 0.0) {
        return Err(MfError::Precondition(
            "infinite-horizon cost is defined for the undisturbed plant".into(),
        ));
    }
    let a_cl = closed_loop(plant, k);
    if !is_hurwitz(&a_cl) {
        return Err(MfError::Precondition(
            "closed loop is not asymptotically stable".into(),
        ));
    }
    let s = &plant.q + k.transpose() * &plant.r * k;
    let p = lyapunov_solve(&a_cl, &s)?;
    let mut j = 0.0;
    for col in 0..plant.z0.ncols() {
        let z0 = plant.z0.column(col);
        j += (z0.transpose() * &p * z0)[(0, 0)];
    }
    Ok(j)
}

/// Noisy performance observation `y = -J + eta`, `eta ~ N(0, noise_std^2)`.
pub fn performance_sample(
    plant: &HriPlant,
    x: &ControllerParams,
    sim: &SimSettings,
    noise_std: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(MfError::InvalidInput(format!(
            "noise standard deviation must be non-negative, got {noise_std}"
        )));
    }
    let k = build_controller(x, plant.n);
    let cost = evaluate_cost(plant, &k, sim)?;
    let eta = if noise_std > 0.0 {
        Normal::new(0.0, noise_std)
            .map_err(|e| MfError::InvalidInput(e.to_string()))?
            .sample(rng)
    } else {
        0.0
    };
    Ok(-cost.j + eta)
}

/// Population the operators are drawn from. Second moments are variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorDistribution {
    pub mean_k_d: f64,
    pub var_k_d: f64,
    pub mean_k_p: f64,
    pub var_k_p: f64,
    /// Draws below this bound (either gain) are rejected.
    pub min_gain: f64,
    pub max_draws: usize,
}

impl Default for OperatorDistribution {
    fn default() -> Self {
        Self {
            mean_k_d: 10.0,
            var_k_d: 5.0,
            mean_k_p: 20.0,
            var_k_p: 5.0,
            min_gain: 0.1,
            max_draws: 1000,
        }
    }
}

/// Draw one operator, rejecting gain pairs below the bound.
pub fn sample_operator(
    rng: &mut impl Rng,
    dist: &OperatorDistribution,
) -> Result<OperatorGains> {
    let norm_d = Normal::new(dist.mean_k_d, dist.var_k_d.sqrt())
        .map_err(|e| MfError::InvalidInput(e.to_string()))?;
    let norm_p = Normal::new(dist.mean_k_p, dist.var_k_p.sqrt())
        .map_err(|e| MfError::InvalidInput(e.to_string()))?;
    for _ in 0..dist.max_draws {
        let k_d = norm_d.sample(rng);
        let k_p = norm_p.sample(rng);
        if k_d >= dist.min_gain && k_p >= dist.min_gain {
            return OperatorGains::new(k_d, k_p);
        }
    }
    Err(MfError::Inconsistent(format!(
        "operator rejection sampling exhausted {} draws",
        dist.max_draws
    )))
}

/// Real parts of the closed-loop spectrum, descending. Used by stability
/// diagnostics and the simulate subcommand.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}
