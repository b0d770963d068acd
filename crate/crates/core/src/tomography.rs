//! Smoothness-regularised least-squares POVM reconstruction.
//!
//! Minimises `‖P − FΠ‖ + γ Σ_{k,n} (θ_k^(n) − θ_{k+1}^(n))²` over POVMs whose
//! rows lie on the probability simplex (`θ ≥ 0`, `Σ_n θ_k^(n) = 1`).
//!
//! Two methods are available:
//!
//! * [`SolverMethod::InteriorPoint`]: log-barrier Newton method. The Hessian is
//!   block diagonal over outcomes (plus a rank-one term for the unsquared norm),
//!   so every Newton step costs `N` Cholesky factorisations of an `M×M` block
//!   and one `M×M` Schur complement for the row-sum constraints.
//! * [`SolverMethod::ProjectedGradient`]: gradient steps followed by an exact
//!   per-row Euclidean projection onto the simplex, optionally with Nesterov
//!   momentum and a function-value restart. The objective sequence never
//!   increases under backtracking.
//!
//! Both start from the uniform POVM and finish with a row projection, so the
//! returned matrix is feasible whether or not the solver converged.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::povm::{PovmMatrix, ProbeMatrix, StatisticsMatrix};

/// Smoothing constant inside `sqrt(r² + ε)` for the unsquared-norm objective.
pub const PAPER_NORM_EPSILON: f64 = 1e-12;

/// Lower bound on the objective scale used by the relative stopping tests.
const OBJECTIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveForm {
    /// `‖P − FΠ‖_F² + g(Π)`.
    SquaredResidual,
    /// `sqrt(‖P − FΠ‖_F² + ε) + g(Π)`, the unsquared Frobenius norm.
    PaperNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Constant step `1/L` from the power-iteration estimate.
    Fixed,
    /// Start from `1/L` and double `L` until the sufficient-decrease test holds.
    Backtracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    InteriorPoint,
    ProjectedGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub gamma: f64,
    /// Newton steps (interior point) or gradient steps (projected gradient).
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub objective_form: ObjectiveForm,
    pub method: SolverMethod,
    /// Projected gradient only.
    pub step_rule: StepRule,
    /// Projected gradient only: Nesterov momentum with restart.
    pub accelerated: bool,
    /// Keep the objective value after every iteration in the report.
    pub record_history: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            gamma: 0.01,
            max_iterations: 50_000,
            relative_tolerance: 1e-9,
            objective_form: ObjectiveForm::PaperNorm,
            method: SolverMethod::InteriorPoint,
            step_rule: StepRule::Backtracking,
            accelerated: true,
            record_history: false,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Domain(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.relative_tolerance.is_finite() && self.relative_tolerance > 0.0) {
            return Err(Error::Domain(format!(
                "relative_tolerance must be > 0, got {}",
                self.relative_tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Domain("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub iterations_used: usize,
    pub final_objective: f64,
    /// Data term as it enters the objective (squared or smoothed norm).
    pub residual_term: f64,
    /// Plain Frobenius norm `‖P − FΠ‖_F`.
    pub residual_norm: f64,
    pub penalty_value: f64,
    pub converged: bool,
    pub method: SolverMethod,
    pub objective_form: ObjectiveForm,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective_history: Vec<f64>,
}

/// `γ Σ_n Σ_{k<M-1} (θ_k^(n) − θ_{k+1}^(n))²`.
pub fn smoothing_penalty(povm: &PovmMatrix, gamma: f64) -> f64 {
    smoothing_penalty_of(povm.entries(), gamma)
}

/// Same penalty for an arbitrary M×N matrix (no simplex requirement).
pub fn smoothing_penalty_of(theta: &DMatrix<f64>, gamma: f64) -> f64 {
    gamma * adjacent_squares(theta)
}

fn adjacent_squares(theta: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for n in 0..theta.ncols() {
        for k in 1..theta.nrows() {
            let d = theta[(k - 1, n)] - theta[(k, n)];
            acc += d * d;
        }
    }
    acc
}

/// Objective value at `povm` for the chosen form.
pub fn objective(
    stats: &StatisticsMatrix,
    probes: &ProbeMatrix,
    povm: &PovmMatrix,
    options: &SolverOptions,
) -> Result<f64> {
    let problem = Problem::new(stats, probes, options)?;
    if povm.truncation() != problem.truncation() || povm.outcomes() != problem.outcomes() {
        return Err(Error::Shape(format!(
            "POVM is {}x{}, problem expects {}x{}",
            povm.truncation(),
            povm.outcomes(),
            problem.truncation(),
            problem.outcomes()
        )));
    }
    Ok(problem.evaluate(povm.entries()).total)
}

/// Euclidean projection onto `{x : x ≥ 0, Σx = 1}`.
///
/// Sort-based threshold rule: with `u` sorted descending, the threshold is
/// `(Σ_{j≤ρ} u_j − 1)/ρ` for the largest `ρ` with `u_ρ` above it.
pub fn project_row_to_simplex(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    project_in_place(&mut out, &mut Vec::with_capacity(row.len()));
    out
}

fn project_in_place(row: &mut [f64], scratch: &mut Vec<f64>) {
    if row.is_empty() {
        return;
    }
    scratch.clear();
    scratch.extend_from_slice(row);
    scratch.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut threshold = 0.0;
    for (j, u) in scratch.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            threshold = candidate;
        }
    }
    for v in row.iter_mut() {
        *v = (*v - threshold).max(0.0);
    }
}

fn project_rows(theta: &mut DMatrix<f64>) {
    let n = theta.ncols();
    let mut row = vec![0.0; n];
    let mut scratch = Vec::with_capacity(n);
    for k in 0..theta.nrows() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = theta[(k, j)];
        }
        project_in_place(&mut row, &mut scratch);
        for (j, v) in row.iter().enumerate() {
            theta[(k, j)] = *v;
        }
    }
}

struct Evaluation {
    total: f64,
    residual_term: f64,
    residual_norm: f64,
    penalty: f64,
}

struct Problem<'a> {
    target: &'a DMatrix<f64>,
    probes: &'a DMatrix<f64>,
    gram: DMatrix<f64>,
    laplacian: DMatrix<f64>,
    gamma: f64,
    form: ObjectiveForm,
}

impl<'a> Problem<'a> {
    fn new(stats: &'a StatisticsMatrix, probes: &'a ProbeMatrix, options: &SolverOptions) -> Result<Self> {
        options.validate()?;
        if stats.entries().nrows() != probes.len() {
            return Err(Error::Shape(format!(
                "{} statistics rows for {} probes",
                stats.entries().nrows(),
                probes.len()
            )));
        }
        if stats
            .entries()
            .iter()
            .chain(probes.entries().iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("statistics or probe matrix".into()));
        }
        let f = probes.entries();
        let m = f.ncols();
        // DᵀD for the first-difference operator D along k.
        let laplacian = DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                if m == 1 {
                    0.0
                } else if i == 0 || i == m - 1 {
                    1.0
                } else {
                    2.0
                }
            } else if i.abs_diff(j) == 1 {
                -1.0
            } else {
                0.0
            }
        });
        Ok(Self {
            target: stats.entries(),
            probes: f,
            gram: f.tr_mul(f),
            laplacian,
            gamma: options.gamma,
            form: options.objective_form,
        })
    }

    fn truncation(&self) -> usize {
        self.probes.ncols()
    }

    fn outcomes(&self) -> usize {
        self.target.ncols()
    }

    fn residual(&self, theta: &DMatrix<f64>) -> DMatrix<f64> {
        self.probes * theta - self.target
    }

    fn evaluate_with(&self, theta: &DMatrix<f64>, residual: &DMatrix<f64>) -> Evaluation {
        let sq = residual.norm_squared();
        let residual_term = match self.form {
            ObjectiveForm::SquaredResidual => sq,
            ObjectiveForm::PaperNorm => (sq + PAPER_NORM_EPSILON).sqrt(),
        };
        let penalty = self.gamma * adjacent_squares(theta);
        Evaluation {
            total: residual_term + penalty,
            residual_term,
            residual_norm: sq.sqrt(),
            penalty,
        }
    }

    fn evaluate(&self, theta: &DMatrix<f64>) -> Evaluation {
        self.evaluate_with(theta, &self.residual(theta))
    }

    /// First and second derivatives of the outer map `ψ(s)` applied to
    /// `s = ‖r‖²`.
    fn outer_derivatives(&self, sq: f64) -> (f64, f64) {
        match self.form {
            ObjectiveForm::SquaredResidual => (1.0, 0.0),
            ObjectiveForm::PaperNorm => {
                let rho = (sq + PAPER_NORM_EPSILON).sqrt();
                (0.5 / rho, -0.25 / (rho * rho * rho))
            }
        }
    }

    fn gradient(&self, theta: &DMatrix<f64>, residual: &DMatrix<f64>) -> DMatrix<f64> {
        let (d1, _) = self.outer_derivatives(residual.norm_squared());
        self.probes.tr_mul(residual) * (2.0 * d1) + &self.laplacian * theta * (2.0 * self.gamma)
    }

    /// Lipschitz bound of the squared objective's gradient:
    /// `2λ_max(FᵀF) + 8γ`, with `λ_max` from power iteration.
    fn lipschitz_estimate(&self) -> f64 {
        let mut v = DVector::<f64>::from_element(self.gram.nrows(), 1.0);
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = &self.gram * &v;
            let norm = w.norm();
            if norm == 0.0 {
                break;
            }
            let next = v.dot(&w) / v.dot(&v);
            v = w / norm;
            let done = (next - lambda).abs() <= 1e-12 * next.abs();
            lambda = next;
            if done {
                break;
            }
        }
        // Power iteration approaches λ_max from below.
        2.0 * lambda * 1.01 + 8.0 * self.gamma
    }
}

struct Outcome {
    theta: DMatrix<f64>,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
}

/// Reconstructs the POVM from probe statistics.
///
/// `stats` supplies `P` (D×N) and `probes` supplies `F` (D×M); the result is
/// M×N and inherits the statistics' overflow flag.
pub fn reconstruct(
    stats: &StatisticsMatrix,
    probes: &ProbeMatrix,
    options: &SolverOptions,
) -> Result<(PovmMatrix, SolverReport)> {
    let problem = Problem::new(stats, probes, options)?;
    if problem.outcomes() == 0 || problem.truncation() == 0 {
        return Err(Error::Shape("empty problem".into()));
    }
    let mut outcome = match options.method {
        SolverMethod::InteriorPoint => interior_point(&problem, options),
        SolverMethod::ProjectedGradient => projected_gradient(&problem, options),
    };
    project_rows(&mut outcome.theta);

    let eval = problem.evaluate(&outcome.theta);
    let report = SolverReport {
        iterations_used: outcome.iterations,
        final_objective: eval.total,
        residual_term: eval.residual_term,
        residual_norm: eval.residual_norm,
        penalty_value: eval.penalty,
        converged: outcome.converged,
        method: options.method,
        objective_form: options.objective_form,
        gamma: options.gamma,
        objective_history: outcome.history,
    };
    let povm = PovmMatrix::from_feasible(outcome.theta, stats.overflow_outcome());
    Ok((povm, report))
}

fn projected_gradient(problem: &Problem<'_>, options: &SolverOptions) -> Outcome {
    let (m, n) = (problem.truncation(), problem.outcomes());
    let lipschitz0 = problem.lipschitz_estimate();

    let mut x = DMatrix::from_element(m, n, 1.0 / n as f64);
    let mut x_prev = x.clone();
    let mut f_x = problem.evaluate(&x).total;
    let mut lipschitz = lipschitz0;
    let mut momentum = 1.0f64;
    let mut history = Vec::new();
    if options.record_history {
        history.push(f_x);
    }

    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iterations {
        iterations += 1;

        let mut accepted = None;
        if options.accelerated && momentum > 1.0 {
            let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let beta = (momentum - 1.0) / next_momentum;
            let y = &x + (&x - &x_prev) * beta;
            let (z, f_z, l) = gradient_step(problem, options, &y, lipschitz, lipschitz0);
            lipschitz = l;
            if f_z <= f_x {
                accepted = Some((z, f_z));
                momentum = next_momentum;
            }
        }
        let (z, f_z) = match accepted {
            Some(step) => step,
            None => {
                // Restart from the current iterate; a backtracked projected
                // step from a feasible point cannot increase the objective.
                momentum = 1.0;
                let (z, f_z, l) = gradient_step(problem, options, &x, lipschitz, lipschitz0);
                lipschitz = l;
                if f_z <= f_x {
                    if options.accelerated {
                        momentum = 0.5 * (1.0 + 5.0f64.sqrt());
                    }
                    (z, f_z)
                } else {
                    (x.clone(), f_x)
                }
            }
        };

        let change = f_x - f_z;
        x_prev = std::mem::replace(&mut x, z);
        let f_old = f_x;
        f_x = f_z;
        if options.record_history {
            history.push(f_x);
        }
        let scale = f_old.abs().max(f64::MIN_POSITIVE);
        if f_x == 0.0 || change.abs() / scale < options.relative_tolerance {
            converged = true;
            break;
        }
    }
    Outcome {
        theta: x,
        iterations,
        converged,
        history,
    }
}

/// One projected gradient step from `y`; returns the new point, its objective
/// and the accepted curvature estimate.
fn gradient_step(
    problem: &Problem<'_>,
    options: &SolverOptions,
    y: &DMatrix<f64>,
    lipschitz: f64,
    lipschitz0: f64,
) -> (DMatrix<f64>, f64, f64) {
    let residual = problem.residual(y);
    let f_y = problem.evaluate_with(y, &residual).total;
    let grad = problem.gradient(y, &residual);

    let mut l = match (options.step_rule, options.objective_form) {
        (StepRule::Backtracking, ObjectiveForm::PaperNorm) => (lipschitz * 0.5).max(lipschitz0 * 1e-6),
        _ => lipschitz0,
    };
    loop {
        let mut z = y - &grad / l;
        project_rows(&mut z);
        let f_z = problem.evaluate(&z).total;
        if options.step_rule == StepRule::Fixed {
            return (z, f_z, l);
        }
        let diff = &z - y;
        let bound = f_y + grad.dot(&diff) + 0.5 * l * diff.norm_squared();
        if f_z <= bound + 1e-15 * f_y.abs() || diff.norm_squared() == 0.0 || l > lipschitz0 * 1e12 {
            return (z, f_z, l);
        }
        l *= 2.0;
    }
}

/// Newton decrement threshold (`λ²/2`) that ends a centering phase.
const CENTERING_TOLERANCE: f64 = 1e-10;
/// Below this squared Newton decrement the full step is taken.
const PURE_NEWTON_DECREMENT: f64 = 0.05;
/// Barrier parameter growth per outer iteration.
const BARRIER_GROWTH: f64 = 20.0;

/// Objective scale below which the duality-gap test becomes absolute. Small
/// enough that an exact fit is pursued to working precision.
const GAP_FLOOR: f64 = 1e-7;

/// Largest row-sum violation a Newton step may leave behind. Steps beyond it
/// come from a Newton system solved past working precision.
const ROW_DRIFT_LIMIT: f64 = 1e-7;

/// Consecutive barrier stages that end neither centered nor with an accepted
/// step before giving up.
const MAX_STALLED_STAGES: usize = 3;

/// Log-barrier method: minimise `t·φ(x) − Σ ln x` subject to the row-sum
/// constraints for an increasing sequence of `t`, each by equality-constrained
/// Newton steps. After centering, `φ(x) − φ* ≤ MN/t`.
fn interior_point(problem: &Problem<'_>, options: &SolverOptions) -> Outcome {
    let (m, n) = (problem.truncation(), problem.outcomes());
    let inequalities = (m * n) as f64;
    let mut x = DMatrix::from_element(m, n, 1.0 / n as f64);
    let mut phi = problem.evaluate(&x).total;
    let mut t = inequalities / phi.abs().max(OBJECTIVE_FLOOR);
    let mut history = Vec::new();
    if options.record_history {
        history.push(phi);
    }

    let mut iterations = 0;
    let mut converged = false;
    let mut stalled = 0;
    'outer: loop {
        let mut progressed = false;
        let mut centered = false;
        loop {
            if iterations >= options.max_iterations {
                break 'outer;
            }
            let Some((delta, decrement_sq)) = newton_direction(problem, &x, t) else {
                // Newton system is singular at working precision; no further
                // progress is possible for this t.
                break;
            };
            if decrement_sq * 0.5 <= CENTERING_TOLERANCE {
                progressed = true;
                centered = true;
                break;
            }
            iterations += 1;

            // Largest step keeping every entry strictly positive.
            let mut step = 1.0f64;
            for (xi, di) in x.iter().zip(delta.iter()) {
                if *di < 0.0 {
                    step = step.min(-0.99 * xi / di);
                }
            }
            let barrier_value = |theta: &DMatrix<f64>, phi: f64| t * phi - theta.iter().map(|v| v.ln()).sum::<f64>();
            let mut accepted = false;
            if decrement_sq < PURE_NEWTON_DECREMENT {
                // Quadratic-convergence region: function values are dominated
                // by rounding at large t, so skip the line search.
                let candidate = &x + &delta * step;
                if row_drift(&candidate) <= ROW_DRIFT_LIMIT {
                    phi = problem.evaluate(&candidate).total;
                    x = candidate;
                    accepted = true;
                }
            } else {
                let current = barrier_value(&x, phi);
                let slope = -decrement_sq;
                for _ in 0..60 {
                    let candidate = &x + &delta * step;
                    let phi_c = problem.evaluate(&candidate).total;
                    let value = barrier_value(&candidate, phi_c);
                    if candidate.iter().all(|v| *v > 0.0)
                        && value < current
                        && value <= current + 0.25 * step * slope
                        && row_drift(&candidate) <= ROW_DRIFT_LIMIT
                    {
                        x = candidate;
                        phi = phi_c;
                        accepted = true;
                        break;
                    }
                    step *= 0.5;
                }
            }
            if options.record_history {
                history.push(phi);
            }
            if !accepted {
                // No progress possible at this precision; treat as centered.
                break;
            }
            progressed = true;
        }
        let gap = inequalities / t;
        // The gap bound only holds on the central path.
        if centered && gap <= options.relative_tolerance * phi.abs().max(GAP_FLOOR) {
            converged = true;
            break;
        }
        stalled = if progressed { 0 } else { stalled + 1 };
        if stalled >= MAX_STALLED_STAGES {
            break;
        }
        t *= BARRIER_GROWTH;
    }
    Outcome {
        theta: x,
        iterations,
        converged,
        history,
    }
}

fn row_drift(x: &DMatrix<f64>) -> f64 {
    x.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max)
}

/// Solves the equality-constrained Newton system for the barrier function at
/// `x`. Returns the step and the squared Newton decrement.
fn newton_direction(problem: &Problem<'_>, x: &DMatrix<f64>, t: f64) -> Option<(DMatrix<f64>, f64)> {
    let (m, n) = (problem.truncation(), problem.outcomes());
    let residual = problem.residual(x);
    let (d1, d2) = problem.outer_derivatives(residual.norm_squared());
    // v = ∇s stacked over outcomes; Hessian of t·φ is
    // blockdiag(2tψ'·FᵀF + 2tγ·DᵀD) + tψ''·v vᵀ.
    let v = problem.probes.tr_mul(&residual) * 2.0;
    let grad_phi = &v * d1 + &problem.laplacian * x * (2.0 * problem.gamma);
    let g = DMatrix::from_fn(m, n, |k, j| t * grad_phi[(k, j)] - 1.0 / x[(k, j)]);
    let rank_one = -t * d2;
    let base = &problem.gram * (2.0 * t * d1) + &problem.laplacian * (2.0 * t * problem.gamma);

    let mut inv_blocks = Vec::with_capacity(n);
    let mut a = DMatrix::zeros(m, n);
    let mut b = DMatrix::zeros(m, n);
    let mut schur = DMatrix::zeros(m, m);
    for j in 0..n {
        let mut w = base.clone();
        for k in 0..m {
            w[(k, k)] += 1.0 / (x[(k, j)] * x[(k, j)]);
        }
        let inv = match Cholesky::new(w.clone()) {
            Some(chol) => chol.inverse(),
            None => w.lu().try_inverse()?,
        };
        a.set_column(j, &(&inv * g.column(j)));
        b.set_column(j, &(&inv * v.column(j)));
        schur += &inv;
        inv_blocks.push(inv);
    }

    let v_wb_v = v.dot(&b);
    let v_wb_g = v.dot(&a);
    let coupling = if rank_one > 0.0 {
        let denom = 1.0 - rank_one * v_wb_v;
        if denom <= 1e-14 {
            return None;
        }
        rank_one / denom
    } else {
        0.0
    };
    let w_sum: DVector<f64> = b.column_sum();
    let a_sum: DVector<f64> = a.column_sum();
    schur += &w_sum * w_sum.transpose() * coupling;
    // Row sums drift by rounding at large t; the step also removes that drift.
    let drift = DVector::from_fn(m, |k, _| x.row(k).sum() - 1.0);
    let rhs = drift - a_sum - &w_sum * (coupling * v_wb_g);
    let nu = match Cholesky::new(schur.clone()) {
        Some(chol) => chol.solve(&rhs),
        None => schur.lu().solve(&rhs)?,
    };

    let v_wb_h = v_wb_g + w_sum.dot(&nu);
    let mut delta = DMatrix::zeros(m, n);
    for (j, inv) in inv_blocks.iter().enumerate() {
        let col = a.column(j) + inv * &nu + b.column(j) * (coupling * v_wb_h);
        delta.set_column(j, &(-col));
    }
    let decrement_sq = -g.dot(&delta);
    Some((delta, decrement_sq.max(0.0)))
}
