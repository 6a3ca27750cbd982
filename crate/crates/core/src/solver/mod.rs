//! Augmented-Lagrangian NLP solver with box constraints.
//!
//! Problems expose an objective, equality constraints `c(z) = 0`, inequality
//! constraints `g(z) <= 0` and simple bounds. The outer loop updates multipliers
//! and grows the penalty by a fixed factor; the inner loop minimizes the
//! augmented Lagrangian over the box with either projected Levenberg-Marquardt
//! (when the objective is a sum of squares) or projected L-BFGS.

mod inner;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Nonlinear program `min f(z)` s.t. `c(z) = 0`, `g(z) <= 0`, `lower <= z <= upper`.
pub trait NlpProblem {
    fn dim(&self) -> usize;
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![f64::NEG_INFINITY; self.dim()], vec![f64::INFINITY; self.dim()])
    }
    fn objective(&self, z: &[f64]) -> Result<f64>;
    fn gradient(&self, z: &[f64], grad: &mut [f64]) -> Result<()>;

    fn n_eq(&self) -> usize {
        0
    }
    /// Number of leading equality rows that are affine in `z`.
    fn n_linear_eq(&self) -> usize {
        0
    }
    fn eq_values(&self, _z: &[f64], _out: &mut [f64]) -> Result<()> {
        Ok(())
    }
    fn eq_jacobian(&self, _z: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::zeros(0, self.dim()))
    }

    fn n_ineq(&self) -> usize {
        0
    }
    fn ineq_values(&self, _z: &[f64], _out: &mut [f64]) -> Result<()> {
        Ok(())
    }
    fn ineq_jacobian(&self, _z: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::zeros(0, self.dim()))
    }

    /// Residual vector and Jacobian when `f(z) = |r(z)|^2`; `objective` must then
    /// return the same value.
    fn residuals(&self, _z: &[f64]) -> Option<Result<(DVector<f64>, DMatrix<f64>)>> {
        None
    }
    fn has_residuals(&self) -> bool {
        false
    }
    /// Suggested starting penalty.
    fn penalty_hint(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum InnerSolver {
    /// Levenberg-Marquardt when residuals are available, L-BFGS otherwise.
    #[default]
    Auto,
    GaussNewton,
    Lbfgs,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SolverOptions {
    pub feasibility_tol: f64,
    pub optimality_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub penalty_growth: f64,
    pub initial_penalty: Option<f64>,
    pub inner: InnerSolver,
    pub lbfgs_memory: usize,
    pub armijo_c: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            feasibility_tol: 1e-7,
            optimality_tol: 1e-6,
            max_outer: 20,
            max_inner: 200,
            penalty_growth: 10.0,
            initial_penalty: None,
            inner: InnerSolver::Auto,
            lbfgs_memory: 10,
            armijo_c: 1e-4,
            backtrack: 0.5,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SolverStatus {
    Converged,
    MaxIterations,
    InfeasibleDetected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub solution: Vec<f64>,
    pub objective: f64,
    pub eq_violation: f64,
    pub ineq_violation: f64,
    /// Total inner iterations.
    pub iterations: usize,
    pub outer_iterations: usize,
    pub kkt_residual: f64,
    pub status: SolverStatus,
    pub eq_multipliers: Vec<f64>,
    pub ineq_multipliers: Vec<f64>,
}

impl SolverReport {
    pub fn max_violation(&self) -> f64 {
        self.eq_violation.max(self.ineq_violation)
    }

    pub fn converged(&self) -> bool {
        self.status == SolverStatus::Converged
    }
}

pub(crate) fn project(z: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..z.len() {
        z[i] = z[i].clamp(lo[i], hi[i]);
    }
}

/// Gradient with components that push against an active bound removed.
pub(crate) fn projected_gradient(z: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    (0..z.len())
        .map(|i| {
            if lo[i] == hi[i] || (z[i] <= lo[i] && g[i] > 0.0) || (z[i] >= hi[i] && g[i] < 0.0) {
                0.0
            } else {
                g[i]
            }
        })
        .collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Augmented Lagrangian state shared with the inner solvers.
pub(crate) struct AlState<'a> {
    pub problem: &'a dyn NlpProblem,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub rho: f64,
}

impl AlState<'_> {
    fn objective_value(&self, z: &[f64]) -> Result<f64> {
        self.problem.objective(z)
    }

    fn objective_gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self.problem.residuals(z) {
            Some(r) => {
                let (r, j) = r?;
                Ok((j.tr_mul(&r) * 2.0).iter().copied().collect())
            }
            None => {
                let mut g = vec![0.0; z.len()];
                self.problem.gradient(z, &mut g)?;
                Ok(g)
            }
        }
    }

    /// Shifted constraint values `c + lambda/rho` and `max(0, g + mu/rho)`.
    pub fn shifted(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = self.problem;
        let mut c = vec![0.0; p.n_eq()];
        p.eq_values(z, &mut c)?;
        let mut g = vec![0.0; p.n_ineq()];
        p.ineq_values(z, &mut g)?;
        for (ci, li) in c.iter_mut().zip(&self.lambda) {
            *ci += li / self.rho;
        }
        for (gi, mi) in g.iter_mut().zip(&self.mu) {
            *gi = (*gi + mi / self.rho).max(0.0);
        }
        Ok((c, g))
    }

    /// Augmented Lagrangian value (up to a constant).
    pub fn merit(&self, z: &[f64]) -> Result<f64> {
        let f = self.objective_value(z)?;
        let (c, g) = self.shifted(z)?;
        let pen: f64 = c.iter().chain(&g).map(|v| v * v).sum();
        let v = f + 0.5 * self.rho * pen;
        if !v.is_finite() {
            return Err(Error::Callback("non-finite merit value".into()));
        }
        Ok(v)
    }

    pub fn merit_gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut grad = self.objective_gradient(z)?;
        self.add_penalty_gradient(z, &mut grad)?;
        Ok(grad)
    }

    fn add_penalty_gradient(&self, z: &[f64], grad: &mut [f64]) -> Result<()> {
        let (c, g) = self.shifted(z)?;
        let p = self.problem;
        if !c.is_empty() {
            let a = p.eq_jacobian(z)?;
            let t = a.tr_mul(&DVector::from_vec(c)) * self.rho;
            grad.iter_mut().zip(t.iter()).for_each(|(x, y)| *x += y);
        }
        if g.iter().any(|&v| v > 0.0) {
            let b = p.ineq_jacobian(z)?;
            let t = b.tr_mul(&DVector::from_vec(g)) * self.rho;
            grad.iter_mut().zip(t.iter()).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    /// Stacked residual `R` and Jacobian with `merit = |R|^2`.
    pub fn stacked_residuals(&self, z: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p = self.problem;
        let (r, j) = p
            .residuals(z)
            .ok_or_else(|| Error::InvalidConfig("Gauss-Newton inner solver needs residuals".into()))??;
        let (c, g) = self.shifted(z)?;
        let active: Vec<usize> = (0..g.len()).filter(|&i| g[i] > 0.0).collect();
        let s = libm::sqrt(0.5 * self.rho);
        let rows = r.len() + c.len() + active.len();
        let n = z.len();
        let mut rr = DVector::zeros(rows);
        let mut jj = DMatrix::zeros(rows, n);
        rr.rows_mut(0, r.len()).copy_from(&r);
        jj.rows_mut(0, r.len()).copy_from(&j);
        let mut off = r.len();
        if !c.is_empty() {
            let a = p.eq_jacobian(z)?;
            for (i, ci) in c.iter().enumerate() {
                rr[off + i] = s * ci;
            }
            jj.rows_mut(off, c.len()).copy_from(&(a * s));
            off += c.len();
        }
        if !active.is_empty() {
            let b = p.ineq_jacobian(z)?;
            for (k, &i) in active.iter().enumerate() {
                rr[off + k] = s * g[i];
                for col in 0..n {
                    jj[(off + k, col)] = s * b[(i, col)];
                }
            }
        }
        Ok((rr, jj))
    }
}

/// Solves `problem` from the initial guess `z0`.
pub fn solve(problem: &dyn NlpProblem, z0: &[f64], options: &SolverOptions) -> Result<SolverReport> {
    let n = problem.dim();
    if z0.len() != n {
        return Err(Error::DimensionMismatch(format!("initial guess has length {}, problem has {n}", z0.len())));
    }
    let (lo, hi) = problem.bounds();
    if lo.len() != n || hi.len() != n {
        return Err(Error::DimensionMismatch("bound vectors do not match the problem dimension".into()));
    }
    if let Some(i) = (0..n).find(|&i| !(lo[i] <= hi[i])) {
        return Err(Error::InvalidConfig(format!("empty box for variable {i}: [{}, {}]", lo[i], hi[i])));
    }
    let use_gn = match options.inner {
        InnerSolver::Auto => problem.has_residuals(),
        InnerSolver::GaussNewton => {
            if !problem.has_residuals() {
                return Err(Error::InvalidConfig("Gauss-Newton inner solver needs residuals".into()));
            }
            true
        }
        InnerSolver::Lbfgs => false,
    };
    let mut z = z0.to_vec();
    project(&mut z, &lo, &hi);

    let (ne, ni) = (problem.n_eq(), problem.n_ineq());
    let rho0 = options.initial_penalty.or_else(|| problem.penalty_hint()).unwrap_or(10.0);
    let mut st = AlState { problem, lambda: vec![0.0; ne], mu: vec![0.0; ni], rho: rho0 };
    let mut total = 0usize;
    let mut prev_viol = f64::INFINITY;
    let mut history: Vec<f64> = Vec::new();
    let mut status = SolverStatus::MaxIterations;
    let mut outer_done = 0;
    let mut c = vec![0.0; ne];
    let mut g = vec![0.0; ni];
    let mut kkt = f64::INFINITY;
    let mut eq_viol = 0.0;
    let mut in_viol = 0.0;

    for outer in 0..options.max_outer.max(1) {
        outer_done = outer + 1;
        let (zn, it) = if use_gn {
            inner::levenberg_marquardt(&st, &z, &lo, &hi, options)?
        } else {
            inner::lbfgs(&st, &z, &lo, &hi, options)?
        };
        z = zn;
        total += it;

        problem.eq_values(&z, &mut c)?;
        problem.ineq_values(&z, &mut g)?;
        eq_viol = inf_norm(&c);
        in_viol = g.iter().fold(0.0f64, |a, v| a.max(*v));
        let viol = eq_viol.max(in_viol);
        for (l, ci) in st.lambda.iter_mut().zip(&c) {
            *l += st.rho * ci;
        }
        for (m, gi) in st.mu.iter_mut().zip(&g) {
            *m = (*m + st.rho * gi).max(0.0);
        }
        let grad_f = st.objective_gradient(&z)?;
        let mut grad_l = grad_f.clone();
        if ne > 0 {
            let a = problem.eq_jacobian(&z)?;
            let t = a.tr_mul(&DVector::from_column_slice(&st.lambda));
            grad_l.iter_mut().zip(t.iter()).for_each(|(x, y)| *x += y);
        }
        if ni > 0 {
            let b = problem.ineq_jacobian(&z)?;
            let t = b.tr_mul(&DVector::from_column_slice(&st.mu));
            grad_l.iter_mut().zip(t.iter()).for_each(|(x, y)| *x += y);
        }
        kkt = inf_norm(&projected_gradient(&z, &grad_l, &lo, &hi)) / inf_norm(&grad_f).max(1.0);

        if viol <= options.feasibility_tol && kkt <= options.optimality_tol {
            status = SolverStatus::Converged;
            break;
        }
        history.push(viol);
        if viol > options.feasibility_tol && viol > 0.25 * prev_viol {
            st.rho *= options.penalty_growth;
        }
        prev_viol = viol;
        let h = history.len();
        if h >= 4 && viol > 1e3 * options.feasibility_tol && st.rho >= 1e6 * rho0 && history[h - 1] > 0.9 * history[h - 4] {
            status = SolverStatus::InfeasibleDetected;
            break;
        }
    }
    if status == SolverStatus::MaxIterations && eq_viol.max(in_viol) > 1e-3 {
        status = SolverStatus::InfeasibleDetected;
    }
    let objective = st.objective_value(&z)?;
    Ok(SolverReport {
        solution: z,
        objective,
        eq_violation: eq_viol,
        ineq_violation: in_viol,
        iterations: total,
        outer_iterations: outer_done,
        kkt_residual: kkt,
        status,
        eq_multipliers: st.lambda,
        ineq_multipliers: st.mu,
    })
}

/// Largest relative mismatch between analytic derivatives and central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeCheck {
    pub gradient: f64,
    pub eq_jacobian: f64,
    pub ineq_jacobian: f64,
    pub residual_jacobian: f64,
}

impl DerivativeCheck {
    pub fn max(&self) -> f64 {
        self.gradient.max(self.eq_jacobian).max(self.ineq_jacobian).max(self.residual_jacobian)
    }
}

fn rel_err(fd: f64, an: f64, scale: f64) -> f64 {
    (fd - an).abs() / an.abs().max(fd.abs()).max(scale).max(1e-300)
}

/// Compares every derivative callback of `problem` with central differences of step `h`.
///
/// Errors are relative to `max(|analytic|, |fd|, floor)` where `floor` is
/// `1e-6` times the largest entry of the derivative being tested.
pub fn check_derivatives(problem: &dyn NlpProblem, z: &[f64], h: f64) -> Result<DerivativeCheck> {
    let n = problem.dim();
    let mut grad = vec![0.0; n];
    problem.gradient(z, &mut grad)?;
    let a = problem.eq_jacobian(z)?;
    let b = problem.ineq_jacobian(z)?;
    let res = problem.residuals(z).transpose()?;
    let (ne, ni) = (problem.n_eq(), problem.n_ineq());
    let floor = |m: &[f64]| 1e-6 * inf_norm(m);
    let (fg, fa, fb) = (floor(&grad), floor(a.as_slice()), floor(b.as_slice()));
    let fr = res.as_ref().map(|(_, j)| floor(j.as_slice())).unwrap_or(0.0);
    let mut out = DerivativeCheck { gradient: 0.0, eq_jacobian: 0.0, ineq_jacobian: 0.0, residual_jacobian: 0.0 };
    let mut zp = z.to_vec();
    let mut zm = z.to_vec();
    let (mut cp, mut cm) = (vec![0.0; ne], vec![0.0; ne]);
    let (mut gp, mut gm) = (vec![0.0; ni], vec![0.0; ni]);
    for j in 0..n {
        zp[j] = z[j] + h;
        zm[j] = z[j] - h;
        let fd = (problem.objective(&zp)? - problem.objective(&zm)?) / (2.0 * h);
        out.gradient = out.gradient.max(rel_err(fd, grad[j], fg));
        problem.eq_values(&zp, &mut cp)?;
        problem.eq_values(&zm, &mut cm)?;
        for i in 0..ne {
            out.eq_jacobian = out.eq_jacobian.max(rel_err((cp[i] - cm[i]) / (2.0 * h), a[(i, j)], fa));
        }
        problem.ineq_values(&zp, &mut gp)?;
        problem.ineq_values(&zm, &mut gm)?;
        for i in 0..ni {
            out.ineq_jacobian = out.ineq_jacobian.max(rel_err((gp[i] - gm[i]) / (2.0 * h), b[(i, j)], fb));
        }
        if let Some((_, jr)) = &res {
            let rp = problem.residuals(&zp).transpose()?.expect("residuals").0;
            let rm = problem.residuals(&zm).transpose()?.expect("residuals").0;
            for i in 0..rp.len() {
                out.residual_jacobian = out.residual_jacobian.max(rel_err((rp[i] - rm[i]) / (2.0 * h), jr[(i, j)], fr));
            }
        }
        zp[j] = z[j];
        zm[j] = z[j];
    }
    Ok(out)
}

/// One block of a decision vector that is shifted in time by [`warm_start_shift`].
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftBlock {
    /// Start index in the decision vector.
    pub offset: usize,
    /// Number of time steps in the block.
    pub steps: usize,
    /// Values per time step.
    pub width: usize,
    /// Values appended at the tail (length `width`).
    pub pad: Vec<f64>,
}

/// Layout used to shift a previous solution forward in time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ShiftLayout {
    pub dim: usize,
    pub blocks: Vec<ShiftBlock>,
    /// Index ranges reset to zero (slacks).
    pub zeroed: Vec<Range<usize>>,
}

/// Shifts every block by `s` steps, pads with the block's tail value, zeroes
/// the listed ranges, and finally lets `refit` recompute remaining entries
/// (for example Hankel weights) in place.
pub fn warm_start_shift(
    previous: &[f64],
    layout: &ShiftLayout,
    s: usize,
    refit: Option<&dyn Fn(&mut [f64]) -> Result<()>>,
) -> Result<Vec<f64>> {
    if previous.len() != layout.dim {
        return Err(Error::StructureMismatch(format!(
            "previous solution has length {}, layout expects {}",
            previous.len(),
            layout.dim
        )));
    }
    let mut out = previous.to_vec();
    if s == 0 {
        return Ok(out);
    }
    for b in &layout.blocks {
        if b.offset + b.steps * b.width > layout.dim || b.pad.len() != b.width {
            return Err(Error::StructureMismatch("shift block exceeds the decision vector".into()));
        }
        for k in 0..b.steps {
            for c in 0..b.width {
                out[b.offset + k * b.width + c] =
                    if k + s < b.steps { previous[b.offset + (k + s) * b.width + c] } else { b.pad[c] };
            }
        }
    }
    for r in &layout.zeroed {
        if r.end > layout.dim {
            return Err(Error::StructureMismatch("zeroed range exceeds the decision vector".into()));
        }
        out[r.clone()].iter_mut().for_each(|v| *v = 0.0);
    }
    if let Some(f) = refit {
        f(&mut out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
