//! Data-based trajectory representation, data-driven simulation and output
//! matching with error bounds, and the bound polynomials shared with the
//! controller.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::basis::{evaluate_basis_sequence, BasisDictionary};
use crate::error::{Error, Result};
use crate::linalg;
use crate::plant::{build_xi_sequence, BrunovskyStructure, Trajectory};
use crate::solver::{self, NlpProblem, SolverOptions, SolverStatus};
use crate::trajlib::{build_hankel, is_persistently_exciting, PeReport, Sequence, DEFAULT_RANK_TOL};

/// Default `lambda_alpha` for simulation and output matching.
pub const DEFAULT_SIM_LAMBDA_ALPHA: f64 = 1e3;
/// Tolerance on the initial-condition equality.
pub const INITIAL_CONDITION_TOL: f64 = 1e-9;

/// Hankel blocks of offline data used by every data-based problem.
#[derive(Debug, Clone)]
pub struct DataBlocks {
    pub structure: BrunovskyStructure,
    /// Depth `L'` of the `Psi` block.
    pub depth: usize,
    pub r: usize,
    /// `H_{L'}(Psi(u^d, Xi^d))`.
    pub h_psi: DMatrix<f64>,
    /// `H_{L'+1}(Xi^d)`.
    pub h_xi: DMatrix<f64>,
    /// `H_{L'}(u^d)`.
    pub h_u: DMatrix<f64>,
    /// `H_{L'+d_i}(y_i^d)` per channel.
    pub h_y: Vec<DMatrix<f64>>,
    pub psi: Sequence,
    /// Persistency of excitation of `Psi` of order `L' + n`.
    pub pe: PeReport,
    /// Whether the blocks were built from measured (noisy) outputs.
    pub noisy: bool,
}

impl DataBlocks {
    pub fn new(dict: &dyn BasisDictionary, data: &Trajectory, depth: usize, use_noisy: bool) -> Result<Self> {
        let s = data.structure.clone();
        let n_steps = data.len();
        if depth == 0 || depth > n_steps {
            return Err(Error::DepthExceedsLength { depth, len: n_steps });
        }
        let xi = if use_noisy { &data.xi_noisy } else { &data.xi };
        let outputs = if use_noisy { &data.noisy_outputs } else { data.clean_outputs() };
        let psi = evaluate_basis_sequence(dict, &data.inputs, &xi.window(0, n_steps - 1)?)?;
        let h_psi = build_hankel(&psi, depth)?.into_matrix();
        let h_xi = build_hankel(xi, depth + 1)?.into_matrix();
        let h_u = build_hankel(&data.inputs, depth)?.into_matrix();
        let mut h_y = Vec::with_capacity(s.m());
        for (i, y) in outputs.iter().enumerate() {
            let seq = Sequence::from_scalars(&y[..n_steps + s.degree(i)])?;
            h_y.push(build_hankel(&seq, depth + s.degree(i))?.into_matrix());
        }
        let order = depth + s.n();
        let pe = if order <= n_steps {
            is_persistently_exciting(&psi, order, DEFAULT_RANK_TOL)?
        } else {
            PeReport { persistently_exciting: false, rank: 0, required_rank: psi.channels() * order, sigma_min: 0.0 }
        };
        Ok(Self { r: dict.len(), structure: s, depth, h_psi, h_xi, h_u, h_y, psi, pe, noisy: use_noisy })
    }

    /// Number of columns `N - L' + 1` (the length of `alpha`).
    pub fn cols(&self) -> usize {
        self.h_psi.ncols()
    }

    pub fn m(&self) -> usize {
        self.structure.m()
    }

    pub fn n(&self) -> usize {
        self.structure.n()
    }

    /// `H_1(Xi_[0, N-L'])`.
    pub fn initial_rows(&self) -> DMatrix<f64> {
        self.h_xi.rows(0, self.n()).into_owned()
    }

    /// Index of `y_{i,k}` among the rows of `H_{L'+1}(Xi)` for each `Xi_k'` containing it.
    pub fn xi_rows_of_output(&self, i: usize, k: usize) -> Vec<usize> {
        let s = &self.structure;
        let (n, d, o) = (s.n(), s.degree(i), s.offset(i));
        (0..=self.depth).filter(|&kp| kp <= k && k < kp + d).map(|kp| kp * n + o + (k - kp)).collect()
    }
}

/// `sum_{j=0}^{k} K^j`.
pub fn pk_polynomial(k_xi: f64, k: usize) -> f64 {
    if (k_xi - 1.0).abs() > 1e-12 {
        (1.0 - libm::pow(k_xi, (k + 1) as f64)) / (1.0 - k_xi)
    } else {
        (k + 1) as f64
    }
}

/// Inputs of the predicted-output error bound.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorBoundInputs {
    pub epsilon_star: f64,
    pub w_star: f64,
    pub k_xi: f64,
    pub k_w: f64,
    pub g_norm: f64,
    pub alpha_one_norm: f64,
    pub sigma_inf_norm: f64,
    pub degrees: Vec<usize>,
}

impl ErrorBoundInputs {
    pub fn d_max(&self) -> usize {
        self.degrees.iter().copied().max().unwrap_or(0)
    }

    fn validate(&self) -> Result<()> {
        let vals = [self.epsilon_star, self.w_star, self.k_xi, self.k_w, self.g_norm, self.alpha_one_norm, self.sigma_inf_norm];
        if vals.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidConfig("error bound inputs must be non-negative".into()));
        }
        Ok(())
    }

    /// `eps*(1+|alpha|_1) + (1+K_w) w* |alpha|_1 + (1+|G|_inf) |sigma|_inf`.
    pub fn parenthesis(&self) -> f64 {
        self.epsilon_star * (1.0 + self.alpha_one_norm)
            + (1.0 + self.k_w) * self.w_star * self.alpha_one_norm
            + (1.0 + self.g_norm) * self.sigma_inf_norm
    }
}

/// Bound on `|y_{i,t+k} - ybar*_{i,k}|` for channel `i` and step `k >= d_i - d_max`.
pub fn lemma1_bound(inputs: &ErrorBoundInputs, i: usize, k: i64) -> Result<f64> {
    inputs.validate()?;
    let d_i = *inputs
        .degrees
        .get(i)
        .ok_or_else(|| Error::DimensionMismatch(format!("channel {i} out of range")))? as i64;
    let e = k + inputs.d_max() as i64 - d_i;
    if e < 0 {
        return Err(Error::InvalidConfig(format!("step {k} precedes the earliest bounded step for channel {i}")));
    }
    Ok(pk_polynomial(inputs.k_xi, e as usize) * inputs.parenthesis())
}

/// Result of a least-squares membership test.
#[derive(Debug, Clone)]
pub struct RepresentationCheck {
    pub residual: f64,
    pub relative_residual: f64,
    pub alpha: DVector<f64>,
}

/// Stacked `Xi_bar_0..Xi_bar_L'` from candidate output windows of length `L' + d_i`.
fn xi_from_windows(structure: &BrunovskyStructure, y: &[Vec<f64>], depth: usize) -> Result<Sequence> {
    for (i, w) in y.iter().enumerate() {
        if w.len() != depth + structure.degree(i) {
            return Err(Error::DimensionMismatch(format!(
                "output window {i} has length {}, expected {}",
                w.len(),
                depth + structure.degree(i)
            )));
        }
    }
    build_xi_sequence(y, structure, depth)
}

/// Least-squares `alpha` for `[H_Psi; H_Xi] alpha = [Psi(u, Xi_bar); Xi_bar]`.
pub fn check_representation(
    blocks: &DataBlocks,
    dict: &dyn BasisDictionary,
    u: &Sequence,
    y: &[Vec<f64>],
) -> Result<RepresentationCheck> {
    let l = blocks.depth;
    if u.len() != l || u.channels() != blocks.m() || y.len() != blocks.m() {
        return Err(Error::DimensionMismatch(format!("candidate must have {l} inputs and {} output windows", blocks.m())));
    }
    let xi = xi_from_windows(&blocks.structure, y, l)?;
    let psi = evaluate_basis_sequence(dict, u, &xi.window(0, l - 1)?)?;
    let rhs_psi = psi.stacked();
    let rhs_xi = xi.stacked();
    let rhs = DVector::from_iterator(rhs_psi.len() + rhs_xi.len(), rhs_psi.iter().chain(rhs_xi.iter()).copied());
    let mut a = DMatrix::zeros(rhs.len(), blocks.cols());
    a.rows_mut(0, rhs_psi.len()).copy_from(&blocks.h_psi);
    a.rows_mut(rhs_psi.len(), rhs_xi.len()).copy_from(&blocks.h_xi);
    let alpha = linalg::lstsq(&a, &rhs, 1e-12);
    let residual = (&a * &alpha - &rhs).norm();
    Ok(RepresentationCheck { residual, relative_residual: residual / rhs.norm().max(1.0), alpha })
}

/// Constants that enter the simulation and matching bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundConstants {
    pub epsilon_star: f64,
    pub w_star: f64,
    pub k_xi: f64,
    pub k_w: f64,
    /// Bound on the row 1-norms of the fitted coefficient matrix.
    pub g_norm: f64,
}

impl BoundConstants {
    pub fn exact() -> Self {
        Self { epsilon_star: 0.0, w_star: 0.0, k_xi: 1.0, k_w: 0.0, g_norm: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    /// Predicted `y_i` over `[0, L + d_i - 1]`.
    pub outputs: Vec<Vec<f64>>,
    /// Matching bounds (zero on the initial window).
    pub bounds: Vec<Vec<f64>>,
    pub alpha: DVector<f64>,
    /// `c^T c`, the squared representation residual.
    pub residual_sq: f64,
    pub objective: f64,
    pub clamped: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct MatchingResult {
    /// Estimated inputs `u_0..u_{L-1}` (rows).
    pub inputs: Sequence,
    pub bounds: Vec<Vec<f64>>,
    pub alpha: DVector<f64>,
    pub residual_sq: f64,
    pub objective: f64,
    pub clamped: bool,
    pub iterations: usize,
}

/// `alpha = alpha_p + Z beta` parametrization of `H_1(Xi) alpha = xi0`.
struct Affine {
    alpha_p: DVector<f64>,
    z: DMatrix<f64>,
}

fn initial_condition(blocks: &DataBlocks, xi0: &[f64]) -> Result<Affine> {
    if xi0.len() != blocks.n() {
        return Err(Error::DimensionMismatch(format!("initial Xi has length {}, expected {}", xi0.len(), blocks.n())));
    }
    let a0 = blocks.initial_rows();
    let b = DVector::from_column_slice(xi0);
    let alpha_p = linalg::lstsq(&a0, &b, 1e-12);
    let res = (&a0 * &alpha_p - &b).amax();
    if res > INITIAL_CONDITION_TOL * b.amax().max(1.0) {
        return Err(Error::InfeasibleInitialCondition { residual: res });
    }
    Ok(Affine { alpha_p, z: linalg::null_space(&a0, 1e-12) })
}

enum Mode {
    Simulate { u: Sequence },
    Match { xi: Sequence },
}

struct RepresentationProblem<'a> {
    blocks: &'a DataBlocks,
    dict: &'a dyn BasisDictionary,
    affine: Affine,
    reg: f64,
    mode: Mode,
}

impl RepresentationProblem<'_> {
    fn alpha(&self, beta: &[f64]) -> DVector<f64> {
        &self.affine.alpha_p + &self.affine.z * DVector::from_column_slice(beta)
    }

    /// Representation residual `H(alpha)` and its Jacobian with respect to `alpha`.
    fn h_eval(&self, alpha: &DVector<f64>, with_jac: bool) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        let b = self.blocks;
        let (l, r, m, n) = (b.depth, b.r, b.m(), b.n());
        let cols = b.cols();
        let extra = match self.mode {
            Mode::Simulate { .. } => 0,
            Mode::Match { .. } => n * (l + 1),
        };
        let mut res = DVector::zeros(r * l + extra);
        let mut jac = if with_jac { DMatrix::zeros(r * l + extra, cols) } else { DMatrix::zeros(0, 0) };
        let hp = &b.h_psi * alpha;
        res.rows_mut(0, r * l).copy_from(&hp);
        if with_jac {
            jac.rows_mut(0, r * l).copy_from(&b.h_psi);
        }
        let mut du = DMatrix::zeros(r, m);
        let mut dx = DMatrix::zeros(r, n);
        let mut psi = vec![0.0; r];
        match &self.mode {
            Mode::Simulate { u } => {
                let xi_hat = &b.h_xi * alpha;
                for k in 0..l {
                    let uk = u.row(k);
                    let xk = &xi_hat.as_slice()[k * n..(k + 1) * n];
                    self.dict.eval(&uk, xk, &mut psi)?;
                    for j in 0..r {
                        res[k * r + j] -= psi[j];
                    }
                    if with_jac {
                        self.dict.jacobian(&uk, xk, &mut du, &mut dx)?;
                        let block = &dx * b.h_xi.rows(k * n, n);
                        let mut target = jac.rows_mut(k * r, r);
                        target -= block;
                    }
                }
            }
            Mode::Match { xi } => {
                let u_hat = &b.h_u * alpha;
                for k in 0..l {
                    let uk = &u_hat.as_slice()[k * m..(k + 1) * m];
                    let xk = xi.row(k);
                    self.dict.eval(uk, &xk, &mut psi)?;
                    for j in 0..r {
                        res[k * r + j] -= psi[j];
                    }
                    if with_jac {
                        self.dict.jacobian(uk, &xk, &mut du, &mut dx)?;
                        let block = &du * b.h_u.rows(k * m, m);
                        let mut target = jac.rows_mut(k * r, r);
                        target -= block;
                    }
                }
                let hx = &b.h_xi * alpha - xi.stacked();
                res.rows_mut(r * l, extra).copy_from(&hx);
                if with_jac {
                    jac.rows_mut(r * l, extra).copy_from(&b.h_xi);
                }
            }
        }
        Ok((res, with_jac.then_some(jac)))
    }

    fn h_residual(&self, alpha: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (r, j) = self.h_eval(alpha, true)?;
        Ok((r, j.unwrap_or_else(|| DMatrix::zeros(0, 0))))
    }

    fn h_values(&self, alpha: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.h_eval(alpha, false)?.0)
    }

    fn full_residual(&self, beta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let alpha = self.alpha(beta);
        let (h, jh) = self.h_residual(&alpha)?;
        let cols = alpha.len();
        let s = libm::sqrt(self.reg);
        let mut r = DVector::zeros(h.len() + cols);
        r.rows_mut(0, h.len()).copy_from(&h);
        r.rows_mut(h.len(), cols).copy_from(&(&alpha * s));
        let mut ja = DMatrix::zeros(h.len() + cols, cols);
        ja.rows_mut(0, h.len()).copy_from(&jh);
        for c in 0..cols {
            ja[(h.len() + c, c)] = s;
        }
        Ok((r, ja * &self.affine.z))
    }
}

impl NlpProblem for RepresentationProblem<'_> {
    fn dim(&self) -> usize {
        self.affine.z.ncols()
    }
    fn objective(&self, z: &[f64]) -> Result<f64> {
        let alpha = self.alpha(z);
        let h = self.h_values(&alpha)?;
        Ok(h.norm_squared() + self.reg * alpha.norm_squared())
    }
    fn gradient(&self, z: &[f64], grad: &mut [f64]) -> Result<()> {
        let (r, j) = self.full_residual(z)?;
        grad.copy_from_slice((j.tr_mul(&r) * 2.0).as_slice());
        Ok(())
    }
    fn residuals(&self, z: &[f64]) -> Option<Result<(DVector<f64>, DMatrix<f64>)>> {
        Some(self.full_residual(z))
    }
    fn has_residuals(&self) -> bool {
        true
    }
}

fn run(problem: &RepresentationProblem<'_>, options: &SolverOptions) -> Result<(DVector<f64>, f64, usize)> {
    let rep = solver::solve(problem, &vec![0.0; problem.dim()], options)?;
    if rep.status != SolverStatus::Converged {
        let grad_ok = rep.kkt_residual <= 1e3 * options.optimality_tol;
        if !grad_ok {
            return Err(Error::NonConvergence { gradient_norm: rep.kkt_residual });
        }
    }
    Ok((problem.alpha(&rep.solution), rep.objective, rep.iterations))
}

fn bound_trace(structure: &BrunovskyStructure, depth: usize, c: &BoundConstants, alpha1: f64, res: f64, g: f64) -> Vec<Vec<f64>> {
    let base = c.epsilon_star * (1.0 + alpha1) + (1.0 + c.k_w) * c.w_star * alpha1 + g * res;
    (0..structure.m())
        .map(|i| {
            let d = structure.degree(i);
            (0..depth + d).map(|j| if j < d { 0.0 } else { pk_polynomial(c.k_xi, j - d) * base }).collect()
        })
        .collect()
}

/// Predicts the outputs produced by `u` from the initial state `xi0` using only data.
///
/// Minimizes `|H_Psi alpha - Psi(u, Xi(alpha))|^2 + lambda_alpha eps* |alpha|^2`
/// subject to `H_1(Xi) alpha = xi0`.
pub fn simulate_data_driven(
    blocks: &DataBlocks,
    dict: &dyn BasisDictionary,
    u: &Sequence,
    xi0: &[f64],
    lambda_alpha: f64,
    constants: &BoundConstants,
    options: &SolverOptions,
) -> Result<SimulationResult> {
    let l = blocks.depth;
    if u.len() != l || u.channels() != blocks.m() {
        return Err(Error::DimensionMismatch(format!("input must have {l} rows and {} channels", blocks.m())));
    }
    let affine = initial_condition(blocks, xi0)?;
    let reg = lambda_alpha * constants.epsilon_star;
    let problem = RepresentationProblem { blocks, dict, affine, reg, mode: Mode::Simulate { u: u.clone() } };
    let (alpha, objective, iterations) = run(&problem, options)?;
    let (h, _) = problem.h_residual(&alpha)?;
    let raw = objective - reg * alpha.norm_squared();
    let residual_sq = h.norm_squared();
    let clamped = raw < 0.0;
    let outputs: Vec<Vec<f64>> = blocks.h_y.iter().map(|hy| (hy * &alpha).iter().copied().collect()).collect();
    let s = &blocks.structure;
    for i in 0..s.m() {
        for p in 0..s.degree(i) {
            let e = (outputs[i][p] - xi0[s.offset(i) + p]).abs();
            if e > INITIAL_CONDITION_TOL * xi0[s.offset(i) + p].abs().max(1.0) {
                return Err(Error::InfeasibleInitialCondition { residual: e });
            }
        }
    }
    let alpha1 = alpha.lp_norm(1);
    let bounds = bound_trace(s, l, constants, alpha1, libm::sqrt(residual_sq), constants.g_norm);
    Ok(SimulationResult { outputs, bounds, alpha, residual_sq, objective, clamped, iterations })
}

/// Finds inputs whose data-based response follows the reference windows `y`
/// (channel `i` of length `L + d_i`) starting from `xi0`.
pub fn match_output_data_driven(
    blocks: &DataBlocks,
    dict: &dyn BasisDictionary,
    y: &[Vec<f64>],
    xi0: &[f64],
    lambda_alpha: f64,
    constants: &BoundConstants,
    options: &SolverOptions,
) -> Result<MatchingResult> {
    if !dict.input_first() {
        return Err(Error::DictionaryLacksInput);
    }
    let l = blocks.depth;
    if y.len() != blocks.m() {
        return Err(Error::DimensionMismatch(format!("{} reference channels for m = {}", y.len(), blocks.m())));
    }
    let xi = xi_from_windows(&blocks.structure, y, l)?;
    let first = xi.row(0);
    let mismatch = first.iter().zip(xi0).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
    if xi0.len() != first.len() || mismatch > INITIAL_CONDITION_TOL * linalg::vec_inf_norm(xi0).max(1.0) {
        return Err(Error::InfeasibleInitialCondition { residual: mismatch });
    }
    let affine = initial_condition(blocks, xi0)?;
    let reg = lambda_alpha * constants.epsilon_star;
    let problem = RepresentationProblem { blocks, dict, affine, reg, mode: Mode::Match { xi } };
    let (alpha, objective, iterations) = run(&problem, options)?;
    let (h, _) = problem.h_residual(&alpha)?;
    let residual_sq = h.norm_squared();
    let clamped = objective - reg * alpha.norm_squared() < 0.0;
    let m = blocks.m();
    let u_hat = &blocks.h_u * &alpha;
    let inputs = Sequence::new(DMatrix::from_fn(l, m, |k, j| u_hat[k * m + j]))?;
    let alpha1 = alpha.lp_norm(1);
    let bounds = bound_trace(&blocks.structure, l, constants, alpha1, libm::sqrt(residual_sq), constants.g_norm + 1.0);
    Ok(MatchingResult { inputs, bounds, alpha, residual_sq, objective, clamped, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pk_examples() {
        assert_eq!(pk_polynomial(3.7, 0), 1.0);
        assert_eq!(pk_polynomial(1.0, 4), 5.0);
        assert!((pk_polynomial(0.5, 3) - 1.875).abs() < 1e-15);
        assert!((pk_polynomial(2.0, 3) - 15.0).abs() < 1e-12);
    }

    fn inputs() -> ErrorBoundInputs {
        ErrorBoundInputs {
            epsilon_star: 0.1,
            w_star: 0.0,
            k_xi: 0.5,
            k_w: 0.0,
            g_norm: 1.0,
            alpha_one_norm: 2.0,
            sigma_inf_norm: 0.0,
            degrees: vec![2, 2],
        }
    }

    #[test]
    fn error_bound_examples() {
        let b = inputs();
        // independent evaluation: (1 + 0.5 + 0.25 + 0.125) * 0.1 * (1 + 2)
        assert!((lemma1_bound(&b, 0, 3).unwrap() - 0.5625).abs() < 1e-12);
        assert!((lemma1_bound(&b, 0, 0).unwrap() - b.parenthesis()).abs() < 1e-15);
        let zero = ErrorBoundInputs { epsilon_star: 0.0, ..b.clone() };
        for k in 0..12 {
            assert_eq!(lemma1_bound(&zero, 1, k).unwrap(), 0.0);
        }
        let mixed = ErrorBoundInputs { degrees: vec![1, 2], ..b };
        assert!(lemma1_bound(&mixed, 0, -1).is_ok());
        assert!(lemma1_bound(&mixed, 0, -2).is_err());
    }
}
