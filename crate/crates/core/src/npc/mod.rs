//! Nominal and robust data-driven predictive controllers and the closed-loop runner.
//!
//! Decision variables are kept in absolute coordinates: the offline data are
//! never re-centered, and the setpoint `(u^s, y^s)` enters only through the
//! stage cost and the terminal pins. This is the same problem as the
//! deviation-coordinate formulation shifted by a constant.

mod closed_loop;

pub use closed_loop::*;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::basis::{ApproximationCertificate, BasisDictionary};
use crate::behavior::DataBlocks;
use crate::error::{Error, Result};
use crate::linalg;
use crate::plant::BrunovskyStructure;
use crate::solver::{NlpProblem, ShiftBlock, ShiftLayout, SolverReport};

/// Default relaxed slack constant.
pub const DEFAULT_C_SLACK: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OcpMode {
    Nominal,
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum SlackMode {
    /// `|sigma|_inf <= K_Psi w* + (eps* + K_w w*) |G^+|_inf (1 + |alpha|_1)`.
    Exact,
    /// `|sigma|_inf <= c_slack max(eps*, w*)`.
    Relaxed { c_slack: f64 },
}

impl Default for SlackMode {
    fn default() -> Self {
        SlackMode::Relaxed { c_slack: DEFAULT_C_SLACK }
    }
}

/// Certificate constants needed by the exact slack bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlackConstants {
    pub k_psi: f64,
    pub k_w: f64,
    pub g_dagger: f64,
}

impl SlackConstants {
    pub fn from_certificate(cert: &ApproximationCertificate) -> Self {
        Self { k_psi: cert.k_psi, k_w: cert.k_w_or_zero(), g_dagger: cert.g_dagger_inf_norm }
    }
}

/// Everything that defines one family of optimal control problems.
#[derive(Debug, Clone)]
pub struct OcpSpec {
    pub mode: OcpMode,
    pub horizon: usize,
    pub structure: BrunovskyStructure,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub u_s: Vec<f64>,
    pub y_s: Vec<f64>,
    pub lambda_alpha: f64,
    pub lambda_sigma: f64,
    pub epsilon_star: f64,
    pub w_star: f64,
    pub slack: SlackMode,
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
    /// Output box (nominal mode only).
    pub y_bounds: Option<(Vec<f64>, Vec<f64>)>,
    pub slack_constants: Option<SlackConstants>,
}

impl OcpSpec {
    pub fn d_max(&self) -> usize {
        self.structure.d_max()
    }

    /// Depth `L + d_max` of the data blocks.
    pub fn depth(&self) -> usize {
        self.horizon + self.d_max()
    }

    /// Checks this problem description against `blocks`; returns non-fatal warnings.
    pub fn validate(&self, blocks: &DataBlocks) -> Result<Vec<String>> {
        let m = self.structure.m();
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be positive".into()));
        }
        if self.mode == OcpMode::Robust && self.horizon < self.d_max() {
            return Err(Error::InvalidConfig(format!("robust mode needs L >= d_max = {}", self.d_max())));
        }
        if self.q.shape() != (m, m) || self.r.shape() != (m, m) {
            return Err(Error::DimensionMismatch("Q and R must be m x m".into()));
        }
        if self.q.clone().cholesky().is_none() || self.r.clone().cholesky().is_none() {
            return Err(Error::InvalidConfig("Q and R must be positive definite".into()));
        }
        for v in [&self.u_s, &self.y_s, &self.u_lower, &self.u_upper] {
            if v.len() != m {
                return Err(Error::DimensionMismatch(format!("setpoint and box vectors must have length {m}")));
            }
        }
        for j in 0..m {
            if !(self.u_lower[j] < self.u_s[j] && self.u_s[j] < self.u_upper[j]) {
                return Err(Error::InvalidConfig(format!("input setpoint {j} is not inside the input box")));
            }
        }
        if let Some((lo, hi)) = &self.y_bounds {
            if self.mode == OcpMode::Robust {
                return Err(Error::InvalidConfig("output constraints are not supported in robust mode".into()));
            }
            if lo.len() != m || hi.len() != m || (0..m).any(|j| !(lo[j] < self.y_s[j] && self.y_s[j] < hi[j])) {
                return Err(Error::InvalidConfig("output setpoint must lie inside the output box".into()));
            }
        }
        let weights = [self.lambda_alpha, self.lambda_sigma, self.epsilon_star, self.w_star];
        if weights.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidConfig("regularizers and bounds must be non-negative".into()));
        }
        if let SlackMode::Relaxed { c_slack } = self.slack {
            if !(c_slack >= 0.0) {
                return Err(Error::InvalidConfig("c_slack must be non-negative".into()));
            }
        }
        if self.mode == OcpMode::Robust && self.slack == SlackMode::Exact && self.slack_constants.is_none() {
            return Err(Error::MissingCertificate("exact slack mode needs K_Psi, K_w and |G^+|".into()));
        }
        if blocks.depth != self.depth() {
            return Err(Error::StructureMismatch(format!("data blocks have depth {}, expected {}", blocks.depth, self.depth())));
        }
        if blocks.structure != self.structure {
            return Err(Error::StructureMismatch("data blocks and spec use different structures".into()));
        }
        let mut warnings = Vec::new();
        if !blocks.pe.persistently_exciting {
            warnings.push(format!(
                "basis data are not persistently exciting of order {} (rank {} of {})",
                self.depth() + self.structure.n(),
                blocks.pe.rank,
                blocks.pe.required_rank
            ));
        }
        if self.mode == OcpMode::Nominal && blocks.noisy {
            warnings.push("nominal problem built from noisy data".into());
        }
        Ok(warnings)
    }
}

/// Past `d_max` inputs and (measured) outputs, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

/// Position of every block in the decision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionLayout {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub horizon: usize,
    pub d_max: usize,
    pub degrees: Vec<usize>,
    pub cols: usize,
    pub y_offsets: Vec<usize>,
    pub alpha_offset: usize,
    /// Offset of `alpha^-` when `alpha` is split into non-negative parts.
    pub alpha_neg_offset: Option<usize>,
    /// Offset of `sigma_Psi` (robust only).
    pub sigma_offset: Option<usize>,
    pub dim: usize,
}

impl DecisionLayout {
    fn new(structure: &BrunovskyStructure, horizon: usize, r: usize, cols: usize, robust: bool, split: bool) -> Self {
        let (m, n, d_max) = (structure.m(), structure.n(), structure.d_max());
        let depth = horizon + d_max;
        let mut off = m * depth;
        let mut y_offsets = Vec::with_capacity(m);
        for i in 0..m {
            y_offsets.push(off);
            off += depth + structure.degree(i);
        }
        let alpha_offset = off;
        off += cols;
        let alpha_neg_offset = if split {
            off += cols;
            Some(off - cols)
        } else {
            None
        };
        let sigma_offset = if robust {
            off += r * depth;
            Some(off - r * depth)
        } else {
            None
        };
        Self {
            m,
            n,
            r,
            horizon,
            d_max,
            degrees: structure.degrees().to_vec(),
            cols,
            y_offsets,
            alpha_offset,
            alpha_neg_offset,
            sigma_offset,
            dim: off,
        }
    }

    pub fn depth(&self) -> usize {
        self.horizon + self.d_max
    }

    /// Index of `u_{j,k}` for `k` in `[-d_max, L-1]`.
    pub fn u_index(&self, k: i64, j: usize) -> usize {
        (k + self.d_max as i64) as usize * self.m + j
    }

    /// Index of `y_{i,k}` for `k` in `[-d_max, L+d_i-1]`.
    pub fn y_index(&self, i: usize, k: i64) -> usize {
        self.y_offsets[i] + (k + self.d_max as i64) as usize
    }

    /// Number of output decisions `m (L + d_max) + n`.
    pub fn n_outputs(&self) -> usize {
        self.m * self.depth() + self.n
    }

    /// Decision count with `alpha` unsplit.
    pub fn unsplit_dim(&self) -> usize {
        self.dim - self.alpha_neg_offset.map_or(0, |_| self.cols)
    }

    /// `alpha = alpha^+ - alpha^-` (or the single block).
    pub fn alpha(&self, z: &[f64]) -> DVector<f64> {
        let mut a = DVector::from_column_slice(&z[self.alpha_offset..self.alpha_offset + self.cols]);
        if let Some(o) = self.alpha_neg_offset {
            a -= DVector::from_column_slice(&z[o..o + self.cols]);
        }
        a
    }

    fn set_alpha(&self, z: &mut [f64], alpha: &DVector<f64>) {
        match self.alpha_neg_offset {
            None => z[self.alpha_offset..self.alpha_offset + self.cols].copy_from_slice(alpha.as_slice()),
            Some(o) => {
                for c in 0..self.cols {
                    z[self.alpha_offset + c] = alpha[c].max(0.0);
                    z[o + c] = (-alpha[c]).max(0.0);
                }
            }
        }
    }

    /// `Xi_bar_k` for relative index `kk` in `[0, L + d_max]`.
    fn xi(&self, z: &[f64], kk: usize, out: &mut [f64]) {
        let mut p = 0;
        for i in 0..self.m {
            for q in 0..self.degrees[i] {
                out[p] = z[self.y_offsets[i] + kk + q];
                p += 1;
            }
        }
    }

    /// Shift pattern for warm starts: inputs padded with `u_s`, outputs with `y_s`, slacks zeroed.
    pub fn shift_layout(&self, u_s: &[f64], y_s: &[f64]) -> ShiftLayout {
        let mut blocks = vec![ShiftBlock { offset: 0, steps: self.depth(), width: self.m, pad: u_s.to_vec() }];
        for i in 0..self.m {
            blocks.push(ShiftBlock { offset: self.y_offsets[i], steps: self.depth() + self.degrees[i], width: 1, pad: vec![y_s[i]] });
        }
        let zeroed = self.sigma_offset.map(|o| vec![o..o + self.r * self.depth()]).unwrap_or_default();
        ShiftLayout { dim: self.dim, blocks, zeroed }
    }
}

/// Decoded optimizer of one problem instance.
#[derive(Debug, Clone)]
pub struct OcpSolution {
    /// `u_k` for `k = 0..L-1`.
    pub inputs: Vec<Vec<f64>>,
    /// `y_{i,k}` for `k` in `[-d_max, L+d_i-1]`, per channel.
    pub outputs: Vec<Vec<f64>>,
    pub alpha: DVector<f64>,
    pub alpha_one_norm: f64,
    pub sigma_psi_inf: f64,
    pub sigma_xi_inf: f64,
    pub objective: f64,
}

impl OcpSolution {
    pub fn sigma_inf(&self) -> f64 {
        self.sigma_psi_inf.max(self.sigma_xi_inf)
    }
}

/// One assembled nominal or robust problem.
pub struct PredictiveProblem<'a> {
    pub spec: &'a OcpSpec,
    pub blocks: &'a DataBlocks,
    dict: &'a dyn BasisDictionary,
    pub layout: DecisionLayout,
    pub history: History,
    pub warnings: Vec<String>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    /// `H_{L+d_max+d_i}(y_i)` stacked over channels (rows in decision order).
    h_y: DMatrix<f64>,
    /// Multiplicity of every output decision in the stacked `Xi` window.
    xi_weights: Vec<f64>,
    q_half: DMatrix<f64>,
    r_half: DMatrix<f64>,
    reg_alpha: f64,
    /// `(b0, b1)` of the slack bound `b0 + b1 |alpha|_1`.
    slack_bound: (f64, f64),
}

/// Assembles the nominal problem from the latest `d_max` inputs and outputs.
pub fn build_nominal_ocp<'a>(
    spec: &'a OcpSpec,
    blocks: &'a DataBlocks,
    dict: &'a dyn BasisDictionary,
    history: History,
) -> Result<PredictiveProblem<'a>> {
    if spec.mode != OcpMode::Nominal {
        return Err(Error::InvalidConfig("spec is not in nominal mode".into()));
    }
    PredictiveProblem::new(spec, blocks, dict, history)
}

/// Assembles the robust problem from the latest `d_max` inputs and measured outputs.
pub fn build_robust_ocp<'a>(
    spec: &'a OcpSpec,
    blocks: &'a DataBlocks,
    dict: &'a dyn BasisDictionary,
    history: History,
) -> Result<PredictiveProblem<'a>> {
    if spec.mode != OcpMode::Robust {
        return Err(Error::InvalidConfig("spec is not in robust mode".into()));
    }
    let p = PredictiveProblem::new(spec, blocks, dict, history)?;
    if spec.slack == SlackMode::Exact {
        let l = &p.layout;
        let expected = blocks.psi.len() + (2 * l.m + l.r - 1) * l.depth() + l.n + 1;
        if l.unsplit_dim() != expected {
            return Err(Error::StructureMismatch(format!("decision count {} differs from {expected}", l.unsplit_dim())));
        }
    }
    Ok(p)
}

fn quad(w: &DMatrix<f64>, x: &[f64]) -> f64 {
    let mut v = 0.0;
    for a in 0..x.len() {
        for b in 0..x.len() {
            v += x[a] * w[(a, b)] * x[b];
        }
    }
    v
}

fn half(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let c = w.clone().cholesky().ok_or_else(|| Error::InvalidConfig("weight is not positive definite".into()))?;
    Ok(c.l().transpose())
}

impl<'a> PredictiveProblem<'a> {
    fn new(spec: &'a OcpSpec, blocks: &'a DataBlocks, dict: &'a dyn BasisDictionary, history: History) -> Result<Self> {
        let warnings = spec.validate(blocks)?;
        let s = &spec.structure;
        let (m, d_max) = (s.m(), s.d_max());
        if dict.len() != blocks.r || dict.input_dim() != m || dict.state_dim() != s.n() {
            return Err(Error::StructureMismatch("dictionary does not match the data blocks".into()));
        }
        if history.inputs.len() != d_max || history.outputs.len() != d_max {
            return Err(Error::DimensionMismatch(format!(
                "history must hold {d_max} steps, got {} inputs and {} outputs",
                history.inputs.len(),
                history.outputs.len()
            )));
        }
        if history.inputs.iter().chain(&history.outputs).any(|v| v.len() != m) {
            return Err(Error::DimensionMismatch(format!("history rows must have length {m}")));
        }
        let robust = spec.mode == OcpMode::Robust;
        let split = robust && spec.slack == SlackMode::Exact;
        let layout = DecisionLayout::new(s, spec.horizon, blocks.r, blocks.cols(), robust, split);
        let depth = layout.depth();
        let l = spec.horizon as i64;
        let d = d_max as i64;

        let mut lower = vec![f64::NEG_INFINITY; layout.dim];
        let mut upper = vec![f64::INFINITY; layout.dim];
        for k in -d..l {
            for j in 0..m {
                let idx = layout.u_index(k, j);
                let (lo, hi) = if k < 0 {
                    let v = history.inputs[(k + d) as usize][j];
                    (v, v)
                } else {
                    (spec.u_lower[j], spec.u_upper[j])
                };
                lower[idx] = lo;
                upper[idx] = hi;
            }
        }
        for i in 0..m {
            for k in -d..l + s.degree(i) as i64 {
                let idx = layout.y_index(i, k);
                if k < 0 {
                    lower[idx] = history.outputs[(k + d) as usize][i];
                    upper[idx] = lower[idx];
                } else if k >= l {
                    lower[idx] = spec.y_s[i];
                    upper[idx] = spec.y_s[i];
                } else if let Some((lo, hi)) = &spec.y_bounds {
                    lower[idx] = lo[i];
                    upper[idx] = hi[i];
                }
            }
        }
        if let Some(o) = layout.alpha_neg_offset {
            for c in 0..layout.cols {
                lower[layout.alpha_offset + c] = 0.0;
                lower[o + c] = 0.0;
            }
        }
        let scale = spec.epsilon_star.max(spec.w_star);
        let slack_bound = match spec.slack {
            SlackMode::Relaxed { c_slack } => (c_slack * scale, 0.0),
            SlackMode::Exact => match spec.slack_constants {
                Some(c) => {
                    let b1 = (spec.epsilon_star + c.k_w * spec.w_star) * c.g_dagger;
                    (c.k_psi.max(1.0) * spec.w_star + b1, b1)
                }
                None => (0.0, 0.0),
            },
        };
        if let (Some(o), SlackMode::Relaxed { .. }) = (layout.sigma_offset, spec.slack) {
            for v in o..o + layout.r * depth {
                lower[v] = -slack_bound.0;
                upper[v] = slack_bound.0;
            }
        }

        let mut h_y = DMatrix::zeros(layout.n_outputs(), layout.cols);
        let mut row = 0;
        for hy in &blocks.h_y {
            h_y.rows_mut(row, hy.nrows()).copy_from(hy);
            row += hy.nrows();
        }
        let mut xi_weights = Vec::with_capacity(layout.n_outputs());
        for i in 0..m {
            let di = s.degree(i);
            for j in 0..depth + di {
                let lo = (j + 1).saturating_sub(di);
                let hi = j.min(depth);
                xi_weights.push((hi + 1 - lo) as f64);
            }
        }
        Ok(Self {
            spec,
            blocks,
            dict,
            history,
            warnings,
            lower,
            upper,
            h_y,
            xi_weights,
            q_half: half(&spec.q)?,
            r_half: half(&spec.r)?,
            reg_alpha: if robust { spec.lambda_alpha * scale } else { 0.0 },
            slack_bound,
            layout,
        })
    }

    fn robust(&self) -> bool {
        self.spec.mode == OcpMode::Robust
    }

    fn y_block<'z>(&self, z: &'z [f64]) -> &'z [f64] {
        let start = self.layout.y_offsets[0];
        &z[start..start + self.layout.n_outputs()]
    }

    /// `ybar - H_y alpha` (the eliminated `Xi` slack in robust mode).
    fn xi_mismatch(&self, z: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(self.y_block(z)) - &self.h_y * self.layout.alpha(z)
    }

    fn n_psi_rows(&self) -> usize {
        self.layout.r * self.layout.depth()
    }

    /// `H_Psi alpha + sigma - Psi(u_k, Xi_k)` for every block row.
    fn psi_constraint(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        let l = &self.layout;
        let alpha = l.alpha(z);
        let hp = &self.blocks.h_psi * &alpha;
        let mut xi = vec![0.0; l.n];
        let mut psi = vec![0.0; l.r];
        for kk in 0..l.depth() {
            l.xi(z, kk, &mut xi);
            self.dict.eval(&z[kk * l.m..(kk + 1) * l.m], &xi, &mut psi)?;
            for j in 0..l.r {
                let sigma = l.sigma_offset.map_or(0.0, |o| z[o + kk * l.r + j]);
                out[kk * l.r + j] = hp[kk * l.r + j] + sigma - psi[j];
            }
        }
        Ok(())
    }

    fn psi_jacobian(&self, z: &[f64], jac: &mut DMatrix<f64>, row0: usize) -> Result<()> {
        let l = &self.layout;
        let mut xi = vec![0.0; l.n];
        let mut du = DMatrix::zeros(l.r, l.m);
        let mut dx = DMatrix::zeros(l.r, l.n);
        let hp = &self.blocks.h_psi;
        for kk in 0..l.depth() {
            l.xi(z, kk, &mut xi);
            self.dict.jacobian(&z[kk * l.m..(kk + 1) * l.m], &xi, &mut du, &mut dx)?;
            for j in 0..l.r {
                let row = row0 + kk * l.r + j;
                for c in 0..l.cols {
                    jac[(row, l.alpha_offset + c)] = hp[(kk * l.r + j, c)];
                    if let Some(o) = l.alpha_neg_offset {
                        jac[(row, o + c)] = -hp[(kk * l.r + j, c)];
                    }
                }
                if let Some(o) = l.sigma_offset {
                    jac[(row, o + kk * l.r + j)] = 1.0;
                }
                for c in 0..l.m {
                    jac[(row, kk * l.m + c)] = -du[(j, c)];
                }
                let mut p = 0;
                for i in 0..l.m {
                    for q in 0..l.degrees[i] {
                        jac[(row, l.y_offsets[i] + kk + q)] -= dx[(j, p)];
                        p += 1;
                    }
                }
            }
        }
        Ok(())
    }

    /// Jacobian of `ybar - H_y alpha`.
    fn xi_mismatch_jacobian(&self) -> DMatrix<f64> {
        let l = &self.layout;
        let rows = l.n_outputs();
        let mut j = DMatrix::zeros(rows, l.dim);
        for p in 0..rows {
            j[(p, l.y_offsets[0] + p)] = 1.0;
            for c in 0..l.cols {
                j[(p, l.alpha_offset + c)] = -self.h_y[(p, c)];
                if let Some(o) = l.alpha_neg_offset {
                    j[(p, o + c)] = self.h_y[(p, c)];
                }
            }
        }
        j
    }

    fn alpha_one_norm_split(&self, z: &[f64]) -> f64 {
        let l = &self.layout;
        match l.alpha_neg_offset {
            Some(o) => (0..l.cols).map(|c| z[l.alpha_offset + c] + z[o + c]).sum(),
            None => l.alpha(z).lp_norm(1),
        }
    }

    fn slack_bound_value(&self, z: &[f64]) -> f64 {
        self.slack_bound.0 + self.slack_bound.1 * self.alpha_one_norm_split(z)
    }

    fn n_exact_sigma_rows(&self) -> usize {
        if self.robust() && self.spec.slack == SlackMode::Exact {
            2 * self.n_psi_rows()
        } else {
            0
        }
    }

    /// Decision count of the assembled problem before splitting `alpha`.
    pub fn decision_count(&self) -> usize {
        self.layout.unsplit_dim()
    }

    /// Initial guess: pins, straight-line outputs to the setpoint, setpoint inputs,
    /// and least-squares `alpha`.
    pub fn initial_guess(&self) -> Result<Vec<f64>> {
        let l = &self.layout;
        let mut z = vec![0.0; l.dim];
        let hl = self.spec.horizon as i64;
        for k in 0..hl {
            for j in 0..l.m {
                z[l.u_index(k, j)] = self.spec.u_s[j];
            }
        }
        for i in 0..l.m {
            let last = self.history.outputs[l.d_max - 1][i];
            for k in 0..hl {
                let t = (k + 1) as f64 / (hl + 1) as f64;
                z[l.y_index(i, k)] = last + t * (self.spec.y_s[i] - last);
            }
        }
        self.project(&mut z);
        self.refit_alpha(&mut z)?;
        Ok(z)
    }

    pub fn project(&self, z: &mut [f64]) {
        for (i, v) in z.iter_mut().enumerate() {
            *v = v.max(self.lower[i]).min(self.upper[i]);
        }
    }

    /// Least-squares `alpha` for the current inputs and outputs with zero slack.
    pub fn refit_alpha(&self, z: &mut [f64]) -> Result<()> {
        let l = &self.layout;
        let np = self.n_psi_rows();
        let no = l.n_outputs();
        let mut a = DMatrix::zeros(np + no, l.cols);
        a.rows_mut(0, np).copy_from(&self.blocks.h_psi);
        a.rows_mut(np, no).copy_from(&self.h_y);
        let mut b = DVector::zeros(np + no);
        let mut xi = vec![0.0; l.n];
        let mut psi = vec![0.0; l.r];
        for kk in 0..l.depth() {
            l.xi(z, kk, &mut xi);
            self.dict.eval(&z[kk * l.m..(kk + 1) * l.m], &xi, &mut psi)?;
            b.rows_mut(kk * l.r, l.r).copy_from_slice(&psi);
        }
        b.rows_mut(np, no).copy_from_slice(self.y_block(z));
        let alpha = linalg::lstsq(&a, &b, 1e-12);
        l.set_alpha(z, &alpha);
        if let Some(o) = l.sigma_offset {
            z[o..o + np].iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(())
    }

    /// Largest violation of bounds, equalities and inequalities at `z`.
    pub fn max_violation(&self, z: &[f64]) -> Result<f64> {
        let mut v = 0.0f64;
        for (i, x) in z.iter().enumerate() {
            v = v.max(self.lower[i] - x).max(x - self.upper[i]);
        }
        let mut c = vec![0.0; self.n_eq()];
        self.eq_values(z, &mut c)?;
        let mut g = vec![0.0; self.n_ineq()];
        self.ineq_values(z, &mut g)?;
        Ok(c.iter().fold(v, |a, x| a.max(x.abs())).max(g.iter().fold(0.0f64, |a, x| a.max(*x))))
    }

    pub fn decode(&self, z: &[f64], report: Option<&SolverReport>) -> Result<OcpSolution> {
        let l = &self.layout;
        let inputs = (0..self.spec.horizon as i64).map(|k| (0..l.m).map(|j| z[l.u_index(k, j)]).collect()).collect();
        let outputs = (0..l.m)
            .map(|i| {
                let len = l.depth() + l.degrees[i];
                z[l.y_offsets[i]..l.y_offsets[i] + len].to_vec()
            })
            .collect();
        let alpha = l.alpha(z);
        let (sigma_psi_inf, sigma_xi_inf) = if self.robust() {
            let o = l.sigma_offset.unwrap_or(0);
            (linalg::vec_inf_norm(&z[o..o + self.n_psi_rows()]), self.xi_mismatch(z).amax())
        } else {
            (0.0, 0.0)
        };
        let objective = match report {
            Some(r) => r.objective,
            None => self.objective(z)?,
        };
        Ok(OcpSolution { inputs, outputs, alpha_one_norm: alpha.lp_norm(1), alpha, sigma_psi_inf, sigma_xi_inf, objective })
    }

    fn cost_value(&self, z: &[f64]) -> f64 {
        let l = &self.layout;
        let mut total = 0.0;
        let mut dev = vec![0.0; l.m];
        for k in 0..self.spec.horizon {
            let kk = k + l.d_max;
            for c in 0..l.m {
                dev[c] = z[kk * l.m + c] - self.spec.u_s[c];
            }
            total += quad(&self.spec.r, &dev);
            for c in 0..l.m {
                dev[c] = z[l.y_offsets[c] + kk] - self.spec.y_s[c];
            }
            total += quad(&self.spec.q, &dev);
        }
        if self.reg_alpha > 0.0 {
            let n_alpha = l.cols * if l.alpha_neg_offset.is_some() { 2 } else { 1 };
            total += self.reg_alpha * z[l.alpha_offset..l.alpha_offset + n_alpha].iter().map(|v| v * v).sum::<f64>();
        }
        if self.robust() {
            let o = l.sigma_offset.unwrap_or(0);
            let sp: f64 = z[o..o + self.n_psi_rows()].iter().map(|v| v * v).sum();
            let e = self.xi_mismatch(z);
            let sx: f64 = e.iter().zip(&self.xi_weights).map(|(v, w)| w * v * v).sum();
            total += self.spec.lambda_sigma * (sp + sx);
        }
        total
    }

    fn cost_residuals(&self, z: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let l = &self.layout;
        let hl = self.spec.horizon;
        let robust = self.robust();
        let reg = libm::sqrt(self.reg_alpha);
        let n_alpha = if reg > 0.0 { l.cols * if l.alpha_neg_offset.is_some() { 2 } else { 1 } } else { 0 };
        let n_sigma = if robust { self.n_psi_rows() + l.n_outputs() } else { 0 };
        let rows = 2 * l.m * hl + n_alpha + n_sigma;
        let mut r = DVector::zeros(rows);
        let mut j = DMatrix::zeros(rows, l.dim);
        let mut dev = vec![0.0; l.m];
        for k in 0..hl {
            let kk = k + l.d_max;
            for c in 0..l.m {
                dev[c] = z[kk * l.m + c] - self.spec.u_s[c];
            }
            for a in 0..l.m {
                let row = k * l.m + a;
                for c in 0..l.m {
                    r[row] += self.r_half[(a, c)] * dev[c];
                    j[(row, kk * l.m + c)] = self.r_half[(a, c)];
                }
            }
            for c in 0..l.m {
                dev[c] = z[l.y_offsets[c] + kk] - self.spec.y_s[c];
            }
            for a in 0..l.m {
                let row = l.m * hl + k * l.m + a;
                for c in 0..l.m {
                    r[row] += self.q_half[(a, c)] * dev[c];
                    j[(row, l.y_offsets[c] + kk)] = self.q_half[(a, c)];
                }
            }
        }
        let mut row = 2 * l.m * hl;
        if n_alpha > 0 {
            for c in 0..n_alpha {
                r[row + c] = reg * z[l.alpha_offset + c];
                j[(row + c, l.alpha_offset + c)] = reg;
            }
            row += n_alpha;
        }
        if robust {
            let s = libm::sqrt(self.spec.lambda_sigma);
            let o = l.sigma_offset.unwrap_or(0);
            for c in 0..self.n_psi_rows() {
                r[row + c] = s * z[o + c];
                j[(row + c, o + c)] = s;
            }
            row += self.n_psi_rows();
            let e = self.xi_mismatch(z);
            let je = self.xi_mismatch_jacobian();
            for p in 0..l.n_outputs() {
                let w = s * libm::sqrt(self.xi_weights[p]);
                r[row + p] = w * e[p];
                for c in 0..l.dim {
                    j[(row + p, c)] = w * je[(p, c)];
                }
            }
        }
        (r, j)
    }
}

impl NlpProblem for PredictiveProblem<'_> {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lower.clone(), self.upper.clone())
    }

    fn objective(&self, z: &[f64]) -> Result<f64> {
        Ok(self.cost_value(z))
    }

    fn gradient(&self, z: &[f64], grad: &mut [f64]) -> Result<()> {
        let (r, j) = self.cost_residuals(z);
        grad.copy_from_slice((j.tr_mul(&r) * 2.0).as_slice());
        Ok(())
    }

    fn n_eq(&self) -> usize {
        self.n_linear_eq() + self.n_psi_rows()
    }

    fn n_linear_eq(&self) -> usize {
        if self.robust() {
            0
        } else {
            self.layout.n_outputs()
        }
    }

    fn eq_values(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        let nl = self.n_linear_eq();
        if nl > 0 {
            let e = self.xi_mismatch(z);
            for p in 0..nl {
                out[p] = -e[p];
            }
        }
        self.psi_constraint(z, &mut out[nl..])
    }

    fn eq_jacobian(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let nl = self.n_linear_eq();
        let mut j = DMatrix::zeros(self.n_eq(), self.layout.dim);
        if nl > 0 {
            let je = self.xi_mismatch_jacobian();
            j.rows_mut(0, nl).copy_from(&(-je));
        }
        self.psi_jacobian(z, &mut j, nl)?;
        Ok(j)
    }

    fn n_ineq(&self) -> usize {
        if self.robust() {
            2 * self.layout.n_outputs() + self.n_exact_sigma_rows()
        } else {
            0
        }
    }

    fn ineq_values(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        if !self.robust() {
            return Ok(());
        }
        let b = self.slack_bound_value(z);
        let e = self.xi_mismatch(z);
        let no = self.layout.n_outputs();
        for p in 0..no {
            out[2 * p] = e[p] - b;
            out[2 * p + 1] = -e[p] - b;
        }
        if self.n_exact_sigma_rows() > 0 {
            let o = self.layout.sigma_offset.unwrap_or(0);
            for c in 0..self.n_psi_rows() {
                out[2 * no + 2 * c] = z[o + c] - b;
                out[2 * no + 2 * c + 1] = -z[o + c] - b;
            }
        }
        Ok(())
    }

    fn ineq_jacobian(&self, _z: &[f64]) -> Result<DMatrix<f64>> {
        let l = &self.layout;
        let mut j = DMatrix::zeros(self.n_ineq(), l.dim);
        if !self.robust() {
            return Ok(j);
        }
        let no = l.n_outputs();
        let je = self.xi_mismatch_jacobian();
        let b1 = self.slack_bound.1;
        let bound_row = |j: &mut DMatrix<f64>, row: usize| {
            if let Some(o) = l.alpha_neg_offset {
                for c in 0..l.cols {
                    j[(row, l.alpha_offset + c)] -= b1;
                    j[(row, o + c)] -= b1;
                }
            }
        };
        for p in 0..no {
            for c in 0..l.dim {
                j[(2 * p, c)] = je[(p, c)];
                j[(2 * p + 1, c)] = -je[(p, c)];
            }
            bound_row(&mut j, 2 * p);
            bound_row(&mut j, 2 * p + 1);
        }
        if self.n_exact_sigma_rows() > 0 {
            let o = l.sigma_offset.unwrap_or(0);
            for c in 0..self.n_psi_rows() {
                j[(2 * no + 2 * c, o + c)] = 1.0;
                j[(2 * no + 2 * c + 1, o + c)] = -1.0;
                bound_row(&mut j, 2 * no + 2 * c);
                bound_row(&mut j, 2 * no + 2 * c + 1);
            }
        }
        Ok(j)
    }

    fn residuals(&self, z: &[f64]) -> Option<Result<(DVector<f64>, DMatrix<f64>)>> {
        Some(Ok(self.cost_residuals(z)))
    }

    fn has_residuals(&self) -> bool {
        true
    }

    fn penalty_hint(&self) -> Option<f64> {
        // a penalty near lambda_sigma balances slack use against violation but
        // ruins the conditioning of the inner least-squares problems
        if self.robust() {
            Some((2.0 * self.spec.lambda_sigma).clamp(10.0, 1e4))
        } else {
            None
        }
    }
}
