//! Basis dictionaries `Psi(u, Xi)`, operating-box grids and approximation certificates.

mod certificate;
mod grid;

pub use certificate::*;
pub use grid::*;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, Vector2};

use crate::error::{Error, Result};
use crate::plant::pendulum::{angles_from_xi, DoublePendulumParams};
use crate::plant::BrunovskyStructure;
use crate::trajlib::Sequence;

/// An ordered list of `r` scalar functions of `(u, Xi)`.
pub trait BasisDictionary: Send + Sync {
    fn name(&self) -> &str;
    fn input_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    /// Number of functions `r`.
    fn len(&self) -> usize;
    /// Whether `u` itself forms the first `m` entries.
    fn input_first(&self) -> bool;
    fn eval(&self, u: &[f64], xi: &[f64], out: &mut [f64]) -> Result<()>;
    /// `d Psi / du` (`r x m`) and `d Psi / dXi` (`r x n`).
    fn jacobian(&self, u: &[f64], xi: &[f64], du: &mut DMatrix<f64>, dxi: &mut DMatrix<f64>) -> Result<()>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn eval_vec(&self, u: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len()];
        self.eval(u, xi, &mut out)?;
        Ok(out)
    }
}

/// Row `k` is `Psi(u_k, Xi_k)`.
pub fn evaluate_basis_sequence(dict: &dyn BasisDictionary, u: &Sequence, xi: &Sequence) -> Result<Sequence> {
    if u.len() != xi.len() {
        return Err(Error::DimensionMismatch(format!(
            "input sequence has {} rows but Xi has {}",
            u.len(),
            xi.len()
        )));
    }
    if u.channels() != dict.input_dim() || xi.channels() != dict.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "dictionary '{}' expects (m, n) = ({}, {}), got ({}, {})",
            dict.name(),
            dict.input_dim(),
            dict.state_dim(),
            u.channels(),
            xi.channels()
        )));
    }
    let r = dict.len();
    let mut data = DMatrix::zeros(u.len(), r);
    let mut row = vec![0.0; r];
    for k in 0..u.len() {
        dict.eval(&u.row(k), &xi.row(k), &mut row)?;
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteBasis { function: j, step: k });
            }
            data[(k, j)] = v;
        }
    }
    Sequence::new(data)
}

fn check_dims(dict: &dyn BasisDictionary, u: &[f64], xi: &[f64]) -> Result<()> {
    if u.len() != dict.input_dim() || xi.len() != dict.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "dictionary '{}' evaluated at |u| = {}, |Xi| = {}",
            dict.name(),
            u.len(),
            xi.len()
        )));
    }
    Ok(())
}

/// `Psi(u, Xi) = (u, Xi)`.
#[derive(Debug, Clone)]
pub struct IdentityDictionary {
    m: usize,
    n: usize,
}

impl IdentityDictionary {
    pub fn new(m: usize, n: usize) -> Self {
        Self { m, n }
    }
}

impl BasisDictionary for IdentityDictionary {
    fn name(&self) -> &str {
        "identity"
    }
    fn input_dim(&self) -> usize {
        self.m
    }
    fn state_dim(&self) -> usize {
        self.n
    }
    fn len(&self) -> usize {
        self.m + self.n
    }
    fn input_first(&self) -> bool {
        true
    }
    fn eval(&self, u: &[f64], xi: &[f64], out: &mut [f64]) -> Result<()> {
        check_dims(self, u, xi)?;
        out[..self.m].copy_from_slice(u);
        out[self.m..].copy_from_slice(xi);
        Ok(())
    }
    fn jacobian(&self, _u: &[f64], _xi: &[f64], du: &mut DMatrix<f64>, dxi: &mut DMatrix<f64>) -> Result<()> {
        du.fill(0.0);
        dxi.fill(0.0);
        for j in 0..self.m {
            du[(j, j)] = 1.0;
        }
        for j in 0..self.n {
            dxi[(self.m + j, j)] = 1.0;
        }
        Ok(())
    }
}

/// `Psi(u, Xi) = u`.
#[derive(Debug, Clone)]
pub struct InputDictionary {
    m: usize,
    n: usize,
}

impl InputDictionary {
    pub fn new(m: usize, n: usize) -> Self {
        Self { m, n }
    }
}

impl BasisDictionary for InputDictionary {
    fn name(&self) -> &str {
        "input"
    }
    fn input_dim(&self) -> usize {
        self.m
    }
    fn state_dim(&self) -> usize {
        self.n
    }
    fn len(&self) -> usize {
        self.m
    }
    fn input_first(&self) -> bool {
        true
    }
    fn eval(&self, u: &[f64], xi: &[f64], out: &mut [f64]) -> Result<()> {
        check_dims(self, u, xi)?;
        out.copy_from_slice(u);
        Ok(())
    }
    fn jacobian(&self, _u: &[f64], _xi: &[f64], du: &mut DMatrix<f64>, dxi: &mut DMatrix<f64>) -> Result<()> {
        du.fill(0.0);
        dxi.fill(0.0);
        for j in 0..self.m {
            du[(j, j)] = 1.0;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mono {
    U(usize),
    UU(usize, usize),
    UX(usize, usize),
    XX(usize, usize),
}

/// Degree-2 monomials: `u`, `u_a u_b`, `u_a Xi_j`, and one `Xi_p Xi_q` per time-shift class.
///
/// Products of `Xi` entries that are time shifts of one another (for example
/// `y_k y_{k+1}` and `y_{k+1} y_{k+2}`) would make the basis Hankel matrix rank
/// deficient, so only the representative touching the earliest sample is kept.
/// Linear `Xi` terms are left out for the same reason.
#[derive(Debug, Clone)]
pub struct PolynomialDictionary {
    m: usize,
    n: usize,
    terms: Vec<Mono>,
}

impl PolynomialDictionary {
    pub fn new(structure: &BrunovskyStructure) -> Self {
        let m = structure.m();
        let n = structure.n();
        let mut terms: Vec<Mono> = (0..m).map(Mono::U).collect();
        for a in 0..m {
            for b in a..m {
                terms.push(Mono::UU(a, b));
            }
        }
        for a in 0..m {
            for j in 0..n {
                terms.push(Mono::UX(a, j));
            }
        }
        for i in 0..m {
            let oi = structure.offset(i);
            for delta in 0..structure.degree(i) {
                terms.push(Mono::XX(oi, oi + delta));
            }
            for j in i + 1..m {
                let oj = structure.offset(j);
                for q in 0..structure.degree(j) {
                    terms.push(Mono::XX(oi, oj + q));
                }
                for p in 1..structure.degree(i) {
                    terms.push(Mono::XX(oi + p, oj));
                }
            }
        }
        Self { m, n, terms }
    }
}

impl BasisDictionary for PolynomialDictionary {
    fn name(&self) -> &str {
        "polynomial2"
    }
    fn input_dim(&self) -> usize {
        self.m
    }
    fn state_dim(&self) -> usize {
        self.n
    }
    fn len(&self) -> usize {
        self.terms.len()
    }
    fn input_first(&self) -> bool {
        true
    }
    fn eval(&self, u: &[f64], xi: &[f64], out: &mut [f64]) -> Result<()> {
        check_dims(self, u, xi)?;
        for (o, t) in out.iter_mut().zip(&self.terms) {
            *o = match *t {
                Mono::U(a) => u[a],
                Mono::UU(a, b) => u[a] * u[b],
                Mono::UX(a, j) => u[a] * xi[j],
                Mono::XX(p, q) => xi[p] * xi[q],
            };
        }
        Ok(())
    }
    fn jacobian(&self, u: &[f64], xi: &[f64], du: &mut DMatrix<f64>, dxi: &mut DMatrix<f64>) -> Result<()> {
        du.fill(0.0);
        dxi.fill(0.0);
        for (k, t) in self.terms.iter().enumerate() {
            match *t {
                Mono::U(a) => du[(k, a)] = 1.0,
                Mono::UU(a, b) => {
                    du[(k, a)] += u[b];
                    du[(k, b)] += u[a];
                }
                Mono::UX(a, j) => {
                    du[(k, a)] = xi[j];
                    dxi[(k, j)] = u[a];
                }
                Mono::XX(p, q) => {
                    dxi[(k, p)] += xi[q];
                    dxi[(k, q)] += xi[p];
                }
            }
        }
        Ok(())
    }
}

/// `u`, then `sin` (and optionally `cos`) of the leading `Xi` entry of every chain.
#[derive(Debug, Clone)]
pub struct TrigDictionary {
    m: usize,
    n: usize,
    leads: Vec<usize>,
    with_cos: bool,
    name: String,
}

impl TrigDictionary {
    pub fn new(structure: &BrunovskyStructure, with_cos: bool) -> Self {
        let leads = (0..structure.m()).map(|i| structure.offset(i)).collect();
        let name = if with_cos { "trig" } else { "trig_sin" };
        Self { m: structure.m(), n: structure.n(), leads, with_cos, name: name.into() }
    }
}

impl BasisDictionary for TrigDictionary {
    fn name(&self) -> &str {
        &self.name
    }
    fn input_dim(&self) -> usize {
        self.m
    }
    fn state_dim(&self) -> usize {
        self.n
    }
    fn len(&self) -> usize {
        self.m + self.leads.len() * if self.with_cos { 2 } else { 1 }
    }
    fn input_first(&self) -> bool {
        true
    }
    fn eval(&self, u: &[f64], xi: &[f64], out: &mut [f64]) -> Result<()> {
        check_dims(self, u, xi)?;
        out[..self.m].copy_from_slice(u);
        let mut k = self.m;
        for &j in &self.leads {
            out[k] = libm::sin(xi[j]);
            k += 1;
            if self.with_cos {
                out[k] = libm::cos(xi[j]);
                k += 1;
            }
        }
        Ok(())
    }
    fn jacobian(&self, _u: &[f64], xi: &[f64], du: &mut DMatrix<f64>, dxi: &mut DMatrix<f64>) -> Result<()> {
        du.fill(0.0);
        dxi.fill(0.0);
        for a in 0..self.m {
            du[(a, a)] = 1.0;
        }
        let mut k = self.m;
        for &j in &self.leads {
            dxi[(k, j)] = libm::cos(xi[j]);
            k += 1;
            if self.with_cos {
                dxi[(k, j)] = -libm::sin(xi[j]);
                k += 1;
            }
        }
        Ok(())
    }
}

/// `Psi = (tau, M~^{-1}(theta)(tau - C~ dtheta - G~(theta)))` with model parameters `M~, C~, G~`
/// and `theta`, `dtheta` recovered from `Xi` by finite differences.
#[derive(Debug, Clone)]
pub struct PendulumDictionary {
    pub model: DoublePendulumParams,
}

impl PendulumDictionary {
    pub fn new(model: DoublePendulumParams) -> Self {
        Self { model }
    }
}

impl BasisDictionary for PendulumDictionary {
    fn name(&self) -> &str {
        "pendulum"
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn state_dim(&self) -> usize {
        4
    }
    fn len(&self) -> usize {
        4
    }
    fn input_first(&self) -> bool {
        true
    }
    fn eval(&self, u: &[f64], xi: &[f64], out: &mut [f64]) -> Result<()> {
        check_dims(self, u, xi)?;
        let (th, w) = angles_from_xi(xi, self.model.ts);
        let z = self.model.acceleration(Vector2::new(u[0], u[1]), th, w)?;
        out.copy_from_slice(&[u[0], u[1], z[0], z[1]]);
        Ok(())
    }
    fn jacobian(&self, u: &[f64], xi: &[f64], du: &mut DMatrix<f64>, dxi: &mut DMatrix<f64>) -> Result<()> {
        let (th, w) = angles_from_xi(xi, self.model.ts);
        let (_, dtau, dq) = self.model.acceleration_jacobian(Vector2::new(u[0], u[1]), th, w)?;
        du.fill(0.0);
        dxi.fill(0.0);
        du[(0, 0)] = 1.0;
        du[(1, 1)] = 1.0;
        let inv_ts = 1.0 / self.model.ts;
        for i in 0..2 {
            for j in 0..2 {
                du[(2 + i, j)] = dtau[(i, j)];
            }
            // theta_1 = xi_1, dtheta_1 = (xi_2 - xi_1)/Ts, theta_2 = xi_3, dtheta_2 = (xi_4 - xi_3)/Ts
            dxi[(2 + i, 0)] = dq[(i, 0)] - dq[(i, 2)] * inv_ts;
            dxi[(2 + i, 1)] = dq[(i, 2)] * inv_ts;
            dxi[(2 + i, 2)] = dq[(i, 1)] - dq[(i, 3)] * inv_ts;
            dxi[(2 + i, 3)] = dq[(i, 3)] * inv_ts;
        }
        Ok(())
    }
}

/// `[Psi; Xi]`, the regressor used when fitting `phi` so that the linear part in `Xi`
/// is carried by the `Xi` block of the Hankel constraint.
pub struct Augmented<'a>(pub &'a dyn BasisDictionary);

impl BasisDictionary for Augmented<'_> {
    fn name(&self) -> &str {
        self.0.name()
    }
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }
    fn len(&self) -> usize {
        self.0.len() + self.0.state_dim()
    }
    fn input_first(&self) -> bool {
        self.0.input_first()
    }
    fn eval(&self, u: &[f64], xi: &[f64], out: &mut [f64]) -> Result<()> {
        let r = self.0.len();
        self.0.eval(u, xi, &mut out[..r])?;
        out[r..].copy_from_slice(xi);
        Ok(())
    }
    fn jacobian(&self, u: &[f64], xi: &[f64], du: &mut DMatrix<f64>, dxi: &mut DMatrix<f64>) -> Result<()> {
        let (r, m, n) = (self.0.len(), self.0.input_dim(), self.0.state_dim());
        let mut du0 = DMatrix::zeros(r, m);
        let mut dx0 = DMatrix::zeros(r, n);
        self.0.jacobian(u, xi, &mut du0, &mut dx0)?;
        du.fill(0.0);
        dxi.fill(0.0);
        du.rows_mut(0, r).copy_from(&du0);
        dxi.rows_mut(0, r).copy_from(&dx0);
        for j in 0..n {
            dxi[(r + j, j)] = 1.0;
        }
        Ok(())
    }
}
