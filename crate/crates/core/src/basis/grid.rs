use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Compact operating set `Omega` as a box in `(u, Xi)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OmegaBox {
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
    pub xi_lower: Vec<f64>,
    pub xi_upper: Vec<f64>,
}

const CONTAIN_TOL: f64 = 1e-12;

impl OmegaBox {
    pub fn new(u_lower: Vec<f64>, u_upper: Vec<f64>, xi_lower: Vec<f64>, xi_upper: Vec<f64>) -> Result<Self> {
        let b = Self { u_lower, u_upper, xi_lower, xi_upper };
        b.validate()?;
        Ok(b)
    }

    /// Box `[ul, uu]^m x [xl, xu]^n`.
    pub fn uniform(m: usize, n: usize, u: (f64, f64), xi: (f64, f64)) -> Result<Self> {
        Self::new(vec![u.0; m], vec![u.1; m], vec![xi.0; n], vec![xi.1; n])
    }

    pub fn validate(&self) -> Result<()> {
        if self.u_lower.len() != self.u_upper.len() || self.xi_lower.len() != self.xi_upper.len() {
            return Err(Error::InvalidConfig("box bound lengths differ".into()));
        }
        let pairs = self.u_lower.iter().zip(&self.u_upper).chain(self.xi_lower.iter().zip(&self.xi_upper));
        for (l, u) in pairs {
            if !(l < u) || !l.is_finite() || !u.is_finite() {
                return Err(Error::InvalidConfig(format!("box requires finite lower < upper, got [{l}, {u}]")));
            }
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.u_lower.len()
    }

    pub fn n(&self) -> usize {
        self.xi_lower.len()
    }

    pub fn dim(&self) -> usize {
        self.m() + self.n()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.u_lower.iter().chain(&self.xi_lower).copied().collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.u_upper.iter().chain(&self.xi_upper).copied().collect()
    }

    pub fn volume(&self) -> f64 {
        self.lower().iter().zip(self.upper()).map(|(l, u)| u - l).product()
    }

    pub fn contains_u(&self, u: &[f64]) -> bool {
        within(u, &self.u_lower, &self.u_upper)
    }

    pub fn contains_xi(&self, xi: &[f64]) -> bool {
        within(xi, &self.xi_lower, &self.xi_upper)
    }
}

fn within(v: &[f64], lo: &[f64], hi: &[f64]) -> bool {
    v.len() == lo.len() && v.iter().zip(lo.iter().zip(hi)).all(|(x, (l, u))| *x >= l - CONTAIN_TOL && *x <= u + CONTAIN_TOL)
}

/// Quadrature / sampling grid over `Omega`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum GridSpec {
    /// Midpoint tensor grid.
    Tensor { points_per_axis: usize },
    /// Halton points (quasi Monte Carlo), for higher dimensions.
    Halton { count: usize },
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Tensor { points_per_axis: 7 }
    }
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// A materialized grid: point coordinates, equal quadrature weights, and the
/// finite-difference step per axis.
#[derive(Debug, Clone)]
pub struct Grid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    spec: GridSpec,
    count: usize,
    weight: f64,
    steps: Vec<f64>,
}

impl Grid {
    pub fn new(omega: &OmegaBox, spec: GridSpec) -> Result<Self> {
        omega.validate()?;
        let dim = omega.dim();
        let lower = omega.lower();
        let upper = omega.upper();
        let (count, per_axis) = match spec {
            GridSpec::Tensor { points_per_axis } => {
                if points_per_axis < 2 {
                    return Err(Error::InvalidConfig("grid resolution must be at least 2 per axis".into()));
                }
                let count = (0..dim).try_fold(1usize, |acc, _| acc.checked_mul(points_per_axis));
                (count.ok_or_else(|| Error::InvalidConfig("grid too large".into()))?, points_per_axis as f64)
            }
            GridSpec::Halton { count } => {
                if dim > PRIMES.len() {
                    return Err(Error::InvalidConfig(format!("Halton grid supports at most {} axes", PRIMES.len())));
                }
                if count < 2 {
                    return Err(Error::InvalidConfig("need at least 2 Halton points".into()));
                }
                (count, libm::pow(count as f64, 1.0 / dim as f64).max(2.0))
            }
        };
        let steps = lower.iter().zip(&upper).map(|(l, u)| (u - l) / per_axis).collect();
        Ok(Self { weight: omega.volume() / count as f64, lower, upper, spec, count, steps })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    /// Quadrature weight of every point (`vol(Omega) / count`).
    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// Finite-difference step along each axis (the tensor spacing).
    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn point(&self, idx: usize, out: &mut [f64]) {
        match self.spec {
            GridSpec::Tensor { points_per_axis: p } => {
                let mut rem = idx;
                for a in (0..self.dim()).rev() {
                    let i = rem % p;
                    rem /= p;
                    out[a] = self.lower[a] + (i as f64 + 0.5) * self.steps[a];
                }
            }
            GridSpec::Halton { .. } => {
                for a in 0..self.dim() {
                    let t = radical_inverse(idx as u64 + 1, PRIMES[a]);
                    out[a] = self.lower[a] + t * (self.upper[a] - self.lower[a]);
                }
            }
        }
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }
}

/// Lower estimate of the Lipschitz constant of `f` with respect to `Xi` in the
/// infinity norm: the largest `sum_j |df/dXi_j|` (one-sided differences with the
/// grid spacing) over grid points and output components.
///
/// `f(u, Xi, out)` writes `out_dim` values.
pub fn estimate_lipschitz(
    f: &dyn Fn(&[f64], &[f64], &mut [f64]) -> Result<()>,
    out_dim: usize,
    omega: &OmegaBox,
    grid: &Grid,
) -> Result<f64> {
    let m = omega.m();
    let n = omega.n();
    let mut p = vec![0.0; m + n];
    let mut q = vec![0.0; m + n];
    let mut f0 = vec![0.0; out_dim];
    let mut f1 = vec![0.0; out_dim];
    let mut k = 0.0f64;
    let mut sums = vec![0.0; out_dim];
    for idx in 0..grid.len() {
        grid.point(idx, &mut p);
        f(&p[..m], &p[m..], &mut f0)?;
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            let a = m + j;
            let h = grid.steps()[a];
            q.copy_from_slice(&p);
            q[a] = if p[a] + h <= grid.upper()[a] { p[a] + h } else { p[a] - h };
            f(&q[..m], &q[m..], &mut f1)?;
            for (s, (v1, v0)) in sums.iter_mut().zip(f1.iter().zip(&f0)) {
                *s += (v1 - v0).abs() / h;
            }
        }
        for s in &sums {
            if !s.is_finite() {
                return Err(Error::Callback(format!("non-finite difference at grid point {idx}")));
            }
            k = k.max(*s);
        }
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::FRAC_PI_2;

    #[test]
    fn tensor_grid_points_are_midpoints() {
        let b = OmegaBox::uniform(1, 1, (0.0, 1.0), (0.0, 2.0)).unwrap();
        let g = Grid::new(&b, GridSpec::Tensor { points_per_axis: 2 }).unwrap();
        assert_eq!(g.len(), 4);
        let mut p = [0.0; 2];
        g.point(3, &mut p);
        assert_eq!(p, [0.75, 1.5]);
        g.point(1, &mut p);
        assert_eq!(p, [0.25, 1.5]);
        assert!((g.weight() - 0.5).abs() < 1e-15);
        assert!(Grid::new(&b, GridSpec::Tensor { points_per_axis: 1 }).is_err());
    }

    #[test]
    fn lipschitz_examples() {
        let b = OmegaBox::uniform(1, 2, (-1.0, 1.0), (-FRAC_PI_2, FRAC_PI_2)).unwrap();
        let g = Grid::new(&b, GridSpec::Tensor { points_per_axis: 9 }).unwrap();
        let lin = |_: &[f64], x: &[f64], o: &mut [f64]| {
            o[0] = 2.0 * x[0];
            Ok(())
        };
        assert!((estimate_lipschitz(&lin, 1, &b, &g).unwrap() - 2.0).abs() < 1e-9);
        let c = |_: &[f64], _: &[f64], o: &mut [f64]| {
            o[0] = 3.0;
            Ok(())
        };
        assert_eq!(estimate_lipschitz(&c, 1, &b, &g).unwrap(), 0.0);
        let s = |_: &[f64], x: &[f64], o: &mut [f64]| {
            o[0] = libm::sin(x[0]);
            Ok(())
        };
        let mut prev = 0.0;
        for p in [5, 21, 81] {
            let g = Grid::new(&b, GridSpec::Tensor { points_per_axis: p }).unwrap();
            let k = estimate_lipschitz(&s, 1, &b, &g).unwrap();
            assert!(k <= 1.0 + 1e-12 && k > prev);
            prev = k;
        }
        assert!(prev > 0.99);
    }

    #[test]
    fn halton_points_in_box() {
        let b = OmegaBox::uniform(2, 2, (-3.0, 3.0), (0.0, 1.0)).unwrap();
        let g = Grid::new(&b, GridSpec::Halton { count: 500 }).unwrap();
        let mut p = [0.0; 4];
        for i in 0..g.len() {
            g.point(i, &mut p);
            assert!(b.contains_u(&p[..2]) && b.contains_xi(&p[2..]));
        }
    }
}
