use alloc::collections::VecDeque;
use alloc::vec::Vec;
use nalgebra::Cholesky;

use super::{inf_norm, project, projected_gradient, AlState, SolverOptions};
use crate::error::Result;

fn free_set(z: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> Vec<usize> {
    (0..z.len())
        .filter(|&i| lo[i] < hi[i] && !(z[i] <= lo[i] && g[i] > 0.0) && !(z[i] >= hi[i] && g[i] < 0.0))
        .collect()
}

fn inner_tol(st: &AlState<'_>, z: &[f64], opt: &SolverOptions) -> Result<f64> {
    let gf = st.objective_gradient(z)?;
    Ok(0.01 * opt.optimality_tol * inf_norm(&gf).max(1.0))
}

struct Trial {
    z: Vec<f64>,
    f: f64,
    full_step: bool,
}

/// Armijo backtracking along the projected path `P(z + t d)`.
fn projected_search(
    st: &AlState<'_>,
    z: &[f64],
    f: f64,
    grad: &[f64],
    d: &[f64],
    lo: &[f64],
    hi: &[f64],
    opt: &SolverOptions,
) -> Result<Option<Trial>> {
    let mut t = 1.0;
    let mut zt = z.to_vec();
    for k in 0..=opt.max_backtracks {
        for i in 0..z.len() {
            zt[i] = z[i] + t * d[i];
        }
        project(&mut zt, lo, hi);
        let slope: f64 = (0..z.len()).map(|i| grad[i] * (zt[i] - z[i])).sum();
        if slope < 0.0 {
            if let Ok(ft) = st.merit(&zt) {
                if ft <= f + opt.armijo_c * slope {
                    return Ok(Some(Trial { z: zt, f: ft, full_step: k == 0 }));
                }
            }
        }
        t *= opt.backtrack;
    }
    Ok(None)
}

/// Projected Levenberg-Marquardt on the stacked augmented-Lagrangian residuals.
pub(crate) fn levenberg_marquardt(
    st: &AlState<'_>,
    z0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opt: &SolverOptions,
) -> Result<(Vec<f64>, usize)> {
    let mut z = z0.to_vec();
    let (mut r, mut j) = st.stacked_residuals(&z)?;
    let mut f = r.norm_squared();
    let tol = inner_tol(st, &z, opt)?;
    let mut damping = 1e-8;
    let mut stall = 0;
    for it in 0..opt.max_inner {
        let grad: Vec<f64> = (j.tr_mul(&r) * 2.0).iter().copied().collect();
        if inf_norm(&projected_gradient(&z, &grad, lo, hi)) <= tol {
            return Ok((z, it));
        }
        let free = free_set(&z, &grad, lo, hi);
        let jf = j.select_columns(free.iter());
        let h = jf.tr_mul(&jf);
        let gf = jf.tr_mul(&r);
        let dmax = (0..h.nrows()).fold(0.0f64, |a, i| a.max(h[(i, i)]));
        let floor = 1e-12 * dmax.max(1e-300);
        let mut accepted = None;
        for _ in 0..12 {
            let mut hd = h.clone();
            for i in 0..hd.nrows() {
                hd[(i, i)] += damping * h[(i, i)].max(floor);
            }
            let step = match Cholesky::new(hd) {
                Some(ch) => -ch.solve(&gf),
                None => {
                    damping *= 10.0;
                    continue;
                }
            };
            let mut d = alloc::vec![0.0; z.len()];
            for (k, &i) in free.iter().enumerate() {
                d[i] = step[k];
            }
            if let Some(trial) = projected_search(st, &z, f, &grad, &d, lo, hi, opt)? {
                accepted = Some(trial);
                break;
            }
            damping *= 10.0;
        }
        let Some(trial) = accepted else {
            return Ok((z, it + 1));
        };
        if trial.full_step {
            damping = (damping / 3.0).max(1e-12);
        }
        let decrease = f - trial.f;
        z = trial.z;
        let (rn, jn) = st.stacked_residuals(&z)?;
        r = rn;
        j = jn;
        f = r.norm_squared();
        if decrease <= 1e-15 * f.max(1e-300) {
            stall += 1;
            if stall >= 3 {
                return Ok((z, it + 1));
            }
        } else {
            stall = 0;
        }
    }
    Ok((z, opt.max_inner))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projected L-BFGS on the augmented Lagrangian.
pub(crate) fn lbfgs(
    st: &AlState<'_>,
    z0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opt: &SolverOptions,
) -> Result<(Vec<f64>, usize)> {
    let n = z0.len();
    let mut z = z0.to_vec();
    let mut f = st.merit(&z)?;
    let mut g = st.merit_gradient(&z)?;
    let tol = inner_tol(st, &z, opt)?;
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut stall = 0;
    for it in 0..opt.max_inner {
        if inf_norm(&projected_gradient(&z, &g, lo, hi)) <= tol {
            return Ok((z, it));
        }
        let free = free_set(&z, &g, lo, hi);
        let mut mask = alloc::vec![false; n];
        free.iter().for_each(|&i| mask[i] = true);
        let masked = |v: &[f64]| -> Vec<f64> { (0..n).map(|i| if mask[i] { v[i] } else { 0.0 }).collect() };
        let q0 = masked(&g);
        let mut q = q0.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let s = masked(s);
            let a = rho * dot(&s, &q);
            let y = masked(y);
            q.iter_mut().zip(&y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = match mem.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y).max(1e-300),
            None => 1.0 / inf_norm(&q0).max(1.0),
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let s = masked(s);
            let y = masked(y);
            let b = rho * dot(&y, &q);
            q.iter_mut().zip(&s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        if dot(&d, &g) >= 0.0 {
            let sc = 1.0 / inf_norm(&q0).max(1.0);
            d = q0.iter().map(|v| -v * sc).collect();
            mem.clear();
        }
        let trial = match projected_search(st, &z, f, &g, &d, lo, hi, opt)? {
            Some(t) => t,
            None if !mem.is_empty() => {
                mem.clear();
                continue;
            }
            None => return Ok((z, it + 1)),
        };
        let gn = st.merit_gradient(&trial.z)?;
        let s: Vec<f64> = (0..n).map(|i| trial.z[i] - z[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| gn[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * libm::sqrt(dot(&s, &s) * dot(&y, &y)) {
            if mem.len() == opt.lbfgs_memory.max(1) {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        let decrease = f - trial.f;
        z = trial.z;
        f = trial.f;
        g = gn;
        if decrease <= 1e-15 * f.abs().max(1e-300) {
            stall += 1;
            if stall >= 3 {
                return Ok((z, it + 1));
            }
        } else {
            stall = 0;
        }
    }
    Ok((z, opt.max_inner))
}
