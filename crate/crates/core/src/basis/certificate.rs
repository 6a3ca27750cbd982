use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;

use super::{estimate_lipschitz, Augmented, BasisDictionary, Grid, GridSpec, OmegaBox};
use crate::error::{Error, Result};
use crate::linalg;
use crate::plant::FeedbackLinearizable;

/// Relative cutoff for the least-squares fit.
const FIT_RCOND: f64 = 1e-13;
/// Absolute floor on the Gram matrix's smallest singular value.
pub const GRAM_SIGMA_MIN: f64 = 1e-8;

/// Least-squares fit of `phi` on the grid.
#[derive(Debug, Clone)]
pub struct GFit {
    /// `m x r` coefficient matrix.
    pub g: DMatrix<f64>,
    /// Largest `|phi - G Psi|_inf` over the grid.
    pub epsilon_star: f64,
    /// Largest `|phi_i|` over the grid and outputs.
    pub v_star: f64,
    /// Grid-quadrature Gram matrix `Gamma = int Psi Psi^T`.
    pub gram: DMatrix<f64>,
    /// `int |psi_j|` per function.
    pub abs_integrals: Vec<f64>,
    /// Sum of squared residuals over the grid.
    pub residual_sum: f64,
}

fn grid_values(
    dict: &dyn BasisDictionary,
    plant: &dyn FeedbackLinearizable,
    omega: &OmegaBox,
    grid: &Grid,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let m = omega.m();
    let r = dict.len();
    let count = grid.len();
    let mut x = DMatrix::zeros(count, r);
    let mut y = DMatrix::zeros(count, plant.io_dim());
    let mut p = vec![0.0; omega.dim()];
    let mut psi = vec![0.0; r];
    for idx in 0..count {
        grid.point(idx, &mut p);
        dict.eval(&p[..m], &p[m..], &mut psi)?;
        let phi = plant.phi(&p[..m], &p[m..])?;
        for (j, &v) in psi.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteBasis { function: j, step: idx });
            }
            x[(idx, j)] = v;
        }
        for (i, &v) in phi.iter().enumerate() {
            y[(idx, i)] = v;
        }
    }
    Ok((x, y))
}

/// Gram matrix and absolute integrals of the dictionary under the grid quadrature.
pub fn gram_matrix(dict: &dyn BasisDictionary, omega: &OmegaBox, grid: &Grid) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let m = omega.m();
    let r = dict.len();
    let mut gram = DMatrix::zeros(r, r);
    let mut abs = vec![0.0; r];
    let mut p = vec![0.0; omega.dim()];
    let mut psi = vec![0.0; r];
    let w = grid.weight();
    for idx in 0..grid.len() {
        grid.point(idx, &mut p);
        dict.eval(&p[..m], &p[m..], &mut psi)?;
        for a in 0..r {
            abs[a] += w * psi[a].abs();
            for b in 0..r {
                gram[(a, b)] += w * psi[a] * psi[b];
            }
        }
    }
    Ok((gram, abs))
}

fn gram_inverse(gram: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let info = linalg::numerical_rank(gram, 1e-15);
    if !(info.sigma_min > GRAM_SIGMA_MIN) || info.rank < gram.nrows() {
        return Err(Error::SingularGram { sigma_min: info.sigma_min });
    }
    gram.clone().try_inverse().ok_or(Error::SingularGram { sigma_min: info.sigma_min })
}

/// Least-squares `G` of `phi ~ G Psi` on the grid, with `epsilon*`.
///
/// This is an offline oracle: the controller never uses `G` itself, only the
/// scalar constants derived from it.
pub fn fit_g_matrix(
    dict: &dyn BasisDictionary,
    plant: &dyn FeedbackLinearizable,
    omega: &OmegaBox,
    grid: &Grid,
) -> Result<GFit> {
    let (x, y) = grid_values(dict, plant, omega, grid)?;
    let (gram, abs_integrals) = gram_matrix(dict, omega, grid)?;
    gram_inverse(&gram)?;
    let pinv = linalg::pinv(&x, FIT_RCOND);
    let g = (pinv * &y).transpose();
    let resid = &y - &x * g.transpose();
    let epsilon_star = resid.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let v_star = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let residual_sum = resid.iter().map(|v| v * v).sum();
    Ok(GFit { g, epsilon_star, v_star, gram, abs_integrals, residual_sum })
}

/// Model-free bound `v* |Gamma^{-1}|_1 sum_j int |psi_j|` on `|G|_inf`.
pub fn g_norm_bound(dict: &dyn BasisDictionary, omega: &OmegaBox, grid: &Grid, v_star: f64) -> Result<f64> {
    let (gram, abs) = gram_matrix(dict, omega, grid)?;
    let inv = gram_inverse(&gram)?;
    Ok(v_star * linalg::one_norm(&inv) * abs.iter().sum::<f64>())
}

/// `sqrt(r) / sigma_min`, a bound on `|G^dagger|_inf`.
pub fn g_dagger_bound(r: usize, sigma_min: f64) -> Result<f64> {
    if !(sigma_min > 0.0) {
        return Err(Error::ZeroSigmaMin);
    }
    Ok(libm::sqrt(r as f64) / sigma_min)
}

/// [`g_dagger_bound`] with `r` and `sigma_min` taken from `g`.
pub fn g_dagger_bound_of(g: &DMatrix<f64>) -> Result<f64> {
    let s = linalg::singular_values(g);
    g_dagger_bound(g.ncols(), s.get(g.nrows().saturating_sub(1)).copied().unwrap_or(0.0))
}

/// Constants certifying how well a dictionary represents a plant on `Omega`.
///
/// All values come from grid evaluation and are estimates of the suprema they
/// stand for. `g_hat` is fitted on the regressor `[Psi; Xi]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ApproximationCertificate {
    pub plant: String,
    pub dictionary: String,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub epsilon_star: f64,
    pub k_xi: f64,
    pub k_psi: f64,
    /// `None` when the noise bound is zero (the noise map is identically zero).
    pub k_w: Option<f64>,
    pub noise_bound: f64,
    /// Row-major `m x (r + n)`.
    pub g_hat: Vec<Vec<f64>>,
    pub g_inf_norm: f64,
    pub g_dagger_inf_norm: f64,
    pub g_sigma_min: f64,
    /// Model-free bound on `g_inf_norm` from the Gram matrix ([`g_norm_bound`]).
    pub g_inf_bound: f64,
    /// `sqrt(r + n) / g_sigma_min` ([`g_dagger_bound`]).
    pub g_dagger_inf_bound: f64,
    pub v_star: f64,
    pub gram_sigma_min: f64,
    pub omega: OmegaBox,
    pub grid: GridSpec,
    pub seed: Option<u64>,
    pub perturbation: Option<f64>,
}

impl ApproximationCertificate {
    pub fn g_matrix(&self) -> DMatrix<f64> {
        let cols = self.r + self.n;
        DMatrix::from_fn(self.m, cols, |i, j| self.g_hat[i][j])
    }

    /// `|g_i|_1` restricted to the `Psi` block.
    pub fn g_psi_row_norm(&self, i: usize) -> f64 {
        self.g_hat[i][..self.r].iter().map(|v| v.abs()).sum()
    }

    pub fn k_w_or_zero(&self) -> f64 {
        self.k_w.unwrap_or(0.0)
    }
}

/// Options for [`estimate_certificate`].
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateOptions {
    pub grid: GridSpec,
    pub noise_bound: f64,
    pub seed: Option<u64>,
    pub perturbation: Option<f64>,
}

impl Default for CertificateOptions {
    fn default() -> Self {
        Self { grid: GridSpec::default(), noise_bound: 0.0, seed: None, perturbation: None }
    }
}

/// Noise-propagation constant: largest `|phi(u, Xi) - phi(u, Xi + w)|_inf / w*`
/// over grid points and the corners `w in {-w*, w*}^n`.
pub fn estimate_k_w(plant: &dyn FeedbackLinearizable, omega: &OmegaBox, grid: &Grid, w_star: f64) -> Result<Option<f64>> {
    if w_star == 0.0 {
        return Ok(None);
    }
    let m = omega.m();
    let n = omega.n();
    if n >= 20 {
        return Err(Error::InvalidConfig("too many Xi components for corner enumeration".into()));
    }
    let mut p = vec![0.0; m + n];
    let mut xi = vec![0.0; n];
    let mut k = 0.0f64;
    for idx in 0..grid.len() {
        grid.point(idx, &mut p);
        let base = plant.phi(&p[..m], &p[m..])?;
        for mask in 0u32..(1u32 << n) {
            for j in 0..n {
                xi[j] = p[m + j] + if mask & (1 << j) != 0 { w_star } else { -w_star };
            }
            let shifted = plant.phi(&p[..m], &xi)?;
            for (a, b) in base.iter().zip(&shifted) {
                k = k.max((a - b).abs() / w_star);
            }
        }
    }
    Ok(Some(k))
}

/// Grid estimation of every certificate constant.
pub fn estimate_certificate(
    dict: &dyn BasisDictionary,
    plant: &dyn FeedbackLinearizable,
    omega: &OmegaBox,
    options: &CertificateOptions,
) -> Result<ApproximationCertificate> {
    let s = plant.structure();
    let (m, n, r) = (s.m(), s.n(), dict.len());
    if dict.input_dim() != m || dict.state_dim() != n || omega.m() != m || omega.n() != n {
        return Err(Error::StructureMismatch("dictionary, plant and box dimensions disagree".into()));
    }
    let grid = Grid::new(omega, options.grid)?;
    let aug = Augmented(dict);
    let fit = fit_g_matrix(&aug, plant, omega, &grid)?;
    let g_psi = fit.g.columns(0, r).into_owned();
    let psi_rank = linalg::numerical_rank(&g_psi, 1e-10);
    if psi_rank.rank < m {
        return Err(Error::RankDeficientG { sigma_min: psi_rank.sigma_min });
    }
    let sv = linalg::singular_values(&fit.g);
    let g_sigma_min = sv.get(m - 1).copied().unwrap_or(0.0);
    let g_dagger = linalg::pinv(&fit.g, 1e-14);
    let g_bound = g_norm_bound(&aug, omega, &grid, fit.v_star)?;
    let gram_sigma_min = linalg::singular_values(&fit.gram).last().copied().unwrap_or(0.0);

    let phi_fn = |u: &[f64], xi: &[f64], out: &mut [f64]| -> Result<()> {
        out.copy_from_slice(&plant.phi(u, xi)?);
        Ok(())
    };
    let psi_fn = |u: &[f64], xi: &[f64], out: &mut [f64]| dict.eval(u, xi, out);
    let k_xi = estimate_lipschitz(&phi_fn, m, omega, &grid)?;
    let k_psi = estimate_lipschitz(&psi_fn, r, omega, &grid)?;
    let k_w = estimate_k_w(plant, omega, &grid, options.noise_bound)?;

    Ok(ApproximationCertificate {
        plant: plant.name().into(),
        dictionary: dict.name().into(),
        m,
        n,
        r,
        epsilon_star: fit.epsilon_star,
        k_xi,
        k_psi,
        k_w,
        noise_bound: options.noise_bound,
        g_hat: (0..m).map(|i| fit.g.row(i).iter().copied().collect()).collect(),
        g_inf_norm: linalg::inf_norm(&fit.g),
        g_dagger_inf_norm: linalg::inf_norm(&g_dagger),
        g_sigma_min,
        g_inf_bound: g_bound,
        g_dagger_inf_bound: g_dagger_bound(r + n, g_sigma_min)?,
        v_star: fit.v_star,
        gram_sigma_min,
        omega: omega.clone(),
        grid: options.grid,
        seed: options.seed,
        perturbation: options.perturbation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{InputDictionary, TrigDictionary};
    use crate::plant::toys::{LtiToy, ScalarFlat};
    use crate::plant::Plant;

    #[test]
    fn dagger_bound_examples() {
        assert!((g_dagger_bound(2, 1.0).unwrap() - libm::sqrt(2.0)).abs() < 1e-15);
        assert!((g_dagger_bound_of(&DMatrix::from_diagonal_element(2, 2, 1.0)).unwrap() - libm::sqrt(2.0)).abs() < 1e-15);
        let d = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        assert!((g_dagger_bound_of(&d).unwrap() - libm::sqrt(2.0)).abs() < 1e-15);
        assert_eq!(g_dagger_bound(2, 0.0), Err(Error::ZeroSigmaMin));
    }

    #[test]
    fn exact_toys_have_zero_epsilon() {
        let lti = LtiToy::default();
        let omega = OmegaBox::uniform(2, 3, (-1.0, 1.0), (-1.0, 1.0)).unwrap();
        let opts = CertificateOptions { grid: GridSpec::Tensor { points_per_axis: 4 }, ..Default::default() };
        let c = estimate_certificate(&InputDictionary::new(2, 3), &lti, &omega, &opts).unwrap();
        assert!(c.epsilon_star < 1e-8, "{}", c.epsilon_star);
        assert!(c.g_inf_bound >= c.g_inf_norm);
        assert!(c.k_w.is_none());

        let sf = ScalarFlat::default();
        let omega = OmegaBox::uniform(1, 2, (-2.0, 2.0), (-1.5, 1.5)).unwrap();
        let opts = CertificateOptions { grid: GridSpec::Tensor { points_per_axis: 9 }, noise_bound: 0.01, ..Default::default() };
        let c = estimate_certificate(&TrigDictionary::new(sf.structure(), false), &sf, &omega, &opts).unwrap();
        assert!(c.epsilon_star < 1e-8);
        // |d phi/d xi_1| + |d phi/d xi_2| <= 0.2 + 0.5
        assert!(c.k_w.unwrap() <= 0.7 + 1e-12 && c.k_w.unwrap() > 0.6);
        assert_eq!(c.plant, sf.name());
    }
}
