//! Ground-truth plants, Brunovsky structure, the `Xi` construction, measurement
//! noise and offline data collection.

pub mod pendulum;
pub mod toys;

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::OmegaBox;
use crate::error::{Error, Result};
use crate::linalg;
use crate::trajlib::Sequence;

/// Threshold used by [`probe_relative_degrees`] to decide that an output moved.
pub const PROBE_TOL: f64 = 1e-9;
/// Default input perturbation for [`probe_relative_degrees`].
pub const PROBE_MAGNITUDE: f64 = 1e-3;

/// Discrete-time plant `x+ = f(x, u)`, `y = h(x, u)`.
pub trait Plant {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    /// Number of inputs, equal to the number of outputs.
    fn io_dim(&self) -> usize;
    fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>>;
    /// Output map. The input argument is only used by plants with direct feedthrough.
    fn output(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
    fn claims_origin_equilibrium(&self) -> bool {
        true
    }
    /// A state/input pair at rest, used for probing.
    fn rest_point(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; self.state_dim()], vec![0.0; self.io_dim()])
    }
    /// Input that keeps `x` fixed, if one exists.
    fn hold_input(&self, x: &[f64]) -> Option<Vec<f64>>;
}

/// Checks `f(0,0)=0` and `h(0)=0` for plants claiming an origin equilibrium.
pub fn check_origin_equilibrium(plant: &dyn Plant) -> Result<()> {
    if !plant.claims_origin_equilibrium() {
        return Ok(());
    }
    let x0 = vec![0.0; plant.state_dim()];
    let u0 = vec![0.0; plant.io_dim()];
    let x1 = plant.step(&x0, &u0)?;
    let y0 = plant.output(&x0, &u0);
    let bad = x1.iter().chain(y0.iter()).any(|v| v.abs() > 1e-12);
    if bad {
        return Err(Error::InvalidConfig(format!(
            "plant '{}' claims an origin equilibrium but f(0,0) or h(0) is nonzero",
            plant.name()
        )));
    }
    Ok(())
}

/// Relative degrees and the induced block-Brunovsky triplet.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BrunovskyStructure {
    degrees: Vec<usize>,
}

impl BrunovskyStructure {
    pub fn new(degrees: Vec<usize>) -> Result<Self> {
        if degrees.is_empty() {
            return Err(Error::InvalidConfig("at least one channel is required".into()));
        }
        if let Some(i) = degrees.iter().position(|&d| d == 0) {
            return Err(Error::DegenerateRelativeDegree { output: i });
        }
        Ok(Self { degrees })
    }

    pub fn m(&self) -> usize {
        self.degrees.len()
    }

    pub fn n(&self) -> usize {
        self.degrees.iter().sum()
    }

    pub fn d_max(&self) -> usize {
        self.degrees.iter().copied().max().unwrap_or(0)
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn degree(&self, i: usize) -> usize {
        self.degrees[i]
    }

    /// Index of the first `Xi` entry belonging to channel `i`.
    pub fn offset(&self, i: usize) -> usize {
        self.degrees[..i].iter().sum()
    }

    pub fn a(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..self.m() {
            let o = self.offset(i);
            for p in 0..self.degrees[i] - 1 {
                a[(o + p, o + p + 1)] = 1.0;
            }
        }
        a
    }

    pub fn b(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.n(), self.m());
        for i in 0..self.m() {
            b[(self.offset(i) + self.degrees[i] - 1, i)] = 1.0;
        }
        b
    }

    pub fn c(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.m(), self.n());
        for i in 0..self.m() {
            c[(i, self.offset(i))] = 1.0;
        }
        c
    }

    pub fn is_controllable(&self) -> bool {
        linalg::controllability_rank(&self.a(), &self.b()) == self.n()
    }

    /// Requires `sum d_i = n_x` (full feedback linearizability).
    pub fn check_full(&self, state_dim: usize) -> Result<()> {
        if self.n() != state_dim {
            return Err(Error::StructureMismatch(format!(
                "sum of relative degrees {} differs from state dimension {state_dim}",
                self.n()
            )));
        }
        Ok(())
    }

    /// `Xi_k` from per-channel output samples.
    pub fn xi_at(&self, outputs: &[Vec<f64>], k: usize) -> Result<Vec<f64>> {
        self.check_channels(outputs)?;
        let mut xi = Vec::with_capacity(self.n());
        for (i, y) in outputs.iter().enumerate() {
            let d = self.degrees[i];
            if y.len() < k + d {
                return Err(Error::InsufficientSamples { channel: i, needed: k + d, got: y.len() });
            }
            xi.extend_from_slice(&y[k..k + d]);
        }
        Ok(xi)
    }

    fn check_channels(&self, outputs: &[Vec<f64>]) -> Result<()> {
        if outputs.len() != self.m() {
            return Err(Error::DimensionMismatch(format!(
                "{} output channels for a structure with m = {}",
                outputs.len(),
                self.m()
            )));
        }
        Ok(())
    }
}

/// `Xi_0, ..., Xi_N` from outputs where channel `i` holds at least `N + d_i` samples.
pub fn build_xi_sequence(outputs: &[Vec<f64>], structure: &BrunovskyStructure, n_steps: usize) -> Result<Sequence> {
    structure.check_channels(outputs)?;
    for (i, y) in outputs.iter().enumerate() {
        let needed = n_steps + structure.degree(i);
        if y.len() < needed {
            return Err(Error::InsufficientSamples { channel: i, needed, got: y.len() });
        }
    }
    let n = structure.n();
    let mut data = DMatrix::zeros(n_steps + 1, n);
    for k in 0..=n_steps {
        let xi = structure.xi_at(outputs, k)?;
        for (c, v) in xi.into_iter().enumerate() {
            data[(k, c)] = v;
        }
    }
    Sequence::new(data)
}

/// Plants whose transformed state is `Xi` and whose synthetic input
/// `phi(u_k, Xi_k) = (y_{1,k+d_1}, ..., y_{m,k+d_m})` is well defined.
pub trait FeedbackLinearizable: Plant {
    fn structure(&self) -> &BrunovskyStructure;

    /// Inverse of the coordinate change `x -> Xi`.
    fn state_from_xi(&self, xi: &[f64]) -> Result<Vec<f64>>;

    /// `Xi` of the current state, obtained by rolling the plant forward.
    fn xi_from_state(&self, x: &[f64]) -> Result<Vec<f64>> {
        let s = self.structure();
        let zero = vec![0.0; self.io_dim()];
        let mut outputs = vec![Vec::new(); s.m()];
        let mut xk = x.to_vec();
        for k in 0..s.d_max() {
            let y = self.output(&xk, &zero);
            for i in 0..s.m() {
                if k < s.degree(i) {
                    outputs[i].push(y[i]);
                }
            }
            if k + 1 < s.d_max() {
                xk = self.step(&xk, &zero)?;
            }
        }
        s.xi_at(&outputs, 0)
    }

    /// `phi(u, Xi)`: output `i` taken `d_i` steps after applying `u`.
    fn phi(&self, u: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        let s = self.structure();
        let zero = vec![0.0; self.io_dim()];
        let mut x = self.state_from_xi(xi)?;
        let mut out = vec![0.0; s.m()];
        for k in 1..=s.d_max() {
            x = self.step(&x, if k == 1 { u } else { &zero })?;
            let y = self.output(&x, &zero);
            for i in 0..s.m() {
                if s.degree(i) == k {
                    out[i] = y[i];
                }
            }
        }
        Ok(out)
    }
}

/// Relative degrees from perturbing the plant at its rest point.
pub fn probe_relative_degrees(plant: &dyn Plant, magnitude: f64, horizon: usize) -> Result<Vec<usize>> {
    if !(magnitude > 0.0) {
        return Err(Error::InvalidConfig(format!("probe magnitude must be positive, got {magnitude}")));
    }
    let (x0, u0) = plant.rest_point();
    let m = plant.io_dim();
    let run = |perturb: Option<usize>| -> Result<Vec<Vec<f64>>> {
        let mut x = x0.clone();
        let mut ys = Vec::with_capacity(horizon + 1);
        for k in 0..=horizon {
            let mut u = u0.clone();
            if let (Some(j), 0) = (perturb, k) {
                u[j] += magnitude;
            }
            ys.push(plant.output(&x, &u));
            x = plant.step(&x, &u)?;
        }
        Ok(ys)
    };
    let base = run(None)?;
    let mut degrees = vec![usize::MAX; m];
    for j in 0..m {
        let pert = run(Some(j))?;
        for (i, d) in degrees.iter_mut().enumerate() {
            if let Some(k) = (0..=horizon).find(|&k| (pert[k][i] - base[k][i]).abs() > PROBE_TOL) {
                *d = (*d).min(k);
            }
        }
    }
    for (i, &d) in degrees.iter().enumerate() {
        if d == usize::MAX {
            return Err(Error::NoResponse { output: i, horizon });
        }
        if d == 0 {
            return Err(Error::DegenerateRelativeDegree { output: i });
        }
    }
    Ok(degrees)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum NoiseDistribution {
    #[default]
    Uniform,
}

/// Bounded output measurement noise, `|w_k|_inf <= bound`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub bound: f64,
    pub distribution: NoiseDistribution,
    pub seed: u64,
}

impl NoiseModel {
    pub fn uniform(bound: f64, seed: u64) -> Result<Self> {
        if !(bound >= 0.0) || !bound.is_finite() {
            return Err(Error::InvalidConfig(format!("noise bound must be finite and >= 0, got {bound}")));
        }
        Ok(Self { bound, distribution: NoiseDistribution::Uniform, seed })
    }

    pub fn none() -> Self {
        Self { bound: 0.0, distribution: NoiseDistribution::Uniform, seed: 0 }
    }

    /// Stateful sampler for this model.
    pub fn sampler(&self) -> NoiseSampler {
        NoiseSampler { bound: self.bound, rng: ChaCha8Rng::seed_from_u64(self.seed) }
    }
}

pub struct NoiseSampler {
    bound: f64,
    rng: ChaCha8Rng,
}

impl NoiseSampler {
    pub fn sample(&mut self, m: usize) -> Vec<f64> {
        if self.bound == 0.0 {
            return vec![0.0; m];
        }
        (0..m).map(|_| self.rng.random_range(-self.bound..=self.bound)).collect()
    }
}

/// Input policy used while collecting offline data.
pub trait InputPolicy {
    fn input(&mut self, k: usize, x: &[f64]) -> Vec<f64>;
}

/// i.i.d. uniform inputs in a box.
pub struct UniformInputPolicy {
    lower: Vec<f64>,
    upper: Vec<f64>,
    rng: ChaCha8Rng,
}

impl UniformInputPolicy {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, seed: u64) -> Self {
        Self { lower, upper, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl InputPolicy for UniformInputPolicy {
    fn input(&mut self, _k: usize, _x: &[f64]) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| if l < u { self.rng.random_range(l..u) } else { l })
            .collect()
    }
}

/// Offline input/output data. Channel `i` of the outputs has `N + d_i` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub structure: BrunovskyStructure,
    /// `u_0 .. u_{N-1}`.
    pub inputs: Sequence,
    /// Clean outputs, if known.
    pub outputs: Option<Vec<Vec<f64>>>,
    /// Measured outputs.
    pub noisy_outputs: Vec<Vec<f64>>,
    /// `Xi` built from the clean outputs (falls back to the measured ones).
    pub xi: Sequence,
    /// `Xi` built from the measured outputs.
    pub xi_noisy: Sequence,
    pub in_box: bool,
    pub first_violation: Option<usize>,
}

impl Trajectory {
    pub fn from_parts(
        structure: BrunovskyStructure,
        inputs: Sequence,
        noisy_outputs: Vec<Vec<f64>>,
        outputs: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        if inputs.channels() != structure.m() {
            return Err(Error::DimensionMismatch(format!(
                "{} input channels for m = {}",
                inputs.channels(),
                structure.m()
            )));
        }
        let n_steps = inputs.len();
        let xi_noisy = build_xi_sequence(&noisy_outputs, &structure, n_steps)?;
        let xi = match &outputs {
            Some(y) => build_xi_sequence(y, &structure, n_steps)?,
            None => xi_noisy.clone(),
        };
        Ok(Self { structure, inputs, outputs, noisy_outputs, xi, xi_noisy, in_box: true, first_violation: None })
    }

    /// Number of input samples `N`.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn clean_outputs(&self) -> &[Vec<f64>] {
        self.outputs.as_deref().unwrap_or(&self.noisy_outputs)
    }

    /// First `Xi` sample (clean if available) outside `omega`, with the matching input check.
    pub fn box_check(&self, omega: &OmegaBox) -> Option<usize> {
        let n_steps = self.len();
        (0..=n_steps).find(|&k| {
            let xi = self.xi.row(k);
            let u_ok = k == n_steps || omega.contains_u(&self.inputs.row(k));
            !(u_ok && omega.contains_xi(&xi))
        })
    }
}

/// Runs `plant` from `x0` under `policy` for `N` recorded inputs and returns clean and noisy data.
pub fn collect_offline_data(
    plant: &dyn FeedbackLinearizable,
    policy: &mut dyn InputPolicy,
    x0: &[f64],
    n_steps: usize,
    noise: &NoiseModel,
    omega: Option<&OmegaBox>,
    strict: bool,
) -> Result<Trajectory> {
    let s = plant.structure().clone();
    let m = s.m();
    if n_steps == 0 {
        return Err(Error::InvalidConfig("data length must be positive".into()));
    }
    if x0.len() != plant.state_dim() {
        return Err(Error::DimensionMismatch(format!("initial state of length {} for n = {}", x0.len(), plant.state_dim())));
    }
    let total = n_steps + s.d_max();
    let mut inputs = DMatrix::zeros(n_steps, m);
    let mut outputs = vec![Vec::with_capacity(total); m];
    let mut x = x0.to_vec();
    for k in 0..total {
        let u = if k < n_steps { policy.input(k, &x) } else { vec![0.0; m] };
        if u.len() != m {
            return Err(Error::DimensionMismatch(format!("policy returned {} inputs, expected {m}", u.len())));
        }
        let y = plant.output(&x, &u);
        for i in 0..m {
            if k < n_steps + s.degree(i) {
                outputs[i].push(y[i]);
            }
        }
        if k < n_steps {
            for (j, &v) in u.iter().enumerate() {
                inputs[(k, j)] = v;
            }
        }
        if k + 1 < total {
            x = plant.step(&x, &u).map_err(|e| Error::PlantFailure { step: k, source: Box::new(e) })?;
        }
    }
    let mut sampler = noise.sampler();
    let mut noisy = outputs.clone();
    for k in 0..total {
        let w = sampler.sample(m);
        for i in 0..m {
            if k < noisy[i].len() {
                noisy[i][k] += w[i];
            }
        }
    }
    let mut traj = Trajectory::from_parts(s, Sequence::new(inputs)?, noisy, Some(outputs))?;
    if let Some(omega) = omega {
        traj.first_violation = traj.box_check(omega);
        traj.in_box = traj.first_violation.is_none();
        if strict {
            if let Some(step) = traj.first_violation {
                return Err(Error::BoxViolation { step });
            }
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Chain;
    impl Plant for Chain {
        fn name(&self) -> &str {
            "chain"
        }
        fn state_dim(&self) -> usize {
            2
        }
        fn io_dim(&self) -> usize {
            1
        }
        fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![x[1], u[0]])
        }
        fn output(&self, x: &[f64], _u: &[f64]) -> Vec<f64> {
            vec![x[0]]
        }
        fn hold_input(&self, x: &[f64]) -> Option<Vec<f64>> {
            (x[0] == x[1]).then(|| vec![x[1]])
        }
    }

    struct Feedthrough;
    impl Plant for Feedthrough {
        fn name(&self) -> &str {
            "feedthrough"
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn io_dim(&self) -> usize {
            1
        }
        fn step(&self, x: &[f64], _u: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![0.5 * x[0]])
        }
        fn output(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
            vec![x[0] + u[0]]
        }
        fn hold_input(&self, _x: &[f64]) -> Option<Vec<f64>> {
            None
        }
    }

    #[test]
    fn chain_has_relative_degree_two() {
        assert_eq!(probe_relative_degrees(&Chain, PROBE_MAGNITUDE, 5).unwrap(), vec![2]);
        assert!(check_origin_equilibrium(&Chain).is_ok());
    }

    #[test]
    fn feedthrough_is_degenerate() {
        assert_eq!(
            probe_relative_degrees(&Feedthrough, PROBE_MAGNITUDE, 5),
            Err(Error::DegenerateRelativeDegree { output: 0 })
        );
    }

    #[test]
    fn brunovsky_blocks() {
        let s = BrunovskyStructure::new(vec![2, 1]).unwrap();
        assert_eq!(s.n(), 3);
        assert_eq!(s.d_max(), 2);
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.a(), a);
        assert_eq!(s.b(), DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
        assert_eq!(s.c(), DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]));
        assert!(s.is_controllable());
        assert!(BrunovskyStructure::new(vec![2, 0]).is_err());
    }

    #[test]
    fn xi_sequence_small() {
        let s = BrunovskyStructure::new(vec![2]).unwrap();
        let xi = build_xi_sequence(&[vec![1.0, 2.0, 3.0]], &s, 1).unwrap();
        assert_eq!(xi.row(0), vec![1.0, 2.0]);
        assert_eq!(xi.row(1), vec![2.0, 3.0]);
        assert!(matches!(
            build_xi_sequence(&[vec![1.0, 2.0]], &s, 1),
            Err(Error::InsufficientSamples { channel: 0, needed: 3, got: 2 })
        ));
        let zero = build_xi_sequence(&[vec![0.0; 5]], &s, 3).unwrap();
        assert!(zero.matrix().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_is_bounded_and_zero_bound_is_exact() {
        let mut s = NoiseModel::uniform(0.01, 3).unwrap().sampler();
        for _ in 0..1000 {
            assert!(s.sample(2).iter().all(|v| v.abs() <= 0.01));
        }
        let mut z = NoiseModel::uniform(0.0, 3).unwrap().sampler();
        assert_eq!(z.sample(3), vec![0.0; 3]);
    }
}
