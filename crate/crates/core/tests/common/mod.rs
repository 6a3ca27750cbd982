#![allow(dead_code)]

use ddnpc_core::basis::{BasisDictionary, TrigDictionary};
use ddnpc_core::error::Result;
use ddnpc_core::plant::toys::ScalarFlat;
use ddnpc_core::plant::{collect_offline_data, FeedbackLinearizable, NoiseModel, Plant, Trajectory, UniformInputPolicy};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Offline data of the scalar flat toy under uniform inputs in `[-amp, amp]`.
pub fn flat_data(n: usize, amp: f64, w_star: f64, seed: u64) -> Trajectory {
    let plant = ScalarFlat::default();
    let mut policy = UniformInputPolicy::new(vec![-amp], vec![amp], seed);
    let noise = if w_star > 0.0 { NoiseModel::uniform(w_star, seed + 1).unwrap() } else { NoiseModel::none() };
    collect_offline_data(&plant, &mut policy, &[0.0, 0.0], n, &noise, None, false).unwrap()
}

pub fn flat_dict() -> TrigDictionary {
    TrigDictionary::new(ScalarFlat::default().structure(), false)
}

/// Outputs `y_0..y_{len-1}` of `plant` from `x0` under `inputs` followed by zeros.
pub fn rollout(plant: &dyn Plant, x0: &[f64], inputs: &[Vec<f64>], len: usize) -> Vec<Vec<f64>> {
    let m = plant.io_dim();
    let mut out = vec![Vec::with_capacity(len); m];
    let mut x = x0.to_vec();
    for k in 0..len {
        let u = inputs.get(k).cloned().unwrap_or_else(|| vec![0.0; m]);
        let y = plant.output(&x, &u);
        for i in 0..m {
            out[i].push(y[i]);
        }
        x = plant.step(&x, &u).unwrap();
    }
    out
}

pub fn random_inputs(rng: &mut ChaCha8Rng, len: usize, m: usize, amp: f64) -> Vec<Vec<f64>> {
    (0..len).map(|_| (0..m).map(|_| rng.random_range(-amp..amp)).collect()).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

/// `(u, sin(xi_1) + c xi_1^3)`: a dictionary whose approximation error scales with `c`.
pub struct PerturbedSine {
    pub c: f64,
}

impl BasisDictionary for PerturbedSine {
    fn name(&self) -> &str {
        "perturbed_sine"
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn len(&self) -> usize {
        2
    }
    fn input_first(&self) -> bool {
        true
    }
    fn eval(&self, u: &[f64], xi: &[f64], out: &mut [f64]) -> Result<()> {
        out[0] = u[0];
        out[1] = xi[0].sin() + self.c * xi[0].powi(3);
        Ok(())
    }
    fn jacobian(&self, _u: &[f64], xi: &[f64], du: &mut DMatrix<f64>, dxi: &mut DMatrix<f64>) -> Result<()> {
        du.fill(0.0);
        dxi.fill(0.0);
        du[(0, 0)] = 1.0;
        dxi[(1, 0)] = xi[0].cos() + 3.0 * self.c * xi[0] * xi[0];
        Ok(())
    }
}

/// Random controllable `(A, B, C)` with `|A|_inf = 0.9`, so trajectories stay bounded.
pub struct RandomLti {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl RandomLti {
    pub fn draw(rng: &mut ChaCha8Rng, n: usize, m: usize, p: usize) -> Self {
        loop {
            let mut a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let norm = (0..n).map(|i| a.row(i).iter().map(|v: &f64| v.abs()).sum::<f64>()).fold(0.0, f64::max);
            a *= 0.9 / norm;
            let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
            let c = DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0));
            // Kalman rank test by SVD, kept independent of the library helpers
            let mut ctrb = DMatrix::zeros(n, n * m);
            let mut blk = b.clone();
            for k in 0..n {
                ctrb.view_mut((0, k * m), (n, m)).copy_from(&blk);
                blk = &a * blk;
            }
            let sv = ctrb.svd(false, false).singular_values;
            if sv.min() > 1e-3 * sv.max() {
                return Self { a, b, c };
            }
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Rows `(u_k, y_k)` for `k = 0..inputs.len()-1`.
    pub fn run(&self, x0: &[f64], inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut x = nalgebra::DVector::from_column_slice(x0);
        inputs
            .iter()
            .map(|u| {
                let uu = nalgebra::DVector::from_column_slice(u);
                let y = &self.c * &x;
                x = &self.a * &x + &self.b * uu;
                u.iter().copied().chain(y.iter().copied()).collect()
            })
            .collect()
    }

    /// Relative residual of the best fit `y = O x0 + T u` to a stacked window of `(u, y)` rows.
    pub fn trajectory_residual(&self, w: &[f64], len: usize) -> f64 {
        let (n, m, p) = (self.n(), self.b.ncols(), self.c.nrows());
        let eta = m + p;
        // unknowns x0; y_k - sum_j C A^{k-1-j} B u_j = C A^k x0
        let mut lhs = DMatrix::zeros(p * len, n);
        let mut rhs = nalgebra::DVector::zeros(p * len);
        let mut ak = DMatrix::identity(n, n);
        for k in 0..len {
            lhs.view_mut((k * p, 0), (p, n)).copy_from(&(&self.c * &ak));
            let mut forced = nalgebra::DVector::zeros(p);
            let mut pow = DMatrix::identity(n, n);
            for j in (0..k).rev() {
                let u = nalgebra::DVector::from_column_slice(&w[j * eta..j * eta + m]);
                forced += &self.c * &pow * &self.b * u;
                pow = &self.a * pow;
            }
            for i in 0..p {
                rhs[k * p + i] = w[k * eta + m + i] - forced[i];
            }
            ak = &self.a * ak;
        }
        let x0 = lhs.clone().svd(true, true).solve(&rhs, 1e-12).unwrap();
        (&lhs * x0 - &rhs).norm() / nalgebra::DVector::from_column_slice(w).norm().max(1e-300)
    }
}

/// Distance of `v` from the column space of `h`, relative to `|v|`, by projection onto the
/// leading left singular vectors.
pub fn span_residual(h: &DMatrix<f64>, v: &nalgebra::DVector<f64>) -> f64 {
    let svd = h.clone().svd(true, false);
    let sv = &svd.singular_values;
    let rank = sv.iter().filter(|s| **s > 1e-10 * sv.max()).count();
    let basis = svd.u.unwrap().columns(0, rank).into_owned();
    let proj = &basis * (basis.transpose() * v);
    (v - proj).norm() / v.norm().max(1e-300)
}

/// Outcome of one finite-dimensional LTI membership instance.
pub struct MembershipCase {
    pub persistently_exciting: bool,
    /// Fresh system trajectory against the data span.
    pub inside: f64,
    /// Worst random data-span vector against the system equations.
    pub reverse: f64,
    /// Random non-trajectory against the data span.
    pub outside: f64,
}

/// Data of length `N = (m+1)(L+n) + 20` from a random controllable system, windows of length `L = n + 1`.
pub fn lti_membership_case(seed: u64) -> MembershipCase {
    use ddnpc_core::trajlib::{build_hankel, is_persistently_exciting, Sequence, DEFAULT_RANK_TOL};
    let mut rng = rng(seed);
    let n = rng.random_range(1..=4usize);
    let m = rng.random_range(1..=2usize);
    let p = rng.random_range(1..=2usize);
    let sys = RandomLti::draw(&mut rng, n, m, p);
    let l = n + 1;
    let len = (m + 1) * (l + n) + 20;
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let u = random_inputs(&mut rng, len, m, 1.0);
    let w = Sequence::from_rows(&sys.run(&x0, &u)).unwrap();
    let pe = is_persistently_exciting(&Sequence::from_rows(&u).unwrap(), l + n, DEFAULT_RANK_TOL).unwrap();
    let h = build_hankel(&w, l).unwrap().into_matrix();

    let x1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fresh = Sequence::from_rows(&sys.run(&x1, &random_inputs(&mut rng, l, m, 1.0))).unwrap().stacked();
    let inside = span_residual(&h, &fresh);

    let mut reverse = 0.0f64;
    for _ in 0..5 {
        let alpha = nalgebra::DVector::from_fn(h.ncols(), |_, _| rng.random_range(-1.0..1.0));
        let v = &h * alpha;
        reverse = reverse.max(sys.trajectory_residual(v.as_slice(), l));
    }
    let junk = nalgebra::DVector::from_fn(h.nrows(), |_, _| rng.random_range(-1.0..1.0));
    let outside = span_residual(&h, &junk);
    MembershipCase { persistently_exciting: pe.persistently_exciting, inside, reverse, outside }
}
