use super::*;
use alloc::vec;

/// `min |z - target|^2`, optional linear equality `sum z = s`.
struct Quad {
    target: Vec<f64>,
    sum: Option<f64>,
    residual_form: bool,
}

impl NlpProblem for Quad {
    fn dim(&self) -> usize {
        self.target.len()
    }
    fn objective(&self, z: &[f64]) -> Result<f64> {
        Ok(z.iter().zip(&self.target).map(|(a, b)| (a - b) * (a - b)).sum())
    }
    fn gradient(&self, z: &[f64], g: &mut [f64]) -> Result<()> {
        for i in 0..z.len() {
            g[i] = 2.0 * (z[i] - self.target[i]);
        }
        Ok(())
    }
    fn n_eq(&self) -> usize {
        self.sum.is_some() as usize
    }
    fn n_linear_eq(&self) -> usize {
        self.n_eq()
    }
    fn eq_values(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        if let Some(s) = self.sum {
            out[0] = z.iter().sum::<f64>() - s;
        }
        Ok(())
    }
    fn eq_jacobian(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_element(self.n_eq(), z.len(), 1.0))
    }
    fn residuals(&self, z: &[f64]) -> Option<Result<(DVector<f64>, DMatrix<f64>)>> {
        if !self.residual_form {
            return None;
        }
        let r = DVector::from_iterator(z.len(), z.iter().zip(&self.target).map(|(a, b)| a - b));
        Some(Ok((r, DMatrix::identity(z.len(), z.len()))))
    }
    fn has_residuals(&self) -> bool {
        self.residual_form
    }
}

#[test]
fn unconstrained_quadratic_returns_target() {
    for rf in [false, true] {
        let p = Quad { target: vec![1.0, -2.0, 3.5], sum: None, residual_form: rf };
        let rep = solve(&p, &[0.0; 3], &SolverOptions::default()).unwrap();
        assert!(rep.converged());
        for (a, b) in rep.solution.iter().zip(&p.target) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}

#[test]
fn symmetric_projection() {
    for rf in [false, true] {
        let p = Quad { target: vec![0.0, 0.0], sum: Some(1.0), residual_form: rf };
        let rep = solve(&p, &[0.0, 0.0], &SolverOptions::default()).unwrap();
        assert!(rep.converged(), "{rep:?}");
        assert!((rep.solution[0] - 0.5).abs() < 1e-6 && (rep.solution[1] - 0.5).abs() < 1e-6);
        assert!(rep.eq_violation <= 1e-7);
    }
}

struct Rosenbrock {
    residual_form: bool,
}

impl NlpProblem for Rosenbrock {
    fn dim(&self) -> usize {
        2
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-2.0, -2.0], vec![2.0, 2.0])
    }
    fn objective(&self, z: &[f64]) -> Result<f64> {
        Ok((1.0 - z[0]).powi(2) + 100.0 * (z[1] - z[0] * z[0]).powi(2))
    }
    fn gradient(&self, z: &[f64], g: &mut [f64]) -> Result<()> {
        g[0] = -2.0 * (1.0 - z[0]) - 400.0 * z[0] * (z[1] - z[0] * z[0]);
        g[1] = 200.0 * (z[1] - z[0] * z[0]);
        Ok(())
    }
    fn residuals(&self, z: &[f64]) -> Option<Result<(DVector<f64>, DMatrix<f64>)>> {
        if !self.residual_form {
            return None;
        }
        let r = DVector::from_vec(vec![1.0 - z[0], 10.0 * (z[1] - z[0] * z[0])]);
        let j = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, -20.0 * z[0], 10.0]);
        Some(Ok((r, j)))
    }
    fn has_residuals(&self) -> bool {
        self.residual_form
    }
}

#[test]
fn rosenbrock_in_box() {
    // grid-search oracle on [-2, 2]^2
    let p = Rosenbrock { residual_form: false };
    let mut best = (f64::INFINITY, 0.0, 0.0);
    let steps = 400;
    for i in 0..=steps {
        for j in 0..=steps {
            let z = [-2.0 + 4.0 * i as f64 / steps as f64, -2.0 + 4.0 * j as f64 / steps as f64];
            let f = p.objective(&z).unwrap();
            if f < best.0 {
                best = (f, z[0], z[1]);
            }
        }
    }
    assert!((best.1 - 1.0).abs() < 0.02 && (best.2 - 1.0).abs() < 0.02);
    for rf in [false, true] {
        let opts = SolverOptions { max_inner: 2000, ..Default::default() };
        let rep = solve(&Rosenbrock { residual_form: rf }, &[-1.2, 1.0], &opts).unwrap();
        assert!((rep.solution[0] - 1.0).abs() < 1e-5 && (rep.solution[1] - 1.0).abs() < 1e-5, "{rep:?}");
        assert!(rep.objective <= best.0 + 1e-12);
    }
}

/// Convex QP `min 1/2 z'Pz + q'z` s.t. `Az = b`, `z >= lb`.
struct Qp {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    lb: Vec<f64>,
}

impl NlpProblem for Qp {
    fn dim(&self) -> usize {
        self.q.len()
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lb.clone(), vec![f64::INFINITY; self.dim()])
    }
    fn objective(&self, z: &[f64]) -> Result<f64> {
        let z = DVector::from_column_slice(z);
        Ok(0.5 * z.dot(&(&self.p * &z)) + self.q.dot(&z))
    }
    fn gradient(&self, z: &[f64], g: &mut [f64]) -> Result<()> {
        let v = &self.p * DVector::from_column_slice(z) + &self.q;
        g.copy_from_slice(v.as_slice());
        Ok(())
    }
    fn n_eq(&self) -> usize {
        self.b.len()
    }
    fn eq_values(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        let v = &self.a * DVector::from_column_slice(z) - &self.b;
        out.copy_from_slice(v.as_slice());
        Ok(())
    }
    fn eq_jacobian(&self, _z: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.a.clone())
    }
}

#[test]
fn convex_qp_matches_kkt_solve() {
    // bounds inactive at the optimum, so the KKT system gives the oracle
    let p = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
    let q = DVector::from_vec(vec![-1.0, 2.0, 0.5]);
    let a = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
    let b = DVector::from_vec(vec![1.0]);
    let mut kkt = DMatrix::zeros(4, 4);
    kkt.view_mut((0, 0), (3, 3)).copy_from(&p);
    kkt.view_mut((0, 3), (3, 1)).copy_from(&a.transpose());
    kkt.view_mut((3, 0), (1, 3)).copy_from(&a);
    let rhs = DVector::from_vec(vec![1.0, -2.0, -0.5, 1.0]);
    let sol = kkt.lu().solve(&rhs).unwrap();
    let qp = Qp { p, q, a, b, lb: vec![-10.0; 3] };
    let rep = solve(&qp, &[0.0; 3], &SolverOptions::default()).unwrap();
    assert!(rep.converged(), "{rep:?}");
    for i in 0..3 {
        assert!((rep.solution[i] - sol[i]).abs() < 1e-6, "{} vs {}", rep.solution[i], sol[i]);
    }
}

#[test]
fn deterministic_reports() {
    let p = Rosenbrock { residual_form: false };
    let a = solve(&p, &[-1.2, 1.0], &SolverOptions::default()).unwrap();
    let b = solve(&p, &[-1.2, 1.0], &SolverOptions::default()).unwrap();
    assert_eq!(a, b);
}

struct Contradiction;

impl NlpProblem for Contradiction {
    fn dim(&self) -> usize {
        1
    }
    fn objective(&self, z: &[f64]) -> Result<f64> {
        Ok(z[0] * z[0])
    }
    fn gradient(&self, z: &[f64], g: &mut [f64]) -> Result<()> {
        g[0] = 2.0 * z[0];
        Ok(())
    }
    fn n_eq(&self) -> usize {
        2
    }
    fn eq_values(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        out[0] = z[0] - 1.0;
        out[1] = z[0] - 2.0;
        Ok(())
    }
    fn eq_jacobian(&self, _z: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_element(2, 1, 1.0))
    }
}

#[test]
fn contradictory_constraints_are_reported_infeasible() {
    let rep = solve(&Contradiction, &[0.0], &SolverOptions::default()).unwrap();
    assert_eq!(rep.status, SolverStatus::InfeasibleDetected);
}

#[test]
fn inequality_and_bounds() {
    // min (z0-2)^2 + (z1-2)^2 s.t. z0 + z1 <= 2, z1 <= 0.5
    struct P;
    impl NlpProblem for P {
        fn dim(&self) -> usize {
            2
        }
        fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![f64::NEG_INFINITY; 2], vec![f64::INFINITY, 0.5])
        }
        fn objective(&self, z: &[f64]) -> Result<f64> {
            Ok((z[0] - 2.0).powi(2) + (z[1] - 2.0).powi(2))
        }
        fn gradient(&self, z: &[f64], g: &mut [f64]) -> Result<()> {
            g[0] = 2.0 * (z[0] - 2.0);
            g[1] = 2.0 * (z[1] - 2.0);
            Ok(())
        }
        fn n_ineq(&self) -> usize {
            1
        }
        fn ineq_values(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
            out[0] = z[0] + z[1] - 2.0;
            Ok(())
        }
        fn ineq_jacobian(&self, _z: &[f64]) -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_element(1, 2, 1.0))
        }
    }
    let rep = solve(&P, &[0.0, 0.0], &SolverOptions::default()).unwrap();
    assert!(rep.converged(), "{rep:?}");
    assert!((rep.solution[0] - 1.5).abs() < 1e-6 && (rep.solution[1] - 0.5).abs() < 1e-9);
}

#[test]
fn derivative_check_flags_wrong_gradient() {
    struct Bad;
    impl NlpProblem for Bad {
        fn dim(&self) -> usize {
            1
        }
        fn objective(&self, z: &[f64]) -> Result<f64> {
            Ok(z[0] * z[0])
        }
        fn gradient(&self, z: &[f64], g: &mut [f64]) -> Result<()> {
            g[0] = 3.0 * z[0];
            Ok(())
        }
    }
    assert!(check_derivatives(&Bad, &[1.0], 1e-6).unwrap().gradient > 0.1);
    let q = Quad { target: vec![1.0, 2.0], sum: Some(1.0), residual_form: true };
    assert!(check_derivatives(&q, &[0.3, -0.2], 1e-6).unwrap().max() < 1e-6);
}

#[test]
fn warm_start_shift_basics() {
    let layout = ShiftLayout {
        dim: 7,
        blocks: vec![ShiftBlock { offset: 0, steps: 3, width: 2, pad: vec![9.0, 8.0] }],
        zeroed: vec![6..7],
    };
    let prev = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
    assert_eq!(warm_start_shift(&prev, &layout, 0, None).unwrap(), prev.to_vec());
    assert_eq!(
        warm_start_shift(&prev, &layout, 1, None).unwrap(),
        vec![3.0, 4.0, 5.0, 6.0, 9.0, 8.0, 0.0]
    );
    let zero_layout = ShiftLayout {
        dim: 4,
        blocks: vec![ShiftBlock { offset: 0, steps: 2, width: 2, pad: vec![0.0, 0.0] }],
        zeroed: vec![],
    };
    assert_eq!(warm_start_shift(&[0.0; 4], &zero_layout, 1, None).unwrap(), vec![0.0; 4]);
    assert!(warm_start_shift(&[0.0; 3], &layout, 1, None).is_err());
}
