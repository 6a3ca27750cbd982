mod common;

use common::*;
use ddnpc_core::basis::{estimate_certificate, CertificateOptions, GridSpec, InputDictionary, OmegaBox};
use ddnpc_core::behavior::*;
use ddnpc_core::error::Error;
use ddnpc_core::plant::toys::ScalarFlat;
use ddnpc_core::plant::{collect_offline_data, InputPolicy, NoiseModel};
use ddnpc_core::solver::SolverOptions;
use ddnpc_core::trajlib::Sequence;
use rand::Rng;

const L: usize = 10;

fn opts() -> SolverOptions {
    SolverOptions { max_inner: 500, ..Default::default() }
}

#[test]
fn exact_basis_simulation_matches_plant() {
    let data = flat_data(120, 1.0, 0.0, 3);
    let dict = flat_dict();
    let blocks = DataBlocks::new(&dict, &data, L, false).unwrap();
    assert!(blocks.pe.persistently_exciting);
    let plant = ScalarFlat::default();
    let mut rng = rng(11);
    for _ in 0..10 {
        let x0 = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        let u = random_inputs(&mut rng, L, 1, 0.8);
        let truth = rollout(&plant, &x0, &u, L + 2);
        let sim = simulate_data_driven(&blocks, &dict, &Sequence::new(to_matrix(&u)).unwrap(), &x0, DEFAULT_SIM_LAMBDA_ALPHA, &BoundConstants::exact(), &opts()).unwrap();
        let err = sim.outputs[0].iter().zip(&truth[0]).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
        assert!(err < 1e-6, "max error {err}");
        assert_eq!(sim.bounds[0][0], 0.0);
        assert_eq!(sim.bounds[0][1], 0.0);
    }
}

#[test]
fn simulation_reproduces_recorded_window() {
    let data = flat_data(120, 1.0, 0.0, 5);
    let dict = flat_dict();
    let blocks = DataBlocks::new(&dict, &data, L, false).unwrap();
    let start = 37;
    let u = data.inputs.window(start, start + L - 1).unwrap();
    let xi0 = data.xi.row(start);
    let sim = simulate_data_driven(&blocks, &dict, &u, &xi0, DEFAULT_SIM_LAMBDA_ALPHA, &BoundConstants::exact(), &opts()).unwrap();
    let rec = &data.clean_outputs()[0][start..start + L + 2];
    for (p, q) in sim.outputs[0].iter().zip(rec) {
        assert!((p - q).abs() < 1e-7);
    }
}

#[test]
fn zero_input_from_origin_gives_zero_output() {
    let data = flat_data(120, 1.0, 0.0, 6);
    let dict = flat_dict();
    let blocks = DataBlocks::new(&dict, &data, L, false).unwrap();
    let u = Sequence::from_scalars(&[0.0; L]).unwrap();
    let sim = simulate_data_driven(&blocks, &dict, &u, &[0.0, 0.0], DEFAULT_SIM_LAMBDA_ALPHA, &BoundConstants::exact(), &opts()).unwrap();
    assert!(sim.outputs[0].iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn representation_membership() {
    let data = flat_data(120, 1.0, 0.0, 8);
    let dict = flat_dict();
    let blocks = DataBlocks::new(&dict, &data, L, false).unwrap();
    let u = data.inputs.window(20, 20 + L - 1).unwrap();
    let y = vec![data.clean_outputs()[0][20..20 + L + 2].to_vec()];
    let ok = check_representation(&blocks, &dict, &u, &y).unwrap();
    assert!(ok.relative_residual < 1e-8);
    let mut rng = rng(1);
    for _ in 0..100 {
        let u = Sequence::new(to_matrix(&random_inputs(&mut rng, L, 1, 1.0))).unwrap();
        let y = vec![(0..L + 2).map(|_| rng.random_range(-1.0..1.0)).collect()];
        let bad = check_representation(&blocks, &dict, &u, &y).unwrap();
        assert!(bad.residual > 1e-3);
    }
    let short = vec![vec![0.0; L]];
    assert!(matches!(check_representation(&blocks, &dict, &u, &short), Err(Error::DimensionMismatch(_))));
}

#[test]
fn matching_recovers_inputs_and_tracks() {
    let data = flat_data(120, 1.0, 0.0, 9);
    let dict = flat_dict();
    let blocks = DataBlocks::new(&dict, &data, L, false).unwrap();
    let start = 50;
    let y = vec![data.clean_outputs()[0][start..start + L + 2].to_vec()];
    let xi0 = data.xi.row(start);
    let res = match_output_data_driven(&blocks, &dict, &y, &xi0, DEFAULT_SIM_LAMBDA_ALPHA, &BoundConstants::exact(), &opts()).unwrap();
    for k in 0..L {
        assert!((res.inputs.matrix()[(k, 0)] - data.inputs.matrix()[(start + k, 0)]).abs() < 1e-6);
    }

    // smooth reachable reference generated by a smooth input
    let plant = ScalarFlat::default();
    let u_ref: Vec<Vec<f64>> = (0..L).map(|k| vec![0.4 * (0.3 * k as f64).sin()]).collect();
    let x0 = [0.1, -0.05];
    let reference = rollout(&plant, &x0, &u_ref, L + 2);
    let res = match_output_data_driven(&blocks, &dict, &reference, &x0, DEFAULT_SIM_LAMBDA_ALPHA, &BoundConstants::exact(), &opts()).unwrap();
    let applied: Vec<Vec<f64>> = (0..L).map(|k| res.inputs.row(k)).collect();
    let out = rollout(&plant, &x0, &applied, L + 2);
    let err = out[0].iter().zip(&reference[0]).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
    assert!(err < 1e-6, "{err}");

    let mut wrong = reference.clone();
    wrong[0][0] += 0.5;
    assert!(matches!(
        match_output_data_driven(&blocks, &dict, &wrong, &x0, DEFAULT_SIM_LAMBDA_ALPHA, &BoundConstants::exact(), &opts()),
        Err(Error::InfeasibleInitialCondition { .. })
    ));
    let no_u = PerturbedSine { c: 0.0 };
    struct NoInput<'a>(&'a PerturbedSine);
    impl ddnpc_core::basis::BasisDictionary for NoInput<'_> {
        fn name(&self) -> &str { "no_input" }
        fn input_dim(&self) -> usize { 1 }
        fn state_dim(&self) -> usize { 2 }
        fn len(&self) -> usize { 2 }
        fn input_first(&self) -> bool { false }
        fn eval(&self, u: &[f64], xi: &[f64], out: &mut [f64]) -> ddnpc_core::error::Result<()> { self.0.eval(u, xi, out) }
        fn jacobian(&self, u: &[f64], xi: &[f64], du: &mut nalgebra::DMatrix<f64>, dxi: &mut nalgebra::DMatrix<f64>) -> ddnpc_core::error::Result<()> { self.0.jacobian(u, xi, du, dxi) }
    }
    assert_eq!(
        match_output_data_driven(&blocks, &NoInput(&no_u), &reference, &x0, DEFAULT_SIM_LAMBDA_ALPHA, &BoundConstants::exact(), &opts()).unwrap_err(),
        Error::DictionaryLacksInput
    );
}

struct ZeroPolicy;

impl InputPolicy for ZeroPolicy {
    fn input(&mut self, _k: usize, _x: &[f64]) -> Vec<f64> {
        vec![0.0]
    }
}

#[test]
fn infeasible_initial_condition_is_reported() {
    // data recorded at rest never leave Xi = 0
    let data = collect_offline_data(&ScalarFlat::default(), &mut ZeroPolicy, &[0.0, 0.0], 60, &NoiseModel::none(), None, false).unwrap();
    let dict = flat_dict();
    let blocks = DataBlocks::new(&dict, &data, L, false).unwrap();
    assert!(!blocks.pe.persistently_exciting);
    let u = Sequence::from_scalars(&[0.0; L]).unwrap();
    let err = simulate_data_driven(&blocks, &dict, &u, &[0.5, -0.5], 1.0, &BoundConstants::exact(), &opts());
    assert!(matches!(err, Err(Error::InfeasibleInitialCondition { .. })), "{err:?}");
}

fn omega() -> OmegaBox {
    OmegaBox::uniform(1, 2, (-1.0, 1.0), (-1.6, 1.6)).unwrap()
}

#[test]
fn noisy_inexact_bound_soundness() {
    let plant = ScalarFlat::default();
    let dict = InputDictionary::new(1, 2);
    let mut violations = 0;
    let mut count = 0;
    for (w_idx, w_star) in [0.0, 0.002, 0.01].into_iter().enumerate() {
        let cert_opts = CertificateOptions { grid: GridSpec::Tensor { points_per_axis: 21 }, noise_bound: w_star, ..Default::default() };
        let cert = estimate_certificate(&dict, &plant, &omega(), &cert_opts).unwrap();
        assert!(cert.epsilon_star > 1e-3);
        let constants = BoundConstants {
            epsilon_star: cert.epsilon_star,
            w_star,
            k_xi: cert.k_xi,
            k_w: cert.k_w_or_zero(),
            g_norm: cert.g_inf_bound,
        };
        for seed in 0..7u64 {
            let data = flat_data(150, 0.6, w_star, 100 * w_idx as u64 + seed);
            let blocks = DataBlocks::new(&dict, &data, L, true).unwrap();
            let mut rng = rng(seed + 77);
            for _ in 0..10 {
                let x0 = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
                let u = random_inputs(&mut rng, L, 1, 0.5);
                let truth = rollout(&plant, &x0, &u, L + 2);
                let sim = simulate_data_driven(&blocks, &dict, &Sequence::new(to_matrix(&u)).unwrap(), &x0, DEFAULT_SIM_LAMBDA_ALPHA, &constants, &opts()).unwrap();
                for j in 0..L + 2 {
                    count += 1;
                    if (sim.outputs[0][j] - truth[0][j]).abs() > sim.bounds[0][j] + 1e-9 {
                        violations += 1;
                    }
                }
                assert!((sim.outputs[0][0] - x0[0]).abs() < 1e-9);
            }
        }
    }
    assert!(count >= 200 * 12);
    assert_eq!(violations, 0);
}

#[test]
fn error_vanishes_with_epsilon() {
    let plant = ScalarFlat::default();
    let data = flat_data(150, 0.6, 0.0, 21);
    let mut rng = rng(5);
    let cases: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..15)
        .map(|_| (vec![rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)], random_inputs(&mut rng, L, 1, 0.5)))
        .collect();
    let mut last = f64::INFINITY;
    let mut eps_seen = Vec::new();
    for c in [0.3, 0.03, 0.003, 0.0] {
        let dict = PerturbedSine { c };
        let cert_opts = CertificateOptions { grid: GridSpec::Tensor { points_per_axis: 15 }, ..Default::default() };
        let cert = estimate_certificate(&dict, &plant, &omega(), &cert_opts).unwrap();
        eps_seen.push(cert.epsilon_star);
        let constants = BoundConstants { epsilon_star: cert.epsilon_star, w_star: 0.0, k_xi: cert.k_xi, k_w: 0.0, g_norm: cert.g_inf_bound };
        let blocks = DataBlocks::new(&dict, &data, L, false).unwrap();
        let mut worst = 0.0f64;
        for (x0, u) in &cases {
            let truth = rollout(&plant, x0, u, L + 2);
            let sim = simulate_data_driven(&blocks, &dict, &Sequence::new(to_matrix(u)).unwrap(), x0, DEFAULT_SIM_LAMBDA_ALPHA, &constants, &opts()).unwrap();
            for j in 0..L + 2 {
                worst = worst.max((sim.outputs[0][j] - truth[0][j]).abs());
            }
        }
        assert!(worst <= last, "error {worst} after {last} at eps {}", cert.epsilon_star);
        last = worst;
    }
    assert!(last < 1e-6);
    assert!(eps_seen.windows(2).all(|w| w[1] < w[0]), "{eps_seen:?}");
}
