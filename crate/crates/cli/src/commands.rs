use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ddnpc_core::basis::{estimate_certificate, evaluate_basis_sequence, ApproximationCertificate, CertificateOptions};
use ddnpc_core::behavior::{match_output_data_driven, simulate_data_driven, BoundConstants, DataBlocks};
use ddnpc_core::npc::{
    evaluate_runtime_bounds, run_closed_loop, BoundSample, ClosedLoopConfig, ClosedLoopLog, OcpSpec, SlackConstants,
    StepKind,
};
use ddnpc_core::plant::{collect_offline_data, FeedbackLinearizable, NoiseModel, Trajectory};
use ddnpc_core::trajlib::{is_persistently_exciting, PeReport, Sequence, DEFAULT_RANK_TOL};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, PlantName};
use crate::io::{fmt, read_trajectory, write_json, write_table, write_trajectory};
use crate::registry::{self, streams};
use crate::Failure;

/// Absolute slack when counting bound violations, covering the solver's feasibility tolerance.
pub const BOUND_TOLERANCE: f64 = 1e-6;

pub struct Context {
    pub out_dir: PathBuf,
    pub strict: bool,
    pub config_path: PathBuf,
}

fn noise_model(bound: f64, seed: u64) -> Result<NoiseModel, Failure> {
    if bound > 0.0 {
        Ok(NoiseModel::uniform(bound, seed)?)
    } else if bound == 0.0 {
        Ok(NoiseModel::none())
    } else {
        Err(Failure::config("noise bounds must be non-negative"))
    }
}

/// `(r + 1)(L + d_max + n) - 1`, the data length below which excitation of the
/// required order is impossible.
pub fn min_data_length(r: usize, horizon: usize, d_max: usize, n: usize) -> usize {
    (r + 1) * (horizon + d_max + n) - 1
}

fn pe_line(report: &PeReport, order: usize) -> String {
    format!(
        "persistency of excitation (order {order}): rank {}/{}, sigma_min {:.6e} -> {}",
        report.rank,
        report.required_rank,
        report.sigma_min,
        if report.persistently_exciting { "holds" } else { "FAILS" }
    )
}

#[derive(Debug, Serialize)]
pub struct CollectReport {
    pub data: PathBuf,
    pub certificate: PathBuf,
    pub in_box: bool,
    pub first_violation: Option<usize>,
    pub pe: Option<PeReport>,
    pub warnings: Vec<String>,
}

pub fn collect(cfg: &ExperimentConfig, ctx: &Context) -> Result<CollectReport, Failure> {
    let plant = registry::build_plant(cfg)?;
    let dict = registry::build_dictionary(cfg, plant.as_ref())?;
    let omega = registry::omega(cfg)?;
    let mut policy = registry::build_policy(cfg, &omega)?;
    let noise = noise_model(cfg.data.noise_bound, registry::stream_seed(cfg.seed, streams::DATA_NOISE))?;
    let x0 = registry::data_x0(cfg, plant.as_ref());
    let data =
        collect_offline_data(plant.as_ref(), policy.as_mut(), &x0, cfg.data.length, &noise, Some(&omega), ctx.strict)?;
    let mut warnings = Vec::new();
    if let Some(k) = data.first_violation {
        warnings.push(format!("data left the operating box at step {k}"));
    }

    let data_path = cfg.data_path(&ctx.out_dir);
    let clean_path = data_path.with_file_name(format!(
        "{}_clean.csv",
        data_path.file_stem().and_then(|s| s.to_str()).unwrap_or("data")
    ));
    write_trajectory(&data_path, Some(&clean_path), &data)?;

    let options = CertificateOptions {
        grid: cfg.certificate.grid,
        noise_bound: cfg.data.noise_bound,
        seed: Some(cfg.seed),
        perturbation: (cfg.dictionary.perturbation > 0.0).then_some(cfg.dictionary.perturbation),
    };
    let cert = estimate_certificate(dict.as_ref(), plant.as_ref(), &omega, &options)?;
    let cert_path = cfg.certificate_path(&ctx.out_dir);
    write_json(&cert_path, &cert)?;
    println!("wrote {} ({} samples) and {}", data_path.display(), data.len(), cert_path.display());
    println!(
        "certificate: eps* = {:.6e}, K_Xi = {:.6e}, K_Psi = {:.6e}, |G|_inf = {:.6e}, model-free bound {:.6e}",
        cert.epsilon_star, cert.k_xi, cert.k_psi, cert.g_inf_norm, cert.g_inf_bound
    );

    let mut pe = None;
    if let Some(ocp) = &cfg.ocp {
        let s = plant.structure();
        let need = min_data_length(dict.len(), ocp.horizon, s.d_max(), s.n());
        if cfg.data.length < need {
            warnings.push(format!(
                "data length {} is below (r+1)(L+d_max+n)-1 = {need}; the excitation check cannot pass",
                cfg.data.length
            ));
        }
        let blocks = DataBlocks::new(dict.as_ref(), &data, ocp.horizon + s.d_max(), cfg.data.noise_bound > 0.0)?;
        println!("{}", pe_line(&blocks.pe, ocp.horizon + s.d_max() + s.n()));
        if ctx.strict && !blocks.pe.persistently_exciting {
            return Err(Failure::assumption("collected data are not persistently exciting"));
        }
        pe = Some(blocks.pe.clone());
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    Ok(CollectReport {
        data: data_path,
        certificate: cert_path,
        in_box: data.in_box,
        first_violation: data.first_violation,
        pe,
        warnings,
    })
}

fn require_file(path: &Path, what: &str, ctx: &Context) -> Result<(), Failure> {
    if path.exists() {
        return Ok(());
    }
    Err(Failure::config(format!(
        "{what} not found at {}; run `ddnpc collect --config {} --out-dir {}` first",
        path.display(),
        ctx.config_path.display(),
        ctx.out_dir.display()
    )))
}

fn load_certificate(path: &Path, cfg: &ExperimentConfig, dict_name: &str, plant: &str) -> Result<ApproximationCertificate, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    let cert: ApproximationCertificate = serde_json::from_str(&text).map_err(|e| Failure::io(path, e))?;
    if cert.plant != plant || cert.dictionary != dict_name {
        return Err(Failure::config(format!(
            "{} was estimated for plant {} with dictionary {}, not {plant} with {dict_name}",
            path.display(),
            cert.plant,
            cert.dictionary
        )));
    }
    let p = (cfg.dictionary.perturbation > 0.0).then_some(cfg.dictionary.perturbation);
    if cert.perturbation != p || cert.seed != Some(cfg.seed) || cert.noise_bound != cfg.data.noise_bound {
        return Err(Failure::config(format!(
            "{} does not match the configured seed, noise bound or perturbation; rerun `ddnpc collect`",
            path.display()
        )));
    }
    Ok(cert)
}

struct Loaded {
    plant: Box<dyn FeedbackLinearizable>,
    dict: Box<dyn ddnpc_core::basis::BasisDictionary>,
    data: Trajectory,
    cert: ApproximationCertificate,
}

fn load_inputs(cfg: &ExperimentConfig, ctx: &Context) -> Result<Loaded, Failure> {
    let data_path = cfg.data_path(&ctx.out_dir);
    let cert_path = cfg.certificate_path(&ctx.out_dir);
    require_file(&data_path, "data file", ctx)?;
    require_file(&cert_path, "certificate", ctx)?;
    let plant = registry::build_plant(cfg)?;
    let dict = registry::build_dictionary(cfg, plant.as_ref())?;
    let cert = load_certificate(&cert_path, cfg, dict.name(), plant.name())?;
    let data = read_trajectory(&data_path, plant.structure())?;
    Ok(Loaded { plant, dict, data, cert })
}

pub fn check_pe(cfg: &ExperimentConfig, ctx: &Context, data: Option<&Path>, order: Option<usize>) -> Result<(), Failure> {
    let path = data.map(Path::to_path_buf).unwrap_or_else(|| cfg.data_path(&ctx.out_dir));
    require_file(&path, "data file", ctx)?;
    let plant = registry::build_plant(cfg)?;
    let dict = registry::build_dictionary(cfg, plant.as_ref())?;
    let traj = read_trajectory(&path, plant.structure())?;
    let s = plant.structure();
    let order = match order {
        Some(o) => o,
        None => cfg.ocp()?.horizon + s.d_max() + s.n(),
    };
    if order == 0 {
        return Err(Failure::config("order must be positive"));
    }
    let n_steps = traj.len();
    let psi = evaluate_basis_sequence(dict.as_ref(), &traj.inputs, &traj.xi.window(0, n_steps - 1)?)?;
    let report = if order <= n_steps {
        is_persistently_exciting(&psi, order, DEFAULT_RANK_TOL)?
    } else {
        PeReport { persistently_exciting: false, rank: 0, required_rank: dict.len() * order, sigma_min: 0.0 }
    };
    println!("{}", pe_line(&report, order));
    if report.persistently_exciting {
        Ok(())
    } else {
        Err(Failure::assumption(format!("{} is not persistently exciting of order {order}", path.display())))
    }
}

fn bound_constants(cfg: &ExperimentConfig, cert: &ApproximationCertificate) -> BoundConstants {
    BoundConstants {
        epsilon_star: cert.epsilon_star * (1.0 + cfg.certificate.epsilon_inflation),
        w_star: cfg.data.noise_bound,
        k_xi: cert.k_xi,
        k_w: cert.k_w_or_zero(),
        g_norm: cert.g_inf_bound,
    }
}

/// Outputs of the true plant started from the state behind `xi0`.
fn plant_response(plant: &dyn FeedbackLinearizable, xi0: &[f64], inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, Failure> {
    let s = plant.structure();
    let m = s.m();
    let len = inputs.len() + s.d_max();
    let mut x = plant.state_from_xi(xi0)?;
    let zero = vec![0.0; m];
    let mut out = vec![Vec::new(); m];
    for k in 0..len {
        let u = inputs.get(k).unwrap_or(&zero);
        let y = plant.output(&x, u);
        for i in 0..m {
            if k < inputs.len() + s.degree(i) {
                out[i].push(y[i]);
            }
        }
        if k + 1 < len {
            x = plant.step(&x, u)?;
        }
    }
    Ok(out)
}

fn window(cfg: &Option<crate::config::WindowSection>, name: &str) -> Result<crate::config::WindowSection, Failure> {
    cfg.clone().ok_or_else(|| Failure::config(format!("missing [{name}] section")))
}

fn check_window(data: &Trajectory, start: usize, horizon: usize) -> Result<(), Failure> {
    if horizon == 0 || start + horizon > data.len() {
        return Err(Failure::config(format!(
            "window [{start}, {}] does not fit into {} data samples",
            start + horizon,
            data.len()
        )));
    }
    Ok(())
}

pub fn simulate(cfg: &ExperimentConfig, ctx: &Context) -> Result<(), Failure> {
    let win = window(&cfg.simulate, "simulate")?;
    let Loaded { plant, dict, data, cert } = load_inputs(cfg, ctx)?;
    let s = plant.structure().clone();
    let m = s.m();
    check_window(&data, win.start, win.horizon)?;
    let blocks = DataBlocks::new(dict.as_ref(), &data, win.horizon, true)?;
    let xi0 = data.xi.row(win.start);
    let inputs: Vec<Vec<f64>> = if win.random_inputs {
        let omega = registry::omega(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(registry::stream_seed(cfg.seed, streams::SIM_INPUTS));
        (0..win.horizon)
            .map(|_| (0..m).map(|j| rng.random_range(omega.u_lower[j]..=omega.u_upper[j])).collect())
            .collect()
    } else {
        (win.start..win.start + win.horizon).map(|k| data.inputs.row(k)).collect()
    };
    let u = Sequence::from_rows(&inputs)?;
    let res = simulate_data_driven(&blocks, dict.as_ref(), &u, &xi0, win.lambda_alpha, &bound_constants(cfg, &cert), &cfg.solver)?;
    let truth = plant_response(plant.as_ref(), &xi0, &inputs)?;

    let mut header = vec!["k".to_string()];
    header.extend((1..=m).map(|j| format!("u_{j}")));
    for prefix in ["y_hat", "y_plant", "error", "bound"] {
        header.extend((1..=m).map(|i| format!("{prefix}_{i}")));
    }
    let cell = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    let rows: Vec<Vec<String>> = (0..win.horizon + s.d_max())
        .map(|k| {
            let mut r = vec![k.to_string()];
            r.extend((0..m).map(|j| cell(inputs.get(k).map(|u| u[j]))));
            r.extend((0..m).map(|i| cell(res.outputs[i].get(k).copied())));
            r.extend((0..m).map(|i| cell(truth[i].get(k).copied())));
            r.extend((0..m).map(|i| cell(res.outputs[i].get(k).zip(truth[i].get(k)).map(|(a, b)| (a - b).abs()))));
            r.extend((0..m).map(|i| cell(res.bounds[i].get(k).copied())));
            r
        })
        .collect();
    let path = ctx.out_dir.join("simulate.csv");
    write_table(&path, &header, &rows)?;
    let max_err = (0..m)
        .flat_map(|i| res.outputs[i].iter().zip(&truth[i]).map(|(a, b)| (a - b).abs()))
        .fold(0.0f64, f64::max);
    println!("wrote {}: max |y_hat - y_plant| = {max_err:.3e}, residual {:.3e}", path.display(), res.residual_sq.sqrt());
    Ok(())
}

pub fn match_output(cfg: &ExperimentConfig, ctx: &Context) -> Result<(), Failure> {
    let win = window(&cfg.match_output, "match_output")?;
    let Loaded { plant, dict, data, cert } = load_inputs(cfg, ctx)?;
    let s = plant.structure().clone();
    let m = s.m();
    check_window(&data, win.start, win.horizon)?;
    if win.random_inputs {
        return Err(Failure::config("match_output.random_inputs is not supported"));
    }
    let blocks = DataBlocks::new(dict.as_ref(), &data, win.horizon, true)?;
    let xi0 = data.xi.row(win.start);
    let reference: Vec<Vec<f64>> = (0..m)
        .map(|i| data.noisy_outputs[i][win.start..win.start + win.horizon + s.degree(i)].to_vec())
        .collect();
    let res = match_output_data_driven(&blocks, dict.as_ref(), &reference, &xi0, win.lambda_alpha, &bound_constants(cfg, &cert), &cfg.solver)?;
    let u_hat: Vec<Vec<f64>> = (0..win.horizon).map(|k| res.inputs.row(k)).collect();
    let achieved = plant_response(plant.as_ref(), &xi0, &u_hat)?;

    let mut header = vec!["k".to_string()];
    for prefix in ["u_hat", "u_data"] {
        header.extend((1..=m).map(|j| format!("{prefix}_{j}")));
    }
    for prefix in ["y_ref", "y_plant", "error", "bound"] {
        header.extend((1..=m).map(|i| format!("{prefix}_{i}")));
    }
    let cell = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    let rows: Vec<Vec<String>> = (0..win.horizon + s.d_max())
        .map(|k| {
            let mut r = vec![k.to_string()];
            r.extend((0..m).map(|j| cell(u_hat.get(k).map(|u| u[j]))));
            r.extend((0..m).map(|j| cell((k < win.horizon).then(|| data.inputs.matrix()[(win.start + k, j)]))));
            r.extend((0..m).map(|i| cell(reference[i].get(k).copied())));
            r.extend((0..m).map(|i| cell(achieved[i].get(k).copied())));
            r.extend((0..m).map(|i| cell(reference[i].get(k).zip(achieved[i].get(k)).map(|(a, b)| (a - b).abs()))));
            r.extend((0..m).map(|i| cell(res.bounds[i].get(k).copied())));
            r
        })
        .collect();
    let path = ctx.out_dir.join("match_output.csv");
    write_table(&path, &header, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn matrix_or_identity(rows: &Option<Vec<Vec<f64>>>, m: usize, name: &str) -> Result<DMatrix<f64>, Failure> {
    match rows {
        None => Ok(DMatrix::identity(m, m)),
        Some(r) => {
            if r.len() != m || r.iter().any(|row| row.len() != m) {
                return Err(Failure::config(format!("ocp.{name} must be {m}x{m}")));
            }
            Ok(DMatrix::from_fn(m, m, |i, j| r[i][j]))
        }
    }
}

pub fn build_spec(cfg: &ExperimentConfig, plant: &dyn FeedbackLinearizable, cert: &ApproximationCertificate) -> Result<OcpSpec, Failure> {
    let o = cfg.ocp()?;
    let m = plant.structure().m();
    let u_s = match &o.u_s {
        Some(u) => u.clone(),
        None => registry::setpoint_input(plant, &o.y_s)?,
    };
    Ok(OcpSpec {
        mode: o.mode,
        horizon: o.horizon,
        structure: plant.structure().clone(),
        q: matrix_or_identity(&o.q, m, "q")?,
        r: matrix_or_identity(&o.r, m, "r")?,
        u_s,
        y_s: o.y_s.clone(),
        lambda_alpha: o.lambda_alpha,
        lambda_sigma: o.lambda_sigma,
        epsilon_star: o.epsilon_star.unwrap_or(cert.epsilon_star),
        w_star: cfg.data.noise_bound,
        slack: o.slack,
        u_lower: o.u_lower.clone(),
        u_upper: o.u_upper.clone(),
        y_bounds: None,
        slack_constants: Some(SlackConstants::from_certificate(cert)),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub plant: String,
    pub dictionary: String,
    pub seed: u64,
    pub noise_bound: f64,
    pub perturbation: f64,
    pub epsilon_star: f64,
    pub y_s: Vec<f64>,
    pub u_s: Vec<f64>,
    pub steps: usize,
    pub stride: usize,
    pub solves: usize,
    pub accepted_solves: usize,
    pub held_steps: usize,
    pub mean_iterations: f64,
    pub settled_error: f64,
    pub max_tail_error: f64,
    pub settle_window: usize,
    pub bound_samples: usize,
    pub bound_violations: usize,
    pub persistently_exciting: bool,
    pub feasible: bool,
    pub aborted: Option<String>,
    pub warnings: Vec<String>,
}

fn write_run_files(
    dir: &Path,
    cfg: &ExperimentConfig,
    spec: &OcpSpec,
    log: &ClosedLoopLog,
    bounds: &[BoundSample],
) -> Result<(), Failure> {
    let m = spec.structure.m();
    let names = |p: &'static str| (1..=m).map(move |i| format!("{p}_{i}"));
    let kind = |k: StepKind| match k {
        StepKind::Bootstrap => "bootstrap",
        StepKind::Planned => "planned",
        StepKind::Held => "held",
    };

    let mut header = vec!["t".to_string(), "kind".to_string()];
    header.extend(names("u").chain(names("y_measured")).chain(names("y_clean")));
    header.extend(["stage_cost".to_string(), "solve".to_string()]);
    let rows: Vec<Vec<String>> = log
        .steps
        .iter()
        .map(|s| {
            let mut r = vec![s.t.to_string(), kind(s.kind).to_string()];
            r.extend(s.u.iter().chain(&s.y_measured).chain(&s.y_clean).map(|&v| fmt(v)));
            r.push(fmt(s.stage_cost));
            r.push(s.solve.map(|i| i.to_string()).unwrap_or_default());
            r
        })
        .collect();
    write_table(&dir.join("log.csv"), &header, &rows)?;

    let header: Vec<String> =
        ["solve", "t", "channel", "k", "bound", "realized", "applied"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = bounds
        .iter()
        .map(|b| {
            vec![
                b.solve.to_string(),
                b.t.to_string(),
                (b.channel + 1).to_string(),
                b.k.to_string(),
                fmt(b.bound),
                fmt(b.realized),
                b.applied.to_string(),
            ]
        })
        .collect();
    write_table(&dir.join("bounds.csv"), &header, &rows)?;

    // bound on the prediction of each applied step, worst channel
    let mut step_bound: BTreeMap<usize, f64> = BTreeMap::new();
    for b in bounds.iter().filter(|b| b.applied) {
        let e = step_bound.entry(b.t + b.k).or_insert(0.0);
        *e = e.max(b.bound);
    }
    let (yn, un) = if cfg.plant.name == PlantName::DoublePendulum { ("theta", "tau") } else { ("y", "u") };
    let mut header = vec!["t".to_string()];
    header.extend(names(yn).chain((1..=m).map(|i| format!("{yn}_{i}_s"))).chain(names(un)));
    header.extend(["J".to_string(), "bound".to_string()]);
    let rows: Vec<Vec<String>> = log
        .steps
        .iter()
        .map(|s| {
            let mut r = vec![s.t.to_string()];
            r.extend(s.y_clean.iter().chain(&spec.y_s).chain(&s.u).map(|&v| fmt(v)));
            r.push(s.solve.and_then(|i| log.solves[i].objective()).map(fmt).unwrap_or_default());
            r.push(step_bound.get(&s.t).map(|&v| fmt(v)).unwrap_or_default());
            r
        })
        .collect();
    write_table(&dir.join("plot.csv"), &header, &rows)
}

/// Closed loop on already loaded data; writes log, bound trace, plot data and summary into `dir`.
fn closed_loop_in(cfg: &ExperimentConfig, loaded: &Loaded, dir: &Path, strict: bool) -> Result<RunSummary, Failure> {
    let Loaded { plant, dict, data, cert } = loaded;
    let spec = build_spec(cfg, plant.as_ref(), cert)?;
    let blocks = DataBlocks::new(dict.as_ref(), data, spec.depth(), true)?;
    let s = plant.structure();
    let order = spec.depth() + s.n();
    println!("{}", pe_line(&blocks.pe, order));
    if !blocks.pe.persistently_exciting && strict {
        return Err(Failure::assumption("offline data are not persistently exciting"));
    }
    let online = noise_model(cfg.closed_loop.noise_bound.unwrap_or(cfg.data.noise_bound), registry::stream_seed(cfg.seed, streams::ONLINE_NOISE))?;
    let loop_cfg = ClosedLoopConfig {
        total_steps: cfg.closed_loop.total_steps,
        stride: cfg.closed_loop.stride,
        accept_violation: cfg.closed_loop.accept_violation,
        solver: cfg.solver.clone(),
        oracle: true,
    };
    let x0 = registry::loop_x0(cfg);
    let log = run_closed_loop(&spec, &blocks, dict.as_ref(), plant.as_ref(), &online, &x0, &loop_cfg)?;

    let mut constants = ddnpc_core::npc::RuntimeBoundConstants::from_certificate(cert, spec.w_star, false);
    constants.epsilon_star = spec.epsilon_star * (1.0 + cfg.certificate.epsilon_inflation);
    let bounds = evaluate_runtime_bounds(&log, &spec, &constants)?;
    write_run_files(dir, cfg, &spec, &log, &bounds)?;

    let win = cfg.closed_loop.settle_window;
    let accepted = log.solves.iter().filter(|r| r.accepted).count();
    let iterations: usize = log.solves.iter().map(|r| r.iterations).sum();
    let mut warnings = log.warnings.clone();
    if !blocks.pe.persistently_exciting {
        warnings.push("offline data are not persistently exciting".into());
    }
    let summary = RunSummary {
        plant: plant.name().to_string(),
        dictionary: dict.name().to_string(),
        seed: cfg.seed,
        noise_bound: cfg.data.noise_bound,
        perturbation: cfg.dictionary.perturbation,
        epsilon_star: spec.epsilon_star,
        y_s: spec.y_s.clone(),
        u_s: spec.u_s.clone(),
        steps: log.steps.len(),
        stride: log.stride,
        solves: log.solves.len(),
        accepted_solves: accepted,
        held_steps: log.held_steps(),
        mean_iterations: if log.solves.is_empty() { 0.0 } else { iterations as f64 / log.solves.len() as f64 },
        settled_error: log.settled_error(&spec.y_s, win),
        max_tail_error: log.max_tail_error(&spec.y_s, win),
        settle_window: win,
        bound_samples: bounds.len(),
        bound_violations: bounds.iter().filter(|b| b.realized > b.bound + BOUND_TOLERANCE).count(),
        persistently_exciting: blocks.pe.persistently_exciting,
        feasible: accepted == log.solves.len() && log.aborted.is_none(),
        aborted: log.aborted.as_ref().map(|e| e.to_string()),
        warnings,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    if let Some(e) = &log.aborted {
        return Err(Failure::solver(format!("closed loop aborted after {} steps: {e}", log.steps.len())));
    }
    if strict && summary.held_steps > 0 {
        return Err(Failure::solver(format!("{} steps held a previous input after failed solves", summary.held_steps)));
    }
    Ok(summary)
}

pub fn npc_run(cfg: &ExperimentConfig, ctx: &Context) -> Result<RunSummary, Failure> {
    cfg.ocp()?;
    let loaded = load_inputs(cfg, ctx)?;
    let summary = closed_loop_in(cfg, &loaded, &ctx.out_dir, ctx.strict)?;
    println!(
        "{} steps, {} solves ({} held steps), settled error {:.4e} over the last {} steps",
        summary.steps, summary.solves, summary.held_steps, summary.settled_error, summary.settle_window
    );
    Ok(summary)
}

#[derive(Debug, Serialize)]
struct SweepEntry {
    dir: String,
    noise_bound: f64,
    perturbation: f64,
    seed: u64,
    settled_error: Option<f64>,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct SweepSummary {
    runs: Vec<SweepEntry>,
    /// Seed-averaged settled error per `(noise_bound, perturbation)`.
    mean_settled_error: Vec<(f64, f64, f64)>,
    /// Mean settled error never grows as the noise bound shrinks (at fixed perturbation).
    monotone_in_noise: bool,
    /// Mean settled error never grows as the perturbation shrinks (at fixed noise bound).
    monotone_in_perturbation: bool,
}

fn non_increasing_as_shrinks(points: &[(f64, f64)]) -> bool {
    let mut p = points.to_vec();
    p.sort_by(|a, b| b.0.total_cmp(&a.0));
    p.windows(2).all(|w| w[1].1 <= w[0].1)
}

pub fn sweep(cfg: &ExperimentConfig, ctx: &Context) -> Result<(), Failure> {
    let sw = cfg.sweep.clone().ok_or_else(|| Failure::config("missing [sweep] section"))?;
    cfg.ocp()?;
    if sw.seeds.is_empty() {
        return Err(Failure::config("sweep.seeds must not be empty"));
    }
    let noises = if sw.noise_bounds.is_empty() { vec![cfg.data.noise_bound] } else { sw.noise_bounds.clone() };
    let perts = if sw.perturbations.is_empty() { vec![cfg.dictionary.perturbation] } else { sw.perturbations.clone() };
    let mut jobs = Vec::new();
    for &w in &noises {
        for &p in &perts {
            for &seed in &sw.seeds {
                jobs.push((w, p, seed));
            }
        }
    }
    let runs: Vec<SweepEntry> = jobs
        .par_iter()
        .map(|&(w, p, seed)| {
            let name = format!("w{w:e}_p{p:e}_s{seed}");
            let dir = ctx.out_dir.join(&name);
            let mut run_cfg = cfg.clone();
            run_cfg.seed = seed;
            run_cfg.data.noise_bound = w;
            run_cfg.dictionary.perturbation = p;
            run_cfg.closed_loop.noise_bound = None;
            run_cfg.files = Default::default();
            run_cfg.sweep = None;
            let sub = Context { out_dir: dir.clone(), strict: ctx.strict, config_path: ctx.config_path.clone() };
            let result = std::fs::create_dir_all(&dir)
                .map_err(|e| Failure::io(&dir, e))
                .and_then(|_| collect(&run_cfg, &sub))
                .and_then(|_| load_inputs(&run_cfg, &sub))
                .and_then(|l| closed_loop_in(&run_cfg, &l, &dir, ctx.strict));
            let (settled_error, error) = match result {
                Ok(s) => (Some(s.settled_error), None),
                Err(e) => (None, Some(e.message)),
            };
            SweepEntry { dir: name, noise_bound: w, perturbation: p, seed, settled_error, error }
        })
        .collect();

    let mean = |w: f64, p: f64| -> f64 {
        let v: Vec<f64> = runs
            .iter()
            .filter(|r| r.noise_bound == w && r.perturbation == p)
            .map(|r| r.settled_error.unwrap_or(f64::INFINITY))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let mut table = Vec::new();
    for &w in &noises {
        for &p in &perts {
            table.push((w, p, mean(w, p)));
        }
    }
    let monotone_in_noise = perts.iter().all(|&p| {
        let pts: Vec<(f64, f64)> = noises.iter().map(|&w| (w, mean(w, p))).collect();
        non_increasing_as_shrinks(&pts)
    });
    let monotone_in_perturbation = noises.iter().all(|&w| {
        let pts: Vec<(f64, f64)> = perts.iter().map(|&p| (p, mean(w, p))).collect();
        non_increasing_as_shrinks(&pts)
    });
    let failed = runs.iter().filter(|r| r.error.is_some()).count();
    for (w, p, e) in &table {
        println!("noise {w:e}, perturbation {p:e}: mean settled error {e:.4e}");
    }
    println!("monotone in noise: {monotone_in_noise}, monotone in perturbation: {monotone_in_perturbation}");
    let summary = SweepSummary { runs, mean_settled_error: table, monotone_in_noise, monotone_in_perturbation };
    write_json(&ctx.out_dir.join("sweep_summary.json"), &summary)?;
    if failed > 0 {
        return Err(Failure::solver(format!("{failed} sweep runs failed; see sweep_summary.json")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_length_lower_bound() {
        // pendulum: r = 4, L = 10, d_max = 2, n = 4
        assert_eq!(min_data_length(4, 10, 2, 4), 79);
        assert_eq!(min_data_length(1, 1, 1, 1), 5);
    }

    #[test]
    fn monotone_check_sorts_by_level() {
        assert!(non_increasing_as_shrinks(&[(0.0, 0.1), (0.01, 0.3), (0.001, 0.2)]));
        assert!(!non_increasing_as_shrinks(&[(0.0, 0.4), (0.01, 0.3)]));
    }
}
