use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{build_nominal_ocp, build_robust_ocp, History, OcpMode, OcpSolution, OcpSpec, PredictiveProblem};
use crate::basis::{ApproximationCertificate, BasisDictionary};
use crate::behavior::{lemma1_bound, DataBlocks, ErrorBoundInputs};
use crate::error::{Error, Result};
use crate::plant::{NoiseModel, Plant};
use crate::solver::{self, SolverOptions, SolverStatus};

/// Settings of one receding-horizon run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopConfig {
    /// Plant steps including the bootstrap.
    pub total_steps: usize,
    /// Inputs applied per solve; `None` selects `d_max` (robust) or 1 (nominal).
    pub stride: Option<usize>,
    /// A non-converged solve is still used when its violation is below this.
    pub accept_violation: f64,
    pub solver: SolverOptions,
    /// Record the open-loop response of the true plant to every plan.
    pub oracle: bool,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        Self { total_steps: 300, stride: None, accept_violation: 1e-5, solver: SolverOptions::default(), oracle: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StepKind {
    /// Equilibrium-hold input before the first solve.
    Bootstrap,
    /// Input taken from an accepted plan.
    Planned,
    /// Previous input repeated after a failed solve.
    Held,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub u: Vec<f64>,
    pub y_measured: Vec<f64>,
    pub y_clean: Vec<f64>,
    pub stage_cost: f64,
    pub kind: StepKind,
    /// Index into [`ClosedLoopLog::solves`] of the plan in force.
    pub solve: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SolveRecord {
    pub t: usize,
    pub state: Vec<f64>,
    pub status: SolverStatus,
    pub accepted: bool,
    pub violation: f64,
    pub iterations: usize,
    /// Constraint violation of the shifted previous solution in this problem.
    pub candidate_violation: Option<f64>,
    pub solution: Option<OcpSolution>,
    /// Clean plant outputs `y_{i,t+k}`, `k = 0..L+d_i-1`, under the planned inputs.
    pub oracle_outputs: Option<Vec<Vec<f64>>>,
    pub error: Option<String>,
}

impl SolveRecord {
    pub fn objective(&self) -> Option<f64> {
        self.solution.as_ref().map(|s| s.objective)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ClosedLoopLog {
    pub steps: Vec<StepRecord>,
    pub solves: Vec<SolveRecord>,
    pub warnings: Vec<String>,
    pub stride: usize,
    pub aborted: Option<Error>,
}

impl ClosedLoopLog {
    /// Mean over the last `window` steps of `max_i |y_i - y_i^s|`.
    pub fn settled_error(&self, y_s: &[f64], window: usize) -> f64 {
        let n = self.steps.len();
        let from = n.saturating_sub(window);
        let tail = &self.steps[from..];
        if tail.is_empty() {
            return f64::NAN;
        }
        tail.iter().map(|s| s.y_clean.iter().zip(y_s).fold(0.0f64, |a, (y, r)| a.max((y - r).abs()))).sum::<f64>()
            / tail.len() as f64
    }

    /// Largest `max_i |y_i - y_i^s|` over the last `window` steps.
    pub fn max_tail_error(&self, y_s: &[f64], window: usize) -> f64 {
        let from = self.steps.len().saturating_sub(window);
        self.steps[from..]
            .iter()
            .map(|s| s.y_clean.iter().zip(y_s).fold(0.0f64, |a, (y, r)| a.max((y - r).abs())))
            .fold(0.0, f64::max)
    }

    pub fn held_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.kind == StepKind::Held).count()
    }
}

fn stage_cost(spec: &OcpSpec, u: &[f64], y: &[f64]) -> f64 {
    let m = u.len();
    let mut c = 0.0;
    for a in 0..m {
        for b in 0..m {
            c += (u[a] - spec.u_s[a]) * spec.r[(a, b)] * (u[b] - spec.u_s[b]);
            c += (y[a] - spec.y_s[a]) * spec.q[(a, b)] * (y[b] - spec.y_s[b]);
        }
    }
    c
}

fn rollout(plant: &dyn Plant, x0: &[f64], inputs: &[Vec<f64>], degrees: &[usize]) -> Result<Vec<Vec<f64>>> {
    let m = degrees.len();
    let len = inputs.len() + degrees.iter().copied().max().unwrap_or(0);
    let mut out = vec![Vec::with_capacity(len); m];
    let mut x = x0.to_vec();
    let zero = vec![0.0; m];
    for k in 0..len {
        let u = inputs.get(k).unwrap_or(&zero);
        let y = plant.output(&x, u);
        for i in 0..m {
            if k < inputs.len() + degrees[i] {
                out[i].push(y[i]);
            }
        }
        if k + 1 < len {
            x = plant.step(&x, u)?;
        }
    }
    Ok(out)
}

fn build<'a>(spec: &'a OcpSpec, blocks: &'a DataBlocks, dict: &'a dyn BasisDictionary, h: History) -> Result<PredictiveProblem<'a>> {
    match spec.mode {
        OcpMode::Nominal => build_nominal_ocp(spec, blocks, dict, h),
        OcpMode::Robust => build_robust_ocp(spec, blocks, dict, h),
    }
}

struct Runner<'a> {
    spec: &'a OcpSpec,
    plant: &'a dyn Plant,
    log: ClosedLoopLog,
    x: Vec<f64>,
    hist_u: Vec<Vec<f64>>,
    hist_y: Vec<Vec<f64>>,
    sampler: crate::plant::NoiseSampler,
}

impl Runner<'_> {
    fn apply(&mut self, u: Vec<f64>, kind: StepKind, solve: Option<usize>) -> Result<()> {
        let t = self.log.steps.len();
        let m = u.len();
        let y = self.plant.output(&self.x, &u);
        let w = self.sampler.sample(m);
        let meas: Vec<f64> = y.iter().zip(&w).map(|(a, b)| a + b).collect();
        let next = self.plant.step(&self.x, &u).map_err(|e| Error::PlantFailure { step: t, source: alloc::boxed::Box::new(e) })?;
        if !next.iter().all(|v| v.is_finite()) {
            let e = Error::InvalidSequence("non-finite plant state".into());
            return Err(Error::PlantFailure { step: t, source: alloc::boxed::Box::new(e) });
        }
        self.log.steps.push(StepRecord {
            t,
            stage_cost: stage_cost(self.spec, &u, &y),
            u: u.clone(),
            y_measured: meas.clone(),
            y_clean: y,
            kind,
            solve,
        });
        self.hist_u.push(u);
        self.hist_y.push(meas);
        self.x = next;
        Ok(())
    }

    fn history(&self, d: usize) -> History {
        let n = self.hist_u.len();
        History { inputs: self.hist_u[n - d..].to_vec(), outputs: self.hist_y[n - d..].to_vec() }
    }
}

/// Runs the receding-horizon loop on `plant` from `x0`.
///
/// The plant is first held at `x0` with its equilibrium input for `d_max`
/// steps to create the initial history. Configuration errors are returned as
/// `Err`; a plant failure during the run is stored in `aborted` together with
/// the partial log.
pub fn run_closed_loop(
    spec: &OcpSpec,
    blocks: &DataBlocks,
    dict: &dyn BasisDictionary,
    plant: &dyn Plant,
    noise: &NoiseModel,
    x0: &[f64],
    config: &ClosedLoopConfig,
) -> Result<ClosedLoopLog> {
    let d = spec.d_max();
    let m = spec.structure.m();
    let warnings = spec.validate(blocks)?;
    let stride = config.stride.unwrap_or(match spec.mode {
        OcpMode::Robust => d,
        OcpMode::Nominal => 1,
    });
    if stride == 0 || stride > spec.horizon {
        return Err(Error::InvalidConfig(format!("stride {stride} must lie in [1, L]")));
    }
    if config.total_steps <= d || (config.total_steps - d) % stride != 0 {
        return Err(Error::InvalidConfig(format!(
            "total steps {} must exceed d_max = {d} by a multiple of the stride {stride}",
            config.total_steps
        )));
    }
    if x0.len() != plant.state_dim() || plant.io_dim() != m {
        return Err(Error::DimensionMismatch("plant does not match the controller structure".into()));
    }
    let hold = plant
        .hold_input(x0)
        .ok_or_else(|| Error::InvalidConfig("initial state is not an equilibrium of the plant".into()))?;
    let mut run = Runner {
        spec,
        plant,
        log: ClosedLoopLog { warnings, stride, ..Default::default() },
        x: x0.to_vec(),
        hist_u: Vec::new(),
        hist_y: Vec::new(),
        sampler: noise.sampler(),
    };
    for _ in 0..d {
        if let Err(e) = run.apply(hold.clone(), StepKind::Bootstrap, None) {
            run.log.aborted = Some(e);
            return Ok(run.log);
        }
    }
    let mut prev_z: Option<Vec<f64>> = None;
    let mut last_u = hold;
    while run.log.steps.len() < config.total_steps {
        let t = run.log.steps.len();
        let problem = build(spec, blocks, dict, run.history(d))?;
        let (z0, candidate_violation) = match &prev_z {
            Some(prev) => {
                let layout = problem.layout.shift_layout(&spec.u_s, &spec.y_s);
                let refit = |z: &mut [f64]| {
                    problem.project(z);
                    problem.refit_alpha(z)
                };
                let z0 = solver::warm_start_shift(prev, &layout, stride, Some(&refit))?;
                let v = problem.max_violation(&z0)?;
                (z0, Some(v))
            }
            None => (problem.initial_guess()?, None),
        };
        let outcome = solver::solve(&problem, &z0, &config.solver);
        let solve_idx = run.log.solves.len();
        let mut record = SolveRecord {
            t,
            state: run.x.clone(),
            status: SolverStatus::MaxIterations,
            accepted: false,
            violation: f64::INFINITY,
            iterations: 0,
            candidate_violation,
            solution: None,
            oracle_outputs: None,
            error: None,
        };
        let mut plan: Option<Vec<Vec<f64>>> = None;
        match outcome {
            Ok(rep) => {
                record.status = rep.status;
                record.violation = rep.max_violation();
                record.iterations = rep.iterations;
                record.accepted = rep.status != SolverStatus::InfeasibleDetected
                    && rep.solution.iter().all(|v| v.is_finite())
                    && (rep.converged() || rep.max_violation() <= config.accept_violation);
                if record.accepted {
                    let sol = problem.decode(&rep.solution, Some(&rep))?;
                    if config.oracle {
                        record.oracle_outputs = rollout(plant, &run.x, &sol.inputs, spec.structure.degrees()).ok();
                    }
                    plan = Some(sol.inputs[..stride].to_vec());
                    record.solution = Some(sol);
                    prev_z = Some(rep.solution);
                } else if z0.iter().all(|v| v.is_finite()) {
                    prev_z = Some(z0);
                } else {
                    prev_z = None;
                }
            }
            Err(e) => {
                record.error = Some(format!("{e}"));
                prev_z = None;
            }
        }
        run.log.solves.push(record);
        for s in 0..stride {
            let (u, kind) = match &plan {
                Some(p) => {
                    let u: Vec<f64> = p[s].iter().enumerate().map(|(j, v)| v.clamp(spec.u_lower[j], spec.u_upper[j])).collect();
                    (u, StepKind::Planned)
                }
                None => (last_u.clone(), StepKind::Held),
            };
            last_u = u.clone();
            if let Err(e) = run.apply(u, kind, Some(solve_idx)) {
                run.log.aborted = Some(e);
                return Ok(run.log);
            }
        }
    }
    Ok(run.log)
}

/// Constants of the runtime prediction-error bound.
#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeBoundConstants {
    pub epsilon_star: f64,
    pub w_star: f64,
    pub k_xi: f64,
    pub k_w: f64,
    pub g_norm: f64,
}

impl RuntimeBoundConstants {
    /// Uses the model-free bound on `|G|_inf` unless `oracle_g` is set.
    pub fn from_certificate(cert: &ApproximationCertificate, w_star: f64, oracle_g: bool) -> Self {
        Self {
            epsilon_star: cert.epsilon_star,
            w_star,
            k_xi: cert.k_xi,
            k_w: cert.k_w_or_zero(),
            g_norm: if oracle_g { cert.g_inf_norm } else { cert.g_inf_bound },
        }
    }
}

/// One predicted output paired with its bound and realized error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundSample {
    pub solve: usize,
    pub t: usize,
    pub channel: usize,
    pub k: usize,
    pub bound: f64,
    pub realized: f64,
    /// Whether step `t + k` was driven by this plan in closed loop.
    pub applied: bool,
}

/// Pairs every accepted plan's predicted outputs with the bound and with the
/// open-loop response of the true plant.
pub fn evaluate_runtime_bounds(log: &ClosedLoopLog, spec: &OcpSpec, constants: &RuntimeBoundConstants) -> Result<Vec<BoundSample>> {
    let s = &spec.structure;
    let d = s.d_max();
    let mut out = Vec::new();
    for (idx, rec) in log.solves.iter().enumerate() {
        let (Some(sol), Some(oracle)) = (&rec.solution, &rec.oracle_outputs) else {
            continue;
        };
        let inputs = ErrorBoundInputs {
            epsilon_star: constants.epsilon_star,
            w_star: constants.w_star,
            k_xi: constants.k_xi,
            k_w: constants.k_w,
            g_norm: constants.g_norm,
            alpha_one_norm: sol.alpha_one_norm,
            sigma_inf_norm: sol.sigma_inf(),
            degrees: s.degrees().to_vec(),
        };
        for i in 0..s.m() {
            for k in 0..spec.horizon + s.degree(i) {
                let realized = (oracle[i][k] - sol.outputs[i][k + d]).abs();
                out.push(BoundSample {
                    solve: idx,
                    t: rec.t,
                    channel: i,
                    k,
                    bound: lemma1_bound(&inputs, i, k as i64)?,
                    realized,
                    applied: k < log.stride,
                });
            }
        }
    }
    Ok(out)
}
