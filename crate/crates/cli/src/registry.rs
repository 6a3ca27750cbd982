//! Builds plants, dictionaries and policies from their configuration names.

use std::f64::consts::FRAC_PI_2;

use ddnpc_core::basis::{
    BasisDictionary, IdentityDictionary, InputDictionary, OmegaBox, PendulumDictionary, PolynomialDictionary,
    TrigDictionary,
};
use ddnpc_core::plant::pendulum::{DoublePendulum, PdDitherPolicy, DOWNWARD};
use ddnpc_core::plant::toys::{LtiToy, ScalarFlat};
use ddnpc_core::plant::{FeedbackLinearizable, InputPolicy, UniformInputPolicy};

use crate::config::{DictionaryName, ExperimentConfig, PlantName, PolicyName};
use crate::Failure;

/// Random streams of one run. [`stream_seed`] mixes them with the root seed.
pub mod streams {
    pub const POLICY: u64 = 0;
    pub const DATA_NOISE: u64 = 1;
    pub const PERTURBATION: u64 = 2;
    pub const ONLINE_NOISE: u64 = 3;
    pub const SIM_INPUTS: u64 = 4;
}

/// Seed of `stream` under `root`. Distinct roots never share a stream seed, unlike `root + stream`.
pub fn stream_seed(root: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = root.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn build_plant(cfg: &ExperimentConfig) -> Result<Box<dyn FeedbackLinearizable>, Failure> {
    Ok(match cfg.plant.name {
        PlantName::DoublePendulum => Box::new(DoublePendulum::new(cfg.plant.params.unwrap_or_default())?),
        PlantName::LtiToy | PlantName::ScalarFlat if cfg.plant.params.is_some() => {
            return Err(Failure::config("[plant.params] only applies to double_pendulum"))
        }
        PlantName::LtiToy => Box::new(LtiToy::default()),
        PlantName::ScalarFlat => Box::new(ScalarFlat::default()),
    })
}

pub fn build_dictionary(cfg: &ExperimentConfig, plant: &dyn FeedbackLinearizable) -> Result<Box<dyn BasisDictionary>, Failure> {
    let s = plant.structure();
    let (m, n) = (s.m(), s.n());
    let d = &cfg.dictionary;
    if d.perturbation != 0.0 && d.name != DictionaryName::Pendulum {
        return Err(Failure::config("dictionary.perturbation only applies to the pendulum dictionary"));
    }
    if !(0.0..1.0).contains(&d.perturbation) {
        return Err(Failure::config("dictionary.perturbation must lie in [0, 1)"));
    }
    Ok(match d.name {
        DictionaryName::Pendulum => {
            if cfg.plant.name != PlantName::DoublePendulum {
                return Err(Failure::config("the pendulum dictionary needs the double_pendulum plant"));
            }
            let params = cfg.plant.params.unwrap_or_default();
            Box::new(PendulumDictionary::new(params.perturbed(d.perturbation, stream_seed(cfg.seed, streams::PERTURBATION))))
        }
        DictionaryName::Input => Box::new(InputDictionary::new(m, n)),
        DictionaryName::Identity => Box::new(IdentityDictionary::new(m, n)),
        DictionaryName::Polynomial => Box::new(PolynomialDictionary::new(s)),
        DictionaryName::Trig => Box::new(TrigDictionary::new(s, d.with_cos)),
    })
}

pub fn omega(cfg: &ExperimentConfig) -> Result<OmegaBox, Failure> {
    if let Some(b) = &cfg.omega {
        b.validate()?;
        return Ok(b.clone());
    }
    Ok(match cfg.plant.name {
        PlantName::DoublePendulum => OmegaBox::uniform(2, 4, (-20.0, 20.0), (-FRAC_PI_2, FRAC_PI_2))?,
        PlantName::LtiToy => OmegaBox::uniform(2, 3, (-1.0, 1.0), (-5.0, 5.0))?,
        PlantName::ScalarFlat => OmegaBox::uniform(1, 2, (-1.0, 1.0), (-3.0, 3.0))?,
    })
}

/// Initial state of data collection.
pub fn data_x0(cfg: &ExperimentConfig, plant: &dyn FeedbackLinearizable) -> Vec<f64> {
    cfg.data.x0.clone().unwrap_or_else(|| match cfg.plant.name {
        PlantName::DoublePendulum => DOWNWARD.to_vec(),
        _ => vec![0.0; plant.state_dim()],
    })
}

/// Initial state of the closed loop.
pub fn loop_x0(cfg: &ExperimentConfig) -> Vec<f64> {
    cfg.closed_loop.x0.clone().unwrap_or_else(|| match cfg.plant.name {
        PlantName::DoublePendulum => DOWNWARD.to_vec(),
        PlantName::LtiToy => vec![0.5, 0.5, -0.3],
        PlantName::ScalarFlat => vec![0.8, 0.8],
    })
}

pub fn build_policy(cfg: &ExperimentConfig, omega: &OmegaBox) -> Result<Box<dyn InputPolicy>, Failure> {
    let seed = stream_seed(cfg.seed, streams::POLICY);
    Ok(match cfg.data.policy {
        PolicyName::PdDither => {
            if cfg.plant.name != PlantName::DoublePendulum {
                return Err(Failure::config("the pd_dither policy needs the double_pendulum plant"));
            }
            Box::new(PdDitherPolicy::new(cfg.plant.params.unwrap_or_default(), seed))
        }
        PolicyName::Uniform => {
            let lo = cfg.data.input_lower.clone().unwrap_or_else(|| omega.u_lower.clone());
            let hi = cfg.data.input_upper.clone().unwrap_or_else(|| omega.u_upper.clone());
            if lo.len() != omega.m() || hi.len() != omega.m() || lo.iter().zip(&hi).any(|(a, b)| a > b) {
                return Err(Failure::config("data.input_lower/input_upper must be ordered vectors of length m"));
            }
            Box::new(UniformInputPolicy::new(lo, hi, seed))
        }
    })
}

/// Input that holds the outputs at `y_s`, from the plant's own equilibrium map.
pub fn setpoint_input(plant: &dyn FeedbackLinearizable, y_s: &[f64]) -> Result<Vec<f64>, Failure> {
    let s = plant.structure();
    if y_s.len() != s.m() {
        return Err(Failure::config(format!("ocp.y_s needs {} entries", s.m())));
    }
    let xi: Vec<f64> = (0..s.m()).flat_map(|i| std::iter::repeat_n(y_s[i], s.degree(i))).collect();
    let x = plant.state_from_xi(&xi)?;
    plant.hold_input(&x).ok_or_else(|| Failure::config("no equilibrium input for ocp.y_s; give ocp.u_s explicitly"))
}
