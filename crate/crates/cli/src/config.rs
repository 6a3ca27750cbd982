use std::path::{Path, PathBuf};

use ddnpc_core::basis::{GridSpec, OmegaBox};
use ddnpc_core::npc::{OcpMode, SlackMode};
use ddnpc_core::plant::pendulum::DoublePendulumParams;
use ddnpc_core::solver::SolverOptions;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed. Every random stream in a run is derived from it.
    pub seed: u64,
    pub plant: PlantSection,
    pub dictionary: DictionarySection,
    #[serde(default)]
    pub omega: Option<OmegaBox>,
    pub data: DataSection,
    #[serde(default)]
    pub certificate: CertificateSection,
    #[serde(default)]
    pub ocp: Option<OcpSection>,
    #[serde(default)]
    pub closed_loop: ClosedLoopSection,
    #[serde(default)]
    pub simulate: Option<WindowSection>,
    #[serde(default)]
    pub match_output: Option<WindowSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub files: FilesSection,
    #[serde(default)]
    pub solver: SolverOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantName {
    DoublePendulum,
    LtiToy,
    ScalarFlat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub name: PlantName,
    #[serde(default)]
    pub params: Option<DoublePendulumParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictionaryName {
    Pendulum,
    Input,
    Identity,
    Polynomial,
    Trig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionarySection {
    pub name: DictionaryName,
    /// Relative perturbation of the model parameters inside the pendulum dictionary.
    #[serde(default)]
    pub perturbation: f64,
    /// Trig dictionary only.
    #[serde(default)]
    pub with_cos: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    PdDither,
    Uniform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub length: usize,
    #[serde(default)]
    pub noise_bound: f64,
    pub policy: PolicyName,
    /// Box of the uniform policy. Defaults to the input part of `omega`.
    #[serde(default)]
    pub input_lower: Option<Vec<f64>>,
    #[serde(default)]
    pub input_upper: Option<Vec<f64>>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertificateSection {
    pub grid: GridSpec,
    /// Relative inflation of the grid estimate of `eps*` when it enters an error bound,
    /// since the grid only certifies the sup at its own points.
    pub epsilon_inflation: f64,
}

impl Default for CertificateSection {
    fn default() -> Self {
        Self { grid: GridSpec::default(), epsilon_inflation: 0.1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcpSection {
    pub mode: OcpMode,
    pub horizon: usize,
    #[serde(default)]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub r: Option<Vec<Vec<f64>>>,
    pub y_s: Vec<f64>,
    /// Computed from the plant's hold input when absent.
    #[serde(default)]
    pub u_s: Option<Vec<f64>>,
    #[serde(default)]
    pub lambda_alpha: f64,
    #[serde(default)]
    pub lambda_sigma: f64,
    #[serde(default)]
    pub slack: SlackMode,
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
    /// Overrides the certificate value.
    #[serde(default)]
    pub epsilon_star: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClosedLoopSection {
    pub total_steps: usize,
    pub stride: Option<usize>,
    pub x0: Option<Vec<f64>>,
    /// Online measurement noise. Defaults to the data noise bound.
    pub noise_bound: Option<f64>,
    pub accept_violation: f64,
    pub settle_window: usize,
}

impl Default for ClosedLoopSection {
    fn default() -> Self {
        Self { total_steps: 300, stride: None, x0: None, noise_bound: None, accept_violation: 1e-5, settle_window: 50 }
    }
}

/// Window of the offline data used by `simulate` and `match-output`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    pub horizon: usize,
    pub start: usize,
    /// Replace the recorded inputs by uniform random ones (simulate only).
    #[serde(default)]
    pub random_inputs: bool,
    #[serde(default = "default_sim_lambda")]
    pub lambda_alpha: f64,
}

fn default_sim_lambda() -> f64 {
    ddnpc_core::behavior::DEFAULT_SIM_LAMBDA_ALPHA
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub noise_bounds: Vec<f64>,
    #[serde(default)]
    pub perturbations: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilesSection {
    /// Offline data CSV. Defaults to `<out-dir>/data.csv`.
    pub data: Option<PathBuf>,
    /// Certificate JSON. Defaults to `<out-dir>/certificate.json`.
    pub certificate: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.files.data, &mut cfg.files.certificate].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn ocp(&self) -> Result<&OcpSection, Failure> {
        self.ocp.as_ref().ok_or_else(|| Failure::config("missing [ocp] section"))
    }

    pub fn data_path(&self, out_dir: &Path) -> PathBuf {
        self.files.data.clone().unwrap_or_else(|| out_dir.join("data.csv"))
    }

    pub fn certificate_path(&self, out_dir: &Path) -> PathBuf {
        self.files.certificate.clone().unwrap_or_else(|| out_dir.join("certificate.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[plant]
name = "scalar_flat"
[dictionary]
name = "trig"
[data]
length = 50
policy = "uniform"
"#;

    #[test]
    fn minimal_config_parses() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.closed_loop.total_steps, 300);
        assert!(cfg.ocp.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("length = 50", "length = 50\nlenght = 5");
        assert!(toml::from_str::<ExperimentConfig>(&bad).is_err());
        let top = format!("colour = 1\n{MINIMAL}");
        assert!(toml::from_str::<ExperimentConfig>(&top).is_err());
    }

    #[test]
    fn seed_is_mandatory() {
        let no_seed = MINIMAL.replace("seed = 3", "");
        assert!(toml::from_str::<ExperimentConfig>(&no_seed).is_err());
    }
}
