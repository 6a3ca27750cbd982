//! Small feedback-linearizable plants with known exact dictionaries.

use alloc::vec;
use alloc::vec::Vec;

use super::{BrunovskyStructure, FeedbackLinearizable, Plant};
use crate::error::Result;

/// Linear plant with `m = 2`, relative degrees `(2, 1)` and `Xi = x`.
///
/// ```text
/// x1+ = x2
/// x2+ = 0.3 x1 + 0.5 x2 + 0.2 x3 + u1 + 0.4 u2
/// x3+ = 0.1 x1 - 0.2 x3 + 0.5 u1 + u2
/// y   = (x1, x3)
/// ```
#[derive(Debug, Clone)]
pub struct LtiToy {
    structure: BrunovskyStructure,
}

impl Default for LtiToy {
    fn default() -> Self {
        Self { structure: BrunovskyStructure::new(vec![2, 1]).expect("valid degrees") }
    }
}

impl LtiToy {
    pub const A: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [0.3, 0.5, 0.2], [0.1, 0.0, -0.2]];
    pub const B: [[f64; 2]; 3] = [[0.0, 0.0], [1.0, 0.4], [0.5, 1.0]];
}

impl Plant for LtiToy {
    fn name(&self) -> &str {
        "lti_toy"
    }

    fn state_dim(&self) -> usize {
        3
    }

    fn io_dim(&self) -> usize {
        2
    }

    fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        Ok((0..3)
            .map(|i| {
                (0..3).map(|j| Self::A[i][j] * x[j]).sum::<f64>() + (0..2).map(|j| Self::B[i][j] * u[j]).sum::<f64>()
            })
            .collect())
    }

    fn output(&self, x: &[f64], _u: &[f64]) -> Vec<f64> {
        vec![x[0], x[2]]
    }

    fn hold_input(&self, x: &[f64]) -> Option<Vec<f64>> {
        // x1 = x2 = a, x3 = b: solve the last two rows for u
        if x[0] != x[1] {
            return None;
        }
        let r2 = x[1] - (0.3 * x[0] + 0.5 * x[1] + 0.2 * x[2]);
        let r3 = x[2] - (0.1 * x[0] - 0.2 * x[2]);
        let det = 1.0 - 0.4 * 0.5;
        Some(vec![(r2 - 0.4 * r3) / det, (r3 - 0.5 * r2) / det])
    }
}

impl FeedbackLinearizable for LtiToy {
    fn structure(&self) -> &BrunovskyStructure {
        &self.structure
    }

    fn state_from_xi(&self, xi: &[f64]) -> Result<Vec<f64>> {
        Ok(xi.to_vec())
    }

    fn xi_from_state(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.to_vec())
    }
}

/// Scalar nonlinear chain with relative degree 2 and `Xi = x`.
///
/// ```text
/// x1+ = x2
/// x2+ = -0.2 x1 + 0.5 x2 + 0.3 sin(x1) + u
/// y   = x1
/// ```
#[derive(Debug, Clone)]
pub struct ScalarFlat {
    structure: BrunovskyStructure,
}

impl Default for ScalarFlat {
    fn default() -> Self {
        Self { structure: BrunovskyStructure::new(vec![2]).expect("valid degrees") }
    }
}

impl ScalarFlat {
    pub fn phi_exact(u: f64, xi: &[f64]) -> f64 {
        -0.2 * xi[0] + 0.5 * xi[1] + 0.3 * libm::sin(xi[0]) + u
    }
}

impl Plant for ScalarFlat {
    fn name(&self) -> &str {
        "scalar_flat"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn io_dim(&self) -> usize {
        1
    }

    fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![x[1], Self::phi_exact(u[0], x)])
    }

    fn output(&self, x: &[f64], _u: &[f64]) -> Vec<f64> {
        vec![x[0]]
    }

    fn hold_input(&self, x: &[f64]) -> Option<Vec<f64>> {
        if x[0] != x[1] {
            return None;
        }
        Some(vec![x[0] - Self::phi_exact(0.0, x)])
    }
}

impl FeedbackLinearizable for ScalarFlat {
    fn structure(&self) -> &BrunovskyStructure {
        &self.structure
    }

    fn state_from_xi(&self, xi: &[f64]) -> Result<Vec<f64>> {
        Ok(xi.to_vec())
    }

    fn xi_from_state(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.to_vec())
    }
}
