//! Sequences, stacked windows, Hankel matrices and persistency of excitation.
//!
//! Layout is time-major throughout: row `k` of a [`Sequence`] is the sample
//! `z_k`, and stacking concatenates rows in time order.

use alloc::format;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Default relative rank threshold (multiplies the largest singular value).
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// An immutable sequence `z_0, ..., z_{N-1}` with `z_k` in `R^eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    data: DMatrix<f64>,
}

impl Sequence {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidSequence(format!(
                "empty sequence ({}x{})",
                data.nrows(),
                data.ncols()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSequence(format!("non-finite entry at flat index {pos}")));
        }
        Ok(Self { data })
    }

    /// Builds a sequence from rows; every row must have the same width.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let eta = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != eta) {
            return Err(Error::InvalidSequence("ragged rows".into()));
        }
        Self::new(DMatrix::from_fn(n, eta, |i, j| rows[i][j]))
    }

    /// Scalar sequence.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_column_slice(values.len(), 1, values))
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        self.data.row(k).iter().copied().collect()
    }

    fn check_window(&self, a: usize, b: usize) -> Result<()> {
        if a > b || b >= self.len() {
            return Err(Error::WindowOutOfRange { a, b, len: self.len() });
        }
        Ok(())
    }

    /// Rows `a..=b` as a new sequence.
    pub fn window(&self, a: usize, b: usize) -> Result<Sequence> {
        self.check_window(a, b)?;
        Ok(Self { data: self.data.rows(a, b - a + 1).into_owned() })
    }

    /// Stacked vector `z_[a,b]`.
    pub fn stack(&self, a: usize, b: usize) -> Result<DVector<f64>> {
        self.check_window(a, b)?;
        let eta = self.channels();
        let mut out = DVector::zeros(eta * (b - a + 1));
        for k in a..=b {
            for c in 0..eta {
                out[(k - a) * eta + c] = self.data[(k, c)];
            }
        }
        Ok(out)
    }

    /// Stacked vector of the whole sequence.
    pub fn stacked(&self) -> DVector<f64> {
        self.stack(0, self.len() - 1).expect("full window is always valid")
    }
}

/// Dense Hankel matrix `H_L(z)` of shape `(eta L, N - L + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelMatrix {
    depth: usize,
    channels: usize,
    entries: DMatrix<f64>,
}

impl HankelMatrix {
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    /// Block row `i` (the `channels` rows that hold `z_{i+j}` in column `j`).
    pub fn block_row(&self, i: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.entries.rows(i * self.channels, self.channels)
    }
}

pub fn build_hankel(seq: &Sequence, depth: usize) -> Result<HankelMatrix> {
    let n = seq.len();
    if depth == 0 || depth > n {
        return Err(Error::DepthExceedsLength { depth, len: n });
    }
    let eta = seq.channels();
    let cols = n - depth + 1;
    let z = seq.matrix();
    let entries = DMatrix::from_fn(eta * depth, cols, |row, j| {
        let (i, c) = (row / eta, row % eta);
        z[(i + j, c)]
    });
    Ok(HankelMatrix { depth, channels: eta, entries })
}

/// Outcome of a persistency-of-excitation check.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PeReport {
    pub persistently_exciting: bool,
    pub rank: usize,
    pub required_rank: usize,
    /// Smallest singular value of the Hankel matrix (diagnostic).
    pub sigma_min: f64,
}

/// Checks `rank(H_L(seq)) = eta L` with rank counted as singular values
/// above `tolerance * sigma_max`.
pub fn is_persistently_exciting(seq: &Sequence, order: usize, tolerance: f64) -> Result<PeReport> {
    if !(tolerance > 0.0) {
        return Err(Error::InvalidConfig(format!("rank tolerance must be positive, got {tolerance}")));
    }
    let h = build_hankel(seq, order)?;
    let info = linalg::numerical_rank(h.matrix(), tolerance);
    let required_rank = seq.channels() * order;
    // a wide-enough matrix is required for full row rank; report the true sigma_min of the row space
    let sigma_min = if h.ncols() >= h.nrows() { info.sigma_min } else { 0.0 };
    Ok(PeReport {
        persistently_exciting: info.rank == required_rank,
        rank: info.rank,
        required_rank,
        sigma_min,
    })
}
