//! Least-squares baseline and the NMSE metric.
//!
//! The LS design matrix repeats the pilot in every column, so it has rank one
//! and `SᴴS` is singular for `N > 1`. The estimate is the minimum-norm LS
//! solution `S⁺ y`, which for `S = s 1ᵀ` is `1 · (sᴴy) / (N ‖s‖²)`.

use num_complex::Complex64;

use crate::channel::PilotSequence;
use crate::error::{Error, Result};

/// `M × N` matrix whose every column is the pilot vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotDesignMatrix {
    pilot: Vec<Complex64>,
    n_cols: usize,
}

impl PilotDesignMatrix {
    pub fn new(pilot: &PilotSequence, n_cols: usize) -> Result<Self> {
        if n_cols == 0 {
            return Err(Error::invalid("design matrix needs at least one column"));
        }
        Ok(PilotDesignMatrix {
            pilot: pilot.symbols().to_vec(),
            n_cols,
        })
    }

    pub fn rows(&self) -> usize {
        self.pilot.len()
    }

    pub fn cols(&self) -> usize {
        self.n_cols
    }

    pub fn entry(&self, row: usize, _col: usize) -> Complex64 {
        self.pilot[row]
    }

    /// Minimum-norm least-squares solution of `S x = y`.
    pub fn pinv_apply(&self, y: &[Complex64]) -> Result<Vec<Complex64>> {
        if y.len() != self.pilot.len() {
            return Err(Error::invalid(format!(
                "observation has {} samples, pilot has {}",
                y.len(),
                self.pilot.len()
            )));
        }
        let energy: f64 = self.pilot.iter().map(|s| s.norm_sqr()).sum();
        if energy == 0.0 {
            return Err(Error::invalid("pilot sequence is all zero"));
        }
        let corr: Complex64 = self.pilot.iter().zip(y).map(|(s, y)| s.conj() * y).sum();
        let x = corr / (energy * self.n_cols as f64);
        Ok(vec![x; self.n_cols])
    }
}

/// LS estimate of an `n`-element channel from the received block `y1`.
pub fn ls_estimate(y1: &[Complex64], s1: &PilotSequence, n: usize) -> Result<Vec<Complex64>> {
    PilotDesignMatrix::new(s1, n)?.pinv_apply(y1)
}

/// LS estimates of `h` (with `s1`) and `g` (with `s2`).
pub fn ls_estimate_pair(
    y1: &[Complex64],
    s1: &PilotSequence,
    s2: &PilotSequence,
    n: usize,
) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    Ok((ls_estimate(y1, s1, n)?, ls_estimate(y1, s2, n)?))
}

/// `‖truth − estimate‖² / ‖truth‖²`.
pub fn nmse(truth: &[Complex64], estimate: &[Complex64]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::invalid(format!(
            "truth has {} entries, estimate has {}",
            truth.len(),
            estimate.len()
        )));
    }
    let power: f64 = truth.iter().map(|t| t.norm_sqr()).sum();
    if power == 0.0 {
        return Err(Error::invalid("NMSE undefined for an all-zero reference"));
    }
    let err: f64 = truth.iter().zip(estimate).map(|(t, e)| (t - e).norm_sqr()).sum();
    Ok(err / power)
}

/// Channel estimates with their errors against the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateReport {
    pub h_hat: Vec<Complex64>,
    pub g_hat: Option<Vec<Complex64>>,
    pub nmse_h: f64,
    pub nmse_g: Option<f64>,
}

impl EstimateReport {
    pub fn score(
        h: &[Complex64],
        g: &[Complex64],
        h_hat: Vec<Complex64>,
        g_hat: Option<Vec<Complex64>>,
    ) -> Result<Self> {
        let nmse_h = nmse(h, &h_hat)?;
        let nmse_g = g_hat.as_deref().map(|gh| nmse(g, gh)).transpose()?;
        Ok(EstimateReport {
            h_hat,
            g_hat,
            nmse_h,
            nmse_g,
        })
    }
}
