//! Noise-level schedules and Gaussian-scale-mixture corruption of batches.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    Linear,
    Geometric,
}

/// Ascending noise levels `σ_1..σ_K` and the kernel width `σ₀` of the target
/// density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    levels: Vec<f64>,
    spacing: Spacing,
    sigma0: f64,
}

impl NoiseSchedule {
    pub fn new(min: f64, max: f64, k: usize, spacing: Spacing, sigma0: f64) -> Result<Self> {
        if !(min > 0.0) || !(min <= max) || !max.is_finite() {
            return Err(Error::config(format!(
                "noise range must satisfy 0 < min <= max, got [{min}, {max}]"
            )));
        }
        if k == 0 {
            return Err(Error::config("noise schedule needs at least one level"));
        }
        if !(sigma0 > 0.0) || !sigma0.is_finite() {
            return Err(Error::config(format!("sigma0 must be positive, got {sigma0}")));
        }
        let levels = if k == 1 {
            vec![min]
        } else {
            let last = (k - 1) as f64;
            match spacing {
                Spacing::Linear => {
                    let gap = (max - min) / last;
                    (0..k).map(|i| min + gap * i as f64).collect()
                }
                Spacing::Geometric => {
                    let (lo, hi) = (min.ln(), max.ln());
                    (0..k).map(|i| (lo + (hi - lo) * i as f64 / last).exp()).collect()
                }
            }
        };
        let mut levels: Vec<f64> = levels;
        // pin the endpoints against rounding in the interpolation
        levels[0] = min;
        if k > 1 {
            levels[k - 1] = max;
        }
        Ok(NoiseSchedule {
            levels,
            spacing,
            sigma0,
        })
    }

    /// A single noise level, the plain denoising score matching regime.
    pub fn single(sigma: f64, sigma0: f64) -> Result<Self> {
        Self::new(sigma, sigma, 1, Spacing::Linear, sigma0)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn min_level(&self) -> f64 {
        self.levels[0]
    }

    pub fn max_level(&self) -> f64 {
        self.levels[self.levels.len() - 1]
    }

    /// Copy with a different target width; levels unchanged.
    pub fn with_sigma0(&self, sigma0: f64) -> Result<Self> {
        if !(sigma0 > 0.0) {
            return Err(Error::config(format!("sigma0 must be positive, got {sigma0}")));
        }
        Ok(NoiseSchedule {
            sigma0,
            ..self.clone()
        })
    }

    /// Level assigned to batch row `row`: rows cycle through the levels in
    /// order.
    pub fn level_for_row(&self, row: usize) -> f64 {
        self.levels[row % self.levels.len()]
    }
}

/// Per-level weight `l(σ) = 1/σ²`.
pub fn weight(sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::domain("weight", format!("sigma must be positive, got {sigma}")));
    }
    Ok(1.0 / (sigma * sigma))
}

/// A corrupted batch with the noise level used for each row.
#[derive(Clone, Debug)]
pub struct NoisyBatch {
    pub noisy: Tensor,
    pub sigmas: Vec<f64>,
}

/// Adds `σ_i · N(0, I)` to row `i`, with `σ_i` cycling through the schedule.
pub fn perturb_batch<R: Rng + ?Sized>(x: &Tensor, schedule: &NoiseSchedule, rng: &mut R) -> Result<NoisyBatch> {
    let [b, d] = x.shape()[..] else {
        return Err(Error::dim("perturb_batch", format!("expected a matrix, got {:?}", x.shape())));
    };
    if b == 0 {
        return Err(Error::dim("perturb_batch", "empty batch"));
    }
    let sigmas: Vec<f64> = (0..b).map(|i| schedule.level_for_row(i)).collect();
    let mut data = Vec::with_capacity(b * d);
    for (row, &sigma) in x.row_iter().zip(&sigmas) {
        data.extend(row.iter().map(|&v| v + sigma * rng.sample::<f64, _>(StandardNormal)));
    }
    Ok(NoisyBatch {
        noisy: Tensor::new([b, d], data)?,
        sigmas,
    })
}
