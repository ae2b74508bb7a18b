//! Closed-form Gaussian-mixture oracles and the diagnostics built on them:
//! measure concentration, score error across noise shells, mode coverage,
//! nearest-neighbor overfitting checks and energy-based outlier scores.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::energy::{check_batch, EnergyFn};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mixture of isotropic Gaussians `Σ_j w_j N(μ_j, s²I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmOracle {
    means: Tensor,
    std: f64,
    weights: Vec<f64>,
}

impl GmmOracle {
    pub fn new(means: Tensor, std: f64, weights: Vec<f64>) -> Result<Self> {
        let [m, d] = means.shape()[..] else {
            return Err(Error::dim("gmm", format!("means must be [m, d], got {:?}", means.shape())));
        };
        if m == 0 || d == 0 {
            return Err(Error::config("mixture needs at least one component and dimension"));
        }
        if weights.len() != m {
            return Err(Error::dim("gmm", format!("{} weights for {m} components", weights.len())));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::config("mixture weights must be non-negative and sum to 1"));
        }
        if !(std >= 0.0) || !std.is_finite() {
            return Err(Error::config(format!("component std must be non-negative, got {std}")));
        }
        Ok(GmmOracle { means, std, weights })
    }

    pub fn uniform(means: Tensor, std: f64) -> Result<Self> {
        let m = means.shape().first().copied().unwrap_or(0);
        Self::new(means, std, vec![1.0 / m.max(1) as f64; m])
    }

    /// `n_modes` equally weighted components evenly spaced on a circle.
    pub fn ring(n_modes: usize, radius: f64, std: f64, center: [f64; 2]) -> Result<Self> {
        let means: Vec<f64> = (0..n_modes)
            .flat_map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / n_modes as f64;
                [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            })
            .collect();
        Self::uniform(Tensor::new([n_modes, 2], means)?, std)
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn n_modes(&self) -> usize {
        self.means.rows()
    }

    /// Draws `n` points and the component each came from.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut j = self.n_modes() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    j = i;
                    break;
                }
            }
            labels.push(j);
            data.extend(
                self.means
                    .row(j)
                    .iter()
                    .map(|&mu| mu + self.std * rng.sample::<f64, _>(StandardNormal)),
            );
        }
        (Tensor::from_parts(vec![n, d], data), labels)
    }

    fn smoothed_var(&self, sigma: f64) -> Result<f64> {
        if !(sigma >= 0.0) {
            return Err(Error::domain("gmm", format!("sigma must be non-negative, got {sigma}")));
        }
        let v = self.std * self.std + sigma * sigma;
        if !(v > 0.0) {
            return Err(Error::domain("gmm", "degenerate mixture: s = sigma = 0"));
        }
        Ok(v)
    }

    /// Per-component log terms `log w_j + log N(x; μ_j, vI)` for one row.
    fn log_terms(&self, x: &[f64], var: f64, out: &mut Vec<f64>) {
        let d = x.len() as f64;
        let norm = -0.5 * d * (LN_2PI + var.ln());
        out.clear();
        out.extend(self.means.row_iter().zip(&self.weights).map(|(mu, &w)| {
            let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            w.ln() + norm - sq / (2.0 * var)
        }));
    }

    /// `log p_σ(x)` where `p_σ` is the mixture convolved with `N(0, σ²I)`.
    pub fn log_density(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        check_batch(x, self.dim(), "gmm_log_density")?;
        let var = self.smoothed_var(sigma)?;
        let mut terms = Vec::with_capacity(self.n_modes());
        let out = x
            .row_iter()
            .map(|row| {
                self.log_terms(row, var, &mut terms);
                log_sum_exp(&terms)
            })
            .collect();
        Ok(Tensor::from_parts(vec![x.rows()], out))
    }

    /// `∇ log p_σ(x)`, via log-sum-exp responsibilities.
    pub fn smoothed_score(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        let (b, d) = (check_batch(x, self.dim(), "gmm_score")?, self.dim());
        let var = self.smoothed_var(sigma)?;
        let mut terms = Vec::with_capacity(self.n_modes());
        let mut out = Vec::with_capacity(b * d);
        for row in x.row_iter() {
            self.log_terms(row, var, &mut terms);
            let lse = log_sum_exp(&terms);
            let mut s = vec![0.0; d];
            for (mu, t) in self.means.row_iter().zip(&terms) {
                let r = (t - lse).exp();
                for ((sv, xv), m) in s.iter_mut().zip(row).zip(mu) {
                    *sv += r * (m - xv);
                }
            }
            out.extend(s.into_iter().map(|v| v / var));
        }
        Ok(Tensor::from_parts(vec![b, d], out))
    }

    /// Index of the nearest mean to `x`, and the distance to it.
    pub fn nearest_mode(&self, x: &[f64]) -> (usize, f64) {
        self.means
            .row_iter()
            .map(|mu| l2(x, mu))
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one component")
    }
}

/// Score of `oracle` smoothed by `N(0, σ²I)`.
pub fn oracle_smoothed_score(oracle: &GmmOracle, x: &Tensor, sigma: f64) -> Result<Tensor> {
    oracle.smoothed_score(x, sigma)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// The exact energy `-log p_σ` of a smoothed mixture.
#[derive(Clone, Debug)]
pub struct GmmEnergy {
    pub oracle: GmmOracle,
    pub sigma: f64,
}

impl EnergyFn for GmmEnergy {
    fn input_dim(&self) -> usize {
        self.oracle.dim()
    }

    fn energy(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.oracle.log_density(x, self.sigma)?.map(|v| -v))
    }

    fn energy_and_grad(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let e = self.energy(x)?;
        let g = self.oracle.smoothed_score(x, self.sigma)?.map(|v| -v);
        Ok((e, g))
    }
}

/// Band of width `2ε` around radius `√d·σ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ShellSpec {
    pub d: usize,
    pub sigma: f64,
    pub epsilon: f64,
}

impl ShellSpec {
    pub fn new(d: usize, sigma: f64, epsilon: f64) -> Result<Self> {
        if d == 0 || !(sigma > 0.0) || !(epsilon >= 0.0) {
            return Err(Error::config(format!(
                "shell needs d >= 1, sigma > 0, epsilon >= 0; got {d}, {sigma}, {epsilon}"
            )));
        }
        Ok(ShellSpec { d, sigma, epsilon })
    }

    pub fn radius(&self) -> f64 {
        (self.d as f64).sqrt() * self.sigma
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConcentrationStats {
    pub d: usize,
    pub sigma: f64,
    pub n_samples: usize,
    pub target_norm: f64,
    pub mean_norm: f64,
    /// Standard deviation of the norm over its mean.
    pub cv: f64,
    /// Mean `|cos|` between a draw and a fixed unit vector.
    pub mean_abs_cos: f64,
    /// Share of draws whose norm lies within `ε` of `√d·σ`.
    pub shell_fraction: f64,
}

/// Statistics of `n_samples` draws from `N(0, σ²I_d)`.
pub fn concentration_stats<R: Rng + ?Sized>(spec: ShellSpec, n_samples: usize, rng: &mut R) -> Result<ConcentrationStats> {
    if n_samples < 100 {
        return Err(Error::config(format!("need at least 100 samples, got {n_samples}")));
    }
    let d = spec.d;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let target = spec.radius();
    let (mut sum, mut sum_sq, mut cos_sum, mut inside) = (0.0, 0.0, 0.0, 0usize);
    let mut row = vec![0.0; d];
    for _ in 0..n_samples {
        for v in row.iter_mut() {
            *v = spec.sigma * rng.sample::<f64, _>(StandardNormal);
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        // fixed direction (1, …, 1)/√d
        let dot: f64 = row.iter().sum::<f64>() * inv_sqrt_d;
        sum += norm;
        sum_sq += norm * norm;
        cos_sum += (dot / norm).abs();
        if (norm - target).abs() < spec.epsilon {
            inside += 1;
        }
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(ConcentrationStats {
        d,
        sigma: spec.sigma,
        n_samples,
        target_norm: target,
        mean_norm: mean,
        cv: var.sqrt() / mean,
        mean_abs_cos: cos_sum / n,
        shell_fraction: inside as f64 / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ShellError {
    pub radius: f64,
    /// Effective noise level `r·σ_eval` of the test points.
    pub sigma_eff: f64,
    /// `mean ‖ŝ - s‖² / mean ‖s‖²`.
    pub error: f64,
}

/// Score error of `model` on shells around oracle samples.
///
/// For each radius `r`, test points are oracle samples displaced by
/// `r·√d·σ_eval` along uniformly random directions, which is where noise of
/// level `σ = r·σ_eval` concentrates. A model trained to denoise toward
/// `p_{σ₀}` implies the score `(σ₀²/σ²)(-∇E)` at noise level `σ`; this is
/// compared against the exact smoothed score at `σ`. Base samples and
/// directions are shared across radii.
pub fn shell_score_error<E, R>(
    model: &E,
    oracle: &GmmOracle,
    radii: &[f64],
    sigma_eval: f64,
    sigma0: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ShellError>>
where
    E: EnergyFn + ?Sized,
    R: Rng + ?Sized,
{
    if radii.iter().any(|&r| !(r > 0.0)) || !(sigma_eval > 0.0) || !(sigma0 > 0.0) || n == 0 {
        return Err(Error::config("radii, sigma_eval and sigma0 must be positive and n >= 1"));
    }
    let d = oracle.dim();
    if model.input_dim() != d {
        return Err(Error::dim("shell_score_error", "model and oracle dimensions differ"));
    }
    let (base, _) = oracle.sample(n, rng);
    let mut dirs = Tensor::randn([n, d], rng).into_data();
    for row in dirs.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let sqrt_d = (d as f64).sqrt();
    radii
        .iter()
        .map(|&r| {
            let sigma = r * sigma_eval;
            let step = r * sqrt_d * sigma_eval;
            let data = base.data().iter().zip(&dirs).map(|(b, u)| b + step * u).collect();
            let x = Tensor::new([n, d], data)?;
            let grad = model.energy_grad(&x)?;
            let truth = oracle.smoothed_score(&x, sigma)?;
            let k = -(sigma0 * sigma0) / (sigma * sigma);
            let (mut num, mut den) = (0.0, 0.0);
            for (g, s) in grad.data().iter().zip(truth.data()) {
                let diff = k * g - s;
                num += diff * diff;
                den += s * s;
            }
            Ok(ShellError {
                radius: r,
                sigma_eff: sigma,
                error: num / den,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeCoverage {
    pub counts: Vec<usize>,
    pub unassigned: usize,
    pub n_covered: usize,
    /// Smallest per-mode count over the number of samples.
    pub min_share: f64,
    pub threshold: f64,
}

/// `3·√(s² + σ₀²)·√d`.
pub fn default_mode_threshold(oracle: &GmmOracle, sigma0: f64) -> f64 {
    3.0 * (oracle.std() * oracle.std() + sigma0 * sigma0).sqrt() * (oracle.dim() as f64).sqrt()
}

/// Assigns each sample to its nearest mean when within `threshold`.
pub fn mode_coverage(samples: &Tensor, oracle: &GmmOracle, threshold: f64) -> Result<ModeCoverage> {
    if !(threshold > 0.0) {
        return Err(Error::config(format!("threshold must be positive, got {threshold}")));
    }
    let m = check_batch(samples, oracle.dim(), "mode_coverage")?;
    let mut counts = vec![0usize; oracle.n_modes()];
    let mut unassigned = 0;
    for row in samples.row_iter() {
        let (j, dist) = oracle.nearest_mode(row);
        if dist <= threshold {
            counts[j] += 1;
        } else {
            unassigned += 1;
        }
    }
    let min = counts.iter().copied().min().unwrap_or(0);
    Ok(ModeCoverage {
        n_covered: counts.iter().filter(|&&c| c > 0).count(),
        min_share: if m == 0 { 0.0 } else { min as f64 / m as f64 },
        counts,
        unassigned,
        threshold,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Neighbors {
    /// Per sample, dataset row indices by increasing distance.
    pub indices: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
}

#[derive(PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn check_knn(samples: &Tensor, dataset: &Tensor, k: usize) -> Result<()> {
    let [n, d] = dataset.shape()[..] else {
        return Err(Error::dim("nn_check", "dataset must be a matrix"));
    };
    check_batch(samples, d, "nn_check")?;
    if k == 0 || k > n {
        return Err(Error::config(format!("need 1 <= k <= {n}, got {k}")));
    }
    Ok(())
}

/// Exact `k` nearest dataset rows under L2 for each sample, ties broken by
/// index. Keeps a bounded max-heap per sample.
pub fn nn_check(samples: &Tensor, dataset: &Tensor, k: usize) -> Result<Neighbors> {
    check_knn(samples, dataset, k)?;
    let mut out = Neighbors {
        indices: Vec::with_capacity(samples.rows()),
        distances: Vec::with_capacity(samples.rows()),
    };
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for s in samples.row_iter() {
        heap.clear();
        for (j, row) in dataset.row_iter().enumerate() {
            let c = Candidate(l2(s, row), j);
            if heap.len() < k {
                heap.push(c);
            } else if c < *heap.peek().unwrap() {
                heap.pop();
                heap.push(c);
            }
        }
        let sorted = std::mem::take(&mut heap).into_sorted_vec();
        out.indices.push(sorted.iter().map(|c| c.1).collect());
        out.distances.push(sorted.iter().map(|c| c.0).collect());
        heap = BinaryHeap::with_capacity(k + 1);
    }
    Ok(out)
}

/// Reference implementation: full sort of all distances.
pub fn nn_check_brute_force(samples: &Tensor, dataset: &Tensor, k: usize) -> Result<Neighbors> {
    check_knn(samples, dataset, k)?;
    let mut out = Neighbors {
        indices: Vec::new(),
        distances: Vec::new(),
    };
    for s in samples.row_iter() {
        let mut all: Vec<Candidate> = dataset.row_iter().enumerate().map(|(j, r)| Candidate(l2(s, r), j)).collect();
        all.sort();
        all.truncate(k);
        out.indices.push(all.iter().map(|c| c.1).collect());
        out.distances.push(all.iter().map(|c| c.0).collect());
    }
    Ok(out)
}

pub const DEFAULT_OOD_NOISE_DRAWS: usize = 16;

/// Mean of `E(x + σ₀·N(0, I))` over `n_noise` draws; lower means more
/// typical under the model.
pub fn ood_energy_score<E, R>(model: &E, x: &Tensor, sigma0: f64, n_noise: usize, rng: &mut R) -> Result<Tensor>
where
    E: EnergyFn + ?Sized,
    R: Rng + ?Sized,
{
    if n_noise == 0 || !(sigma0 >= 0.0) {
        return Err(Error::config("need n_noise >= 1 and sigma0 >= 0"));
    }
    let b = check_batch(x, model.input_dim(), "ood_energy_score")?;
    let mut acc = vec![0.0; b];
    for _ in 0..n_noise {
        let noisy = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|v| v + sigma0 * rng.sample::<f64, _>(StandardNormal)).collect(),
        )?;
        for (a, e) in acc.iter_mut().zip(model.energy(&noisy)?.data()) {
            *a += e;
        }
    }
    Tensor::vector(acc.into_iter().map(|a| a / n_noise as f64).collect())
}

/// Per-sample denoising residual `‖x - x̃ + σ₀²∇E(x̃)‖²` with `x̃ = x + σ₀·n`,
/// averaged over `n_noise` draws. Exposed as an alternative outlier statistic.
pub fn denoising_residual_score<E, R>(model: &E, x: &Tensor, sigma0: f64, n_noise: usize, rng: &mut R) -> Result<Tensor>
where
    E: EnergyFn + ?Sized,
    R: Rng + ?Sized,
{
    if n_noise == 0 || !(sigma0 > 0.0) {
        return Err(Error::config("need n_noise >= 1 and sigma0 > 0"));
    }
    let b = check_batch(x, model.input_dim(), "denoising_residual_score")?;
    let s2 = sigma0 * sigma0;
    let mut acc = vec![0.0; b];
    for _ in 0..n_noise {
        let noise = Tensor::randn(x.shape().to_vec(), rng);
        let noisy = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(noise.data()).map(|(v, n)| v + sigma0 * n).collect(),
        )?;
        let grad = model.energy_grad(&noisy)?;
        let d = x.cols();
        for (i, a) in acc.iter_mut().enumerate() {
            let r: f64 = (0..d)
                .map(|j| {
                    let k = i * d + j;
                    let v = -sigma0 * noise.data()[k] + s2 * grad.data()[k];
                    v * v
                })
                .sum();
            *a += r;
        }
    }
    Tensor::vector(acc.into_iter().map(|a| a / n_noise as f64).collect())
}
