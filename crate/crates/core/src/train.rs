//! Denoising objectives and the Adam training loop.
//!
//! All objectives share one residual, `x - x̃ + σ₀² ∇E(x̃)`, which vanishes
//! when the model's single-step denoiser maps the noisy point back onto its
//! clean source. They differ only in how rows are weighted:
//!
//! * [`mdsm_loss`]: rows carry different noise levels and weight `1/σ²`;
//! * [`dsm_single_loss`]: one noise level, unit weights;
//! * [`mdsm_star_loss`]: unit weights times the exact posterior ratio
//!   `q_σ₀(x|x̃) / q_M(x|x̃)` over a small dataset.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::energy::check_batch;
use crate::error::{Error, Result};
use crate::net::{BoundNet, EnergyNet};
use crate::noise::{perturb_batch, weight, NoiseSchedule};
use crate::tensor::Tensor;

/// How rows of different noise levels are balanced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `l(σ) = 1/σ²`.
    #[default]
    InverseVariance,
    /// `l(σ) = 1`.
    Uniform,
}

impl Weighting {
    fn row_weight(self, sigma: f64) -> Result<f64> {
        match self {
            Weighting::InverseVariance => weight(sigma),
            Weighting::Uniform => Ok(1.0),
        }
    }
}

/// A recorded loss together with the draws that produced it.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: Var,
    pub noisy: Tensor,
    pub sigmas: Vec<f64>,
    /// Squared residual norm per row, before weighting.
    pub residuals: Vec<f64>,
}

impl LossEval {
    pub fn value(&self) -> f64 {
        self.loss.value().data()[0]
    }

    pub fn mean_residual(&self) -> f64 {
        self.residuals.iter().sum::<f64>() / self.residuals.len() as f64
    }
}

/// `mean_i w_i |clean_i - noisy_i + σ₀² ∇E(noisy_i)|²`, differentiable in the
/// network parameters.
pub fn denoising_objective(
    net: &BoundNet,
    clean: &Tensor,
    noisy: &Tensor,
    row_weights: &[f64],
    sigma0: f64,
) -> Result<(Var, Vec<f64>)> {
    let b = check_batch(clean, net.config().input_dim, "denoising_objective")?;
    if noisy.shape() != clean.shape() || row_weights.len() != b {
        return Err(Error::dim(
            "denoising_objective",
            format!(
                "clean {:?}, noisy {:?}, {} weights",
                clean.shape(),
                noisy.shape(),
                row_weights.len()
            ),
        ));
    }
    let tape = net.params()[0].tape();
    let xt = tape.var(noisy.clone());
    let grad = net.energy_grad(&xt)?;
    let offset = tape.constant(clean.sub(noisy)?);
    let residual = offset.add(&grad.scale(sigma0 * sigma0)?)?;
    let per_row = residual.square()?.row_sums()?;
    let residuals = per_row.value().data().to_vec();
    let weights = Rc::new(Tensor::vector(row_weights.to_vec())?);
    let loss = per_row.mul_const(weights)?.mean()?;
    Ok((loss, residuals))
}

/// Finds the first row whose energy gradient is not finite, so a divergence
/// can be reported against its noise level.
fn diagnose(net: &BoundNet, noisy: &Tensor, sigmas: &[f64], err: Error) -> Error {
    if !matches!(err, Error::NonFinite { .. } | Error::Numeric { .. }) {
        return err;
    }
    let tape = net.params()[0].tape();
    for (i, row) in noisy.row_iter().enumerate() {
        let Ok(x) = Tensor::matrix(1, row.len(), row.to_vec()) else {
            return Error::Numeric {
                context: format!("non-finite noisy input at row {i} (sigma = {})", sigmas[i]),
            };
        };
        let ok = net
            .energy_grad(&tape.var(x))
            .map(|g| g.value().is_finite())
            .unwrap_or(false);
        if !ok {
            return Error::Numeric {
                context: format!("non-finite energy gradient at noise level sigma = {}", sigmas[i]),
            };
        }
    }
    Error::Numeric {
        context: format!(
            "non-finite loss (largest noise level sigma = {})",
            sigmas.iter().cloned().fold(f64::MIN, f64::max)
        ),
    }
}

/// The multiscale objective with an explicit weighting rule.
pub fn mdsm_loss_weighted<R: Rng + ?Sized>(
    net: &BoundNet,
    x: &Tensor,
    schedule: &NoiseSchedule,
    weighting: Weighting,
    rng: &mut R,
) -> Result<LossEval> {
    let batch = perturb_batch(x, schedule, rng)?;
    let weights = batch
        .sigmas
        .iter()
        .map(|&s| weighting.row_weight(s))
        .collect::<Result<Vec<_>>>()?;
    match denoising_objective(net, x, &batch.noisy, &weights, schedule.sigma0()) {
        Ok((loss, residuals)) => {
            if !loss.value().is_finite() {
                return Err(diagnose(net, &batch.noisy, &batch.sigmas, Error::NonFinite { op: "loss" }));
            }
            Ok(LossEval {
                loss,
                noisy: batch.noisy,
                sigmas: batch.sigmas,
                residuals,
            })
        }
        Err(e) => Err(diagnose(net, &batch.noisy, &batch.sigmas, e)),
    }
}

/// Multiscale denoising score matching with `l(σ) = 1/σ²`.
pub fn mdsm_loss<R: Rng + ?Sized>(net: &BoundNet, x: &Tensor, schedule: &NoiseSchedule, rng: &mut R) -> Result<LossEval> {
    mdsm_loss_weighted(net, x, schedule, Weighting::InverseVariance, rng)
}

/// Denoising score matching at a single noise level `sigma`, unweighted.
pub fn dsm_single_loss<R: Rng + ?Sized>(
    net: &BoundNet,
    x: &Tensor,
    sigma: f64,
    sigma0: f64,
    rng: &mut R,
) -> Result<LossEval> {
    if !(sigma > 0.0) {
        return Err(Error::domain("dsm_single_loss", format!("sigma must be positive, got {sigma}")));
    }
    let schedule = NoiseSchedule::single(sigma, sigma0)?;
    mdsm_loss_weighted(net, x, &schedule, Weighting::Uniform, rng)
}

/// Largest dataset for which [`mdsm_star_loss`] computes exact posteriors.
pub const MAX_EXACT_POSTERIOR_POINTS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WeightStats {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl WeightStats {
    fn of(weights: &[f64]) -> Self {
        let mut sorted = weights.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        WeightStats {
            min: sorted[0],
            median,
            max: sorted[n - 1],
        }
    }
}

#[derive(Clone, Debug)]
pub struct StarEval {
    pub eval: LossEval,
    pub weights: Vec<f64>,
    pub stats: WeightStats,
}

/// Draws `batch` rows uniformly with replacement, returning them with their
/// dataset indices.
pub fn sample_batch<R: Rng + ?Sized>(dataset: &Tensor, batch: usize, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
    let n = dataset.rows();
    if dataset.ndim() != 2 || n == 0 {
        return Err(Error::dim("sample_batch", format!("dataset shape {:?}", dataset.shape())));
    }
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
    let rows: Vec<&[f64]> = idx.iter().map(|&i| dataset.row(i)).collect();
    Ok((Tensor::from_rows(&rows)?, idx))
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn log_gauss(sq_dist: f64, variance: f64, dim: usize) -> f64 {
    -sq_dist / (2.0 * variance) - 0.5 * dim as f64 * (2.0 * std::f64::consts::PI * variance).ln()
}

/// Importance ratio `q_σ₀(x_src | x̃) / q_M(x_src | x̃)` for each noisy row,
/// with both posteriors computed exactly over the (uniformly weighted)
/// dataset points.
pub fn posterior_ratio_weights(
    dataset: &Tensor,
    sources: &[usize],
    noisy: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let n = dataset.rows();
    if n > MAX_EXACT_POSTERIOR_POINTS {
        return Err(Error::Capacity(format!(
            "exact posteriors need at most {MAX_EXACT_POSTERIOR_POINTS} points, dataset has {n}"
        )));
    }
    let d = dataset.cols();
    let var0 = schedule.sigma0() * schedule.sigma0();
    let log_k = (schedule.len() as f64).ln();
    let mut out = Vec::with_capacity(sources.len());
    let mut kernel0 = vec![0.0; n];
    let mut mixture = vec![0.0; n];
    let mut per_level = vec![0.0; schedule.len()];
    for (row, &src) in noisy.row_iter().zip(sources) {
        for j in 0..n {
            let sq: f64 = row.iter().zip(dataset.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            kernel0[j] = log_gauss(sq, var0, d);
            for (slot, &s) in per_level.iter_mut().zip(schedule.levels()) {
                *slot = log_gauss(sq, s * s, d);
            }
            mixture[j] = log_sum_exp(&per_level) - log_k;
        }
        let log_post0 = kernel0[src] - log_sum_exp(&kernel0);
        let log_post_m = mixture[src] - log_sum_exp(&mixture);
        out.push((log_post0 - log_post_m).exp());
    }
    Ok(out)
}

/// The importance-weighted multiscale objective, evaluated on a batch drawn
/// from a small dataset. With `unit_weights` the ratios are still reported
/// but every row is weighted by 1, which reduces to the unweighted
/// multiscale objective on the same draws.
pub fn mdsm_star_loss<R: Rng + ?Sized>(
    net: &BoundNet,
    dataset: &Tensor,
    batch: usize,
    schedule: &NoiseSchedule,
    unit_weights: bool,
    rng: &mut R,
) -> Result<StarEval> {
    if dataset.rows() > MAX_EXACT_POSTERIOR_POINTS {
        return Err(Error::Capacity(format!(
            "exact posteriors need at most {MAX_EXACT_POSTERIOR_POINTS} points, dataset has {}",
            dataset.rows()
        )));
    }
    let (clean, idx) = sample_batch(dataset, batch, rng)?;
    let noisy = perturb_batch(&clean, schedule, rng)?;
    let weights = posterior_ratio_weights(dataset, &idx, &noisy.noisy, schedule)?;
    let row_weights = if unit_weights { vec![1.0; batch] } else { weights.clone() };
    let (loss, residuals) = denoising_objective(net, &clean, &noisy.noisy, &row_weights, schedule.sigma0())
        .map_err(|e| diagnose(net, &noisy.noisy, &noisy.sigmas, e))?;
    Ok(StarEval {
        eval: LossEval {
            loss,
            noisy: noisy.noisy,
            sigmas: noisy.sigmas,
            residuals,
        },
        stats: WeightStats::of(&weights),
        weights,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_update(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::dim(
            "adam_step",
            format!("{} parameters, {} gradients", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.first[i].shape() != p.shape() {
            return Err(Error::dim(
                "adam_step",
                format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut updated = Vec::with_capacity(params.len());
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let m: Vec<f64> = state.first[i]
            .data()
            .iter()
            .zip(g.data())
            .map(|(m, g)| cfg.beta1 * m + (1.0 - cfg.beta1) * g)
            .collect();
        let v: Vec<f64> = state.second[i]
            .data()
            .iter()
            .zip(g.data())
            .map(|(v, g)| cfg.beta2 * v + (1.0 - cfg.beta2) * g * g)
            .collect();
        let new_p: Vec<f64> = p
            .data()
            .iter()
            .zip(m.iter().zip(&v))
            .map(|(p, (m, v))| p - cfg.learning_rate * (m / c1) / ((v / c2).sqrt() + cfg.eps))
            .collect();
        let shape = p.shape().to_vec();
        updated.push((
            Tensor::new(shape.clone(), new_p)?,
            Tensor::from_parts(shape.clone(), m),
            Tensor::from_parts(shape, v),
        ));
    }
    for (i, (p, m, v)) in updated.into_iter().enumerate() {
        params[i] = p;
        state.first[i] = m;
        state.second[i] = v;
    }
    Ok(())
}

pub fn adam_step(net: &mut EnergyNet, grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    adam_update(net.params_mut(), grads, state, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: NoiseSchedule,
    pub weighting: Weighting,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub steps: usize,
    /// Zero disables checkpoints.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(schedule: NoiseSchedule) -> Self {
        TrainConfig {
            schedule,
            weighting: Weighting::InverseVariance,
            batch_size: 128,
            adam: AdamConfig::default(),
            steps: 20_000,
            checkpoint_every: 5000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub mean_residual: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub history: Vec<StepRecord>,
}

impl TrainReport {
    /// Mean loss over `window` steps ending at index `end` (exclusive).
    pub fn window_mean(&self, end: usize, window: usize) -> f64 {
        let start = end.saturating_sub(window);
        let slice = &self.history[start..end];
        slice.iter().map(|r| r.loss).sum::<f64>() / slice.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,mean_residual\n");
        for r in &self.history {
            out.push_str(&format!("{},{:e},{:e}\n", r.step, r.loss, r.mean_residual));
        }
        out
    }
}

/// Runs `config.steps` Adam updates of the multiscale objective on batches
/// drawn from `dataset`, calling `on_checkpoint` every
/// `config.checkpoint_every` steps.
pub fn train<F>(dataset: &Tensor, net: &mut EnergyNet, config: &TrainConfig, mut on_checkpoint: F) -> Result<TrainReport>
where
    F: FnMut(usize, &EnergyNet) -> Result<()>,
{
    config.validate()?;
    check_batch(dataset, net.config().input_dim, "train")?;
    if dataset.rows() == 0 {
        return Err(Error::config("dataset is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::new(net.params());
    let mut report = TrainReport {
        history: Vec::with_capacity(config.steps),
    };
    for step in 1..=config.steps {
        let (batch, _) = sample_batch(dataset, config.batch_size, &mut rng)?;
        let tape = Tape::new();
        let bound = net.bind(&tape, true);
        let eval = mdsm_loss_weighted(&bound, &batch, &config.schedule, config.weighting, &mut rng).map_err(|e| {
            match e {
                Error::Numeric { context } => Error::Numeric {
                    context: format!("training step {step}: {context}"),
                },
                other => other,
            }
        })?;
        let params: Vec<&Var> = bound.params().iter().collect();
        let grads = tape.grad_values(&eval.loss, &params)?;
        adam_step(net, &grads, &mut state, &config.adam)?;
        report.history.push(StepRecord {
            step,
            loss: eval.value(),
            mean_residual: eval.mean_residual(),
        });
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            on_checkpoint(step, net)?;
        }
    }
    Ok(report)
}

/// Loss value and parameter gradients of the multiscale objective.
pub fn loss_and_grads<R: Rng + ?Sized>(
    net: &EnergyNet,
    x: &Tensor,
    schedule: &NoiseSchedule,
    weighting: Weighting,
    rng: &mut R,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let bound = net.bind(&tape, true);
    let eval = mdsm_loss_weighted(&bound, x, schedule, weighting, rng)?;
    let params: Vec<&Var> = bound.params().iter().collect();
    let grads = tape.grad_values(&eval.loss, &params)?;
    Ok((eval.value(), grads))
}
