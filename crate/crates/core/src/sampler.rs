//! Annealed Langevin dynamics with a final single-step denoising jump.
//!
//! One update at temperature `T` with step length `ε` is
//!
//! ```text
//! x' = x - (ε²/2) ∇E(x) + ε √T · N(0, I)
//! ```
//!
//! without a Metropolis correction. Starting hot lets chains move between
//! modes; cooling to `T_end = (σ₁/σ₀)²` leaves them in the smallest trained
//! noise shell, from which `x - σ₀² ∇E(x)` jumps to the clean estimate.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::energy::{check_batch, EnergyFn};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP_SIZE: f64 = 0.02;
pub const DEFAULT_ANNEAL_STEPS: usize = 2700;
pub const DEFAULT_START_TEMPERATURE: f64 = 100.0;
/// Fraction of the schedule spent at the final temperature.
pub const PLATEAU_FRACTION: f64 = 0.1;

/// End temperature at which the equilibrium noise `√T·σ₀` equals the
/// smallest trained level.
pub fn default_end_temperature(min_level: f64, sigma0: f64) -> f64 {
    let r = min_level / sigma0;
    r * r
}

/// Per-step temperatures and a fixed step length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    temperatures: Vec<f64>,
    step_size: f64,
}

impl AnnealSchedule {
    pub fn new(temperatures: Vec<f64>, step_size: f64) -> Result<Self> {
        if temperatures.is_empty() {
            return Err(Error::config("anneal schedule needs at least one step"));
        }
        if let Some(t) = temperatures.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
            return Err(Error::config(format!("temperatures must be positive, got {t}")));
        }
        if !(step_size > 0.0) || !step_size.is_finite() {
            return Err(Error::config(format!("step size must be positive, got {step_size}")));
        }
        Ok(AnnealSchedule {
            temperatures,
            step_size,
        })
    }

    /// `n_steps` at one temperature.
    pub fn constant(temperature: f64, n_steps: usize, step_size: f64) -> Result<Self> {
        Self::new(vec![temperature; n_steps], step_size)
    }

    /// Geometric decay from `t_start` to `t_end`, then a plateau at `t_end`
    /// over the last 10% of the steps. Uses the default step length.
    pub fn default_anneal(n_steps: usize, t_start: f64, t_end: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::config("anneal schedule needs at least one step"));
        }
        if !(t_end > 0.0) || !(t_start >= t_end) {
            return Err(Error::config(format!(
                "need t_start >= t_end > 0, got {t_start} and {t_end}"
            )));
        }
        let plateau = (n_steps as f64 * PLATEAU_FRACTION).floor() as usize;
        let decay = n_steps - plateau;
        let mut temps = Vec::with_capacity(n_steps);
        if decay == 1 {
            temps.push(t_start);
        } else {
            let ratio = t_end / t_start;
            let last = (decay - 1) as f64;
            temps.extend((0..decay).map(|i| t_start * ratio.powf(i as f64 / last)));
            temps[decay - 1] = t_end;
        }
        temps.extend(std::iter::repeat_n(t_end, plateau));
        Self::new(temps, DEFAULT_STEP_SIZE)
    }

    pub fn with_step_size(self, step_size: f64) -> Result<Self> {
        Self::new(self.temperatures, step_size)
    }

    pub fn temperatures(&self) -> &[f64] {
        &self.temperatures
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn len(&self) -> usize {
        self.temperatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.temperatures.is_empty()
    }

    /// Number of leading steps before the terminal plateau begins.
    pub fn decay_len(&self) -> usize {
        let last = *self.temperatures.last().unwrap();
        let plateau = self.temperatures.iter().rev().take_while(|&&t| t == last).count();
        (self.temperatures.len() - plateau + 1).min(self.temperatures.len())
    }
}

fn langevin_update<R: Rng + ?Sized>(x: &Tensor, grad: &Tensor, t: f64, eps: f64, rng: &mut R) -> Result<Tensor> {
    let drift = eps * eps / 2.0;
    let noise = eps * t.sqrt();
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| v - drift * g + noise * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(x.shape().to_vec(), data).map_err(|_| Error::Numeric {
        context: format!("non-finite Langevin proposal at T = {t}, eps = {eps}"),
    })
}

/// One unadjusted Langevin update of every row of `x`.
pub fn langevin_step<E, R>(model: &E, x: &Tensor, t: f64, eps: f64, rng: &mut R) -> Result<Tensor>
where
    E: EnergyFn + ?Sized,
    R: Rng + ?Sized,
{
    if !(t > 0.0) || !(eps > 0.0) {
        return Err(Error::config(format!("need T > 0 and eps > 0, got {t} and {eps}")));
    }
    let grad = model.energy_grad(x)?;
    langevin_update(x, &grad, t, eps, rng)
}

/// `x - σ₀² ∇E(x)`.
pub fn denoise_jump<E: EnergyFn + ?Sized>(model: &E, x: &Tensor, sigma0: f64) -> Result<Tensor> {
    if !(sigma0 > 0.0) {
        return Err(Error::config(format!("sigma0 must be positive, got {sigma0}")));
    }
    let grad = model.energy_grad(x)?;
    let s2 = sigma0 * sigma0;
    let data = x.data().iter().zip(grad.data()).map(|(v, g)| v - s2 * g).collect();
    Tensor::new(x.shape().to_vec(), data).map_err(|_| Error::Numeric {
        context: "non-finite denoising jump".into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub n_chains: usize,
    pub sigma0: f64,
    /// Chains start at this value in every coordinate, plus `√T₁·σ₀` noise.
    #[serde(default = "default_init_center")]
    pub init_center: f64,
    #[serde(default)]
    pub trace: bool,
}

fn default_init_center() -> f64 {
    0.5
}

impl SampleConfig {
    pub fn new(n_chains: usize, sigma0: f64) -> Self {
        SampleConfig {
            n_chains,
            sigma0,
            init_center: default_init_center(),
            trace: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub temperature: f64,
    pub mean_energy: f64,
    pub std_energy: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,temperature,mean_energy,std_energy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:e},{:e},{:e}\n",
            r.step, r.temperature, r.mean_energy, r.std_energy
        ));
    }
    out
}

/// Chains in flight.
#[derive(Clone, Debug)]
pub struct SamplerState {
    pub points: Tensor,
    pub step: usize,
    pub trace: Option<Vec<TraceRow>>,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// Points after the final denoising jump.
    pub samples: Tensor,
    /// Points at the end of the annealing, before the jump.
    pub noisy: Tensor,
    pub trace: Option<Vec<TraceRow>>,
}

/// Coordinates held at known values during sampling.
struct Clamp<'a> {
    known: &'a Tensor,
    mask: &'a [bool],
}

impl Clamp<'_> {
    fn apply<R: Rng + ?Sized>(&self, x: &mut [f64], scale: f64, rng: &mut R) {
        let d = self.mask.len();
        for (i, v) in x.iter_mut().enumerate() {
            if self.mask[i % d] {
                *v = self.known.data()[i] + scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

fn initial_points<R: Rng + ?Sized>(cfg: &SampleConfig, dim: usize, t0: f64, rng: &mut R) -> Result<Tensor> {
    if cfg.n_chains == 0 {
        return Err(Error::config("need at least one chain"));
    }
    if !(cfg.sigma0 > 0.0) {
        return Err(Error::config(format!("sigma0 must be positive, got {}", cfg.sigma0)));
    }
    let spread = t0.sqrt() * cfg.sigma0;
    Ok(Tensor::randn([cfg.n_chains, dim], rng).map(|v| cfg.init_center + spread * v))
}

fn run<E, R>(
    model: &E,
    schedule: &AnnealSchedule,
    cfg: &SampleConfig,
    clamp: Option<Clamp<'_>>,
    rng: &mut R,
) -> Result<SampleOutput>
where
    E: EnergyFn + ?Sized,
    R: Rng + ?Sized,
{
    let dim = model.input_dim();
    let temps = schedule.temperatures();
    let eps = schedule.step_size();
    let mut state = SamplerState {
        points: initial_points(cfg, dim, temps[0], rng)?,
        step: 0,
        trace: cfg.trace.then(|| Vec::with_capacity(temps.len())),
    };
    for &t in temps {
        if let Some(c) = &clamp {
            let mut data = state.points.clone().into_data();
            c.apply(&mut data, t.sqrt() * cfg.sigma0, rng);
            state.points = Tensor::new([cfg.n_chains, dim], data)?;
        }
        let (energy, grad) = model.energy_and_grad(&state.points)?;
        if let Some(trace) = state.trace.as_mut() {
            let mean = energy.mean();
            let var = energy.data().iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / energy.numel() as f64;
            trace.push(TraceRow {
                step: state.step,
                temperature: t,
                mean_energy: mean,
                std_energy: var.sqrt(),
            });
        }
        state.points = langevin_update(&state.points, &grad, t, eps, rng).map_err(|e| match e {
            Error::Numeric { context } => Error::Numeric {
                context: format!("step {}: {context}", state.step),
            },
            other => other,
        })?;
        state.step += 1;
    }
    let last_t = *temps.last().unwrap();
    if let Some(c) = &clamp {
        let mut data = state.points.clone().into_data();
        c.apply(&mut data, last_t.sqrt() * cfg.sigma0, rng);
        state.points = Tensor::new([cfg.n_chains, dim], data)?;
    }
    let mut samples = denoise_jump(model, &state.points, cfg.sigma0)?;
    if let Some(c) = &clamp {
        let mut data = samples.into_data();
        for (i, v) in data.iter_mut().enumerate() {
            if c.mask[i % dim] {
                *v = c.known.data()[i];
            }
        }
        samples = Tensor::new([cfg.n_chains, dim], data)?;
    }
    Ok(SampleOutput {
        samples,
        noisy: state.points,
        trace: state.trace,
    })
}

/// Draws `cfg.n_chains` samples by annealed Langevin dynamics followed by one
/// denoising jump.
pub fn sample<E, R>(model: &E, schedule: &AnnealSchedule, cfg: &SampleConfig, rng: &mut R) -> Result<SampleOutput>
where
    E: EnergyFn + ?Sized,
    R: Rng + ?Sized,
{
    run(model, schedule, cfg, None, rng)
}

/// Samples the free coordinates conditioned on the masked ones.
///
/// `known` is `[n_chains, dim]`; coordinates with `mask[j] == true` are reset
/// every step to their known value plus noise matched to the current
/// temperature, and restored exactly in the output.
pub fn inpaint<E, R>(
    model: &E,
    known: &Tensor,
    mask: &[bool],
    schedule: &AnnealSchedule,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<SampleOutput>
where
    E: EnergyFn + ?Sized,
    R: Rng + ?Sized,
{
    let dim = model.input_dim();
    if mask.len() != dim {
        return Err(Error::dim("inpaint", format!("mask has {} entries, data has {dim}", mask.len())));
    }
    if mask.iter().all(|&m| m) {
        return Err(Error::config("inpainting mask leaves no free coordinate"));
    }
    let rows = check_batch(known, dim, "inpaint")?;
    if rows != cfg.n_chains {
        return Err(Error::dim(
            "inpaint",
            format!("{rows} known rows for {} chains", cfg.n_chains),
        ));
    }
    run(model, schedule, cfg, Some(Clamp { known, mask }), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{ConstantEnergy, QuadraticEnergy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_schedule_shape() {
        let s = AnnealSchedule::default_anneal(2700, 100.0, 0.25).unwrap();
        assert_eq!(s.len(), 2700);
        assert_eq!(s.temperatures()[0], 100.0);
        assert_eq!(s.step_size(), 0.02);
        let t = s.temperatures();
        assert!(t[2430..].iter().all(|&v| v == 0.25));
        assert!(t.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(s.decay_len(), 2430);
    }

    #[test]
    fn single_step_schedule() {
        let s = AnnealSchedule::default_anneal(1, 100.0, 0.25).unwrap();
        assert_eq!(s.temperatures(), &[100.0]);
    }

    #[test]
    fn invalid_schedules() {
        assert!(AnnealSchedule::default_anneal(0, 1.0, 1.0).is_err());
        assert!(AnnealSchedule::default_anneal(10, 1.0, 2.0).is_err());
        assert!(AnnealSchedule::default_anneal(10, 1.0, 0.0).is_err());
        assert!(AnnealSchedule::new(vec![1.0], 0.0).is_err());
    }

    #[test]
    fn jump_recovers_point_mass_exactly() {
        let mu = vec![0.3, -0.2, 0.9];
        let sigma0: f64 = 0.1;
        let e = QuadraticEnergy::new(mu.clone(), sigma0 * sigma0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for scale in [0.01, 0.1, 1.0, 10.0] {
            let x = Tensor::randn([5, 3], &mut rng).map(|v| v * scale);
            let x = Tensor::new([5, 3], x.data().iter().enumerate().map(|(i, v)| v + mu[i % 3]).collect()).unwrap();
            let out = denoise_jump(&e, &x, sigma0).unwrap();
            for (i, v) in out.data().iter().enumerate() {
                assert!((v - mu[i % 3]).abs() <= 1e-12 * (1.0 + scale), "{v}");
            }
        }
    }

    #[test]
    fn jump_is_identity_without_gradient() {
        let e = ConstantEnergy { dim: 2, value: 0.0 };
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(denoise_jump(&e, &x, 0.1).unwrap(), x);
    }

    #[test]
    fn langevin_is_deterministic() {
        let e = QuadraticEnergy::isotropic(2, 1.0).unwrap();
        let x = Tensor::zeros([4, 2]);
        let a = langevin_step(&e, &x, 1.0, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = langevin_step(&e, &x, 1.0, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_true_mask_rejected() {
        let e = ConstantEnergy { dim: 2, value: 0.0 };
        let s = AnnealSchedule::constant(1.0, 3, 0.1).unwrap();
        let cfg = SampleConfig::new(1, 0.1);
        let known = Tensor::zeros([1, 2]);
        let r = inpaint(&e, &known, &[true, true], &s, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
