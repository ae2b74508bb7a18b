//! Partition functions by annealed importance sampling with Hamiltonian
//! Monte Carlo transitions.
//!
//! The path between the reference `N(0, s²I)` and the model is geometric:
//! `f_β(x) ∝ exp(-(1-β) E_ref(x) - β E(x))`. The forward estimator starts
//! chains at the reference and tends to underestimate `log Z`; the reverse
//! estimator starts at data and tends to overestimate it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{check_batch, EnergyFn, QuadraticEnergy};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spacing of the inverse temperatures `β_0 = 0 < … < β_K = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BetaSpacing {
    Linear,
    /// `β_k = (e^{λk/K} - 1) / (e^λ - 1)`: the temperature `1/β` decays
    /// roughly exponentially, so steps are finest near `β = 0`.
    Exponential { rate: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AisConfig {
    /// Number of annealing transitions `K`; the path has `K + 1` points.
    pub n_intermediates: usize,
    pub hmc_steps_per_dist: usize,
    pub leapfrog_steps: usize,
    pub leapfrog_eps: f64,
    pub n_chains: usize,
    pub beta_spacing: BetaSpacing,
    pub reference_std: f64,
}

impl Default for AisConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl AisConfig {
    /// 1000 intermediates, 100 chains, one 10-step HMC move each.
    pub fn desk() -> Self {
        AisConfig {
            n_intermediates: 1000,
            hmc_steps_per_dist: 1,
            leapfrog_steps: 10,
            leapfrog_eps: 0.1,
            n_chains: 100,
            beta_spacing: BetaSpacing::Linear,
            reference_std: 1.0,
        }
    }

    /// 10 000 intermediates with ten HMC moves each.
    pub fn paper() -> Self {
        AisConfig {
            n_intermediates: 10_000,
            hmc_steps_per_dist: 10,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_intermediates == 0 || self.hmc_steps_per_dist == 0 || self.leapfrog_steps == 0 || self.n_chains == 0
        {
            return Err(Error::config("AIS counts must all be at least 1"));
        }
        if !(self.leapfrog_eps > 0.0) || !(self.reference_std > 0.0) {
            return Err(Error::config("leapfrog_eps and reference_std must be positive"));
        }
        if let BetaSpacing::Exponential { rate } = self.beta_spacing {
            if !(rate > 0.0) || !rate.is_finite() {
                return Err(Error::config(format!("exponential beta rate must be positive, got {rate}")));
            }
        }
        Ok(())
    }

    pub fn betas(&self) -> Vec<f64> {
        beta_schedule(self.n_intermediates, self.beta_spacing)
    }

    pub fn reference(&self, dim: usize) -> Result<QuadraticEnergy> {
        QuadraticEnergy::isotropic(dim, self.reference_std * self.reference_std)
    }
}

/// `K + 1` strictly increasing inverse temperatures from exactly 0 to exactly 1.
pub fn beta_schedule(k: usize, spacing: BetaSpacing) -> Vec<f64> {
    let kf = k as f64;
    let mut betas: Vec<f64> = match spacing {
        BetaSpacing::Linear => (0..=k).map(|i| i as f64 / kf).collect(),
        BetaSpacing::Exponential { rate } => {
            let span = rate.exp_m1();
            (0..=k).map(|i| (rate * i as f64 / kf).exp_m1() / span).collect()
        }
    };
    betas[0] = 0.0;
    betas[k] = 1.0;
    betas
}

/// Potential `U(x)` and its gradient, row-wise.
pub trait Potential {
    fn potential_and_grad(&self, x: &Tensor) -> Result<(Tensor, Tensor)>;
}

impl<F> Potential for F
where
    F: Fn(&Tensor) -> Result<(Tensor, Tensor)>,
{
    fn potential_and_grad(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self(x)
    }
}

/// The intermediate `(1-β) E_ref + β E`.
struct Bridge<'a, E: ?Sized> {
    model: &'a E,
    reference: &'a QuadraticEnergy,
    beta: f64,
}

impl<E: EnergyFn + ?Sized> Potential for Bridge<'_, E> {
    fn potential_and_grad(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (em, gm) = self.model.energy_and_grad(x)?;
        let (er, gr) = self.reference.energy_and_grad(x)?;
        let (b, a) = (self.beta, 1.0 - self.beta);
        let mix = |r: &Tensor, m: &Tensor| {
            let data = r.data().iter().zip(m.data()).map(|(r, m)| a * r + b * m).collect();
            Tensor::from_parts(r.shape().to_vec(), data)
        };
        Ok((mix(&er, &em), mix(&gr, &gm)))
    }
}

/// Leapfrog integration of `L` steps for unit-mass Hamiltonian dynamics.
/// Values may become non-finite; callers treat such chains as rejected.
pub fn leapfrog<P: Potential + ?Sized>(
    potential: &P,
    x: &Tensor,
    p: &Tensor,
    eps: f64,
    steps: usize,
) -> Result<(Tensor, Tensor)> {
    let (_, mut grad) = potential.potential_and_grad(x)?;
    let mut x = x.data().to_vec();
    let mut p: Vec<f64> = p.data().iter().zip(grad.data()).map(|(p, g)| p - 0.5 * eps * g).collect();
    let shape = grad.shape().to_vec();
    for i in 0..steps {
        for (xv, pv) in x.iter_mut().zip(&p) {
            *xv += eps * pv;
        }
        let xt = Tensor::from_parts(shape.clone(), x.clone());
        grad = potential.potential_and_grad(&xt)?.1;
        let k = if i + 1 == steps { 0.5 * eps } else { eps };
        for (pv, g) in p.iter_mut().zip(grad.data()) {
            *pv -= k * g;
        }
    }
    Ok((Tensor::from_parts(shape.clone(), x), Tensor::from_parts(shape, p)))
}

#[derive(Clone, Debug)]
pub struct HmcOutput {
    pub x: Tensor,
    pub accept_rate: f64,
    /// Proposals rejected because the Hamiltonian was not finite.
    pub non_finite: usize,
}

/// One HMC transition per chain: fresh momentum, `L` leapfrog steps, and a
/// Metropolis test on the total energy.
pub fn hmc_step<P, R>(potential: &P, x: &Tensor, eps: f64, steps: usize, rng: &mut R) -> Result<HmcOutput>
where
    P: Potential + ?Sized,
    R: Rng + ?Sized,
{
    if !(eps > 0.0) || steps == 0 {
        return Err(Error::config(format!("need eps > 0 and L >= 1, got {eps} and {steps}")));
    }
    let [m, d] = x.shape()[..] else {
        return Err(Error::dim("hmc_step", format!("expected a matrix, got {:?}", x.shape())));
    };
    let p0 = Tensor::randn([m, d], rng);
    let (u0, _) = potential.potential_and_grad(x)?;
    let (x1, p1) = match leapfrog(potential, x, &p0, eps, steps) {
        Ok(v) => v,
        Err(Error::NonFinite { .. }) => (x.clone(), Tensor::full([m, d], f64::INFINITY)),
        Err(e) => return Err(e),
    };
    let u1 = if x1.is_finite() {
        potential.potential_and_grad(&x1)?.0
    } else {
        // evaluate only the finite rows
        let rows: Vec<f64> = x1
            .row_iter()
            .zip(x.row_iter())
            .flat_map(|(a, b)| if a.iter().all(|v| v.is_finite()) { a } else { b })
            .copied()
            .collect();
        let u = potential.potential_and_grad(&Tensor::from_parts(vec![m, d], rows))?.0;
        let data = u
            .data()
            .iter()
            .zip(x1.row_iter())
            .map(|(&u, r)| if r.iter().all(|v| v.is_finite()) { u } else { f64::NAN })
            .collect();
        Tensor::from_parts(vec![m], data)
    };
    let k0 = p0.row_sq_norms();
    let k1 = p1.row_sq_norms();
    let mut out = Vec::with_capacity(m * d);
    let (mut accepted, mut non_finite) = (0usize, 0usize);
    for i in 0..m {
        let h0 = u0.data()[i] + 0.5 * k0[i];
        let h1 = u1.data()[i] + 0.5 * k1[i];
        let log_u: f64 = rng.random::<f64>().ln();
        let take = if h1.is_finite() {
            log_u < h0 - h1
        } else {
            non_finite += 1;
            false
        };
        if take {
            accepted += 1;
            out.extend_from_slice(x1.row(i));
        } else {
            out.extend_from_slice(x.row(i));
        }
    }
    Ok(HmcOutput {
        x: Tensor::new([m, d], out)?,
        accept_rate: accepted as f64 / m as f64,
        non_finite,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Reverse,
}

#[derive(Clone, Debug, Serialize)]
pub struct AisResult {
    #[serde(rename = "logZ")]
    pub log_z: f64,
    pub stderr: f64,
    /// Effective sample size of the normalized importance weights.
    pub ess: f64,
    /// Set when `ess < 2`.
    pub degenerate: bool,
    pub direction: Direction,
    pub accept_rate: f64,
    pub log_weights: Vec<f64>,
    pub config: AisConfig,
}

impl AisResult {
    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("serializable");
        v.as_object_mut().unwrap().remove("log_weights");
        serde_json::to_string_pretty(&v).expect("serializable")
    }
}

pub fn log_mean_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + (v.iter().map(|x| (x - max).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// `(Σw)² / Σw²` for weights given as logs.
pub fn effective_sample_size(log_w: &[f64]) -> f64 {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = w.iter().sum();
    s * s / w.iter().map(|x| x * x).sum::<f64>()
}

const BOOTSTRAP_REPLICATES: usize = 200;

fn bootstrap_stderr<R: Rng + ?Sized>(log_w: &[f64], rng: &mut R) -> f64 {
    let n = log_w.len();
    let mut buf = vec![0.0; n];
    let reps: Vec<f64> = (0..BOOTSTRAP_REPLICATES)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = log_w[rng.random_range(0..n)];
            }
            log_mean_exp(&buf)
        })
        .collect();
    let mean = reps.iter().sum::<f64>() / reps.len() as f64;
    (reps.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (reps.len() - 1) as f64).sqrt()
}

fn energy_gap<E: EnergyFn + ?Sized>(model: &E, reference: &QuadraticEnergy, x: &Tensor) -> Result<Vec<f64>> {
    let em = model.energy(x)?;
    let er = reference.energy(x)?;
    Ok(er.data().iter().zip(em.data()).map(|(r, m)| r - m).collect())
}

struct Transitions {
    accepted: f64,
    moves: usize,
}

impl Transitions {
    fn run<E: EnergyFn + ?Sized, R: Rng + ?Sized>(
        &mut self,
        model: &E,
        reference: &QuadraticEnergy,
        cfg: &AisConfig,
        beta: f64,
        mut x: Tensor,
        rng: &mut R,
    ) -> Result<Tensor> {
        let bridge = Bridge { model, reference, beta };
        for _ in 0..cfg.hmc_steps_per_dist {
            let out = hmc_step(&bridge, &x, cfg.leapfrog_eps, cfg.leapfrog_steps, rng)?;
            self.accepted += out.accept_rate;
            self.moves += 1;
            x = out.x;
        }
        Ok(x)
    }

    fn rate(&self) -> f64 {
        if self.moves == 0 {
            1.0
        } else {
            self.accepted / self.moves as f64
        }
    }
}

fn finish<R: Rng + ?Sized>(
    log_w: Vec<f64>,
    sign: f64,
    log_z_ref: f64,
    direction: Direction,
    accept_rate: f64,
    cfg: &AisConfig,
    rng: &mut R,
) -> AisResult {
    let ess = effective_sample_size(&log_w);
    AisResult {
        log_z: log_z_ref + sign * log_mean_exp(&log_w),
        stderr: bootstrap_stderr(&log_w, rng),
        ess,
        degenerate: !(ess >= 2.0),
        direction,
        accept_rate,
        log_weights: log_w,
        config: cfg.clone(),
    }
}

/// Forward AIS from the reference Gaussian to the model.
pub fn ais_logz<E, R>(model: &E, cfg: &AisConfig, rng: &mut R) -> Result<AisResult>
where
    E: EnergyFn + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let d = model.input_dim();
    let reference = cfg.reference(d)?;
    let betas = cfg.betas();
    let mut x = Tensor::randn([cfg.n_chains, d], rng).map(|v| v * cfg.reference_std);
    let mut log_w = vec![0.0; cfg.n_chains];
    let mut moves = Transitions { accepted: 0.0, moves: 0 };
    for k in 1..betas.len() {
        let db = betas[k] - betas[k - 1];
        for (w, g) in log_w.iter_mut().zip(energy_gap(model, &reference, &x)?) {
            *w += db * g;
        }
        x = moves.run(model, &reference, cfg, betas[k], x, rng)?;
    }
    check_weights(&log_w, "forward AIS")?;
    Ok(finish(
        log_w,
        1.0,
        reference.log_partition(),
        Direction::Forward,
        moves.rate(),
        cfg,
        rng,
    ))
}

/// Reverse AIS: chains start at `data` (assumed drawn from the model) and
/// anneal back to the reference. `cfg.n_chains` is ignored; every row of
/// `data` is one chain.
pub fn reverse_ais_logz<E, R>(model: &E, data: &Tensor, cfg: &AisConfig, rng: &mut R) -> Result<AisResult>
where
    E: EnergyFn + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let d = model.input_dim();
    let m = check_batch(data, d, "reverse_ais_logz")?;
    if m == 0 {
        return Err(Error::config("reverse AIS needs at least one data point"));
    }
    let reference = cfg.reference(d)?;
    let betas = cfg.betas();
    let mut x = data.clone();
    let mut log_w = vec![0.0; m];
    let mut moves = Transitions { accepted: 0.0, moves: 0 };
    for k in (1..betas.len()).rev() {
        x = moves.run(model, &reference, cfg, betas[k], x, rng)?;
        let db = betas[k] - betas[k - 1];
        for (w, g) in log_w.iter_mut().zip(energy_gap(model, &reference, &x)?) {
            *w -= db * g;
        }
    }
    check_weights(&log_w, "reverse AIS")?;
    Ok(finish(
        log_w,
        -1.0,
        reference.log_partition(),
        Direction::Reverse,
        moves.rate(),
        cfg,
        rng,
    ))
}

fn check_weights(log_w: &[f64], what: &str) -> Result<()> {
    if log_w.iter().any(|w| !w.is_finite()) {
        return Err(Error::Numeric {
            context: format!("{what}: non-finite log weight"),
        });
    }
    Ok(())
}

/// Mean over rows of `log p(x) = -E(x) - log Z`.
pub fn mean_log_density<E: EnergyFn + ?Sized>(model: &E, x: &Tensor, log_z: f64) -> Result<f64> {
    Ok(-model.energy(x)?.mean() - log_z)
}

/// Negative log likelihood in bits per dimension. `domain_scale` is the
/// width of the original data range per unit of model coordinates, so data
/// in `[0, 255]` modeled on `[0, 1]` uses 256.
pub fn bits_per_dim(log_density_nats: f64, d: usize, domain_scale: f64) -> Result<f64> {
    if d == 0 || !(domain_scale > 0.0) {
        return Err(Error::config(format!(
            "need d >= 1 and domain_scale > 0, got {d} and {domain_scale}"
        )));
    }
    Ok(-log_density_nats / (d as f64 * std::f64::consts::LN_2) + domain_scale.log2())
}
