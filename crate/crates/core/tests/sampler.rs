use mdsm_core::analysis::GmmEnergy;
use mdsm_core::sampler::{denoise_jump, inpaint, langevin_step, sample};
use mdsm_core::{
    AnnealSchedule, ConstantEnergy, EnergyFn, EnergyNet, Error, GmmOracle, NetConfig, QuadraticEnergy, SampleConfig,
    ScaledEnergy, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn column_variance(x: &Tensor, j: usize) -> f64 {
    let col: Vec<f64> = x.row_iter().map(|r| r[j]).collect();
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

#[test]
fn constant_energy_is_pure_diffusion() {
    let model = ConstantEnergy { dim: 2, value: 3.0 };
    let (t, eps) = (2.5, 0.02);
    let x = Tensor::zeros([100_000, 2]);
    let step = langevin_step(&model, &x, t, eps, &mut rng(0)).unwrap();
    for j in 0..2 {
        let var = column_variance(&step, j);
        assert!((var / (eps * eps * t) - 1.0).abs() <= 0.02, "{var}");
    }
}

#[test]
fn quadratic_energy_reaches_ou_stationary_variance() {
    let model = QuadraticEnergy::isotropic(2, 1.0).unwrap();
    let (t, eps) = (1.0, 0.1);
    let mut r = rng(1);
    let mut x = Tensor::zeros([10_000, 2]);
    for _ in 0..2000 {
        x = langevin_step(&model, &x, t, eps, &mut r).unwrap();
    }
    let exact = t / (1.0 - eps * eps / 4.0);
    for j in 0..2 {
        let var = column_variance(&x, j);
        assert!((var / t - 1.0).abs() <= 0.05, "{var}");
        assert!((var / exact - 1.0).abs() <= 0.05, "{var}");
    }
}

#[test]
fn langevin_rejects_bad_parameters_and_non_finite_proposals() {
    let model = ConstantEnergy { dim: 1, value: 0.0 };
    let x = Tensor::zeros([1, 1]);
    assert!(matches!(langevin_step(&model, &x, 0.0, 0.1, &mut rng(0)), Err(Error::Config(_))));
    assert!(matches!(langevin_step(&model, &x, 1.0, -0.1, &mut rng(0)), Err(Error::Config(_))));
    // finite gradient, overflowing drift
    let r = langevin_step(&Cliff, &x, 1.0, 100.0, &mut rng(0));
    assert!(matches!(r, Err(Error::Numeric { .. })), "{r:?}");
}

struct Cliff;

impl EnergyFn for Cliff {
    fn input_dim(&self) -> usize {
        1
    }
    fn energy(&self, x: &Tensor) -> mdsm_core::Result<Tensor> {
        Ok(Tensor::zeros([x.rows()]))
    }
    fn energy_and_grad(&self, x: &Tensor) -> mdsm_core::Result<(Tensor, Tensor)> {
        Ok((self.energy(x)?, Tensor::full([x.rows(), 1], 1e307)))
    }
}

fn tiny_net() -> EnergyNet {
    EnergyNet::init(NetConfig::new(2, vec![16, 16], 9)).unwrap()
}

#[test]
fn sampling_is_deterministic() {
    let net = tiny_net();
    let schedule = AnnealSchedule::default_anneal(200, 100.0, 0.25).unwrap();
    let mut cfg = SampleConfig::new(64, 0.1);
    cfg.trace = true;
    let a = sample(&net, &schedule, &cfg, &mut rng(2)).unwrap();
    let b = sample(&net, &schedule, &cfg, &mut rng(2)).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.noisy, b.noisy);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.trace.unwrap().len(), schedule.len());
}

#[test]
fn temperature_rescaling_is_bit_exact() {
    let net = tiny_net();
    let schedule = AnnealSchedule::default_anneal(300, 100.0, 0.25).unwrap();
    let cfg = SampleConfig::new(32, 0.1);
    let reference = sample(&net, &schedule, &cfg, &mut rng(3)).unwrap();
    for alpha in [2.0, 0.5, 4.0] {
        let scaled = ScaledEnergy {
            inner: &net,
            factor: 1.0 / (alpha * alpha),
        };
        let temps = schedule.temperatures().iter().map(|t| t / (alpha * alpha)).collect();
        let s = AnnealSchedule::new(temps, alpha * schedule.step_size()).unwrap();
        let c = SampleConfig::new(32, alpha * 0.1);
        let out = sample(&scaled, &s, &c, &mut rng(3)).unwrap();
        assert_eq!(out.noisy, reference.noisy, "alpha {alpha}");
        assert_eq!(out.samples, reference.samples, "alpha {alpha}");
    }
}

#[test]
fn constant_net_gives_final_gaussian_cloud() {
    let model = ConstantEnergy { dim: 2, value: 0.0 };
    let schedule = AnnealSchedule::default_anneal(100, 4.0, 1.0).unwrap();
    let sigma0 = 0.1;
    let cfg = SampleConfig::new(50_000, sigma0);
    let out = sample(&model, &schedule, &cfg, &mut rng(4)).unwrap();
    let eps = schedule.step_size();
    let t = schedule.temperatures();
    let expect = t[0] * sigma0 * sigma0 + eps * eps * t.iter().sum::<f64>();
    assert_eq!(out.samples, out.noisy);
    for j in 0..2 {
        let var = column_variance(&out.samples, j);
        assert!((var / expect - 1.0).abs() <= 0.02, "{var} vs {expect}");
    }
}

#[test]
fn jump_to_point_mass_is_exact() {
    let mu = vec![0.3, -1.2, 2.0];
    let sigma0: f64 = 0.1;
    let model = QuadraticEnergy::new(mu.clone(), sigma0 * sigma0).unwrap();
    for scale in [0.01, 0.1, 1.0, 10.0] {
        let x = Tensor::randn([200, 3], &mut rng(5)).map(|v| v * scale);
        let y = denoise_jump(&model, &x, sigma0).unwrap();
        for (row, xr) in y.row_iter().zip(x.row_iter()) {
            for j in 0..3 {
                // exact up to rounding of x - (x - μ)
                let ulp = 4.0 * f64::EPSILON * xr[j].abs().max(mu[j].abs());
                assert!((row[j] - mu[j]).abs() <= ulp, "{} vs {}", row[j], mu[j]);
            }
        }
    }
}

#[test]
fn jump_is_gaussian_posterior_mean() {
    let mu = vec![0.5, -0.5];
    let (s2, sigma0) = (0.04, 0.3);
    let total = s2 + sigma0 * sigma0;
    let model = QuadraticEnergy::new(mu.clone(), total).unwrap();
    let x = Tensor::randn([100, 2], &mut rng(6));
    let y = denoise_jump(&model, &x, sigma0).unwrap();
    for (row, xr) in y.row_iter().zip(x.row_iter()) {
        for j in 0..2 {
            let expect = xr[j] - sigma0 * sigma0 * (xr[j] - mu[j]) / total;
            assert!((row[j] - expect).abs() <= 1e-14);
        }
    }
}

#[test]
fn jump_with_zero_gradient_is_identity() {
    let x = Tensor::randn([10, 4], &mut rng(7));
    let y = denoise_jump(&ConstantEnergy { dim: 4, value: 1.0 }, &x, 0.2).unwrap();
    assert_eq!(x, y);
    assert!(matches!(denoise_jump(&ConstantEnergy { dim: 4, value: 1.0 }, &x, 0.0), Err(Error::Config(_))));
}

#[test]
fn inpaint_without_mask_is_sample() {
    let net = tiny_net();
    let schedule = AnnealSchedule::default_anneal(150, 100.0, 0.25).unwrap();
    let cfg = SampleConfig::new(40, 0.1);
    let known = Tensor::randn([40, 2], &mut rng(8));
    let a = inpaint(&net, &known, &[false, false], &schedule, &cfg, &mut rng(9)).unwrap();
    let b = sample(&net, &schedule, &cfg, &mut rng(9)).unwrap();
    assert_eq!(a.samples, b.samples);
}

#[test]
fn inpaint_rejects_full_mask() {
    let net = tiny_net();
    let schedule = AnnealSchedule::constant(1.0, 5, 0.02).unwrap();
    let cfg = SampleConfig::new(4, 0.1);
    let known = Tensor::zeros([4, 2]);
    let r = inpaint(&net, &known, &[true, true], &schedule, &cfg, &mut rng(0));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn inpaint_samples_ring_conditional() {
    let oracle = GmmOracle::ring(8, 1.0, 0.05, [0.5, 0.5]).unwrap();
    let sigma0 = 0.1;
    let model = GmmEnergy {
        oracle: oracle.clone(),
        sigma: sigma0,
    };
    // clamp x to the mode at angle π/2; the conditional has modes at the
    // y-values of every mean sharing that x
    let x0 = oracle.means().get(2, 0);
    let cond: Vec<f64> = oracle
        .means()
        .row_iter()
        .filter(|m| (m[0] - x0).abs() < 1e-9)
        .map(|m| m[1])
        .collect();
    assert_eq!(cond.len(), 2);
    let n = 500;
    let known = Tensor::new([n, 2], [x0, 0.0].repeat(n)).unwrap();
    let schedule = AnnealSchedule::default_anneal(2700, 100.0, 0.25).unwrap();
    let cfg = SampleConfig::new(n, sigma0);
    let out = inpaint(&model, &known, &[true, false], &schedule, &cfg, &mut rng(10)).unwrap();
    let hits = out
        .samples
        .row_iter()
        .filter(|r| cond.iter().any(|y| (r[1] - y).abs() <= 0.1))
        .count();
    assert!(hits as f64 >= 0.95 * n as f64, "{hits}/{n}");
    assert!(out.samples.row_iter().all(|r| r[0] == x0));
}

proptest! {
    #[test]
    fn masked_coordinates_are_restored_exactly(seed in any::<u64>(), m0 in any::<bool>()) {
        let net = tiny_net();
        let schedule = AnnealSchedule::default_anneal(20, 10.0, 0.5).unwrap();
        let cfg = SampleConfig::new(8, 0.1);
        let known = Tensor::randn([8, 2], &mut rng(seed));
        let mask = [m0, !m0];
        let out = inpaint(&net, &known, &mask, &schedule, &cfg, &mut rng(seed ^ 1)).unwrap();
        for (row, k) in out.samples.row_iter().zip(known.row_iter()) {
            for j in 0..2 {
                if mask[j] {
                    prop_assert_eq!(row[j].to_bits(), k[j].to_bits());
                }
            }
        }
    }

    #[test]
    fn default_anneal_is_monotone(n in 1usize..3000, t_end in 0.01f64..10.0, ratio in 1.0f64..1e4) {
        let t_start = t_end * ratio;
        let s = AnnealSchedule::default_anneal(n, t_start, t_end).unwrap();
        let t = s.temperatures();
        prop_assert_eq!(t.len(), n);
        prop_assert_eq!(t[0], t_start);
        prop_assert!(t.windows(2).all(|w| w[1] <= w[0]));
        if n > 1 {
            prop_assert_eq!(*t.last().unwrap(), t_end);
        }
    }
}
