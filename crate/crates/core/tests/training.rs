mod common;

use mdsm_core::sampler::denoise_jump;
use mdsm_core::train::{
    dsm_single_loss, loss_and_grads, mdsm_loss, mdsm_loss_weighted, mdsm_star_loss, sample_batch, train, TrainConfig,
};
use mdsm_core::{EnergyFn, EnergyNet, NetConfig, NoiseSchedule, Spacing, Tape, Tensor, Weighting};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_net(seed: u64) -> EnergyNet {
    EnergyNet::init(NetConfig::new(3, vec![16, 16], seed)).unwrap()
}

#[test]
fn sigma0_rescaling_is_bit_exact() {
    let net = small_net(1);
    let x = Tensor::randn([64, 3], &mut rng(2));
    let base = NoiseSchedule::new(0.05, 1.2, 16, Spacing::Linear, 0.1).unwrap();
    let tape = Tape::new();
    let reference = mdsm_loss(&net.bind(&tape, false), &x, &base, &mut rng(3)).unwrap().value();
    for alpha in [2.0, 0.5, 4.0] {
        let scaled = base.with_sigma0(alpha * 0.1).unwrap();
        let bound = net.bind(&tape, false).with_energy_scale(1.0 / (alpha * alpha));
        let v = mdsm_loss(&bound, &x, &scaled, &mut rng(3)).unwrap().value();
        assert_eq!(v.to_bits(), reference.to_bits(), "alpha {alpha}");
    }
}

#[test]
fn single_level_mdsm_is_dsm() {
    let net = small_net(4);
    let x = Tensor::randn([32, 3], &mut rng(5));
    let tape = Tape::new();
    let bound = net.bind(&tape, false);
    let schedule = NoiseSchedule::single(0.3, 0.1).unwrap();
    let a = mdsm_loss_weighted(&bound, &x, &schedule, Weighting::Uniform, &mut rng(6)).unwrap();
    let b = dsm_single_loss(&bound, &x, 0.3, 0.1, &mut rng(6)).unwrap();
    assert_eq!(a.value().to_bits(), b.value().to_bits());
    assert_eq!(a.noisy, b.noisy);
}

#[test]
fn zero_noise_limit() {
    let net = small_net(7);
    let x = Tensor::randn([64, 3], &mut rng(8));
    let sigma0: f64 = 0.5;
    let tape = Tape::new();
    let loss = dsm_single_loss(&net.bind(&tape, false), &x, 1e-8, sigma0, &mut rng(9)).unwrap().value();
    let g = net.energy_grad(&x).unwrap();
    let expect = sigma0.powi(4) * g.row_sq_norms().iter().sum::<f64>() / 64.0;
    assert!(((loss - expect) / expect).abs() <= 1e-6, "{loss} vs {expect}");
}

#[test]
fn star_weights_collapse_for_separated_points() {
    // min pairwise distance 10 ≥ 20·σ_K·√d = 5.66
    let data = Tensor::matrix(4, 2, vec![0.0, 0.0, 10.0, 0.0, 0.0, 10.0, 10.0, 10.0]).unwrap();
    let schedule = NoiseSchedule::new(0.05, 0.2, 4, Spacing::Linear, 0.1).unwrap();
    let tape = Tape::new();
    let net = EnergyNet::init(NetConfig::new(2, vec![8], 0)).unwrap().bind(&tape, false);
    let r = mdsm_star_loss(&net, &data, 64, &schedule, false, &mut rng(10)).unwrap();
    for w in &r.weights {
        assert!((w - 1.0).abs() <= 1e-6, "{w}");
    }
    assert!(r.stats.min <= r.stats.median && r.stats.median <= r.stats.max);
}

#[test]
fn star_with_unit_weights_is_unweighted_mdsm() {
    let data = Tensor::randn([50, 2], &mut rng(11));
    let schedule = NoiseSchedule::new(0.05, 1.2, 8, Spacing::Linear, 0.1).unwrap();
    let tape = Tape::new();
    let net = EnergyNet::init(NetConfig::new(2, vec![8], 1)).unwrap().bind(&tape, false);
    let star = mdsm_star_loss(&net, &data, 32, &schedule, true, &mut rng(12)).unwrap();
    let mut r = rng(12);
    let (clean, _) = sample_batch(&data, 32, &mut r).unwrap();
    let plain = mdsm_loss_weighted(&net, &clean, &schedule, Weighting::Uniform, &mut r).unwrap();
    assert_eq!(star.eval.value().to_bits(), plain.value().to_bits());
}

#[test]
fn star_loss_vanishes_at_point_mass_optimum() {
    let mu = [0.2, 0.4];
    let s2: f64 = 0.01;
    let mut net = EnergyNet::init(NetConfig::new(2, vec![], 0)).unwrap();
    let v = |d: Vec<f64>| Tensor::vector(d).unwrap();
    net.set_param("head.a", v(mu.iter().map(|m| -m / s2).collect())).unwrap();
    net.set_param("head.c", v(vec![0.0; 2])).unwrap();
    net.set_param("head.d", v(vec![0.5 / s2; 2])).unwrap();
    net.set_param("head.b1", v(vec![0.0])).unwrap();
    net.set_param("head.b2", v(vec![1.0])).unwrap();
    let data = Tensor::matrix(1, 2, mu.to_vec()).unwrap();
    let schedule = NoiseSchedule::new(0.05, 1.2, 8, Spacing::Linear, 0.1).unwrap();
    let tape = Tape::new();
    let bound = net.bind(&tape, false);
    let star = mdsm_star_loss(&bound, &data, 32, &schedule, false, &mut rng(13)).unwrap();
    assert!(star.eval.value() <= 1e-20);
    let x = Tensor::new([32, 2], mu.repeat(32)).unwrap();
    assert!(mdsm_loss(&bound, &x, &schedule, &mut rng(14)).unwrap().value() <= 1e-20);
}

#[test]
fn training_is_deterministic() {
    let data = Tensor::randn([200, 3], &mut rng(15));
    let mut cfg = TrainConfig::new(NoiseSchedule::new(0.05, 1.2, 8, Spacing::Linear, 0.1).unwrap());
    cfg.steps = 100;
    cfg.batch_size = 16;
    cfg.checkpoint_every = 0;
    let run = || {
        let mut net = small_net(16);
        let report = train(&data, &mut net, &cfg, |_, _| Ok(())).unwrap();
        (net, report.history)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_ne!(a, small_net(16));
}

#[test]
fn checkpoint_callback_cadence() {
    let data = Tensor::randn([20, 2], &mut rng(17));
    let mut cfg = TrainConfig::new(NoiseSchedule::single(0.1, 0.1).unwrap());
    cfg.steps = 25;
    cfg.batch_size = 4;
    cfg.checkpoint_every = 10;
    let mut net = EnergyNet::init(NetConfig::new(2, vec![4], 0)).unwrap();
    let mut seen = Vec::new();
    train(&data, &mut net, &cfg, |s, _| {
        seen.push(s);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![10, 20]);
}

#[test]
fn loss_and_grads_shapes() {
    let net = small_net(18);
    let x = Tensor::randn([8, 3], &mut rng(19));
    let schedule = NoiseSchedule::new(0.1, 1.0, 4, Spacing::Geometric, 0.1).unwrap();
    let (loss, grads) = loss_and_grads(&net, &x, &schedule, Weighting::InverseVariance, &mut rng(20)).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    for (g, p) in grads.iter().zip(net.params()) {
        assert_eq!(g.shape(), p.shape());
    }
}

#[test]
fn point_mass_optimum_is_learned() {
    let t = common::point_mass_net();
    let mu = common::POINT_MASS;
    let s0 = common::POINT_MASS_SIGMA0;
    let mut r = rng(21);
    // shell points at every radius up to 3σ₀√d
    let n = 400;
    let max_r = 3.0 * s0 * 2f64.sqrt();
    let mut pts = Vec::with_capacity(2 * n);
    for i in 0..n {
        let radius = max_r * (i + 1) as f64 / n as f64;
        let u = Tensor::randn([2], &mut r);
        let norm = u.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        pts.extend((0..2).map(|j| mu[j] + radius * u.data()[j] / norm));
    }
    let x = Tensor::new([n, 2], pts).unwrap();
    let jumped = denoise_jump(&t.net, &x, s0).unwrap();
    for row in jumped.row_iter() {
        let err = ((row[0] - mu[0]).powi(2) + (row[1] - mu[1]).powi(2)).sqrt();
        assert!(err <= 0.05, "jump error {err}");
    }
    // learned gradient against (x̃ - μ)/σ₀² on the σ₀ shell
    let shell: Vec<f64> = (0..n)
        .flat_map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let r = s0 * 2f64.sqrt();
            [mu[0] + r * a.cos(), mu[1] + r * a.sin()]
        })
        .collect();
    let x = Tensor::new([n, 2], shell).unwrap();
    let g = t.net.energy_grad(&x).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for (gr, xr) in g.row_iter().zip(x.row_iter()) {
        for j in 0..2 {
            let e = (xr[j] - mu[j]) / (s0 * s0);
            num += (gr[j] - e).powi(2);
            den += e * e;
        }
    }
    assert!((num / den).sqrt() <= 0.05, "relative error {}", (num / den).sqrt());
}

#[test]
fn gaussian_dsm_optimum_is_learned() {
    let t = common::gaussian_net();
    let s = common::GAUSS_SIGMA;
    let mut r = rng(22);
    let x = Tensor::randn([4000, 2], &mut r);
    let noisy = Tensor::new([4000, 2], x.data().iter().map(|v| v + s * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut r)).collect()).unwrap();
    let g = t.net.energy_grad(&noisy).unwrap();
    let truth = noisy.map(|v| -v / (1.0 + s * s));
    assert!(common::mean_neg_cosine(&g, &truth) >= 0.99);
}

#[test]
fn ring_loss_trend_decreases() {
    let t = common::ring_net();
    let block = 1000;
    let means: Vec<f64> = t.losses.chunks(block).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(means.len() >= 10);
    // trend: every 1000-step average at or below the first one, and the last
    // quarter below the second quarter
    let q = means.len() / 4;
    let second: f64 = means[q..2 * q].iter().sum::<f64>() / q as f64;
    let last: f64 = means[3 * q..].iter().sum::<f64>() / (means.len() - 3 * q) as f64;
    assert!(means.iter().all(|&m| m <= means[0]), "{means:?}");
    assert!(last <= second, "{means:?}");
}
