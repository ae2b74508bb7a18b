//! Shared fixtures: trained nets are cached under the cargo test tmpdir so
//! every test binary reuses one training run per configuration.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use mdsm_core::io::{fnv1a64, load_checkpoint, parse_csv, save_checkpoint, write_file};
use mdsm_core::train::{train, TrainConfig};
use mdsm_core::{Config, EnergyNet, GmmOracle, NetConfig, NoiseSchedule, Spacing, Tensor, Weighting};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

static TRAIN_LOCK: Mutex<()> = Mutex::new(());

/// The desk-scale ring experiment: 8 modes, radius 1, s = 0.05, σ₀ = 0.1,
/// 128 linear levels on [0.05, 1.2], hidden [128, 128], lr 1e-3, 20k steps.
pub fn ring_config() -> Config {
    let mut c = Config::default();
    c.net.hidden_dims = vec![128, 128];
    c.train.learning_rate = 1e-3;
    c.train.checkpoint_every = 0;
    c.resolve().unwrap()
}

/// Same data and net, one noise level σ = σ₀ = 0.3 with unit weights.
pub fn single_noise_config() -> Config {
    let mut c = ring_config();
    c.noise.min = 0.3;
    c.noise.max = 0.3;
    c.noise.levels = 1;
    c.noise.sigma0 = 0.3;
    c.train.weighting = Weighting::Uniform;
    c.sample.t_end = None;
    c.resolve().unwrap()
}

pub fn ring_oracle(c: &Config) -> GmmOracle {
    c.data.oracle().unwrap()
}

pub struct Trained {
    pub net: EnergyNet,
    pub losses: Vec<f64>,
}

/// Trains once per distinct (name, data, net, schedule) and caches the result
/// across test binaries.
pub fn cached_train(name: &str, data: &Tensor, net: &NetConfig, cfg: &TrainConfig) -> Trained {
    cached_train_phases(name, data, net, std::slice::from_ref(cfg))
}

/// Trains through each phase in turn, continuing from the previous weights.
pub fn cached_train_phases(name: &str, data: &Tensor, net: &NetConfig, phases: &[TrainConfig]) -> Trained {
    let _guard = TRAIN_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let mut key_src = format!("{name}|{net:?}|{phases:?}|").into_bytes();
    for v in data.data() {
        key_src.extend_from_slice(&v.to_le_bytes());
    }
    let key = fnv1a64(&key_src);
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let ckpt = dir.join(format!("{name}-{key:016x}.ckpt"));
    let hist = dir.join(format!("{name}-{key:016x}.loss.csv"));
    if let (Ok(ck), Ok(text)) = (load_checkpoint(&ckpt), std::fs::read_to_string(&hist)) {
        return Trained {
            net: ck.net,
            losses: parse_csv(&text).unwrap().data().to_vec(),
        };
    }
    let mut model = EnergyNet::init(net.clone()).unwrap();
    let mut losses = Vec::new();
    for cfg in phases {
        let report = train(data, &mut model, cfg, |_, _| Ok(())).unwrap();
        losses.extend(report.history.iter().map(|r| r.loss));
    }
    let text: String = losses.iter().map(|l| format!("{l}\n")).collect();
    write_file(&hist, text).unwrap();
    let steps = phases.iter().map(|c| c.steps).sum();
    save_checkpoint(&model, steps, None, &ckpt).unwrap();
    Trained { net: model, losses }
}

pub fn trained_from_config(name: &str, config: &Config) -> Trained {
    let data = config.dataset(Path::new(".")).unwrap();
    cached_train(name, &data, &config.net_config(data.cols()), &config.train_config().unwrap())
}

pub fn ring_net() -> Trained {
    trained_from_config("ring-mdsm", &ring_config())
}

pub fn single_noise_net() -> Trained {
    trained_from_config("ring-single", &single_noise_config())
}

pub const POINT_MASS: [f64; 2] = [0.3, 0.6];
pub const POINT_MASS_SIGMA0: f64 = 0.1;

/// MDSM on a dataset that is a single point.
pub fn point_mass_net() -> Trained {
    let data = Tensor::new([1, 2], POINT_MASS.to_vec()).unwrap();
    let schedule = NoiseSchedule::new(0.05, 1.2, 128, Spacing::Linear, POINT_MASS_SIGMA0).unwrap();
    let mut cfg = TrainConfig::new(schedule);
    cfg.adam.learning_rate = 1e-3;
    cfg.steps = 10_000;
    cfg.checkpoint_every = 0;
    cached_train("point-mass", &data, &NetConfig::new(2, vec![64, 64], 1), &cfg)
}

pub const GAUSS_SIGMA: f64 = 0.5;

/// Single-level DSM with σ = σ₀ = 0.5 on 20 000 draws from N(0, I₂).
pub fn gaussian_net() -> Trained {
    let data = Tensor::randn([20_000, 2], &mut ChaCha8Rng::seed_from_u64(77));
    let schedule = NoiseSchedule::single(GAUSS_SIGMA, GAUSS_SIGMA).unwrap();
    let mut cfg = TrainConfig::new(schedule);
    cfg.weighting = Weighting::Uniform;
    cfg.steps = 10_000;
    cfg.checkpoint_every = 0;
    // step-decayed learning rate; the final iterate at a fixed rate keeps ~7% gradient noise
    let phases: Vec<TrainConfig> = [1e-3, 1e-4, 1e-5]
        .iter()
        .enumerate()
        .map(|(i, &lr)| {
            let mut c = cfg.clone();
            c.adam.learning_rate = lr;
            c.seed = i as u64;
            c
        })
        .collect();
    cached_train_phases("gaussian-dsm", &data, &NetConfig::new(2, vec![64, 64], 2), &phases)
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    sxy / (sxx * syy).sqrt()
}

/// Mean cosine between `-a` rows and `b` rows.
pub fn mean_neg_cosine(a: &Tensor, b: &Tensor) -> f64 {
    let mut total = 0.0;
    for (u, v) in a.row_iter().zip(b.row_iter()) {
        let dot: f64 = u.iter().zip(v).map(|(p, q)| -p * q).sum();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        total += dot / (nu * nv);
    }
    total / a.rows() as f64
}
