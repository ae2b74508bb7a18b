use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mdsm_core::sampler::langevin_step;
use mdsm_core::train::loss_and_grads;
use mdsm_core::{EnergyFn, EnergyNet, NetConfig, NoiseSchedule, Spacing, Tensor, Weighting};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ring_net(width: usize) -> EnergyNet {
    EnergyNet::init(NetConfig::new(2, vec![width, width], 0)).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let a = Tensor::randn([n, n], &mut rng(1));
        let b = Tensor::randn([n, n], &mut rng(2));
        group.throughput(Throughput::Elements((2 * n * n * n) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn energy_grad(c: &mut Criterion) {
    let mut group = c.benchmark_group("energy_grad");
    let x = Tensor::randn([128, 2], &mut rng(3));
    for width in [64, 128] {
        let net = ring_net(width);
        group.bench_with_input(BenchmarkId::new("batch128", width), &width, |bench, _| {
            bench.iter(|| net.energy_and_grad(black_box(&x)).unwrap())
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_grads");
    let x = Tensor::randn([128, 2], &mut rng(4));
    let schedule = NoiseSchedule::new(0.05, 1.2, 128, Spacing::Linear, 0.1).unwrap();
    for width in [64, 128] {
        let net = ring_net(width);
        group.bench_with_input(BenchmarkId::new("batch128", width), &width, |bench, _| {
            let mut r = rng(5);
            bench.iter(|| loss_and_grads(&net, black_box(&x), &schedule, Weighting::InverseVariance, &mut r).unwrap())
        });
    }
    group.finish();
}

fn langevin(c: &mut Criterion) {
    let mut group = c.benchmark_group("langevin_step");
    let net = ring_net(128);
    for chains in [256, 2000] {
        let x = Tensor::randn([chains, 2], &mut rng(6));
        group.throughput(Throughput::Elements(chains as u64));
        group.bench_with_input(BenchmarkId::from_parameter(chains), &chains, |bench, _| {
            let mut r = rng(7);
            bench.iter(|| langevin_step(&net, black_box(&x), 1.0, 0.02, &mut r).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, energy_grad, train_step, langevin);
criterion_main!(benches);
