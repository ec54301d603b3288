use criterion::{criterion_group, criterion_main, Criterion};
use qcert::certbounds::{self, CertInputs};
use qcert::qchannel::{self, DiamondOptions, NamedChannel, RandomChannelKind};
use qcert::qstate::{self, RandomStateKind};
use qcert::simkit::{self, ChannelStrategy, DetectorModel, ProtocolParams, SimulationOptions, SourceModel};
use qcert::tomography;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn bench_certify(c: &mut Criterion) {
    let inputs = CertInputs::one_sided(0.9943, 0.0142, 1_000_000_000, 0.473, 7.0).with_trusted_loss(0.526);
    c.bench_function("certify", |b| {
        b.iter(|| certbounds::certify(black_box(&inputs)).unwrap())
    });
}

fn bench_fidelity(c: &mut Criterion) {
    let d = qstate::HilbertDim::new(4).unwrap();
    let rho = qstate::sample_random(RandomStateKind::Mixed, d, 1).to_density();
    let sigma = qstate::sample_random(RandomStateKind::Mixed, d, 2).to_density();
    c.bench_function("fidelity_mixed_4", |b| {
        b.iter(|| qstate::fidelity(black_box(&rho), black_box(&sigma)).unwrap())
    });
}

fn bench_diamond(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ch = qchannel::random_channel(2, 2, 2, RandomChannelKind::Cptd, &mut rng);
    let reference = qchannel::identity(2);
    let opts = DiamondOptions {
        samples: 256,
        ..DiamondOptions::default()
    };
    c.bench_function("diamond_sine_256", |b| {
        b.iter(|| qchannel::diamond_sine_estimate(&ch, &reference, opts).unwrap())
    });
}

fn bench_simulate(c: &mut Criterion) {
    let source = SourceModel::werner(0.9929).unwrap();
    let strategy = ChannelStrategy::honest(NamedChannel::UniformLoss { loss: 0.5 });
    let params = ProtocolParams::new(10_000, 0.5, 7.0);
    c.bench_function("simulate_k1e4", |b| {
        b.iter(|| {
            simkit::simulate_protocol(
                &source,
                &strategy,
                &DetectorModel::ideal(),
                &params,
                7,
                SimulationOptions::default(),
            )
            .unwrap()
        })
    });
}

fn bench_tomography(c: &mut Criterion) {
    let rho = qstate::werner(0.95).unwrap();
    c.bench_function("bell_fidelity_opt", |b| {
        b.iter(|| tomography::bell_fidelity_opt(black_box(&rho)).unwrap())
    });
}

criterion_group!(
    benches,
    bench_certify,
    bench_fidelity,
    bench_diamond,
    bench_simulate,
    bench_tomography
);
criterion_main!(benches);
