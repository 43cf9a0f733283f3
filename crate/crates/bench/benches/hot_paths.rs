//! Wall-clock coverage of the paths the trainer spends its time in:
//! gate sampling, the interaction stack, a full optimizer step, metric
//! aggregation, and test-time perturbation.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use l0gm_core::backbones::cin::Cin;
use l0gm_core::backbones::integrated::{ForwardMode, GateAttach, IntegratedModel, IntegratedSpec};
use l0gm_core::backbones::{binary_log_loss, total_objective};
use l0gm_core::gate::{Gate, GateConstants};
use l0gm_core::metrics::reliability_binary;
use l0gm_core::optim::{apply_weight_decay, Adam};
use l0gm_core::params::ParamStore;
use l0gm_core::robustness::{apply_perturbation, FeatureStats, PerturbKind};
use l0gm_core::tape::Tape;
use l0gm_core::tensor::Tensor;
use l0gm_core::RngStream;

fn gate_sampling(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(1);
    let gate = Gate::new(
        &mut store,
        "g",
        4096,
        GateConstants::default(),
        2.0,
        0.1,
        &mut rng,
    )
    .unwrap();
    c.bench_function("gate sample 4096", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let z = gate.sample_train(&mut tape, &store, 0.5, &mut rng).unwrap();
            black_box(tape.value(z).data()[0])
        })
    });
}

fn cin_forward(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(2);
    let cin = Cin::new(&mut store, "cin", 16, &[16, 16], None, &mut rng).unwrap();
    let x0 = Tensor::randn(vec![16, 64 * 16], 0.0, 1.0, &mut rng);
    c.bench_function("cin forward 16x[16,16] batch 64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let v = tape.constant(x0.clone());
            let p = cin.forward_pooled(&mut tape, &store, v, 64, 16).unwrap();
            black_box(tape.value(p).data()[0])
        })
    });
}

fn train_step(c: &mut Criterion) {
    let vocab_sizes = vec![12usize; 20];
    let spec = IntegratedSpec {
        vocab_sizes: &vocab_sizes,
        embed_dim: 4,
        embed_init_std: 0.1,
        cin_widths: &[8],
        cin_rank: None,
        deep_widths: &[32],
        dropout: 0.0,
        attach: GateAttach::EmbeddingConcat,
        gate_constants: GateConstants::default(),
        alpha_init_mean: 2.0,
        alpha_init_std: 0.1,
    };
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(3);
    let model = IntegratedModel::new(&mut store, &spec, &mut rng).unwrap();
    let mut data_rng = RngStream::new(4);
    let rows: Vec<Vec<usize>> = (0..128)
        .map(|_| (0..20).map(|_| data_rng.below(12)).collect())
        .collect();
    let idx: Vec<usize> = (0..128).collect();
    let labels: Vec<bool> = (0..128).map(|_| data_rng.bernoulli(0.5)).collect();
    let mut adam = Adam::with_defaults(1e-4).unwrap();
    let mut gate_rng = RngStream::new(5);
    let mut dropout_rng = RngStream::new(6);
    c.bench_function("train step batch 128", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let mode = ForwardMode::Train {
                tau: 0.5,
                gate_rng: &mut gate_rng,
                dropout_rng: &mut dropout_rng,
            };
            let probs = model.forward(&mut tape, &store, &rows, &idx, mode).unwrap();
            let loss = binary_log_loss(&mut tape, probs, &labels).unwrap();
            let gates: Vec<&Gate> = model.gate.iter().collect();
            let obj = total_objective(&mut tape, &store, loss, &gates, 1e-3, 0.5).unwrap();
            tape.backward(obj).unwrap();
            store.zero_grads();
            store.absorb_grads(&tape).unwrap();
            apply_weight_decay(&mut store, 1e-4);
            adam.step(&mut store).unwrap();
            black_box(tape.value(obj).item().unwrap())
        })
    });
}

fn reliability(c: &mut Criterion) {
    let mut rng = RngStream::new(7);
    let n = 10_000;
    let probs: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.01, 0.99)).collect();
    let labels: Vec<bool> = probs.iter().map(|&p| rng.bernoulli(p)).collect();
    c.bench_function("reliability 10k M=10", |b| {
        b.iter(|| black_box(reliability_binary(&probs, &labels, 10).unwrap().ece))
    });
}

fn perturbation(c: &mut Criterion) {
    let mut rng = RngStream::new(8);
    let batch = Tensor::randn(vec![2048, 32], 0.0, 1.0, &mut rng);
    let stats = FeatureStats::from_batch(&batch).unwrap();
    c.bench_function("perturb gauss 2048x32", |b| {
        b.iter(|| {
            let out = apply_perturbation(
                &batch,
                PerturbKind::Gaussian { sigma_frac: 0.1 },
                &stats,
                &mut rng,
            )
            .unwrap();
            black_box(out.data()[0])
        })
    });
}

criterion_group!(
    benches,
    gate_sampling,
    cin_forward,
    train_step,
    reliability,
    perturbation
);
criterion_main!(benches);
