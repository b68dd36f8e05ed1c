use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use streamvq::degrade::{DegradationKind, DegradationSpec};
use streamvq::labels::variant_triplets;
use streamvq::metrics::PerceptualExtractor;
use streamvq::model::{clip_batch, ModelConfig, Network};
use streamvq::par::{self, ExecMode};
use streamvq::synth::generate_clip;

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn forward(c: &mut Criterion) {
    let net = Network::<f32>::new(ModelConfig::default()).unwrap();
    let clip = generate_clip(0, "bench", 8, 96, 96).unwrap();
    let x = clip_batch::<f32>(&[&clip]).unwrap();
    let mut g = c.benchmark_group("forward_8x96x96");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            par::set_mode(mode);
            b.iter(|| net.forward(&x, None).unwrap());
        });
    }
    g.finish();
}

fn labels(c: &mut Criterion) {
    let clip = generate_clip(0, "bench", 8, 96, 96).unwrap();
    let ex = PerceptualExtractor::default();
    let spec = DegradationSpec::new(DegradationKind::GaussianBlur, 0.6, 0).unwrap();
    let mut g = c.benchmark_group("label_triplets_8x96x96");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            par::set_mode(mode);
            b.iter(|| variant_triplets(&clip, &spec, &ex).unwrap());
        });
    }
    g.finish();
    par::set_mode(ExecMode::Parallel);
}

criterion_group!(benches, forward, labels);
criterion_main!(benches);
