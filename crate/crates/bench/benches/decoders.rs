use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use crossmpt_core::channel::{self, llr, CodewordPolicy, NoiseSpec};
use crossmpt_core::{
    bp_decode, registry, Batch, BpConfig, Code, CodeContext, CodeDims, Model, ModelConfig, TannerGraph, Variant,
};

fn batch(code: &Code, size: u64) -> Batch {
    let spec = NoiseSpec::fixed(4.0, code.rate(), 1).unwrap();
    let s: Vec<_> = (0..size).map(|i| channel::sample(code, &spec, CodewordPolicy::AllZero, i)).collect();
    Batch::from_samples(&s)
}

fn bp(c: &mut Criterion) {
    let mut group = c.benchmark_group("bp_decode");
    for name in ["bch_63_45", "ldpc_121_80"] {
        let code = registry::load(name).unwrap();
        let g = TannerGraph::new(code.pcm());
        let spec = NoiseSpec::fixed(3.0, code.rate(), 2).unwrap();
        let s = channel::sample(&code, &spec, CodewordPolicy::AllZero, 0);
        let sigma = channel::ebn0_to_sigma(3.0, code.rate()).unwrap();
        let l = llr(&s.y, sigma);
        let cfg = BpConfig { early_stop: false, ..BpConfig::sum_product(20) };
        group.bench_with_input(BenchmarkId::from_parameter(name), &l, |b, l| b.iter(|| bp_decode(black_box(l), &g, &cfg)));
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let code = registry::load("bch_31_16").unwrap();
    let ctx = CodeContext::new(&code).unwrap();
    let b = batch(&code, 32);
    let mut group = c.benchmark_group("model_bch_31_16_b32");
    group.sample_size(20);
    for v in [Variant::CrossMpt, Variant::Ecct] {
        let m = Model::init(ModelConfig::new(v, 2, 32), Some(CodeDims::of(&code)), 0).unwrap();
        group.bench_function(BenchmarkId::new("forward", v), |bn| bn.iter(|| m.forward(&ctx, black_box(&b)).unwrap()));
        group.bench_function(BenchmarkId::new("forward_backward", v), |bn| {
            bn.iter(|| {
                let mut f = m.forward(&ctx, black_box(&b)).unwrap();
                let root = f.graph.flip_loss(f.logits, &b.target, 1.0).unwrap();
                f.graph.backward(root).unwrap();
                f
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bp, model);
criterion_main!(benches);
