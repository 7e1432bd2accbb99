use criterion::{criterion_group, criterion_main, Criterion};
use smoothcache::diffusion::{ddim_sample, make_schedule, SamplerConfig};
use smoothcache::model::{build_model, AlwaysCompute, ModelConfig};
use smoothcache::runtime::run_cached;
use smoothcache::scheduler::synthesize_uniform;

fn bench_sampling(c: &mut Criterion) {
    let cfg = ModelConfig {
        blocks: 2,
        model_dim: 32,
        heads: 4,
        tokens: 8,
        context_tokens: 4,
        ffn_mult: 2,
        seed: 0,
    };
    let model = build_model(cfg).unwrap();
    let sampler = SamplerConfig {
        steps: 10,
        ..SamplerConfig::default()
    };
    let noise = make_schedule(1000, 1e-4, 0.02).unwrap();
    let uniform2 = synthesize_uniform(2, sampler.steps).unwrap();

    c.bench_function("ddim_uncached_10_steps", |b| {
        b.iter(|| ddim_sample(&model, &sampler, &noise, &mut AlwaysCompute, None).unwrap());
    });
    c.bench_function("ddim_uniform2_10_steps", |b| {
        b.iter(|| run_cached(&model, &sampler, &noise, &uniform2, None).unwrap());
    });
}

criterion_group!(sampling, bench_sampling);
criterion_main!(sampling);
