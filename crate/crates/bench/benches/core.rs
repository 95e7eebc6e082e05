use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sgvl_bench::{cost_matrix, image_text_pairs};
use sgvl_core::matching::{brute_force_assignment, hungarian};
use sgvl_core::model::{tokenizer_for, ModelConfig};
use sgvl_core::train::{check_fixture, grad_check_model, LossTerm};
use sgvl_core::{RgbImage, SgvlModel, Tape};

fn bench_matching(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    for k in [6, 12, 24] {
        let cost = cost_matrix(k, k as u64);
        group.bench_with_input(BenchmarkId::from_parameter(k), &cost, |b, cost| {
            b.iter(|| hungarian(black_box(cost), k).unwrap())
        });
    }
    group.finish();
    let cost = cost_matrix(6, 0);
    c.bench_function("brute_force/6", |b| b.iter(|| brute_force_assignment(black_box(&cost), 6).unwrap()));
}

fn bench_forward(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let base = SgvlModel::new_base(cfg.clone(), tokenizer_for(&cfg).unwrap(), 0).unwrap();
    let finetuned = base.clone().into_finetune(0, true).unwrap();
    let pairs = image_text_pairs(32, 1);
    let images: Vec<&RgbImage> = pairs.iter().map(|p| &p.image).collect();
    let texts: Vec<&str> = pairs.iter().map(|p| p.caption.as_str()).collect();

    let mut group = c.benchmark_group("forward_32");
    group.sample_size(20);
    group.bench_function("text", |b| {
        b.iter(|| {
            let tape = Tape::no_grad();
            base.encode_texts(&tape, black_box(&texts)).unwrap().value()
        })
    });
    group.bench_function("vision", |b| {
        b.iter(|| {
            let tape = Tape::no_grad();
            base.encode_images(&tape, black_box(&images), false).unwrap().cls.value()
        })
    });
    group.bench_function("vision_sg_tokens", |b| {
        b.iter(|| {
            let tape = Tape::no_grad();
            finetuned.encode_images(&tape, black_box(&images), true).unwrap().cls.value()
        })
    });
    group.finish();
}

fn bench_gradcheck(c: &mut Criterion) {
    let (model, batch, cfg) = check_fixture(&ModelConfig::tiny(), 0).unwrap();
    let mut group = c.benchmark_group("gradcheck_tiny");
    group.sample_size(10);
    group.bench_function("total", |b| {
        b.iter(|| grad_check_model(&model, &batch, &cfg, LossTerm::Total, 1e-6, 1e-4).unwrap().max_rel_error)
    });
    group.finish();
}

criterion_group!(benches, bench_matching, bench_forward, bench_gradcheck);
criterion_main!(benches);
