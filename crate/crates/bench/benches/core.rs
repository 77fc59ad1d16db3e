use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use nocrek_core::matching::hungarian;
use nocrek_core::metrics::cider;
use nocrek_core::model::{forward_retrieval, Lexicon, TagInput};
use nocrek_core::retrieval::{region_features, retrieve_per_region};
use nocrek_core::{generate_world, Captioner, DecodeConfig, Matrix, ModelParams, TrainConfig, World, WorldConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn world() -> World {
    generate_world(&WorldConfig::default()).expect("default world")
}

fn params(world: &World) -> ModelParams {
    let wc = &world.config;
    let cfg = TrainConfig::default().model_config(&world.vocabulary(), wc.n_rois, wc.roi_dim, wc.knowledge_dim);
    ModelParams::init(cfg, 3).expect("model init")
}

fn bench_hungarian(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in [8usize, 32, 64] {
        let rows: Vec<Vec<f64>> = (0..k).map(|_| (0..k).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let m = Matrix::from_rows(&rows);
        group.bench_with_input(BenchmarkId::from_parameter(k), &m, |b, m| b.iter(|| hungarian(black_box(m)).unwrap()));
    }
    group.finish();
}

fn bench_retrieval(c: &mut Criterion) {
    let w = world();
    let store = w.full_store().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..w.config.knowledge_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let feats = region_features(&rows);
    c.bench_function("retrieve_per_region", |b| {
        b.iter(|| retrieve_per_region(black_box(&feats), &store).unwrap())
    });
}

fn bench_model(c: &mut Criterion) {
    let w = world();
    let vocab = w.vocabulary();
    let store = w.seen_store().unwrap();
    let p = params(&w);
    let lexicon = Lexicon::new(&store, &vocab);
    let tags = TagInput::masks(p.config().max_tags);
    let rois = &w.train[0].rois;
    c.bench_function("forward_retrieval", |b| {
        b.iter(|| forward_retrieval(&p, &store, &lexicon, None, &tags, black_box(rois)).unwrap())
    });
    c.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut pass = forward_retrieval(&p, &store, &lexicon, None, &tags, rois).unwrap();
            let (r, k) = pass.regions().unwrap().shape();
            pass.backward(Some(Matrix::from_vec(r, k, vec![1.0; r * k])), None).unwrap()
        })
    });
}

fn bench_decode(c: &mut Criterion) {
    let w = world();
    let vocab = w.vocabulary();
    let store = w.full_store().unwrap();
    let p = params(&w);
    let captioner = Captioner::new(&p, &store, &vocab).unwrap();
    let rois = &w.test_novel[0].rois;
    let mut group = c.benchmark_group("generate");
    group.sample_size(20);
    for beam in [1usize, 3, 5] {
        let cfg = DecodeConfig { beam_size: beam, ..DecodeConfig::default() };
        group.bench_with_input(BenchmarkId::new("beam", beam), &cfg, |b, cfg| {
            b.iter(|| captioner.generate(black_box(rois), cfg).unwrap())
        });
    }
    group.finish();
}

fn bench_cider(c: &mut Criterion) {
    let w = world();
    let refs: Vec<Vec<Vec<String>>> = w.train.iter().map(|s| s.references.clone()).collect();
    let cands: Vec<Vec<String>> = refs.iter().map(|r| r[0].clone()).collect();
    c.bench_function("cider/train", |b| b.iter(|| cider(black_box(&cands), &refs).unwrap()));
}

criterion_group!(benches, bench_hungarian, bench_retrieval, bench_model, bench_decode, bench_cider);
criterion_main!(benches);
