use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2i_tensor::{par, Tensor};
use sketch2img::data::layout::ComponentLayout;
use sketch2img::data::sketch::SketchParams;
use sketch2img::data::synthetic::synthetic_pairs;
use sketch2img::harness::{run_experiment, smoke_config};
use sketch2img::metrics::ssim;
use sketch2img::saliency::dbscan_cluster;
use sketch2img::stage1::{train_stage1, Stage1Options};

const PATHS: [(bool, &str); 2] = [(false, "sequential"), (true, "rayon")];

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::uniform(&[8, 3, 64, 64], 0.0, 1.0, &mut rng);
    let b = Tensor::uniform(&[8, 3, 64, 64], 0.0, 1.0, &mut rng);
    let mut group = c.benchmark_group("ssim_8x3x64x64");
    for (p, label) in PATHS {
        group.bench_with_input(BenchmarkId::from_parameter(label), &p, |bch, &p| {
            par::set_parallel(p);
            bch.iter(|| ssim(&a, &b).unwrap());
        });
    }
    group.finish();
    par::set_parallel(true);
}

fn clustering(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts: Vec<(usize, usize)> = (0..1500).map(|_| (rng.random_range(0..64), rng.random_range(0..64))).collect();
    let mut group = c.benchmark_group("dbscan_1500");
    for (p, label) in PATHS {
        group.bench_with_input(BenchmarkId::from_parameter(label), &p, |bch, &p| {
            par::set_parallel(p);
            bch.iter(|| dbscan_cluster(&pts, 2.5, 8).unwrap());
        });
    }
    group.finish();
    par::set_parallel(true);
}

fn stage1_epoch(c: &mut Criterion) {
    let pairs = synthetic_pairs(4, 1, 32, 2, &SketchParams::default()).unwrap();
    let layout = ComponentLayout::default_for(32, 32).to_regions();
    let cfg = smoke_config("bench", std::path::Path::new("unused"));
    let mut group = c.benchmark_group("stage1_5_components_2_steps");
    group.sample_size(10);
    for (p, label) in PATHS {
        group.bench_with_input(BenchmarkId::from_parameter(label), &p, |bch, &p| {
            par::set_parallel(p);
            bch.iter(|| {
                train_stage1(
                    &pairs,
                    &layout,
                    &Stage1Options {
                        model: &cfg.model,
                        schedule: &cfg.train.stage1,
                        attention: true,
                        seed: 0,
                        fingerprint: String::new(),
                        out_dir: None,
                    },
                )
                .unwrap()
            });
        });
    }
    group.finish();
    par::set_parallel(true);
}

fn end_to_end(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config("bench", dir.path());
    let mut group = c.benchmark_group("smoke_experiment");
    group.sample_size(10);
    for (p, label) in PATHS {
        group.bench_with_input(BenchmarkId::from_parameter(label), &p, |bch, &p| {
            par::set_parallel(p);
            bch.iter(|| run_experiment(&cfg).unwrap());
        });
    }
    group.finish();
    par::set_parallel(true);
}

criterion_group!(benches, metrics, clustering, stage1_epoch, end_to_end);
criterion_main!(benches);
