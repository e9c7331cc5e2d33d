//! Batch-clustering benchmarks: the data-parallel episode map against the
//! always-sequential fallback, plus the episode forward/backward kernel.
//!
//! Build with `--no-default-features` to measure the crate compiled without
//! rayon; the `batch_eval/par` group then runs the sequential code path.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use metaclust_core::dataio::{gen_synthetic, Standardizer, SyntheticSpec};
use metaclust_core::encoder::{EncoderConfig, EncoderParams};
use metaclust_core::trainer::{
    cluster_episode, episode_loss, sample_episode, PipelineMode, TrainConfig,
};
use metaclust_core::vb::VbConfig;
use metaclust_core::{parallel, rng};

fn standardized_blobs(categories: usize, per: usize, seed: u64) -> metaclust_core::dataio::LabeledDataset {
    let spec = SyntheticSpec {
        categories,
        per_category: per,
        ambient_dim: 4,
        separation: 10.0,
        ..Default::default()
    };
    let ds = gen_synthetic(&spec, seed).unwrap();
    let st = Standardizer::fit(&ds.x).unwrap();
    metaclust_core::dataio::LabeledDataset::new(
        ds.name.clone(),
        st.transform(&ds.x).unwrap(),
        ds.y.clone(),
        ds.label_names.clone(),
    )
    .unwrap()
}

fn bench_batch_eval(c: &mut Criterion) {
    let data = [standardized_blobs(6, 20, 0)];
    let vb_cfg = VbConfig { k_max: 10, steps: 10, assignment_floor: 0.0, ..Default::default() };
    let run_one = |i: usize| {
        let mut er = rng::derive(17, i as u64);
        let batch =
            metaclust_core::trainer::sample_eval_episode(&data, 20, &mut er).unwrap();
        let res = cluster_episode(
            None,
            &batch.x,
            batch.y.as_deref(),
            &vb_cfg,
            PipelineMode::IdentityEncoder,
            &mut er,
        )
        .unwrap();
        res.hard_ari.unwrap_or(0.0)
    };

    let mut group = c.benchmark_group("batch_eval");
    for &n_tasks in &[16usize, 64] {
        group.bench_with_input(BenchmarkId::new("seq", n_tasks), &n_tasks, |b, &n| {
            b.iter(|| black_box(parallel::map_indexed_seq(n, run_one)))
        });
        group.bench_with_input(BenchmarkId::new("par", n_tasks), &n_tasks, |b, &n| {
            b.iter(|| black_box(parallel::map_indexed(n, run_one)))
        });
    }
    group.finish();
}

fn bench_episode_gradient(c: &mut Criterion) {
    let data = [standardized_blobs(5, 15, 1)];
    let enc_cfg = EncoderConfig {
        input_dim: 4,
        repr_dim: 4,
        hidden: 64,
        depth: 3,
        dropout_rate: 0.1,
        k_max: 10,
        task_repr_dim: 32,
        ..Default::default()
    };
    let vb_cfg = VbConfig::default();
    let cfg = TrainConfig::default();
    let params = EncoderParams::init(&enc_cfg, 3).unwrap();

    c.bench_function("episode_loss_backward", |b| {
        b.iter(|| {
            let mut r = rng::seeded(11);
            let batch = sample_episode(&data, 10, 15, &mut r).unwrap();
            let out = episode_loss(&params, &batch, &enc_cfg, &vb_cfg, &cfg, &mut r).unwrap();
            black_box(out.loss)
        })
    });
}

criterion_group!(benches, bench_batch_eval, bench_episode_gradient);
criterion_main!(benches);
