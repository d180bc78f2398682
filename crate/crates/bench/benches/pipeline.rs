//! Wall-clock benchmarks: the linear baseline against reflective runs at
//! increasing path counts, plus the scoring and selection primitives.
//!
//! The deterministic counters in the result rows are the portable cost
//! proxies; these benchmarks exist to sanity-check that the counter story
//! (quadratic prefill shrinking by the path count) shows up in real time
//! as well.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use selfres_bench::{bench_video, bench_weights, QUERY, SYSTEM};
use selfres_core::oracle::baseline_run;
use selfres_core::pipeline::{
    run_pipeline, saliency_scores, select_salient, ExecMode, InferenceMode, PositionStrategy,
    RunSpec, SaliencyTable,
};
use selfres_core::Matrix;

const SEGMENT: usize = 8;

fn spec(paths: usize, mode: InferenceMode, exec: ExecMode) -> RunSpec {
    RunSpec {
        frames_t: paths * SEGMENT,
        segment_s: SEGMENT,
        keep: None,
        mode,
        strategy: PositionStrategy::Reassigned,
        exec,
        max_new_tokens: 8,
    }
}

fn bench_prefill_vs_baseline(c: &mut Criterion) {
    let weights = bench_weights();
    let mut group = c.benchmark_group("end_to_end");
    group.sample_size(20);
    for paths in [1usize, 2, 4] {
        let frames = paths * SEGMENT;
        let video = bench_video(frames);
        group.bench_with_input(BenchmarkId::new("baseline", frames), &frames, |b, &frames| {
            b.iter(|| {
                baseline_run(&weights, &video, SYSTEM, QUERY, black_box(frames), 8).unwrap()
            })
        });
        for mode in [InferenceMode::Regular, InferenceMode::Smooth] {
            group.bench_with_input(
                BenchmarkId::new(format!("reflective_{mode}"), frames),
                &paths,
                |b, &paths| {
                    b.iter(|| {
                        run_pipeline(
                            &weights,
                            &video,
                            SYSTEM,
                            QUERY,
                            black_box(&spec(paths, mode, ExecMode::Batch)),
                        )
                        .unwrap()
                    })
                },
            );
        }
    }
    group.finish();
}

fn bench_exec_modes(c: &mut Criterion) {
    let weights = bench_weights();
    let video = bench_video(4 * SEGMENT);
    let mut group = c.benchmark_group("exec_mode");
    group.sample_size(20);
    for exec in [ExecMode::Batch, ExecMode::Seq] {
        group.bench_function(exec.to_string(), |b| {
            b.iter(|| {
                run_pipeline(
                    &weights,
                    &video,
                    SYSTEM,
                    QUERY,
                    black_box(&spec(4, InferenceMode::Smooth, exec)),
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn bench_primitives(c: &mut Criterion) {
    let dim = 32;
    let heads = 4;
    let tokens = 1024;
    let query: Vec<f32> = (0..dim).map(|i| (i as f32 * 0.37).sin()).collect();
    let keys = Matrix::from_vec(
        tokens,
        dim,
        (0..tokens * dim).map(|i| (i as f32 * 0.11).cos()).collect(),
    )
    .unwrap();
    c.bench_function("saliency_scores_1024", |b| {
        b.iter(|| saliency_scores(black_box(&query), black_box(&keys), heads))
    });

    let scores: Vec<Vec<f32>> = (0..4)
        .map(|p| (0..512).map(|i| ((i * 7 + p * 13) % 101) as f32 / 17.0).collect())
        .collect();
    let table = SaliencyTable::from_scores(&scores).unwrap();
    c.bench_function("select_salient_512_of_2048", |b| {
        b.iter(|| select_salient(black_box(&table), 512).unwrap())
    });
}

criterion_group!(benches, bench_prefill_vs_baseline, bench_exec_modes, bench_primitives);
criterion_main!(benches);
