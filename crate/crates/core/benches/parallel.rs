//! Sequential vs rayon execution of the data-parallel hot paths.
//!
//! `cargo bench -p avd2v-core --bench parallel`. With one core the two modes
//! should be within noise of each other; the gap opens with more cores.

use std::hint::black_box;

use avd2v_core::config::RunConfig;
use avd2v_core::fusion::mean_mask_coverage;
use avd2v_core::harness::to_samples;
use avd2v_core::par::{force_sequential, ExecMode};
use avd2v_core::pretrain::{pretrain_step, ModelState};
use avd2v_core::synth::{generate_utterances, SyntheticCorpusSpec};
use criterion::{criterion_group, criterion_main, Criterion};

fn pretrain_steps(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let spec = SyntheticCorpusSpec { utterance_count: 8, min_frames: 40, max_frames: 60, ..cfg.data.clone() };
    let utts = generate_utterances(&spec).unwrap();
    let batch = to_samples(&utts, cfg.model.frontend.audio_stack).unwrap();
    let pcfg = cfg.pretrain_config();
    let mut g = c.benchmark_group("pretrain_step_batch8");
    g.sample_size(10);
    for (name, seq) in [("sequential", true), ("parallel", false)] {
        force_sequential(seq);
        let (model, mut state) = ModelState::init(&pcfg.model, 0).unwrap();
        g.bench_function(name, |b| b.iter(|| black_box(pretrain_step(&model, &mut state, &pcfg, &batch).unwrap())));
    }
    force_sequential(false);
    g.finish();
}

fn mask_coverage(c: &mut Criterion) {
    let mut g = c.benchmark_group("mask_coverage_2000_seeds");
    for (name, mode) in [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)] {
        g.bench_function(name, |b| b.iter(|| black_box(mean_mask_coverage(200, 50.0, 10, 1, 2000, mode))));
    }
    g.finish();
}

fn corpus_generation(c: &mut Criterion) {
    let spec = SyntheticCorpusSpec { utterance_count: 64, ..SyntheticCorpusSpec::default() };
    let mut g = c.benchmark_group("generate_64_utterances");
    g.sample_size(10);
    for (name, seq) in [("sequential", true), ("parallel", false)] {
        force_sequential(seq);
        g.bench_function(name, |b| b.iter(|| black_box(generate_utterances(&spec).unwrap())));
    }
    force_sequential(false);
    g.finish();
}

criterion_group!(benches, pretrain_steps, mask_coverage, corpus_generation);
criterion_main!(benches);
