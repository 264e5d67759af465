use avd2v_core::encoder::EncoderConfig;
use avd2v_core::frontends::FrontendConfig;
use avd2v_core::fusion::Modality;
use avd2v_core::model::{AvModel, ModelConfig, Sample};
use avd2v_core::nn::NORM_EPS;
use avd2v_core::params::{ParamGroup, ParamStore};
use avd2v_core::pretrain::teacher_targets;
use avd2v_core::rng::rng_from;
use avd2v_core::targets::*;
use avd2v_core::tensor::Tensor;
use proptest::prelude::*;

fn store_of(vals: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("w", ParamGroup::Encoder, Tensor::from_f64(&[vals.len()], vals).unwrap());
    s
}

proptest! {
    #[test]
    fn ema_follows_geometric_law(t0 in -5.0f64..5.0, s in -5.0f64..5.0, tau in 0.0f64..1.0, n in 1usize..40) {
        let mut teacher = store_of(&[t0]);
        let student = store_of(&[s]);
        for _ in 0..n {
            ema_update(&mut teacher, &student, tau).unwrap();
        }
        let expect = s + (t0 - s) * tau.powi(n as i32);
        prop_assert!((teacher.tensors()[0].data()[0] - expect).abs() < 1e-9);
    }
}

#[test]
fn tau_is_linear_then_flat() {
    let s = EmaSchedule { tau_start: 0.9, tau_end: 0.99, anneal_steps: 90 };
    for step in 0..200u64 {
        let expect = if step >= 90 { 0.99 } else { 0.9 + 0.001 * step as f64 };
        assert!((tau_at(&s, step) - expect).abs() < 1e-12);
    }
}

/// Column statistics computed in two separate passes.
fn two_pass_norm(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (u, c) = (x.len(), x[0].len());
    let mean: Vec<f64> = (0..c).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / u as f64).collect();
    let var: Vec<f64> = (0..c).map(|j| x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / u as f64).collect();
    x.iter().map(|r| (0..c).map(|j| (r[j] - mean[j]) / (var[j] + NORM_EPS).sqrt()).collect()).collect()
}

#[test]
fn targets_match_two_pass_oracle() {
    let mut rng = rng_from(1, &[]);
    let taps: Vec<Tensor<f64>> = (0..4).map(|i| Tensor::randn(&[7, 3], 1.0 + i as f64, &mut rng)).collect();
    for k in 1..=4 {
        let got = build_targets(&taps, k).unwrap();
        assert_eq!(got.k_used, k);
        assert_eq!(got.source_blocks, (5 - k..=4).collect::<Vec<_>>());
        let mut avg = vec![vec![0.0; 3]; 7];
        for tap in &taps[4 - k..] {
            let rows: Vec<Vec<f64>> = (0..7).map(|i| tap.row(i).to_vec()).collect();
            for (a, r) in avg.iter_mut().zip(two_pass_norm(&rows)) {
                for (x, y) in a.iter_mut().zip(r) {
                    *x += y / k as f64;
                }
            }
        }
        let expect = two_pass_norm(&avg);
        for i in 0..7 {
            for j in 0..3 {
                assert!((got.y.at2(i, j) - expect[i][j]).abs() < 1e-9, "k={k}");
            }
        }
    }
}

#[test]
fn only_top_k_taps_matter() {
    let mut rng = rng_from(2, &[]);
    let mut taps: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[5, 4], 1.0, &mut rng)).collect();
    let before = build_targets(&taps, 2).unwrap().y;
    taps[0] = Tensor::randn(&[5, 4], 9.0, &mut rng);
    assert_eq!(build_targets(&taps, 2).unwrap().y, before);
    // Affine rescaling of a tap is absorbed by its instance norm, up to eps.
    taps[2] = taps[2].map(|x| 3.0 * x + 1.0);
    assert!(build_targets(&taps, 2).unwrap().y.max_abs_diff(&before) < 1e-4);
}

#[test]
fn teacher_targets_depend_only_on_teacher() {
    let cfg = ModelConfig {
        frontend: FrontendConfig {
            audio_features: 3,
            audio_stack: 2,
            video_channels: vec![2, 2, 2, 2],
            blocks_per_stage: 1,
            ..FrontendConfig::new(8)
        },
        encoder: EncoderConfig { max_len: 32, ..EncoderConfig::tiny(2, 8, 2) },
    };
    let (model, teacher) = AvModel::init::<f64>(&cfg, 3).unwrap();
    let mut rng = rng_from(4, &[]);
    let s = Sample { audio: Tensor::randn(&[6, 6], 1.0, &mut rng), video: Tensor::randn(&[6, 1, 12, 12], 1.0, &mut rng) };
    let y = teacher_targets(&model, &teacher, &s, Modality::Audio, 2).unwrap();
    assert_eq!(y.shape(), &[6, 8]);
    // Standardized per dimension.
    for j in 0..8 {
        let m: f64 = (0..6).map(|i| y.at2(i, j)).sum::<f64>() / 6.0;
        assert!(m.abs() < 1e-9);
    }
    // Audio-only selection ignores the video.
    let s2 = Sample { video: Tensor::randn(&[6, 1, 12, 12], 1.0, &mut rng), ..s.clone() };
    assert_eq!(teacher_targets(&model, &teacher, &s2, Modality::Audio, 2).unwrap(), y);
    let again = teacher_targets(&model, &teacher, &s, Modality::Audio, 2).unwrap();
    assert_eq!(again, y);
}
