use avd2v_core::checkpoint::Checkpoint;
use avd2v_core::encoder::EncoderConfig;
use avd2v_core::frontends::FrontendConfig;
use avd2v_core::fusion::{MaskSet, ModalitySchedule};
use avd2v_core::model::{ModelConfig, Sample};
use avd2v_core::optim::*;
use avd2v_core::params::{ParamGroup, ParamStore};
use avd2v_core::pretrain::*;
use avd2v_core::rng::rng_from;
use avd2v_core::tensor::{Tape, Tensor};
use avd2v_core::Error;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        frontend: FrontendConfig {
            audio_features: 3,
            audio_stack: 2,
            video_channels: vec![2, 2, 2, 2],
            blocks_per_stage: 1,
            ..FrontendConfig::new(8)
        },
        encoder: EncoderConfig { max_len: 32, ..EncoderConfig::tiny(2, 8, 2) },
    }
}

fn corpus(n: usize, seed: u64) -> Vec<Sample<f32>> {
    let mut rng = rng_from(seed, &[]);
    (0..n)
        .map(|i| {
            let u = 6 + i % 5;
            Sample { audio: Tensor::randn(&[u, 6], 1.0, &mut rng), video: Tensor::randn(&[u, 1, 12, 12], 1.0, &mut rng) }
        })
        .collect()
}

fn tiny_cfg(updates: u64) -> PretrainConfig {
    let mut c = PretrainConfig::new(tiny_model(), updates);
    c.student = ModalitySchedule::fixed(0.5, 0.5, 0.5);
    c.batch_size = 3;
    c.mask_prob = 30.0;
    c.mask_span = 3;
    c.lr = LrSchedule::Constant { lr: 1e-3 };
    c
}

#[test]
fn loss_matches_weighted_sum_of_squares() {
    let mut rng = rng_from(1, &[]);
    let z = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
    let y = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
    let mask = MaskSet::from_indices(6, vec![1, 2, 5]).unwrap();
    for w in [LossWeights { alpha: 1.0, beta: 0.0 }, LossWeights { alpha: 0.7, beta: 0.2 }] {
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone(), true);
        let l = pretrain_loss(&mut tape, zv, &y, &mask, w).unwrap();
        let member = mask.membership();
        let expect: f64 = (0..6)
            .map(|t| {
                let wt = if member[t] { w.alpha } else { w.beta };
                wt * (0..4).map(|j| (z.at2(t, j) - y.at2(t, j)).powi(2)).sum::<f64>()
            })
            .sum();
        assert!((tape.value(l).data()[0] - expect).abs() < 1e-12);
        // The target is a constant: the only gradient is 2 w (z - y).
        let g = tape.backward(l).unwrap();
        let gz = g.wrt(zv).unwrap();
        for t in 0..6 {
            let wt = if member[t] { w.alpha } else { w.beta };
            for j in 0..4 {
                assert!((gz.at2(t, j) - 2.0 * wt * (z.at2(t, j) - y.at2(t, j))).abs() < 1e-12);
            }
        }
    }
    assert_eq!(counted_steps(&mask, LossWeights { alpha: 1.0, beta: 0.0 }), 3);
    assert_eq!(counted_steps(&mask, LossWeights { alpha: 1.0, beta: 1.0 }), 6);
}

#[test]
fn unmasked_steps_are_ignored_when_beta_is_zero() {
    let mut rng = rng_from(2, &[]);
    let z = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
    let y = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
    let mask = MaskSet::from_indices(5, vec![0, 3]).unwrap();
    let mut z2 = z.clone();
    for t in [1, 2, 4] {
        for j in 0..3 {
            z2.data_mut()[t * 3 + j] += 10.0;
        }
    }
    let w = LossWeights { alpha: 1.0, beta: 0.0 };
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(z), tape.constant(z2));
    let (la, lb) = (pretrain_loss(&mut tape, a, &y, &mask, w).unwrap(), pretrain_loss(&mut tape, b, &y, &mask, w).unwrap());
    assert_eq!(tape.value(la).data(), tape.value(lb).data());
    let short = Tensor::<f64>::zeros(&[4, 3]);
    assert!(matches!(pretrain_loss(&mut tape, a, &short, &mask, w), Err(Error::Dimension(_))));
}

#[test]
fn adam_descends_a_quadratic_bowl() {
    let c = [3.0, -1.0, 0.5];
    let mut store = ParamStore::<f64>::new();
    let id = store.add("p", ParamGroup::Encoder, Tensor::zeros(&[3]));
    let cfg = AdamConfig { weight_decay: 0.0, clip_norm: None, ..AdamConfig::default() };
    let mut opt = AdamState::new(&store);
    for step in 0..3000 {
        let g: Vec<f64> = store.get(id).data().iter().zip(&c).map(|(p, c)| 2.0 * (p - c)).collect();
        let before = store.get(id).clone();
        opt.step(&cfg, &mut store, &[Some(Tensor::from_f64(&[3], &g).unwrap())], 0.01).unwrap();
        if step == 0 {
            // Bias correction makes the first step lr * sign(g).
            for (p, b) in store.get(id).data().iter().zip(before.data()) {
                assert!(((p - b).abs() - 0.01).abs() < 1e-6);
            }
        }
    }
    for (p, c) in store.get(id).data().iter().zip(&c) {
        assert!((p - c).abs() < 1e-3, "{p} vs {c}");
    }
}

#[test]
fn adam_rejects_non_finite_gradients_untouched() {
    let mut store = ParamStore::<f64>::new();
    store.add("p", ParamGroup::Encoder, Tensor::zeros(&[2]));
    let mut opt = AdamState::new(&store);
    let before = (store.clone(), opt.clone());
    let g = Tensor::from_f64(&[2], &[1.0, f64::NAN]).unwrap();
    assert!(matches!(opt.step(&AdamConfig::default(), &mut store, &[Some(g)], 0.1), Err(Error::Numeric(_))));
    assert_eq!((store, opt), before);
}

#[test]
fn schedules_match_closed_forms() {
    let pi = std::f64::consts::PI;
    for s in 0..=120u64 {
        let expect = if s < 20 { 2.0 * s as f64 / 20.0 } else { 1.0 + (pi * ((s - 20) as f64 / 80.0).min(1.0)).cos() };
        assert!((cosine_lr(s, 20, 100, 2.0) - expect).abs() < 1e-12);
    }
    assert_eq!(tri_stage_lr(0, 10, 20, 100, 1.0, 0.01, 0.05), 0.01);
    assert_eq!(tri_stage_lr(15, 10, 20, 100, 1.0, 0.01, 0.05), 1.0);
    assert!((tri_stage_lr(100, 10, 20, 100, 1.0, 0.01, 0.05) - 0.05).abs() < 1e-12);
    // Exponential decay: geometric mean halfway.
    assert!((tri_stage_lr(65, 10, 20, 100, 1.0, 0.01, 0.05) - 0.05f64.sqrt()).abs() < 1e-12);
    let p = LrSchedule::pretrain(1000, 5e-4);
    assert_eq!(p.at(0), 0.0);
    assert!((p.at(30) - 5e-4).abs() < 1e-15);
    assert_eq!(p.at(1000), 0.0);
}

#[test]
fn pretraining_reduces_loss_on_a_tiny_corpus() {
    let cfg = PretrainConfig { ema: avd2v_core::targets::EmaSchedule { tau_start: 0.99, tau_end: 0.999, anneal_steps: 100 }, ..tiny_cfg(300) };
    let (model, mut state) = ModelState::init(&cfg.model, 5).unwrap();
    let data = corpus(4, 6);
    let mut losses = Vec::new();
    pretrain_loop(&model, &mut state, &cfg, &data, 300, |m| {
        losses.push(m.loss);
        Ok(())
    })
    .unwrap();
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[280..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
    assert!(state.student.is_finite() && state.teacher.is_finite());
    assert_ne!(state.student, state.teacher);
}

#[test]
fn checkpoint_round_trip_and_truncation() {
    let cfg = tiny_cfg(3);
    let (model, mut state) = ModelState::init(&cfg.model, 7).unwrap();
    pretrain_loop(&model, &mut state, &cfg, &corpus(3, 8), 3, |_| Ok(())).unwrap();
    let bytes = state.to_checkpoint("{\"k\":1}").to_bytes();
    let back = ModelState::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, state);
    for cut in [0, 5, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    state.save(&path, "meta").unwrap();
    let (loaded, meta) = ModelState::load(&path).unwrap();
    assert_eq!((loaded, meta.as_str()), (state, "meta"));
}

#[test]
fn resumed_run_is_bit_identical() {
    let cfg = tiny_cfg(10);
    let data = corpus(5, 9);
    let (model, mut straight) = ModelState::init(&cfg.model, 10).unwrap();
    let mut a = Vec::new();
    pretrain_loop(&model, &mut straight, &cfg, &data, 10, |m| {
        a.push(m.loss.to_bits());
        Ok(())
    })
    .unwrap();

    let (model, mut first) = ModelState::init(&cfg.model, 10).unwrap();
    let mut b = Vec::new();
    pretrain_loop(&model, &mut first, &cfg, &data, 5, |m| {
        b.push(m.loss.to_bits());
        Ok(())
    })
    .unwrap();
    let bytes = first.to_checkpoint("").to_bytes();
    drop(first);
    let mut resumed = ModelState::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    pretrain_loop(&model, &mut resumed, &cfg, &data, 10, |m| {
        b.push(m.loss.to_bits());
        Ok(())
    })
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(resumed, straight);
}
