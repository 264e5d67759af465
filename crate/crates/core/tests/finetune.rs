use avd2v_core::encoder::EncoderConfig;
use avd2v_core::finetune::*;
use avd2v_core::frontends::FrontendConfig;
use avd2v_core::model::{ModelConfig, Sample};
use avd2v_core::optim::LrSchedule;
use avd2v_core::params::ParamStore;
use avd2v_core::rng::rng_from;
use avd2v_core::tensor::{Tape, Tensor};
use avd2v_core::Result;
use rand::Rng;

const VOCAB: usize = 8;

fn tiny() -> (FinetuneModel, ParamStore<f32>, FinetuneConfig) {
    let model = ModelConfig {
        frontend: FrontendConfig {
            audio_features: 3,
            audio_stack: 2,
            video_channels: vec![2, 2, 2, 2],
            blocks_per_stage: 1,
            ..FrontendConfig::new(16)
        },
        encoder: EncoderConfig { max_len: 32, ..EncoderConfig::tiny(1, 16, 2) },
    };
    let dec = DecoderConfig { max_len: 16, ..DecoderConfig::tiny(1, 16, 2, VOCAB) };
    let (ft, params) = FinetuneModel::init::<f32>(&model, &dec, 1).unwrap();
    let mut cfg = FinetuneConfig::new(FinetuneTask::Asr, dec, 200, 3e-3);
    cfg.lr = LrSchedule::Constant { lr: 3e-3 };
    cfg.batch_size = 2;
    (ft, params, cfg)
}

fn labelled(seed: u64, tokens: Vec<u32>) -> Labelled {
    let mut rng = rng_from(seed, &[]);
    let u = 8;
    Labelled {
        sample: Sample { audio: Tensor::randn(&[u, 6], 1.0, &mut rng), video: Tensor::randn(&[u, 1, 12, 12], 1.0, &mut rng) },
        tokens,
    }
}

#[test]
fn decoder_is_causal() {
    let (ft, params, _) = tiny();
    let ex = labelled(2, vec![]);
    let mut tape = Tape::with_params(&params, false);
    let z = ft.encode(&mut tape, &ex.sample, FinetuneTask::Avsr, None).unwrap();
    let mem = ft.decoder.memory(&mut tape, z).unwrap();
    let a = ft.decoder.forward(&mut tape, &mem, &[BOS, 3, 4, 5, 6], None).unwrap();
    let b = ft.decoder.forward(&mut tape, &mem, &[BOS, 3, 4, 7, 2], None).unwrap();
    for t in 0..3 {
        assert_eq!(tape.value(a).row(t), tape.value(b).row(t), "position {t}");
    }
    assert_ne!(tape.value(a).row(3), tape.value(b).row(3));
}

#[test]
fn cross_entropy_of_uniform_logits_is_log_vocab() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::full(&[4, VOCAB], 0.3));
    let l = ce_loss(&mut tape, logits, &[3, PAD, 5, EOS]).unwrap();
    assert!((tape.value(l).data()[0] - (VOCAB as f64).ln()).abs() < 1e-12);
    assert!(ce_loss(&mut tape, logits, &[PAD; 4]).is_err());
}

#[test]
fn teacher_forcing_shifts_by_one() {
    let (input, target) = teacher_forcing(&[0, 4, 1]);
    assert_eq!(input, vec![BOS, 3, 7, 4]);
    assert_eq!(target, vec![3, 7, 4, EOS]);
    assert_eq!(from_decoder_ids(&[3, 7, 4, EOS]), vec![0, 4, 1]);
}

#[test]
fn frozen_encoder_is_bit_exact() {
    let (ft, params, mut cfg) = tiny();
    cfg.freeze_steps = 2;
    let batch = vec![labelled(3, vec![1, 2, 3]), labelled(4, vec![4, 0])];
    let mut st = FinetuneState::new(params.clone(), 5);
    let encoder_side: Vec<_> = params.ids().filter(|&id| params.group(id).is_encoder_side()).collect();
    for _ in 0..2 {
        assert!(finetune_step(&ft, &mut st, &cfg, &batch).unwrap().frozen);
    }
    for &id in &encoder_side {
        let same = st.params.get(id).data().iter().zip(params.get(id).data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{} moved while frozen", params.name(id));
    }
    assert!(params.ids().filter(|&id| !params.group(id).is_encoder_side()).any(|id| st.params.get(id) != params.get(id)));
    assert!(!finetune_step(&ft, &mut st, &cfg, &batch).unwrap().frozen);
    assert!(encoder_side.iter().any(|&id| st.params.get(id) != params.get(id)));
}

#[test]
fn overfits_two_utterances() {
    let (ft, params, cfg) = tiny();
    let batch = vec![labelled(6, vec![0, 1, 2, 3]), labelled(7, vec![4, 3, 4])];
    let mut st = FinetuneState::new(params, 8);
    let mut last = None;
    for _ in 0..200 {
        last = Some(finetune_step(&ft, &mut st, &cfg, &batch).unwrap());
    }
    let m = last.unwrap();
    assert!(m.token_acc > 0.95, "{m:?}");
    for ex in &batch {
        let (hyp, _) = transcribe(&ft, &st.params, &ex.sample, FinetuneTask::Asr, 3, 10).unwrap();
        assert_eq!(hyp, ex.tokens);
    }
}

/// Deterministic random log-probabilities keyed by the prefix.
struct Lattice {
    seed: u64,
}

impl StepScorer for Lattice {
    fn vocab_size(&self) -> usize {
        6
    }

    fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let path: Vec<u64> = p.iter().map(|&t| t as u64).collect();
                let mut rng = rng_from(self.seed, &path);
                let w: Vec<f64> = (0..6).map(|_| rng.random::<f64>().powi(3) + 1e-3).collect();
                let z: f64 = w.iter().sum();
                w.iter().map(|x| (x / z).ln()).collect()
            })
            .collect())
    }
}

/// Best complete hypothesis by enumeration: sequences over non-special ids
/// and EOS, stopping at EOS or `max_len`.
fn exhaustive(sc: &mut Lattice, prefix: Vec<usize>, score: f64, max_len: usize) -> (f64, Vec<usize>) {
    if prefix.last() == Some(&EOS) || prefix.len() == max_len {
        return (score, prefix);
    }
    let lp = sc.log_probs(&[[&[BOS][..], &prefix].concat()]).unwrap().remove(0);
    let mut best = (f64::NEG_INFINITY, vec![]);
    for tok in 2..6 {
        let mut p = prefix.clone();
        p.push(tok);
        let r = exhaustive(sc, p, score + lp[tok], max_len);
        if r.0 > best.0 {
            best = r;
        }
    }
    best
}

#[test]
fn wide_beam_equals_exhaustive_search() {
    for seed in 0..10 {
        let mut sc = Lattice { seed };
        let (score, ids) = exhaustive(&mut sc, vec![], 0.0, 4);
        let h = beam_decode(&mut sc, 4usize.pow(4), 4, false).unwrap();
        assert!((h.score - score).abs() < 1e-12, "seed {seed}");
        assert_eq!(h.ids, ids);
    }
}

#[test]
fn width_one_is_greedy() {
    for seed in 0..20 {
        let mut sc = Lattice { seed };
        assert_eq!(beam_decode(&mut sc, 1, 6, false).unwrap(), greedy_decode(&mut sc, 6).unwrap());
    }
}

#[test]
fn score_does_not_fall_as_beam_widens() {
    for seed in 0..30 {
        let mut sc = Lattice { seed };
        let scores: Vec<f64> = [1, 2, 4, 8, 16, 32].iter().map(|&w| beam_decode(&mut sc, w, 5, false).unwrap().score).collect();
        assert!(scores.windows(2).all(|w| w[1] >= w[0] - 1e-12), "seed {seed}: {scores:?}");
    }
}

#[test]
fn token_error_rate_examples() {
    assert!((token_error_rate(&[1, 2], &[1, 3, 4]) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(token_error_rate::<u32>(&[], &[]), 0.0);
    assert_eq!(token_error_rate(&[5, 6, 7], &[5, 6, 7]), 0.0);
    assert_eq!(edit_distance(&[1, 2, 3], &[]), 3);
    assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
}

#[test]
fn zeroing_follows_the_task() {
    let ex = labelled(9, vec![]);
    let a = zero_modality(&ex.sample, FinetuneTask::Asr);
    assert!(a.video.data().iter().all(|&x| x == 0.0) && a.audio == ex.sample.audio);
    let v = zero_modality(&ex.sample, FinetuneTask::Vsr);
    assert!(v.audio.data().iter().all(|&x| x == 0.0) && v.video == ex.sample.video);
    assert_eq!(zero_modality(&ex.sample, FinetuneTask::Avsr), ex.sample);
    assert!(FinetuneTask::parse("lipreading").is_err());
}
