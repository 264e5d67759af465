use avd2v_core::rng::rng_from;
use avd2v_core::synth::*;
use avd2v_core::tensor::Tensor;
use avd2v_core::Error;
use nalgebra::DMatrix;

fn small(count: usize, seed: u64) -> SyntheticCorpusSpec {
    SyntheticCorpusSpec {
        vocab_size: 8,
        utterance_count: count,
        min_frames: 8,
        max_frames: 24,
        video_side: 12,
        seed,
        ..SyntheticCorpusSpec::default()
    }
}

fn nearest(x: &[f32], table: &Tensor<f32>) -> usize {
    let d = |k: usize| table.row(k).iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f32>();
    (0..table.shape()[0]).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap()
}

#[test]
fn generation_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = small(100, 3);
    let m = generate_corpus(&spec, a.path()).unwrap();
    generate_corpus(&spec, b.path()).unwrap();
    for f in ["corpus.avsyn", "manifest.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert_eq!(m.utterances.len(), 100);
    for (i, e) in m.utterances.iter().enumerate() {
        assert_eq!(e.video_frames, e.n_tokens * spec.frames_per_token);
        assert_eq!(e.audio_frames, e.video_frames * AUDIO_PER_VIDEO);
        assert!((spec.min_frames..=spec.max_frames).contains(&e.video_frames), "utterance {i}");
    }
    let other = generate_utterances(&small(3, 4)).unwrap();
    assert_ne!(other[0].tokens, Corpus::open(a.path()).unwrap().utterance(0).unwrap().tokens);
}

#[test]
fn noiseless_frames_recover_tokens_by_nearest_template() {
    let spec = SyntheticCorpusSpec { audio_noise_sigma: 0.0, video_noise_sigma: 0.0, ..small(30, 5) };
    let tpl = Templates::draw(&spec);
    for u in generate_utterances(&spec).unwrap() {
        let labels = u.frame_labels(spec.frames_per_token);
        for (t, &tok) in labels.iter().enumerate() {
            let v = &u.video.values.data()[t * 144..(t + 1) * 144];
            assert_eq!(nearest(v, &tpl.video), tok as usize);
            for j in 0..AUDIO_PER_VIDEO {
                assert_eq!(nearest(u.audio.values.row(t * AUDIO_PER_VIDEO + j), &tpl.audio), tok as usize);
            }
        }
    }
}

#[test]
fn uninformative_video_carries_no_glyph() {
    let spec = SyntheticCorpusSpec { video_informative: false, video_noise_sigma: 0.0, ..small(5, 6) };
    for u in generate_utterances(&spec).unwrap() {
        assert!(u.video.values.data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn audio_templates_linearly_predict_glyph_class() {
    // Least squares from the clean audio template to the one-hot glyph class.
    let spec = small(1, 7);
    let tpl = Templates::draw(&spec);
    let (v, f) = (spec.vocab_size, spec.audio_dim);
    let mut rng = rng_from(8, &[]);
    let noisy = Tensor::<f64>::randn(&[400, f], 0.1, &mut rng);
    let x = DMatrix::from_fn(400, f + 1, |i, j| if j == f { 1.0 } else { tpl.audio.at2(i % v, j) as f64 + noisy.at2(i, j) });
    let glyph_class: Vec<usize> = (0..v).map(|k| nearest(tpl.video.row(k), &tpl.video)).collect();
    let y = DMatrix::from_fn(400, v, |i, c| if glyph_class[i % v] == c { 1.0 } else { 0.0 });
    let w = x.clone().svd(true, true).solve(&y, 1e-9).unwrap();
    let pred = x * w;
    let correct = (0..400).filter(|&i| pred.row(i).transpose().argmax().0 == glyph_class[i % v]).count();
    assert!(correct as f64 / 400.0 > 0.99, "{correct}/400");
}

#[test]
fn load_batch_pads_to_longest() {
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(&small(40, 9), dir.path()).unwrap();
    let c = Corpus::open(dir.path()).unwrap();
    let one = load_batch(&c, &[3], 10_000).unwrap();
    assert!(one.padding_mask[0].iter().all(|&p| !p));
    let lens: Vec<usize> = (0..c.len()).map(|i| c.manifest.utterances[i].video_frames).collect();
    let (long, short) = {
        let l = (0..c.len()).max_by_key(|&i| lens[i]).unwrap();
        let s = (0..c.len()).min_by_key(|&i| lens[i]).unwrap();
        (l, s)
    };
    let b = load_batch(&c, &[long, short], 10_000).unwrap();
    let pad = lens[long] - lens[short];
    assert!(pad > 0);
    assert_eq!(b.video.shape()[..2], [2, lens[long]]);
    assert_eq!(b.padding_mask[1].iter().filter(|&&p| p).count(), pad);
    assert!(b.padding_mask[1][lens[short]..].iter().all(|&p| p));
    // The frame budget truncates the batch but always keeps one utterance.
    let capped = load_batch(&c, &[long, short, 0], 2 * lens[long]).unwrap();
    assert_eq!(capped.lengths.len(), 2);
    assert_eq!(load_batch(&c, &[long], 1).unwrap().lengths.len(), 1);
}

#[test]
fn batch_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small(20, 10);
    generate_corpus(&spec, dir.path()).unwrap();
    let mem = generate_utterances(&spec).unwrap();
    let c = Corpus::open(dir.path()).unwrap();
    let idx = [7, 2, 15, 11];
    let b = load_batch(&c, &idx, 10_000).unwrap();
    for (k, &i) in idx.iter().enumerate() {
        assert_eq!(c.utterance(i).unwrap(), mem[i]);
        assert_eq!(b.tokens[k], mem[i].tokens);
        let s = &b.samples(4).unwrap()[k];
        let direct = mem[i].to_sample(4).unwrap();
        assert_eq!(s.audio.data(), direct.audio.data());
        assert_eq!(s.video, direct.video);
    }
}

#[test]
fn corrupt_records_name_the_utterance() {
    let spec = small(3, 11);
    let utts = generate_utterances(&spec).unwrap();
    let (mut bytes, manifest) = encode_corpus(&spec, &utts).unwrap();
    let off = manifest.utterances[1].offset as usize;
    bytes[off] = 0xff;
    let c = Corpus::from_parts(manifest.clone(), bytes).unwrap();
    match c.utterance(1) {
        Err(Error::Format(m)) => assert!(m.contains("utt00001"), "{m}"),
        other => panic!("{other:?}"),
    }
    assert!(c.utterance(0).is_ok());
    let (mut bytes, _) = encode_corpus(&spec, &utts).unwrap();
    bytes[0] = b'X';
    assert!(matches!(Corpus::from_parts(manifest, bytes), Err(Error::Format(_))));
}

#[test]
fn augmentation_contracts() {
    let mut rng = rng_from(12, &[]);
    let frames = Tensor::<f32>::randn(&[3, 1, 10, 10], 1.0, &mut rng);
    // No flip: a crop at some offset.
    let c = augment_video(&frames, 0.0, 6, Some(&mut rng_from(1, &[]))).unwrap();
    let found = (0..=4).any(|oy| {
        (0..=4).any(|ox| (0..6).all(|y| (0..6).all(|x| c.data()[y * 6 + x] == frames.data()[(oy + y) * 10 + ox + x])))
    });
    assert!(found);
    // Forced flip twice is the identity.
    assert_eq!(flip_horizontal(&flip_horizontal(&frames)), frames);
    let once = augment_video(&frames, 1.0, 10, Some(&mut rng_from(2, &[]))).unwrap();
    assert_eq!(once, flip_horizontal(&frames));
    // Seeded replay and centered evaluation crop.
    let a = augment_video(&frames, 0.5, 7, Some(&mut rng_from(3, &[]))).unwrap();
    let b = augment_video(&frames, 0.5, 7, Some(&mut rng_from(3, &[]))).unwrap();
    assert_eq!(a, b);
    let e = augment_video(&frames, 1.0, 6, None).unwrap();
    assert_eq!(e.data()[0], frames.data()[2 * 10 + 2]);
    assert!(augment_video(&frames, 0.0, 11, None).is_err());
}
