use avd2v_core::frontends::*;
use avd2v_core::params::{ParamBuilder, ParamGroup, ParamStore};
use avd2v_core::rng::rng_from;
use avd2v_core::tensor::{grad_check, Tape, Tensor};

fn small_video_cfg(stem: [usize; 3]) -> FrontendConfig {
    FrontendConfig {
        audio_features: 3,
        audio_stack: 2,
        video_channels: vec![2, 3, 3, 4],
        stem_kernel: stem,
        blocks_per_stage: 1,
        ..FrontendConfig::new(5)
    }
}

fn build(cfg: &FrontendConfig, seed: u64) -> (AudioEncoder, VideoEncoder, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = rng_from(seed, &[]);
    let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Audio);
    let a = AudioEncoder::new(&mut pb, cfg);
    let v = VideoEncoder::new(&mut pb, cfg);
    (a, v, store)
}

#[test]
fn standardized_input_passes_through() {
    let mut rng = rng_from(8, &[]);
    let raw = AudioFrames { values: Tensor::<f64>::randn(&[40, 6], 2.5, &mut rng), frame_rate: 25.0 };
    let once = normalize_audio(&raw).unwrap();
    let twice = normalize_audio(&once).unwrap();
    assert!(twice.values.max_abs_diff(&once.values) < 1e-6);
}

#[test]
fn prepare_audio_runs_at_video_rate() {
    let raw = AudioFrames { values: Tensor::<f64>::from_fn(&[8, 26], |i| (i % 7) as f64), frame_rate: AUDIO_FPS };
    let s = stack_audio(&raw, 4).unwrap();
    assert_eq!(s.values.shape(), &[2, 104]);
    assert_eq!(s.frame_rate, VIDEO_FPS);
    assert_eq!(prepare_audio(&raw, 4).unwrap().shape(), &[2, 104]);
}

#[test]
fn video_shape_contract() {
    let cfg = small_video_cfg([3, 5, 5]);
    let (_, v, store) = build(&cfg, 1);
    let mut rng = rng_from(2, &[]);
    let x = Tensor::<f64>::randn(&[5, 1, 12, 12], 1.0, &mut rng);
    let mut tape = Tape::with_params(&store, false);
    let y = v.forward(&mut tape, &x).unwrap();
    assert_eq!(tape.value(y).shape(), &[5, 5]);
    let wrong = Tensor::<f64>::zeros(&[5, 2, 12, 12]);
    assert!(v.forward(&mut tape, &wrong).is_err());
}

#[test]
fn full_resolution_mouth_crop() {
    let cfg = FrontendConfig { video_channels: vec![2, 2, 2, 2], blocks_per_stage: 1, ..FrontendConfig::new(8) };
    let (_, v, store) = build(&cfg, 3);
    let x = Tensor::<f32>::from_fn(&[2, 1, 88, 88], |i| ((i % 13) as f32 - 6.0) / 6.0);
    let store = store.cast::<f32>();
    let mut tape = Tape::with_params(&store, false);
    let y = v.forward(&mut tape, &x).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 8]);
}

#[test]
fn depth_one_stem_is_per_frame() {
    // Batch statistics are order-free, so permuting frames permutes outputs.
    let cfg = small_video_cfg([1, 3, 3]);
    let (_, v, store) = build(&cfg, 4);
    let mut rng = rng_from(5, &[]);
    let (u, hw) = (6, 100);
    let x = Tensor::<f64>::randn(&[u, 1, 10, 10], 1.0, &mut rng);
    let perm = [3, 0, 5, 1, 4, 2];
    let mut px = vec![0.0; x.numel()];
    for (dst, &src) in perm.iter().enumerate() {
        px[dst * hw..(dst + 1) * hw].copy_from_slice(&x.data()[src * hw..(src + 1) * hw]);
    }
    let px = Tensor::new(&[u, 1, 10, 10], px).unwrap();
    let mut tape = Tape::with_params(&store, false);
    let (y, py) = (v.forward(&mut tape, &x).unwrap(), v.forward(&mut tape, &px).unwrap());
    for (dst, &src) in perm.iter().enumerate() {
        let (a, b) = (tape.value(py).row(dst), tape.value(y).row(src));
        assert!(a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12));
    }
}

#[test]
fn all_frontend_params_get_correct_gradients() {
    let cfg = small_video_cfg([3, 3, 3]);
    let (a, v, store) = build(&cfg, 6);
    let mut rng = rng_from(7, &[]);
    let xa = prepare_audio(&AudioFrames { values: Tensor::randn(&[8, 3], 1.0, &mut rng), frame_rate: AUDIO_FPS }, 2).unwrap();
    let xv = Tensor::<f64>::randn(&[4, 1, 9, 9], 1.0, &mut rng);
    let r = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
    let f = |tape: &mut Tape<'_, f64>| {
        let ma = a.forward(tape, &xa)?;
        let mv = v.forward(tape, &xv)?;
        let m = tape.add(ma, mv)?;
        let rc = tape.constant(r.clone());
        let y = tape.mul(m, rc)?;
        Ok(tape.sum(y))
    };
    // Every parameter is reached.
    let grads = {
        let mut tape = Tape::with_params(&store, true);
        let l = f(&mut tape).unwrap();
        tape.backward(l).unwrap().into_param_grads()
    };
    for (id, g) in store.ids().zip(&grads) {
        let g = g.as_ref().unwrap_or_else(|| panic!("{} got no gradient", store.name(id)));
        assert!(g.data().iter().any(|&x| x != 0.0), "{} has a zero gradient", store.name(id));
    }
    let report = grad_check(&store, f, 1e-6, 1e-4, Some(6)).unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}
