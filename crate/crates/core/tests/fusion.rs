use avd2v_core::fusion::*;
use avd2v_core::par::ExecMode;
use avd2v_core::rng::rng_from;
use avd2v_core::tensor::{Tape, Tensor};
use proptest::prelude::*;

/// Expected masked fraction: step `t` is covered unless every start in
/// `max(0, t-l+1)..=t` is skipped.
fn coverage_closed_form(u: usize, r_percent: f64, l: usize) -> f64 {
    let q = 1.0 - r_percent / 100.0;
    (0..u).map(|t| 1.0 - q.powi((t + 1).min(l) as i32)).sum::<f64>() / u as f64
}

#[test]
fn coverage_matches_closed_form() {
    let expect = coverage_closed_form(20, 50.0, 10);
    assert!((expect - 0.949560546875).abs() < 1e-12);
    let got = mean_mask_coverage(20, 50.0, 10, 2024, 10_000, ExecMode::current());
    assert!((got - expect).abs() / expect < 0.005, "{got} vs {expect}");
}

#[test]
fn coverage_is_independent_of_exec_mode() {
    let a = mean_mask_coverage(37, 30.0, 5, 9, 500, ExecMode::Sequential);
    let b = mean_mask_coverage(37, 30.0, 5, 9, 500, ExecMode::current());
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn student_schedule_is_quadratic_product() {
    // p_av, p_v_cond and p_a_cond all linear in t; p_V is their product form.
    let s = ModalitySchedule {
        p_av: ScheduledProb::new(1.0, 0.25, 150_000),
        p_v_cond: ScheduledProb::new(0.2, 0.9, 150_000),
        p_a_cond: ScheduledProb::new(0.8, 0.1, 150_000),
    };
    assert!(s.validate("student").is_empty());
    for step in (0..=200_000u64).step_by(977) {
        let f = (step as f64 / 150_000.0).min(1.0);
        let pav = 1.0 - 0.75 * f;
        let pv = (1.0 - pav) * (0.2 + 0.7 * f);
        let pa = (1.0 - pav) * (0.8 - 0.7 * f);
        let p = s.probs_at(step).unwrap();
        assert!((p.v - pv).abs() < 1e-12 && (p.a - pa).abs() < 1e-12);
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn selection_frequencies_within_binomial_ci() {
    let probs = effective_probs(0.5, 0.5, 0.5).unwrap();
    let n = 100_000;
    let mut counts = [0usize; 3];
    let mut rng = rng_from(11, &[]);
    for _ in 0..n {
        counts[select_modality(&mut rng, &probs).index()] += 1;
    }
    // Indexed like `Modality::index`: AV, A, V.
    let expect = [probs.av, probs.a, probs.v];
    for (i, &p) in expect.iter().enumerate() {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((counts[i] as f64 - n as f64 * p).abs() <= 3.0 * sd, "{counts:?}");
    }
}

proptest! {
    #[test]
    fn effective_probs_sum_to_one(p_av in 0.0f64..=1.0, c in 0.0f64..=1.0) {
        let p = effective_probs(p_av, c, 1.0 - c).unwrap();
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn anneal_is_monotone_then_constant(start in 0.0f64..=1.0, end in 0.0f64..=1.0, n in 1u64..1000) {
        let s = ScheduledProb::new(start, end, n);
        let vals: Vec<f64> = (0..=n + 10).map(|t| anneal_value(&s, t)).collect();
        let sign = (end - start).signum();
        prop_assert!(vals.windows(2).all(|w| (w[1] - w[0]) * sign >= -1e-15));
        prop_assert!(vals[n as usize..].iter().all(|&v| v == vals[n as usize]));
    }

    #[test]
    fn mask_is_deterministic_and_spans_merge(u in 1usize..60, r in 0.0f64..100.0, l in 1usize..12, seed in 0u64..1000) {
        let a = sample_mask(u, r, l, &mut rng_from(seed, &[]));
        let b = sample_mask(u, r, l, &mut rng_from(seed, &[]));
        prop_assert_eq!(&a, &b);
        // Every maximal run is at least `l` long unless it touches the end.
        let m = a.membership();
        let mut t = 0;
        while t < u {
            if m[t] {
                let s = t;
                while t < u && m[t] {
                    t += 1;
                }
                prop_assert!(t - s >= l || t == u);
            } else {
                t += 1;
            }
        }
    }

    #[test]
    fn fusion_is_linear(a in -3.0f64..3.0, seed in 0u64..100) {
        let mut rng = rng_from(seed, &[]);
        let ma = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let mv = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (va, vv) = (tape.constant(ma.clone()), tape.constant(mv.clone()));
        let f = fuse(&mut tape, Some(va), Some(vv), Modality::AudioVisual).unwrap();
        let sa = tape.constant(ma.map(|x| a * x));
        let sv = tape.constant(mv.map(|x| a * x));
        let g = fuse(&mut tape, Some(sa), Some(sv), Modality::AudioVisual).unwrap();
        let scaled = tape.value(f).map(|x| a * x);
        prop_assert!(scaled.max_abs_diff(tape.value(g)) < 1e-12);
    }
}
