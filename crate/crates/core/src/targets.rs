//! EMA teacher maintenance and contextualized target construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontends::standardize_columns;
use crate::nn::NORM_EPS;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Teacher decay `tau`, increased linearly from `tau_start` to `tau_end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub anneal_steps: u64,
}

impl Default for EmaSchedule {
    fn default() -> Self {
        EmaSchedule { tau_start: 0.999, tau_end: 0.99999, anneal_steps: 100_000 }
    }
}

impl EmaSchedule {
    pub fn validate(&self) -> Vec<String> {
        if 0.0 <= self.tau_start && self.tau_start <= self.tau_end && self.tau_end <= 1.0 {
            vec![]
        } else {
            vec![format!(
                "ema: need 0 <= tau_start ({}) <= tau_end ({}) <= 1",
                self.tau_start, self.tau_end
            )]
        }
    }
}

pub fn tau_at(s: &EmaSchedule, step: u64) -> f64 {
    if s.anneal_steps == 0 || step >= s.anneal_steps {
        return if s.anneal_steps == 0 { s.tau_start } else { s.tau_end };
    }
    s.tau_start + (s.tau_end - s.tau_start) * (step as f64 / s.anneal_steps as f64)
}

/// `teacher <- tau * teacher + (1 - tau) * student`, leaf-wise.
pub fn ema_update<T: Real>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, tau: f64) -> Result<()> {
    teacher.ensure_same_structure(student)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Contract(format!("ema decay {tau} outside [0, 1]")));
    }
    if tau == 1.0 {
        return Ok(());
    }
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = T::lit(tau * a.to_f64c() + (1.0 - tau) * b.to_f64c());
        }
    }
    Ok(())
}

/// Per-dimension standardization over the timesteps of one utterance, no affine.
pub fn instance_norm<T: Real>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    standardize_columns(x, eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetRepresentation<T> {
    pub y: Tensor<T>,
    pub k_used: usize,
    /// One-based indices of the averaged blocks, `N-K+1 ..= N`.
    pub source_blocks: Vec<usize>,
}

/// Instance-normalize each of the top `k` taps, average them, and
/// instance-normalize the average. The result is a plain tensor and therefore
/// carries no gradient.
pub fn build_targets<T: Real>(taps: &[Tensor<T>], k: usize) -> Result<TargetRepresentation<T>> {
    let n = taps.len();
    if k == 0 || k > n {
        return Err(Error::config(format!("top-k {k} outside 1..={n}")));
    }
    let shape = taps[n - 1].shape().to_vec();
    let mut acc = vec![0.0f64; taps[n - 1].numel()];
    for tap in &taps[n - k..] {
        if tap.shape() != shape.as_slice() {
            return Err(Error::dim("teacher taps differ in shape"));
        }
        let normed = instance_norm(tap, NORM_EPS)?;
        for (a, v) in acc.iter_mut().zip(normed.data()) {
            *a += v.to_f64c();
        }
    }
    let avg = Tensor::new(&shape, acc.iter().map(|&a| T::lit(a / k as f64)).collect())?;
    Ok(TargetRepresentation {
        y: instance_norm(&avg, NORM_EPS)?,
        k_used: k,
        source_blocks: (n - k + 1..=n).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use crate::rng::rng_from;

    #[test]
    fn tau_examples() {
        let s = EmaSchedule::default();
        assert_eq!(tau_at(&s, 0), 0.999);
        assert_eq!(tau_at(&s, 100_000), 0.99999);
        assert_eq!(tau_at(&s, 250_000), 0.99999);
        assert!((tau_at(&s, 50_000) - 0.999495).abs() < 1e-15);
    }

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", ParamGroup::Encoder, Tensor::scalar(v));
        s
    }

    #[test]
    fn ema_examples() {
        let mut t = scalar_store(0.3);
        let s = scalar_store(1.0);
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t.tensors()[0].data(), &[0.3]);
        let mut t = scalar_store(0.0);
        ema_update(&mut t, &s, 0.999).unwrap();
        assert!((t.tensors()[0].data()[0] - 0.001).abs() < 1e-15);
        assert_eq!(s.tensors()[0].data(), &[1.0]);

        let mut other = ParamStore::<f64>::new();
        other.add("v", ParamGroup::Encoder, Tensor::scalar(0.0));
        assert!(matches!(ema_update(&mut other, &s, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn instance_norm_examples() {
        let c = Tensor::<f64>::from_fn(&[6, 2], |i| if i % 2 == 0 { 5.0 } else { i as f64 });
        let y = instance_norm(&c, NORM_EPS).unwrap();
        assert!((0..6).all(|r| y.at2(r, 0) == 0.0));
        let mut rng = rng_from(5, &[]);
        let x = Tensor::<f64>::randn(&[10, 4], 2.0, &mut rng);
        let y = instance_norm(&x, NORM_EPS).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..10).map(|i| y.at2(i, j)).collect();
            let m = col.iter().sum::<f64>() / 10.0;
            let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 10.0;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-4);
        }
        let again = instance_norm(&y, NORM_EPS).unwrap();
        assert!(again.max_abs_diff(&y) < 1e-4);
    }

    #[test]
    fn k_out_of_range() {
        let taps = vec![Tensor::<f64>::zeros(&[3, 2]); 2];
        assert!(matches!(build_targets(&taps, 0), Err(Error::Config(_))));
        assert!(matches!(build_targets(&taps, 3), Err(Error::Config(_))));
        assert_eq!(build_targets(&taps, 2).unwrap().source_blocks, vec![1, 2]);
    }
}
