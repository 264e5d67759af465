//! Audio and video front ends mapping raw frames to `U x D` feature sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, NORM_EPS};
use crate::params::{ParamBuilder, ParamGroup, ParamId};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const AUDIO_FPS: f64 = 100.0;
pub const VIDEO_FPS: f64 = 25.0;

/// Log filterbank frames, `[frames, features]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFrames<T> {
    pub values: Tensor<T>,
    pub frame_rate: f64,
}

/// Grayscale (or multi-channel) frames, `[frames, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFrames<T> {
    pub values: Tensor<T>,
    pub frame_rate: f64,
}

impl<T: Real> VideoFrames<T> {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    /// Output feature width `D`; must equal the transformer width.
    pub dim: usize,
    /// Raw audio features per 100 fps frame.
    pub audio_features: usize,
    pub audio_stack: usize,
    pub video_in_channels: usize,
    pub video_channels: Vec<usize>,
    pub stem_kernel: [usize; 3],
    pub blocks_per_stage: usize,
}

impl FrontendConfig {
    pub fn new(dim: usize) -> Self {
        FrontendConfig {
            dim,
            audio_features: 26,
            audio_stack: 4,
            video_in_channels: 1,
            video_channels: vec![8, 16, 32, 64],
            stem_kernel: [5, 7, 7],
            blocks_per_stage: 2,
        }
    }

    /// Full-width ResNet-18 stages.
    pub fn full_width(dim: usize) -> Self {
        FrontendConfig { video_channels: vec![64, 128, 256, 512], ..Self::new(dim) }
    }

    pub fn stacked_audio_dim(&self) -> usize {
        self.audio_features * self.audio_stack
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.dim == 0 {
            errs.push("frontend.dim must be positive".into());
        }
        if self.audio_stack == 0 {
            errs.push("frontend.audio_stack must be >= 1".into());
        }
        if self.audio_features == 0 {
            errs.push("frontend.audio_features must be positive".into());
        }
        if self.video_channels.is_empty() || self.video_channels.contains(&0) {
            errs.push("frontend.video_channels must be a non-empty list of positive widths".into());
        }
        if self.stem_kernel.contains(&0) {
            errs.push("frontend.stem_kernel entries must be positive".into());
        }
        if self.blocks_per_stage == 0 {
            errs.push("frontend.video_blocks_per_stage must be >= 1".into());
        }
        errs
    }
}

/// Concatenate groups of `factor` consecutive frames; a trailing partial group
/// is zero-padded.
pub fn stack_audio<T: Real>(x: &AudioFrames<T>, factor: usize) -> Result<AudioFrames<T>> {
    if factor == 0 {
        return Err(Error::config("audio stacking factor must be >= 1"));
    }
    let (n, f) = x.values.dims2()?;
    let groups = n.div_ceil(factor);
    let mut out = vec![T::zero(); groups * f * factor];
    out[..n * f].copy_from_slice(x.values.data());
    Ok(AudioFrames { values: Tensor::new(&[groups, f * factor], out)?, frame_rate: x.frame_rate / factor as f64 })
}

/// Variance floor for audio standardization; small enough that standardized
/// input passes through unchanged to ~1e-8.
pub const AUDIO_NORM_EPS: f64 = 1e-10;

/// Per-dimension standardization over the frames of one utterance.
pub fn normalize_audio<T: Real>(x: &AudioFrames<T>) -> Result<AudioFrames<T>> {
    Ok(AudioFrames { values: standardize_columns(&x.values, AUDIO_NORM_EPS)?, frame_rate: x.frame_rate })
}

/// Subtract each column's mean and divide by `sqrt(var + eps)`, statistics
/// taken over the rows.
pub fn standardize_columns<T: Real>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let (u, d) = x.dims2()?;
    if u == 0 {
        return Err(Error::dim("cannot standardize an empty sequence"));
    }
    let mut out = x.clone();
    let un = u as f64;
    for j in 0..d {
        let mean = (0..u).map(|i| x.at2(i, j).to_f64c()).sum::<f64>() / un;
        let var = (0..u).map(|i| (x.at2(i, j).to_f64c() - mean).powi(2)).sum::<f64>() / un;
        let rs = 1.0 / (var + eps).sqrt();
        for i in 0..u {
            out.data_mut()[i * d + j] = T::lit((x.at2(i, j).to_f64c() - mean) * rs);
        }
    }
    Ok(out)
}

/// Stack then normalize, producing the audio encoder input at the video rate.
pub fn prepare_audio<T: Real>(raw: &AudioFrames<T>, factor: usize) -> Result<Tensor<T>> {
    Ok(normalize_audio(&stack_audio(raw, factor)?)?.values)
}

/// A single dense layer over stacked audio frames.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub proj: Linear,
}

impl AudioEncoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &FrontendConfig) -> Self {
        pb.with_group(ParamGroup::Audio, |pb| AudioEncoder {
            proj: Linear::new(pb, "audio", cfg.stacked_audio_dim(), cfg.dim, true),
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: &Tensor<T>) -> Result<Var> {
        let (_, f) = x.dims2()?;
        if f != self.proj.d_in {
            return Err(Error::dim(format!("audio encoder expects {} features, got {f}", self.proj.d_in)));
        }
        let x = tape.constant(x.clone());
        self.proj.forward(tape, x)
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stride: usize,
    k: [usize; 3],
}

impl ConvBn {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, k: [usize; 3], stride: usize) -> Self {
        let fan_in = (cin * k[0] * k[1] * k[2]) as f64;
        pb.scoped(name, |pb| ConvBn {
            w: pb.normal("w", &[cout, cin, k[0], k[1], k[2]], (2.0 / fan_in).sqrt()),
            gamma: pb.constant("bn_g", &[cout], 1.0),
            beta: pb.constant("bn_b", &[cout], 0.0),
            stride,
            k,
        })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let pad = [self.k[0] / 2, self.k[1] / 2, self.k[2] / 2];
        let y = tape.conv3d(x, w, [1, self.stride, self.stride], pad)?;
        channel_bn(tape, y, self.gamma, self.beta)
    }
}

/// Batch normalization with statistics over every frame and pixel of the
/// utterance; the same statistics are used in training and evaluation.
fn channel_bn<T: Real>(tape: &mut Tape<'_, T>, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let c = shape[0];
    let rest: usize = shape[1..].iter().product();
    let flat = tape.reshape(x, &[c, rest])?;
    let (g, b) = (tape.param(gamma), tape.param(beta));
    let y = tape.channel_norm(flat, g, b, T::lit(NORM_EPS))?;
    tape.reshape(y, &shape)
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: ConvBn,
    act1: ParamId,
    conv2: ConvBn,
    down: Option<ConvBn>,
    act_out: ParamId,
}

impl BasicBlock {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        pb.scoped(name, |pb| BasicBlock {
            conv1: ConvBn::new(pb, "conv1", cin, cout, [1, 3, 3], stride),
            act1: pb.constant("act1", &[cout], 0.25),
            conv2: ConvBn::new(pb, "conv2", cout, cout, [1, 3, 3], 1),
            down: (stride != 1 || cin != cout).then(|| ConvBn::new(pb, "down", cin, cout, [1, 1, 1], stride)),
            act_out: pb.constant("act_out", &[cout], 0.25),
        })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let a1 = tape.param(self.act1);
        let h = tape.prelu(h, a1)?;
        let h = self.conv2.forward(tape, h)?;
        let skip = match &self.down {
            Some(d) => d.forward(tape, x)?,
            None => x,
        };
        let y = tape.add(h, skip)?;
        let a = tape.param(self.act_out);
        tape.prelu(y, a)
    }
}

/// Reduced-width ResNet-18 variant: 3-D stem, per-frame residual stages,
/// spatial average pooling and a projection to `D`.
#[derive(Clone, Debug)]
pub struct VideoEncoder {
    stem: ConvBn,
    stem_act: ParamId,
    blocks: Vec<BasicBlock>,
    proj: Linear,
    in_channels: usize,
}

impl VideoEncoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &FrontendConfig) -> Self {
        pb.with_group(ParamGroup::Video, |pb| {
            pb.scoped("video", |pb| {
                let c0 = cfg.video_channels[0];
                let stem = ConvBn::new(pb, "stem", cfg.video_in_channels, c0, cfg.stem_kernel, 2);
                let stem_act = pb.constant("stem_act", &[c0], 0.25);
                let mut blocks = Vec::new();
                let mut cin = c0;
                for (s, &cout) in cfg.video_channels.iter().enumerate() {
                    for b in 0..cfg.blocks_per_stage {
                        let stride = if s > 0 && b == 0 { 2 } else { 1 };
                        blocks.push(BasicBlock::new(pb, &format!("s{s}b{b}"), cin, cout, stride));
                        cin = cout;
                    }
                }
                let proj = Linear::new(pb, "proj", cin, cfg.dim, true);
                VideoEncoder { stem, stem_act, blocks, proj, in_channels: cfg.video_in_channels }
            })
        })
    }

    /// `x: [U, C, H, W]` to `[U, D]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: &Tensor<T>) -> Result<Var> {
        let (u, c, h, w) = match x.shape() {
            &[u, c, h, w] => (u, c, h, w),
            s => return Err(Error::dim(format!("video must be [U,C,H,W], got {s:?}"))),
        };
        if c != self.in_channels {
            return Err(Error::dim(format!("video has {c} channels, encoder expects {}", self.in_channels)));
        }
        let [_, kh, kw] = self.stem.k;
        if h < kh || w < kw || u == 0 {
            return Err(Error::dim(format!("video frames {h}x{w} smaller than stem kernel {kh}x{kw}")));
        }
        // [U, C, H, W] -> [C, U, H, W]
        let hw = h * w;
        let mut perm = vec![T::zero(); x.numel()];
        for t in 0..u {
            for ch in 0..c {
                let src = (t * c + ch) * hw;
                let dst = (ch * u + t) * hw;
                perm[dst..dst + hw].copy_from_slice(&x.data()[src..src + hw]);
            }
        }
        let xv = tape.constant(Tensor::new(&[c, u, h, w], perm)?);
        let y = self.stem.forward(tape, xv)?;
        let a = tape.param(self.stem_act);
        let y = tape.prelu(y, a)?;
        let mut y = tape.max_pool2d(y)?;
        for b in &self.blocks {
            y = b.forward(tape, y)?;
        }
        let pooled = tape.spatial_mean(y)?;
        let per_frame = tape.transpose(pooled)?;
        self.proj.forward(tape, per_frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::rng_from;

    fn frames(n: usize, f: usize) -> AudioFrames<f64> {
        AudioFrames { values: Tensor::from_fn(&[n, f], |i| i as f64), frame_rate: AUDIO_FPS }
    }

    #[test]
    fn stack_shapes() {
        let s = stack_audio(&frames(8, 26), 4).unwrap();
        assert_eq!(s.values.shape(), &[2, 104]);
        assert_eq!(s.frame_rate, VIDEO_FPS);
        let id = stack_audio(&frames(5, 3), 1).unwrap();
        assert_eq!(id.values, frames(5, 3).values);
        assert!(matches!(stack_audio(&frames(5, 3), 0), Err(Error::Config(_))));
    }

    #[test]
    fn stack_remainder_matches_index_oracle() {
        let x = frames(9, 26);
        let s = stack_audio(&x, 4).unwrap();
        assert_eq!(s.values.shape(), &[3, 104]);
        for g in 0..3 {
            for j in 0..104 {
                let (src_frame, feat) = (g * 4 + j / 26, j % 26);
                let want = if src_frame < 9 { x.values.at2(src_frame, feat) } else { 0.0 };
                assert_eq!(s.values.at2(g, j), want);
            }
        }
    }

    #[test]
    fn normalize_statistics() {
        let c = AudioFrames { values: Tensor::<f64>::full(&[6, 3], 4.2), frame_rate: 25.0 };
        assert!(normalize_audio(&c).unwrap().values.data().iter().all(|&v| v == 0.0));

        let mut rng = rng_from(2, &[]);
        let x = AudioFrames { values: Tensor::<f64>::randn(&[10, 8], 3.0, &mut rng), frame_rate: 25.0 };
        let y = normalize_audio(&x).unwrap();
        for j in 0..8 {
            let col: Vec<f64> = (0..10).map(|i| y.values.at2(i, j)).collect();
            let m = col.iter().sum::<f64>() / 10.0;
            let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 10.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
        let twice = normalize_audio(&y).unwrap();
        assert!(twice.values.max_abs_diff(&y.values) < 1e-6);
    }

    #[test]
    fn audio_encoder_linearity_and_zero_weights() {
        let cfg = FrontendConfig { audio_stack: 1, audio_features: 4, ..FrontendConfig::new(3) };
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_from(0, &[]);
        let enc = AudioEncoder::new(&mut ParamBuilder::new(&mut store, &mut rng, ParamGroup::Audio), &cfg);
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let x2 = x.map(|v| 2.0 * v);
        let mut tape = Tape::with_params(&store, false);
        let (a, b) = (enc.forward(&mut tape, &x).unwrap(), enc.forward(&mut tape, &x2).unwrap());
        assert_eq!(tape.value(a).shape(), &[5, 3]);
        let doubled = tape.value(a).map(|v| 2.0 * v);
        assert!(doubled.max_abs_diff(tape.value(b)) < 1e-12);

        let zero = store.zeros_like();
        let mut tape = Tape::with_params(&zero, false);
        let y = enc.forward(&mut tape, &x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
