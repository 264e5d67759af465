//! Synthetic audio-visual corpora correlated through latent token sequences.
//!
//! Every token owns a fixed audio template and a fixed video glyph. Frames are
//! template plus Gaussian noise, so the two streams are conditionally
//! independent given the tokens.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontends::{prepare_audio, AudioFrames, VideoFrames, AUDIO_FPS, VIDEO_FPS};
use crate::model::Sample;
use crate::par::{par_map_range, ExecMode};
use crate::rng::{normal, rng_from, Rng64};
use crate::tensor::Tensor;

pub const CORPUS_MAGIC: &[u8; 6] = b"AVSYN1";
pub const CORPUS_VERSION: u32 = 1;
pub const CORPUS_FILE: &str = "corpus.avsyn";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Audio frames per video frame (100 fps over 25 fps).
pub const AUDIO_PER_VIDEO: usize = (AUDIO_FPS / VIDEO_FPS) as usize;
/// Glyphs are drawn on a coarse grid and upsampled.
const GLYPH_GRID: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub vocab_size: usize,
    pub utterance_count: usize,
    /// Inclusive range of video frames per utterance.
    pub min_frames: usize,
    pub max_frames: usize,
    /// Video frames per latent token.
    pub frames_per_token: usize,
    pub audio_dim: usize,
    pub audio_noise_sigma: f64,
    pub video_side: usize,
    pub video_noise_sigma: f64,
    pub video_informative: bool,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            vocab_size: 29,
            utterance_count: 5000,
            min_frames: 20,
            max_frames: 60,
            frames_per_token: 4,
            audio_dim: 26,
            audio_noise_sigma: 1.0,
            video_side: 24,
            video_noise_sigma: 0.5,
            video_informative: true,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.vocab_size == 0 {
            errs.push("data.vocab_size must be positive".into());
        }
        if self.utterance_count == 0 {
            errs.push("data.utterance_count must be positive".into());
        }
        if self.frames_per_token == 0 {
            errs.push("data.frames_per_token must be positive".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            errs.push(format!("data frame range {}..={} is empty", self.min_frames, self.max_frames));
        } else if self.frames_per_token > 0 && self.max_frames / self.frames_per_token < self.min_frames.div_ceil(self.frames_per_token) {
            errs.push("data frame range holds no whole number of tokens".into());
        }
        if self.audio_dim == 0 || self.video_side == 0 {
            errs.push("data.audio_dim and data.video_side must be positive".into());
        }
        for (k, v) in [("data.audio_noise_sigma", self.audio_noise_sigma), ("data.video_noise_sigma", self.video_noise_sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{k} must be >= 0"));
            }
        }
        errs
    }

    fn token_range(&self) -> (usize, usize) {
        (self.min_frames.div_ceil(self.frames_per_token), self.max_frames / self.frames_per_token)
    }
}

/// Per-token audio templates `[vocab, audio_dim]` and glyphs `[vocab, side*side]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Templates {
    pub audio: Tensor<f32>,
    pub video: Tensor<f32>,
}

impl Templates {
    pub fn draw(spec: &SyntheticCorpusSpec) -> Self {
        let mut rng = rng_from(spec.seed, &[0]);
        let audio = Tensor::randn(&[spec.vocab_size, spec.audio_dim], 1.0, &mut rng);
        let s = spec.video_side;
        let mut video = Vec::with_capacity(spec.vocab_size * s * s);
        for _ in 0..spec.vocab_size {
            let grid: Vec<f32> = (0..GLYPH_GRID * GLYPH_GRID).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            for y in 0..s {
                for x in 0..s {
                    video.push(grid[(y * GLYPH_GRID / s) * GLYPH_GRID + x * GLYPH_GRID / s]);
                }
            }
        }
        Templates { audio, video: Tensor::new(&[spec.vocab_size, s * s], video).expect("sized") }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub tokens: Vec<u32>,
    /// 100 fps, `[4 U, audio_dim]`.
    pub audio: AudioFrames<f32>,
    /// 25 fps, `[U, 1, side, side]`.
    pub video: VideoFrames<f32>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.video.frames()
    }

    /// Model input: audio stacked to the video rate and normalized.
    pub fn to_sample(&self, audio_stack: usize) -> Result<Sample<f32>> {
        let audio = prepare_audio(&self.audio, audio_stack)?;
        if audio.shape()[0] != self.frames() {
            return Err(Error::dim(format!(
                "{}: {} stacked audio frames vs {} video frames",
                self.utt_id,
                audio.shape()[0],
                self.frames()
            )));
        }
        Ok(Sample { audio, video: self.video.values.clone() })
    }

    /// Latent token of every video frame.
    pub fn frame_labels(&self, frames_per_token: usize) -> Vec<u32> {
        (0..self.frames()).map(|t| self.tokens[(t / frames_per_token).min(self.tokens.len() - 1)]).collect()
    }
}

pub fn generate_utterance(spec: &SyntheticCorpusSpec, tpl: &Templates, index: usize) -> Utterance {
    let mut rng = rng_from(spec.seed, &[1, index as u64]);
    let (lo, hi) = spec.token_range();
    let n_tok = rng.random_range(lo..=hi);
    let tokens: Vec<u32> = (0..n_tok).map(|_| rng.random_range(0..spec.vocab_size as u32)).collect();
    let u = n_tok * spec.frames_per_token;
    let f = spec.audio_dim;
    let mut audio = Vec::with_capacity(u * AUDIO_PER_VIDEO * f);
    for j in 0..u * AUDIO_PER_VIDEO {
        let tok = tokens[j / AUDIO_PER_VIDEO / spec.frames_per_token] as usize;
        for &m in tpl.audio.row(tok) {
            audio.push(m + (spec.audio_noise_sigma * normal(&mut rng)) as f32);
        }
    }
    let px = spec.video_side * spec.video_side;
    let mut video = Vec::with_capacity(u * px);
    for t in 0..u {
        let tok = tokens[t / spec.frames_per_token] as usize;
        for &g in tpl.video.row(tok) {
            let base = if spec.video_informative { g } else { 0.0 };
            video.push(base + (spec.video_noise_sigma * normal(&mut rng)) as f32);
        }
    }
    Utterance {
        utt_id: format!("utt{index:05}"),
        tokens,
        audio: AudioFrames { values: Tensor::new(&[u * AUDIO_PER_VIDEO, f], audio).expect("sized"), frame_rate: AUDIO_FPS },
        video: VideoFrames {
            values: Tensor::new(&[u, 1, spec.video_side, spec.video_side], video).expect("sized"),
            frame_rate: VIDEO_FPS,
        },
    }
}

/// All utterances in memory, generated in parallel with per-index seeds.
pub fn generate_utterances(spec: &SyntheticCorpusSpec) -> Result<Vec<Utterance>> {
    let errs = spec.validate();
    if !errs.is_empty() {
        return Err(Error::config(errs.join("; ")));
    }
    let tpl = Templates::draw(spec);
    Ok(par_map_range(ExecMode::current(), spec.utterance_count, |i| generate_utterance(spec, &tpl, i)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub offset: u64,
    pub n_tokens: usize,
    pub audio_frames: usize,
    pub video_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticCorpusSpec,
    pub corpus_file: String,
    pub utterances: Vec<ManifestEntry>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend((v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend(x.to_le_bytes());
    }
}

pub fn encode_utterance(out: &mut Vec<u8>, u: &Utterance) {
    put_u32(out, u.utt_id.len());
    out.extend(u.utt_id.as_bytes());
    put_u32(out, u.tokens.len());
    for &t in &u.tokens {
        out.extend(t.to_le_bytes());
    }
    let (n, f) = (u.audio.values.shape()[0], u.audio.values.shape()[1]);
    put_u32(out, n);
    put_u32(out, f);
    put_f32s(out, u.audio.values.data());
    for &d in u.video.values.shape() {
        put_u32(out, d);
    }
    put_f32s(out, u.video.values.data());
}

/// Serialize to the corpus binary and its manifest.
pub fn encode_corpus(spec: &SyntheticCorpusSpec, utts: &[Utterance]) -> Result<(Vec<u8>, Manifest)> {
    let mut bytes = Vec::new();
    bytes.extend(CORPUS_MAGIC);
    bytes.extend(CORPUS_VERSION.to_le_bytes());
    put_u32(&mut bytes, utts.len());
    let mut entries = Vec::with_capacity(utts.len());
    for u in utts {
        entries.push(ManifestEntry {
            utt_id: u.utt_id.clone(),
            offset: bytes.len() as u64,
            n_tokens: u.tokens.len(),
            audio_frames: u.audio.values.shape()[0],
            video_frames: u.frames(),
        });
        encode_utterance(&mut bytes, u);
    }
    let manifest = Manifest { spec: spec.clone(), corpus_file: CORPUS_FILE.into(), utterances: entries };
    Ok((bytes, manifest))
}

/// Write `corpus.avsyn` and `manifest.json` into `dir`.
pub fn generate_corpus(spec: &SyntheticCorpusSpec, dir: &Path) -> Result<Manifest> {
    let utts = generate_utterances(spec)?;
    let (bytes, manifest) = encode_corpus(spec, &utts)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CORPUS_FILE), bytes)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(manifest)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len())?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?) as usize)
    }

    fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
        let b = self.take(n.checked_mul(4)?)?;
        Some(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn decode_at(buf: &[u8], offset: usize) -> Option<Utterance> {
    let mut c = Cursor { buf, pos: offset };
    let n = c.u32()?;
    let utt_id = String::from_utf8(c.take(n)?.to_vec()).ok()?;
    let nt = c.u32()?;
    let tokens = (0..nt).map(|_| c.u32().map(|t| t as u32)).collect::<Option<Vec<_>>>()?;
    let (na, f) = (c.u32()?, c.u32()?);
    let audio = c.f32s(na.checked_mul(f)?)?;
    let dims = [c.u32()?, c.u32()?, c.u32()?, c.u32()?];
    let video = c.f32s(dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?)?;
    Some(Utterance {
        utt_id,
        tokens,
        audio: AudioFrames { values: Tensor::new(&[na, f], audio).ok()?, frame_rate: AUDIO_FPS },
        video: VideoFrames { values: Tensor::new(&dims, video).ok()?, frame_rate: VIDEO_FPS },
    })
}

/// A loaded corpus file with its manifest.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: Manifest,
    bytes: Vec<u8>,
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(format!("manifest: {e}")))?;
        let bytes = fs::read(dir.join(&manifest.corpus_file))?;
        Self::from_parts(manifest, bytes)
    }

    pub fn from_parts(manifest: Manifest, bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..6] != CORPUS_MAGIC {
            return Err(Error::format("not a corpus file (bad magic)"));
        }
        let v = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        if v != CORPUS_VERSION {
            return Err(Error::format(format!("corpus version {v}, expected {CORPUS_VERSION}")));
        }
        Ok(Corpus { manifest, bytes })
    }

    pub fn len(&self) -> usize {
        self.manifest.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn utterance(&self, i: usize) -> Result<Utterance> {
        let e = self
            .manifest
            .utterances
            .get(i)
            .ok_or_else(|| Error::dim(format!("utterance index {i} out of {}", self.len())))?;
        let bad = || Error::format(format!("corrupt record for {}", e.utt_id));
        let u = decode_at(&self.bytes, e.offset as usize).ok_or_else(bad)?;
        let consistent = u.utt_id == e.utt_id
            && u.tokens.len() == e.n_tokens
            && u.audio.values.shape()[0] == e.audio_frames
            && u.frames() == e.video_frames;
        if !consistent {
            return Err(bad());
        }
        Ok(u)
    }

    pub fn utterances(&self) -> Result<Vec<Utterance>> {
        par_map_range(ExecMode::current(), self.len(), |i| self.utterance(i)).into_iter().collect()
    }

    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }
}

/// Padded batch of utterances. Audio is at 100 fps, video at 25 fps.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBatch {
    pub indices: Vec<usize>,
    pub utt_ids: Vec<String>,
    /// Video frames per utterance before padding.
    pub lengths: Vec<usize>,
    /// `[B, U_max]`, true on padding.
    pub padding_mask: Vec<Vec<bool>>,
    /// `[B, 4 U_max, F]`.
    pub audio: Tensor<f32>,
    /// `[B, U_max, C, H, W]`.
    pub video: Tensor<f32>,
    pub tokens: Vec<Vec<u32>>,
}

/// Load `indices` in order, stopping before the padded frame count would
/// exceed `batch_limit_frames` (at least one utterance is always taken).
pub fn load_batch(corpus: &Corpus, indices: &[usize], batch_limit_frames: usize) -> Result<ModalityBatch> {
    if indices.is_empty() {
        return Err(Error::Contract("load_batch needs at least one index".into()));
    }
    let mut taken = Vec::new();
    let mut u_max = 0;
    for &i in indices {
        let u = corpus.utterance(i)?;
        let nm = u_max.max(u.frames());
        if !taken.is_empty() && nm * (taken.len() + 1) > batch_limit_frames {
            break;
        }
        u_max = nm;
        taken.push((i, u));
    }
    let b = taken.len();
    let (f, chw) = {
        let u = &taken[0].1;
        (u.audio.values.shape()[1], u.video.values.shape()[1..].to_vec())
    };
    let px: usize = chw.iter().product();
    let ua_max = u_max * AUDIO_PER_VIDEO;
    let mut audio = vec![0.0f32; b * ua_max * f];
    let mut video = vec![0.0f32; b * u_max * px];
    let mut out = ModalityBatch {
        indices: Vec::new(),
        utt_ids: Vec::new(),
        lengths: Vec::new(),
        padding_mask: Vec::new(),
        audio: Tensor::zeros(&[0]),
        video: Tensor::zeros(&[0]),
        tokens: Vec::new(),
    };
    for (k, (i, u)) in taken.into_iter().enumerate() {
        if u.audio.values.shape()[1] != f || u.video.values.shape()[1..] != chw[..] {
            return Err(Error::format(format!("{} has inconsistent feature dimensions", u.utt_id)));
        }
        let a = u.audio.values.data();
        audio[k * ua_max * f..k * ua_max * f + a.len()].copy_from_slice(a);
        let v = u.video.values.data();
        video[k * u_max * px..k * u_max * px + v.len()].copy_from_slice(v);
        out.padding_mask.push((0..u_max).map(|t| t >= u.frames()).collect());
        out.lengths.push(u.frames());
        out.indices.push(i);
        out.utt_ids.push(u.utt_id);
        out.tokens.push(u.tokens);
    }
    let mut vshape = vec![b, u_max];
    vshape.extend(&chw);
    out.audio = Tensor::new(&[b, ua_max, f], audio)?;
    out.video = Tensor::new(&vshape, video)?;
    Ok(out)
}

impl ModalityBatch {
    /// Strip padding and produce one model input per utterance.
    pub fn samples(&self, audio_stack: usize) -> Result<Vec<Sample<f32>>> {
        let (ua_max, f) = (self.audio.shape()[1], self.audio.shape()[2]);
        let u_max = self.video.shape()[1];
        let px: usize = self.video.shape()[2..].iter().product();
        let mut out = Vec::with_capacity(self.lengths.len());
        for (k, &u) in self.lengths.iter().enumerate() {
            let na = u * AUDIO_PER_VIDEO;
            let a = &self.audio.data()[k * ua_max * f..k * ua_max * f + na * f];
            let raw = AudioFrames { values: Tensor::new(&[na, f], a.to_vec())?, frame_rate: AUDIO_FPS };
            let v = &self.video.data()[k * u_max * px..k * u_max * px + u * px];
            let mut vs = vec![u];
            vs.extend(&self.video.shape()[2..]);
            out.push(Sample { audio: prepare_audio(&raw, audio_stack)?, video: Tensor::new(&vs, v.to_vec())? });
        }
        Ok(out)
    }
}

/// Mirror every frame left to right.
pub fn flip_horizontal(frames: &Tensor<f32>) -> Tensor<f32> {
    let w = *frames.shape().last().expect("non-empty shape");
    let mut out = frames.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Crop every frame of `[U, C, S, S]` to `crop x crop`. With `rng` (training)
/// the offset is random and the clip is flipped with `flip_prob`; without it
/// the crop is centered and never flipped. One draw per utterance.
pub fn augment_video(frames: &Tensor<f32>, flip_prob: f64, crop: usize, rng: Option<&mut Rng64>) -> Result<Tensor<f32>> {
    let [u, c, h, w] = <[usize; 4]>::try_from(frames.shape()).map_err(|_| Error::dim("video must be [U, C, H, W]"))?;
    if crop == 0 || crop > h || crop > w {
        return Err(Error::config(format!("crop {crop} does not fit {h}x{w} frames")));
    }
    let (oy, ox, flip) = match rng {
        Some(r) => (r.random_range(0..=h - crop), r.random_range(0..=w - crop), r.random::<f64>() < flip_prob),
        None => ((h - crop) / 2, (w - crop) / 2, false),
    };
    let mut out = Vec::with_capacity(u * c * crop * crop);
    for plane in frames.data().chunks(h * w) {
        for y in oy..oy + crop {
            out.extend_from_slice(&plane[y * w + ox..y * w + ox + crop]);
        }
    }
    let t = Tensor::new(&[u, c, crop, crop], out)?;
    Ok(if flip { flip_horizontal(&t) } else { t })
}
