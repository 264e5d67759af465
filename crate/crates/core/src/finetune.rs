//! Sequence-to-sequence finetuning on top of the pretrained encoder, beam
//! search decoding and token error rate.

use std::cmp::Ordering;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{MaskSet, Modality};
use crate::model::{AvModel, ModelConfig, Sample};
use crate::nn::{causal_bias, CrossAttention, FeedForward, LayerNorm, Linear, SelfAttention};
use crate::optim::{AdamConfig, AdamState, LrSchedule};
use crate::par::{par_map, ExecMode};
use crate::params::{ParamBuilder, ParamGroup, ParamId, ParamStore};
use crate::pretrain::reduce_grads;
use crate::rng::{rng_from, Rng64};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Corpus token `t` becomes decoder id `t + N_SPECIAL`.
pub const N_SPECIAL: usize = 3;

pub fn to_decoder_ids(tokens: &[u32]) -> Vec<usize> {
    tokens.iter().map(|&t| t as usize + N_SPECIAL).collect()
}

pub fn from_decoder_ids(ids: &[usize]) -> Vec<u32> {
    ids.iter().filter(|&&i| i >= N_SPECIAL).map(|&i| (i - N_SPECIAL) as u32).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneTask {
    Asr,
    Vsr,
    Avsr,
}

impl FinetuneTask {
    /// Input streams reaching the encoder; the other contributes zero features.
    pub fn modality(self) -> Modality {
        match self {
            FinetuneTask::Asr => Modality::Audio,
            FinetuneTask::Vsr => Modality::Video,
            FinetuneTask::Avsr => Modality::AudioVisual,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "asr" => Ok(FinetuneTask::Asr),
            "vsr" => Ok(FinetuneTask::Vsr),
            "avsr" => Ok(FinetuneTask::Avsr),
            _ => Err(Error::config(format!("unknown task '{s}' (expected asr, vsr or avsr)"))),
        }
    }
}

impl std::fmt::Display for FinetuneTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FinetuneTask::Asr => "asr",
            FinetuneTask::Vsr => "vsr",
            FinetuneTask::Avsr => "avsr",
        })
    }
}

/// Zero the raw input slot the task does not use.
pub fn zero_modality<T: Real>(s: &Sample<T>, task: FinetuneTask) -> Sample<T> {
    let mut out = s.clone();
    match task {
        FinetuneTask::Asr => out.video = Tensor::zeros(s.video.shape()),
        FinetuneTask::Vsr => out.audio = Tensor::zeros(s.audio.shape()),
        FinetuneTask::Avsr => {}
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_blocks: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl DecoderConfig {
    pub fn base(vocab_size: usize) -> Self {
        DecoderConfig { n_blocks: 6, dim: 768, ffn_dim: 3072, n_heads: 4, vocab_size, max_len: 256, dropout: 0.1 }
    }

    pub fn large(vocab_size: usize) -> Self {
        DecoderConfig { n_blocks: 9, dim: 1024, ffn_dim: 4096, n_heads: 8, vocab_size, max_len: 256, dropout: 0.1 }
    }

    pub fn tiny(n_blocks: usize, dim: usize, n_heads: usize, vocab_size: usize) -> Self {
        DecoderConfig { n_blocks, dim, ffn_dim: 4 * dim, n_heads, vocab_size, max_len: 64, dropout: 0.0 }
    }

    pub fn validate(&self, encoder_dim: usize) -> Vec<String> {
        let mut errs = Vec::new();
        if self.n_blocks == 0 {
            errs.push("decoder.n_blocks must be >= 1".into());
        }
        if self.n_heads == 0 || self.dim % self.n_heads != 0 {
            errs.push(format!("decoder.dim {} must be divisible by decoder.n_heads {}", self.dim, self.n_heads));
        }
        if self.dim != encoder_dim {
            errs.push(format!("decoder.dim {} must equal encoder width {encoder_dim}", self.dim));
        }
        if self.vocab_size <= N_SPECIAL {
            errs.push(format!("decoder.vocab_size must exceed the {N_SPECIAL} special tokens"));
        }
        if self.max_len < 2 {
            errs.push("decoder.max_len must be >= 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push("decoder.dropout must be in [0, 1)".into());
        }
        errs
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: SelfAttention,
    pub ln2: LayerNorm,
    pub cross: CrossAttention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub tok: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub final_ln: LayerNorm,
    pub out: Linear,
}

impl Decoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &DecoderConfig) -> Self {
        pb.with_group(ParamGroup::Decoder, |pb| {
            pb.scoped("decoder", |pb| Decoder {
                cfg: cfg.clone(),
                tok: pb.normal("tok", &[cfg.vocab_size, cfg.dim], 1.0 / (cfg.dim as f64).sqrt()),
                pos: pb.sinusoid("pos", cfg.max_len, cfg.dim),
                blocks: (0..cfg.n_blocks)
                    .map(|i| {
                        pb.scoped(&format!("block{i}"), |pb| DecoderBlock {
                            ln1: LayerNorm::new(pb, "ln1", cfg.dim),
                            self_attn: SelfAttention::new(pb, "self_attn", cfg.dim, cfg.n_heads),
                            ln2: LayerNorm::new(pb, "ln2", cfg.dim),
                            cross: CrossAttention::new(pb, "cross", cfg.dim, cfg.n_heads),
                            ln3: LayerNorm::new(pb, "ln3", cfg.dim),
                            ffn: FeedForward::new(pb, "ffn", cfg.dim, cfg.ffn_dim),
                        })
                    })
                    .collect(),
                final_ln: LayerNorm::new(pb, "final_ln", cfg.dim),
                out: Linear::new(pb, "out", cfg.dim, cfg.vocab_size, true),
            })
        })
    }

    /// Cross-attention keys and values for every block.
    pub fn memory<T: Real>(&self, tape: &mut Tape<'_, T>, z: Var) -> Result<Vec<(Var, Var)>> {
        self.blocks.iter().map(|b| b.cross.memory(tape, z)).collect()
    }

    /// Logits `[S, vocab]` for `prefix`, position `t` seeing only `prefix[..=t]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        mem: &[(Var, Var)],
        prefix: &[usize],
        mut rng: Option<&mut Rng64>,
    ) -> Result<Var> {
        let s = prefix.len();
        if s == 0 || s > self.cfg.max_len {
            return Err(Error::dim(format!("decoder prefix of {s} tokens (max {})", self.cfg.max_len)));
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::dim(format!("token {bad} outside vocabulary {}", self.cfg.vocab_size)));
        }
        let tok = tape.param(self.tok);
        let e = tape.embedding(tok, prefix)?;
        let e = tape.scale(e, T::lit((self.cfg.dim as f64).sqrt()));
        let pos = tape.param(self.pos);
        let ids: Vec<usize> = (0..s).collect();
        let p = tape.embedding(pos, &ids)?;
        let x = tape.add(e, p)?;
        let mut x = tape.dropout(x, self.cfg.dropout, rng.as_deref_mut());
        let bias = if s > 1 { Some(tape.constant(causal_bias(s))) } else { None };
        let p = self.cfg.dropout;
        for (b, &kv) in self.blocks.iter().zip(mem) {
            let h = b.ln1.forward(tape, x)?;
            let a = b.self_attn.forward(tape, h, bias, None)?;
            let a = tape.dropout(a, p, rng.as_deref_mut());
            x = tape.add(x, a)?;
            let h = b.ln2.forward(tape, x)?;
            let c = b.cross.forward(tape, h, kv)?;
            let c = tape.dropout(c, p, rng.as_deref_mut());
            x = tape.add(x, c)?;
            let h = b.ln3.forward(tape, x)?;
            let f = b.ffn.forward(tape, h, p, rng.as_deref_mut())?;
            let f = tape.dropout(f, p, rng.as_deref_mut());
            x = tape.add(x, f)?;
        }
        let h = self.final_ln.forward(tape, x)?;
        self.out.forward(tape, h)
    }
}

/// Mean negative log-likelihood over non-PAD targets.
pub fn ce_loss<T: Real>(tape: &mut Tape<'_, T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let counted = targets.iter().filter(|&&t| t != PAD).count();
    if counted == 0 {
        return Err(Error::Contract("ce_loss needs at least one non-PAD target".into()));
    }
    let w: Vec<T> = targets.iter().map(|&t| if t == PAD { T::zero() } else { T::lit(1.0 / counted as f64) }).collect();
    let lp = tape.log_softmax(logits)?;
    tape.nll(lp, targets, &w)
}

/// Teacher-forcing pair: input `[BOS, w..]`, target `[w.., EOS]`.
pub fn teacher_forcing(tokens: &[u32]) -> (Vec<usize>, Vec<usize>) {
    let ids = to_decoder_ids(tokens);
    let mut input = vec![BOS];
    input.extend(&ids);
    let mut target = ids;
    target.push(EOS);
    (input, target)
}

/// Encoder plus decoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct FinetuneModel {
    pub encoder: AvModel,
    pub decoder: Decoder,
}

impl FinetuneModel {
    pub fn init<T: Real>(model: &ModelConfig, dec: &DecoderConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let errs = dec.validate(model.encoder.dim);
        if !errs.is_empty() {
            return Err(Error::config(errs.join("; ")));
        }
        let mut store = ParamStore::new();
        let mut rng = rng_from(seed, &[0x1_417]);
        let encoder = AvModel::build(model, &mut store, &mut rng)?;
        let mut rng = rng_from(seed, &[0xdec]);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Decoder);
        let decoder = Decoder::new(&mut pb, dec);
        Ok((FinetuneModel { encoder, decoder }, store))
    }

    /// Encoder representation for `task` in the given mode.
    pub fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, s: &Sample<T>, task: FinetuneTask, rng: Option<&mut Rng64>) -> Result<Var> {
        Ok(self.encoder.forward(tape, s, task.modality(), &MaskSet::empty(s.len()), rng, false)?.z)
    }

    /// Teacher-forced logits `[S+1, vocab]`.
    pub fn logits<T: Real>(&self, tape: &mut Tape<'_, T>, s: &Sample<T>, tokens: &[u32], task: FinetuneTask) -> Result<Var> {
        let z = self.encode(tape, s, task, None)?;
        let mem = self.decoder.memory(tape, z)?;
        let (input, _) = teacher_forcing(tokens);
        self.decoder.forward(tape, &mem, &input, None)
    }
}

/// Copy every pretrained encoder-side parameter into `params`.
pub fn init_from_pretrained<T: Real>(params: &mut ParamStore<T>, student: &ParamStore<T>) -> Result<usize> {
    let n = params.load_matching(student)?;
    let expected = params.ids().filter(|&id| params.group(id).is_encoder_side()).count();
    if n != expected {
        return Err(Error::Contract(format!("pretrained checkpoint covers {n} of {expected} encoder parameters")));
    }
    Ok(n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub task: FinetuneTask,
    pub decoder: DecoderConfig,
    pub freeze_steps: u64,
    pub adam: AdamConfig,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub updates: u64,
    /// Probability of replacing each teacher-forced input token after BOS
    /// with PAD, so the decoder cannot lean on its prefix alone.
    pub token_dropout: f64,
}

impl FinetuneConfig {
    /// Tri-stage for ASR/AVSR, cosine for VSR; a quarter of the updates warm up.
    pub fn schedule_for(task: FinetuneTask, total: u64, peak: f64) -> LrSchedule {
        let warmup = total / 4;
        match task {
            FinetuneTask::Vsr => LrSchedule::Cosine { warmup, total, peak },
            FinetuneTask::Asr | FinetuneTask::Avsr => {
                LrSchedule::TriStage { warmup, hold: 0, total, peak, init_scale: 0.01, final_scale: 0.05 }
            }
        }
    }

    pub fn new(task: FinetuneTask, decoder: DecoderConfig, updates: u64, peak: f64) -> Self {
        FinetuneConfig {
            task,
            decoder,
            freeze_steps: 0,
            adam: AdamConfig::default(),
            lr: Self::schedule_for(task, updates, peak),
            batch_size: 8,
            updates,
            token_dropout: 0.0,
        }
    }

    pub fn validate(&self, encoder_dim: usize) -> Vec<String> {
        let mut errs = self.decoder.validate(encoder_dim);
        errs.extend(self.adam.validate());
        errs.extend(self.lr.validate());
        if self.freeze_steps > self.updates {
            errs.push(format!("finetune.freeze_steps {} exceeds updates {}", self.freeze_steps, self.updates));
        }
        if self.batch_size == 0 {
            errs.push("finetune.batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.token_dropout) {
            errs.push("finetune.token_dropout must be in [0, 1)".into());
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneState {
    pub params: ParamStore<f32>,
    pub opt: AdamState<f32>,
    pub step: u64,
    pub rng: Rng64,
}

impl FinetuneState {
    pub fn new(params: ParamStore<f32>, seed: u64) -> Self {
        let opt = AdamState::new(&params);
        FinetuneState { params, opt, step: 0, rng: rng_from(seed, &[0xf1e]) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMetrics {
    pub step: u64,
    /// Mean cross-entropy per target token.
    pub loss: f64,
    /// Teacher-forced argmax accuracy.
    pub token_acc: f64,
    pub lr: f64,
    pub frozen: bool,
    pub wall_ms: f64,
}

/// A labelled utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Labelled {
    pub sample: Sample<f32>,
    pub tokens: Vec<u32>,
}

struct FtUtt {
    loss_sum: f64,
    correct: usize,
    count: usize,
    grads: Vec<Option<Tensor<f32>>>,
}

fn finetune_utterance(
    ft: &FinetuneModel,
    state: &FinetuneState,
    cfg: &FinetuneConfig,
    ex: &Labelled,
    frozen: bool,
    seed: u64,
    i: usize,
) -> Result<FtUtt> {
    let mut rng = rng_from(seed, &[i as u64]);
    let mut tape = Tape::with_params(&state.params, true);
    if frozen {
        let p = &state.params;
        tape.freeze(|id| p.group(id).is_encoder_side());
    }
    let dropout = ft.encoder.cfg.encoder.dropout > 0.0 || cfg.decoder.dropout > 0.0;
    let z = ft.encode(&mut tape, &ex.sample, cfg.task, if dropout { Some(&mut rng) } else { None })?;
    let mem = ft.decoder.memory(&mut tape, z)?;
    let (mut input, target) = teacher_forcing(&ex.tokens);
    if cfg.token_dropout > 0.0 {
        for t in &mut input[1..] {
            if rng.random::<f64>() < cfg.token_dropout {
                *t = PAD;
            }
        }
    }
    let logits = ft.decoder.forward(&mut tape, &mem, &input, if dropout { Some(&mut rng) } else { None })?;
    let loss = ce_loss(&mut tape, logits, &target)?;
    let lv = tape.value(loss).data()[0] as f64;
    if !lv.is_finite() {
        return Err(Error::Numeric(format!("non-finite finetuning loss at step {}", state.step)));
    }
    let lg = tape.value(logits);
    let correct = target.iter().enumerate().filter(|&(r, &t)| argmax(lg.row(r)) == t).count();
    let grads = tape.backward(loss)?.into_param_grads();
    Ok(FtUtt { loss_sum: lv * target.len() as f64, correct, count: target.len(), grads })
}

fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// One cross-entropy update. Encoder-side parameters receive no gradient,
/// and are therefore left bit-identical, while `step < freeze_steps`.
pub fn finetune_step(ft: &FinetuneModel, state: &mut FinetuneState, cfg: &FinetuneConfig, batch: &[Labelled]) -> Result<FinetuneMetrics> {
    let t0 = Instant::now();
    if batch.is_empty() {
        return Err(Error::Contract("empty finetuning batch".into()));
    }
    let frozen = state.step < cfg.freeze_steps;
    let seed = rand::RngCore::next_u64(&mut state.rng);
    let shared: &FinetuneState = state;
    let results = par_map(ExecMode::current(), batch, |i, ex| finetune_utterance(ft, shared, cfg, ex, frozen, seed, i));
    let (mut loss, mut correct, mut count, mut parts) = (0.0, 0, 0, Vec::new());
    for r in results {
        let r = r?;
        loss += r.loss_sum;
        correct += r.correct;
        count += r.count;
        parts.push(r.grads);
    }
    let mut grads = reduce_grads(parts, state.params.len());
    let inv = 1.0 / batch.len() as f32;
    for g in grads.iter_mut().flatten() {
        for x in g.data_mut() {
            *x *= inv;
        }
    }
    let lr = cfg.lr.at(state.step);
    state.opt.step(&cfg.adam, &mut state.params, &grads, lr)?;
    let step = state.step;
    state.step += 1;
    Ok(FinetuneMetrics {
        step,
        loss: loss / count as f64,
        token_acc: correct as f64 / count as f64,
        lr,
        frozen,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

/// Next-token log-probabilities for a set of prefixes.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Scores prefixes with the decoder attending to a fixed encoder output.
pub struct DecoderScorer<'a> {
    pub decoder: &'a Decoder,
    pub params: &'a ParamStore<f32>,
    pub z: Tensor<f32>,
}

impl<'a> DecoderScorer<'a> {
    pub fn new(ft: &'a FinetuneModel, params: &'a ParamStore<f32>, s: &Sample<f32>, task: FinetuneTask) -> Result<Self> {
        let mut tape = Tape::with_params(params, false);
        let z = ft.encode(&mut tape, s, task, None)?;
        Ok(DecoderScorer { decoder: &ft.decoder, params, z: tape.value(z).clone() })
    }
}

impl StepScorer for DecoderScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.decoder.cfg.vocab_size
    }

    fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::with_params(self.params, false);
        let z = tape.constant(self.z.clone());
        let mem = self.decoder.memory(&mut tape, z)?;
        let mut out = Vec::with_capacity(prefixes.len());
        for p in prefixes {
            let logits = self.decoder.forward(&mut tape, &mem, p, None)?;
            let last = tape.value(logits).row(p.len() - 1).to_vec();
            let last = tape.constant(Tensor::new(&[1, last.len()], last)?);
            let lp = tape.log_softmax(last)?;
            out.push(tape.value(lp).data().iter().map(|v| *v as f64).collect());
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated ids after BOS, including the closing EOS when produced.
    pub ids: Vec<usize>,
    /// Sum of token log-probabilities.
    pub score: f64,
}

impl Hypothesis {
    pub fn normalized(&self) -> f64 {
        self.score / self.ids.len().max(1) as f64
    }

    pub fn ended(&self) -> bool {
        self.ids.last() == Some(&EOS)
    }
}

fn rank(a: &Hypothesis, b: &Hypothesis, norm: bool) -> Ordering {
    let (x, y) = if norm { (a.normalized(), b.normalized()) } else { (a.score, b.score) };
    y.partial_cmp(&x).unwrap_or(Ordering::Equal).then_with(|| a.ids.cmp(&b.ids))
}

/// Beam search from BOS for at most `max_len` generated tokens. Width 1 is
/// greedy decoding. Ties are broken towards the lexicographically smaller
/// sequence, matching an argmax that prefers the lowest id.
pub fn beam_decode(scorer: &mut dyn StepScorer, beam_width: usize, max_len: usize, length_norm: bool) -> Result<Hypothesis> {
    if beam_width == 0 {
        return Err(Error::config("beam width must be >= 1"));
    }
    let mut live = vec![Hypothesis { ids: Vec::new(), score: 0.0 }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| [&[BOS][..], &h.ids].concat()).collect();
        let lps = scorer.log_probs(&prefixes)?;
        let mut cand = Vec::with_capacity(live.len() * scorer.vocab_size());
        for (h, lp) in live.iter().zip(&lps) {
            for (tok, &l) in lp.iter().enumerate() {
                if tok == PAD || tok == BOS || !l.is_finite() {
                    continue;
                }
                let mut ids = h.ids.clone();
                ids.push(tok);
                cand.push(Hypothesis { ids, score: h.score + l });
            }
        }
        cand.sort_by(|a, b| rank(a, b, length_norm));
        cand.truncate(beam_width);
        live.clear();
        for c in cand {
            if c.ended() {
                done.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
        // Scores only fall as sequences grow, so a finished hypothesis that
        // beats every live one cannot be overtaken.
        if !length_norm {
            let best_done = done.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if live.iter().all(|h| h.score <= best_done) {
                break;
            }
        }
    }
    done.extend(live);
    done.sort_by(|a, b| rank(a, b, length_norm));
    done.into_iter().next().ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))
}

/// Argmax rollout until EOS or `max_len` tokens.
pub fn greedy_decode(scorer: &mut dyn StepScorer, max_len: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis { ids: Vec::new(), score: 0.0 };
    while h.ids.len() < max_len && !h.ended() {
        let prefix = [&[BOS][..], &h.ids].concat();
        let lp = scorer.log_probs(&[prefix])?.remove(0);
        let mut best = None;
        for (tok, &l) in lp.iter().enumerate() {
            if tok == PAD || tok == BOS || !l.is_finite() {
                continue;
            }
            if best.is_none_or(|(_, b)| l > b) {
                best = Some((tok, l));
            }
        }
        let (tok, l) = best.ok_or_else(|| Error::Numeric("no finite next-token score".into()))?;
        h.ids.push(tok);
        h.score += l;
    }
    Ok(h)
}

/// Levenshtein distance over `max(1, |reference|)`.
pub fn token_error_rate<A: PartialEq>(hyp: &[A], reference: &[A]) -> f64 {
    edit_distance(hyp, reference) as f64 / reference.len().max(1) as f64
}

pub fn edit_distance<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Decode one utterance and strip specials.
pub fn transcribe(
    ft: &FinetuneModel,
    params: &ParamStore<f32>,
    s: &Sample<f32>,
    task: FinetuneTask,
    beam: usize,
    max_len: usize,
) -> Result<(Vec<u32>, f64)> {
    let mut scorer = DecoderScorer::new(ft, params, s, task)?;
    let h = beam_decode(&mut scorer, beam, max_len, true)?;
    Ok((from_decoder_ids(&h.ids), h.score))
}
