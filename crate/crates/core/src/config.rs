//! Flat `key = value` run configuration with dotted namespaces.
//!
//! Unknown keys and malformed values are collected and reported together;
//! nothing runs until the whole file is valid.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::finetune::{DecoderConfig, FinetuneConfig, FinetuneTask, N_SPECIAL};
use crate::fusion::{ModalitySchedule, ScheduledProb};
use crate::model::ModelConfig;
use crate::optim::{AdamConfig, LrSchedule};
use crate::pretrain::PretrainConfig;
use crate::synth::SyntheticCorpusSpec;
use crate::targets::EmaSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SyntheticCorpusSpec,
    pub data_dir: PathBuf,
    /// Trailing utterances held out for evaluation.
    pub test_utterances: usize,

    pub model: ModelConfig,

    pub student: ModalitySchedule,
    pub teacher: ModalitySchedule,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub ema: EmaSchedule,
    pub top_k: usize,
    pub adam: AdamConfig,

    pub pretrain_updates: u64,
    pub pretrain_lr: f64,
    pub pretrain_warmup_frac: f64,
    pub pretrain_batch: usize,
    pub checkpoint_every: u64,

    pub task: FinetuneTask,
    pub decoder: DecoderConfig,
    pub finetune_updates: u64,
    pub finetune_lr: f64,
    pub finetune_batch: usize,
    pub freeze_steps: u64,
    pub token_dropout: f64,
    /// Labelled utterances, as a fraction of the corpus.
    pub label_fraction: f64,

    pub beams: Vec<usize>,
    pub decode_max_len: usize,
    pub length_norm: bool,

    pub probe_ridge: f64,
    pub probe_train_utterances: usize,

    pub compare_seeds: usize,
    pub ablate_finetune_updates: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::tiny(3, 64, 4);
        model.frontend.video_channels = vec![4, 8, 16, 32];
        let data = SyntheticCorpusSpec::default();
        let decoder = DecoderConfig::tiny(1, 64, 4, data.vocab_size + N_SPECIAL);
        RunConfig {
            seed: 0,
            data,
            data_dir: PathBuf::from("corpus"),
            test_utterances: 100,
            model,
            student: ModalitySchedule::student_default(),
            teacher: ModalitySchedule::audio_only(),
            mask_prob: 50.0,
            mask_span: 10,
            ema: EmaSchedule::default(),
            top_k: 3,
            adam: AdamConfig::default(),
            pretrain_updates: 2000,
            pretrain_lr: 5e-4,
            pretrain_warmup_frac: 0.03,
            pretrain_batch: 4,
            checkpoint_every: 0,
            task: FinetuneTask::Asr,
            decoder,
            finetune_updates: 1000,
            finetune_lr: 1e-3,
            finetune_batch: 8,
            freeze_steps: 0,
            token_dropout: 0.0,
            label_fraction: 0.1,
            beams: vec![5, 10, 25, 50, 100],
            decode_max_len: 40,
            length_norm: true,
            probe_ridge: 1e-2,
            probe_train_utterances: 100,
            compare_seeds: 5,
            ablate_finetune_updates: 0,
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| format!("bad list element '{}'", s.trim())))
        .collect()
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got '{v}'")),
    }
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse '{v}'"))
}

fn sched_field(s: &mut ScheduledProb, field: &str, v: &str) -> std::result::Result<(), String> {
    match field {
        "start" => s.start = num(v)?,
        "end" => s.end = num(v)?,
        "steps" => s.anneal_steps = num(v)?,
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

fn modality_field(m: &mut ModalitySchedule, rest: &str, v: &str) -> std::result::Result<(), String> {
    let (which, field) = rest.split_once('.').ok_or("unknown key")?;
    let s = match which {
        "p_av" => &mut m.p_av,
        "p_v_cond" => &mut m.p_v_cond,
        "p_a_cond" => &mut m.p_a_cond,
        _ => return Err("unknown key".into()),
    };
    sched_field(s, field, v)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let fe = &mut self.model.frontend;
        let enc = &mut self.model.encoder;
        match key {
            "seed" => self.seed = num(v)?,
            "data.dir" => self.data_dir = PathBuf::from(v),
            "data.vocab_size" => self.data.vocab_size = num(v)?,
            "data.utterance_count" => self.data.utterance_count = num(v)?,
            "data.min_frames" => self.data.min_frames = num(v)?,
            "data.max_frames" => self.data.max_frames = num(v)?,
            "data.frames_per_token" => self.data.frames_per_token = num(v)?,
            "data.audio_dim" => self.data.audio_dim = num(v)?,
            "data.audio_noise_sigma" => self.data.audio_noise_sigma = num(v)?,
            "data.video_side" => self.data.video_side = num(v)?,
            "data.video_noise_sigma" => self.data.video_noise_sigma = num(v)?,
            "data.video_informative" => self.data.video_informative = parse_bool(v)?,
            "data.seed" => self.data.seed = num(v)?,
            "data.test_utterances" => self.test_utterances = num(v)?,
            "model.n_blocks" => enc.n_blocks = num(v)?,
            "model.dim" => {
                let d: usize = num(v)?;
                enc.dim = d;
                fe.dim = d;
                self.decoder.dim = d;
            }
            "model.ffn_dim" => enc.ffn_dim = num(v)?,
            "model.n_heads" => enc.n_heads = num(v)?,
            "model.dropout" => enc.dropout = num(v)?,
            "model.max_len" => enc.max_len = num(v)?,
            "frontend.audio_stack" => fe.audio_stack = num(v)?,
            "frontend.video_channels" => fe.video_channels = parse_list(v)?,
            "frontend.stem_kernel" => {
                let k: Vec<usize> = parse_list(v)?;
                fe.stem_kernel = k.try_into().map_err(|_| "expected three kernel sizes".to_string())?;
            }
            "frontend.video_blocks_per_stage" => fe.blocks_per_stage = num(v)?,
            "mask.prob" => self.mask_prob = num(v)?,
            "mask.span" => self.mask_span = num(v)?,
            "ema.tau_start" => self.ema.tau_start = num(v)?,
            "ema.tau_end" => self.ema.tau_end = num(v)?,
            "ema.anneal_steps" => self.ema.anneal_steps = num(v)?,
            "targets.top_k" => self.top_k = num(v)?,
            "optim.beta1" => self.adam.beta1 = num(v)?,
            "optim.beta2" => self.adam.beta2 = num(v)?,
            "optim.eps" => self.adam.eps = num(v)?,
            "optim.weight_decay" => self.adam.weight_decay = num(v)?,
            "optim.clip_norm" => {
                let c: f64 = num(v)?;
                self.adam.clip_norm = if c > 0.0 { Some(c) } else { None };
            }
            "pretrain.updates" => self.pretrain_updates = num(v)?,
            "pretrain.lr" => self.pretrain_lr = num(v)?,
            "pretrain.warmup_frac" => self.pretrain_warmup_frac = num(v)?,
            "pretrain.batch_size" => self.pretrain_batch = num(v)?,
            "pretrain.checkpoint_every" => self.checkpoint_every = num(v)?,
            "finetune.task" => self.task = FinetuneTask::parse(v).map_err(|e| e.to_string())?,
            "finetune.updates" => self.finetune_updates = num(v)?,
            "finetune.lr" => self.finetune_lr = num(v)?,
            "finetune.batch_size" => self.finetune_batch = num(v)?,
            "finetune.freeze_steps" => self.freeze_steps = num(v)?,
            "finetune.token_dropout" => self.token_dropout = num(v)?,
            "finetune.label_fraction" => self.label_fraction = num(v)?,
            "decoder.n_blocks" => self.decoder.n_blocks = num(v)?,
            "decoder.ffn_dim" => self.decoder.ffn_dim = num(v)?,
            "decoder.n_heads" => self.decoder.n_heads = num(v)?,
            "decoder.dropout" => self.decoder.dropout = num(v)?,
            "decoder.max_len" => self.decoder.max_len = num(v)?,
            "decode.beams" => self.beams = parse_list(v)?,
            "decode.max_len" => self.decode_max_len = num(v)?,
            "decode.length_norm" => self.length_norm = parse_bool(v)?,
            "probe.ridge" => self.probe_ridge = num(v)?,
            "probe.train_utterances" => self.probe_train_utterances = num(v)?,
            "compare.seeds" => self.compare_seeds = num(v)?,
            "ablate.finetune_updates" => self.ablate_finetune_updates = num(v)?,
            _ => {
                if let Some(rest) = key.strip_prefix("student.") {
                    return modality_field(&mut self.student, rest, v);
                }
                if let Some(rest) = key.strip_prefix("teacher.") {
                    return modality_field(&mut self.teacher, rest, v);
                }
                return Err("unknown key".into());
            }
        }
        Ok(())
    }

    /// Apply `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut errs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errs.push(format!("line {}: expected 'key = value'", n + 1));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if let Err(e) = cfg.set(k, v) {
                errs.push(format!("line {}: {k}: {e}", n + 1));
            }
        }
        if !errs.is_empty() {
            return Err(Error::config(errs.join("\n")));
        }
        // The decoder vocabulary follows the corpus.
        cfg.decoder.vocab_size = cfg.data.vocab_size + N_SPECIAL;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its resolved value, in `parse`-compatible form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let fe = &self.model.frontend;
        let enc = &self.model.encoder;
        let list = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("data.dir", self.data_dir.display().to_string());
        kv("data.vocab_size", self.data.vocab_size.to_string());
        kv("data.utterance_count", self.data.utterance_count.to_string());
        kv("data.min_frames", self.data.min_frames.to_string());
        kv("data.max_frames", self.data.max_frames.to_string());
        kv("data.frames_per_token", self.data.frames_per_token.to_string());
        kv("data.audio_dim", self.data.audio_dim.to_string());
        kv("data.audio_noise_sigma", self.data.audio_noise_sigma.to_string());
        kv("data.video_side", self.data.video_side.to_string());
        kv("data.video_noise_sigma", self.data.video_noise_sigma.to_string());
        kv("data.video_informative", self.data.video_informative.to_string());
        kv("data.seed", self.data.seed.to_string());
        kv("data.test_utterances", self.test_utterances.to_string());
        kv("model.n_blocks", enc.n_blocks.to_string());
        kv("model.dim", enc.dim.to_string());
        kv("model.ffn_dim", enc.ffn_dim.to_string());
        kv("model.n_heads", enc.n_heads.to_string());
        kv("model.dropout", enc.dropout.to_string());
        kv("model.max_len", enc.max_len.to_string());
        kv("frontend.audio_stack", fe.audio_stack.to_string());
        kv("frontend.video_channels", list(&fe.video_channels));
        kv("frontend.stem_kernel", list(&fe.stem_kernel));
        kv("frontend.video_blocks_per_stage", fe.blocks_per_stage.to_string());
        for (role, m) in [("student", &self.student), ("teacher", &self.teacher)] {
            for (name, p) in [("p_av", &m.p_av), ("p_v_cond", &m.p_v_cond), ("p_a_cond", &m.p_a_cond)] {
                kv(&format!("{role}.{name}.start"), p.start.to_string());
                kv(&format!("{role}.{name}.end"), p.end.to_string());
                kv(&format!("{role}.{name}.steps"), p.anneal_steps.to_string());
            }
        }
        kv("mask.prob", self.mask_prob.to_string());
        kv("mask.span", self.mask_span.to_string());
        kv("ema.tau_start", self.ema.tau_start.to_string());
        kv("ema.tau_end", self.ema.tau_end.to_string());
        kv("ema.anneal_steps", self.ema.anneal_steps.to_string());
        kv("targets.top_k", self.top_k.to_string());
        kv("optim.beta1", self.adam.beta1.to_string());
        kv("optim.beta2", self.adam.beta2.to_string());
        kv("optim.eps", self.adam.eps.to_string());
        kv("optim.weight_decay", self.adam.weight_decay.to_string());
        kv("optim.clip_norm", self.adam.clip_norm.unwrap_or(0.0).to_string());
        kv("pretrain.updates", self.pretrain_updates.to_string());
        kv("pretrain.lr", self.pretrain_lr.to_string());
        kv("pretrain.warmup_frac", self.pretrain_warmup_frac.to_string());
        kv("pretrain.batch_size", self.pretrain_batch.to_string());
        kv("pretrain.checkpoint_every", self.checkpoint_every.to_string());
        kv("finetune.task", self.task.to_string());
        kv("finetune.updates", self.finetune_updates.to_string());
        kv("finetune.lr", self.finetune_lr.to_string());
        kv("finetune.batch_size", self.finetune_batch.to_string());
        kv("finetune.freeze_steps", self.freeze_steps.to_string());
        kv("finetune.token_dropout", self.token_dropout.to_string());
        kv("finetune.label_fraction", self.label_fraction.to_string());
        kv("decoder.n_blocks", self.decoder.n_blocks.to_string());
        kv("decoder.ffn_dim", self.decoder.ffn_dim.to_string());
        kv("decoder.n_heads", self.decoder.n_heads.to_string());
        kv("decoder.dropout", self.decoder.dropout.to_string());
        kv("decoder.max_len", self.decoder.max_len.to_string());
        kv("decode.beams", list(&self.beams));
        kv("decode.max_len", self.decode_max_len.to_string());
        kv("decode.length_norm", self.length_norm.to_string());
        kv("probe.ridge", self.probe_ridge.to_string());
        kv("probe.train_utterances", self.probe_train_utterances.to_string());
        kv("compare.seeds", self.compare_seeds.to_string());
        kv("ablate.finetune_updates", self.ablate_finetune_updates.to_string());
        s
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let warmup = (self.pretrain_updates as f64 * self.pretrain_warmup_frac).round() as u64;
        PretrainConfig {
            model: self.model.clone(),
            student: self.student,
            teacher: self.teacher,
            mask_prob: self.mask_prob,
            mask_span: self.mask_span,
            ema: self.ema,
            top_k: self.top_k,
            adam: self.adam,
            lr: LrSchedule::WarmupLinear { warmup, total: self.pretrain_updates, peak: self.pretrain_lr },
            batch_size: self.pretrain_batch,
            updates: self.pretrain_updates,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            task: self.task,
            decoder: self.decoder.clone(),
            freeze_steps: self.freeze_steps,
            adam: self.adam,
            lr: FinetuneConfig::schedule_for(self.task, self.finetune_updates, self.finetune_lr),
            batch_size: self.finetune_batch,
            updates: self.finetune_updates,
            token_dropout: self.token_dropout,
        }
    }

    /// Every problem with the configuration, in one list.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.data.validate();
        errs.extend(self.pretrain_config().validate());
        errs.extend(self.finetune_config().validate(self.model.encoder.dim));
        if self.decoder.vocab_size < self.data.vocab_size + N_SPECIAL {
            errs.push("decoder vocabulary smaller than corpus vocabulary plus specials".into());
        }
        if self.test_utterances >= self.data.utterance_count {
            errs.push("data.test_utterances must leave training utterances".into());
        }
        if self.data.max_frames > self.model.encoder.max_len {
            errs.push(format!("data.max_frames {} exceeds model.max_len {}", self.data.max_frames, self.model.encoder.max_len));
        }
        let max_tokens = self.data.max_frames / self.data.frames_per_token.max(1) + 1;
        if max_tokens > self.decoder.max_len {
            errs.push(format!("decoder.max_len {} shorter than the longest target ({max_tokens})", self.decoder.max_len));
        }
        if self.data.audio_dim != self.model.frontend.audio_features {
            errs.push(format!(
                "data.audio_dim {} differs from the audio front end's {}",
                self.data.audio_dim, self.model.frontend.audio_features
            ));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            errs.push("finetune.label_fraction must be in (0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.pretrain_warmup_frac) {
            errs.push("pretrain.warmup_frac must be in [0, 1)".into());
        }
        if self.beams.is_empty() || self.beams.contains(&0) {
            errs.push("decode.beams must list positive widths".into());
        }
        if self.probe_ridge <= 0.0 {
            errs.push("probe.ridge must be positive".into());
        }
        if self.compare_seeds == 0 {
            errs.push("compare.seeds must be >= 1".into());
        }
        errs
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::config(errs.join("\n")))
        }
    }
}
