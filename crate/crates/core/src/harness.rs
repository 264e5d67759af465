//! Command implementations and the experiment building blocks they share.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::finetune::{
    beam_decode, edit_distance, from_decoder_ids, finetune_step, init_from_pretrained, DecoderScorer, FinetuneConfig,
    FinetuneMetrics, FinetuneModel, FinetuneState, FinetuneTask, Labelled,
};
use crate::fusion::{Modality, ModalitySchedule};
use crate::model::{AvModel, ModelConfig, Sample};
use crate::par::{par_map, ExecMode};
use crate::params::ParamStore;
use crate::pretrain::{draw_batch, pretrain_loop, ModelState, PretrainConfig, StepMetrics};
use crate::synth::{generate_corpus, Corpus, Manifest, Utterance};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Resolved config and tool version, written before anything else.
pub fn write_run_header(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    fs::write(out.join("VERSION"), format!("avd2v {VERSION}\n"))?;
    Ok(())
}

/// Appends one JSON object per line.
pub struct JsonLines {
    file: fs::File,
}

impl JsonLines {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        let file = fs::OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path)?;
        Ok(JsonLines { file })
    }

    pub fn write<S: Serialize>(&mut self, v: &S) -> Result<()> {
        let line = serde_json::to_string(v).map_err(|e| Error::format(e.to_string()))?;
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}

/// Training and held-out utterances; the last `test_utterances` are held out.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Split {
    pub fn new(mut utts: Vec<Utterance>, test_utterances: usize) -> Result<Self> {
        if test_utterances >= utts.len() {
            return Err(Error::config(format!("{test_utterances} test utterances leave none of {} for training", utts.len())));
        }
        let test = utts.split_off(utts.len() - test_utterances);
        Ok(Split { train: utts, test })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        Self::new(Corpus::open(&cfg.data_dir)?.utterances()?, cfg.test_utterances)
    }

    /// The labelled subset: the first `fraction` of the whole corpus.
    pub fn labelled(&self, fraction: f64) -> &[Utterance] {
        let total = self.train.len() + self.test.len();
        let n = ((fraction * total as f64).round() as usize).clamp(1, self.train.len());
        &self.train[..n]
    }
}

pub fn to_samples(utts: &[Utterance], audio_stack: usize) -> Result<Vec<Sample<f32>>> {
    par_map(ExecMode::current(), utts, |_, u| u.to_sample(audio_stack)).into_iter().collect()
}

pub fn to_labelled(utts: &[Utterance], audio_stack: usize) -> Result<Vec<Labelled>> {
    par_map(ExecMode::current(), utts, |_, u| Ok(Labelled { sample: u.to_sample(audio_stack)?, tokens: u.tokens.clone() }))
        .into_iter()
        .collect()
}

/// Fresh model and state, trained on `train` for `cfg.updates` steps.
pub fn run_pretrain(
    cfg: &PretrainConfig,
    train: &[Sample<f32>],
    seed: u64,
    on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<(AvModel, ModelState)> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::config(errs.join("\n")));
    }
    let (model, mut state) = ModelState::init(&cfg.model, seed)?;
    pretrain_loop(&model, &mut state, cfg, train, cfg.updates, on_step)?;
    Ok((model, state))
}

/// Finetune from `pretrained` encoder weights, or from scratch when `None`.
pub fn run_finetune(
    model: &ModelConfig,
    cfg: &FinetuneConfig,
    labelled: &[Labelled],
    pretrained: Option<&ParamStore<f32>>,
    seed: u64,
    mut on_step: impl FnMut(&FinetuneMetrics) -> Result<()>,
) -> Result<(FinetuneModel, FinetuneState)> {
    let errs = cfg.validate(model.encoder.dim);
    if !errs.is_empty() {
        return Err(Error::config(errs.join("\n")));
    }
    if labelled.is_empty() {
        return Err(Error::Contract("no labelled utterances".into()));
    }
    let (ft, mut params) = FinetuneModel::init::<f32>(model, &cfg.decoder, seed)?;
    if let Some(p) = pretrained {
        init_from_pretrained(&mut params, p)?;
    }
    let mut state = FinetuneState::new(params, seed);
    while state.step < cfg.updates {
        let idx = draw_batch(&mut state.rng, labelled.len(), cfg.batch_size);
        let batch: Vec<Labelled> = idx.iter().map(|&i| labelled[i].clone()).collect();
        let m = finetune_step(&ft, &mut state, cfg, &batch)?;
        on_step(&m)?;
    }
    Ok((ft, state))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedUtterance {
    pub utt_id: String,
    pub hyp_tokens: Vec<u32>,
    pub score: f64,
}

/// Decode every utterance; returns the hypotheses and the corpus-level token
/// error rate (total edits over total reference tokens).
pub fn evaluate_ter(
    ft: &FinetuneModel,
    params: &ParamStore<f32>,
    test: &[Utterance],
    task: FinetuneTask,
    beam: usize,
    max_len: usize,
    length_norm: bool,
    audio_stack: usize,
) -> Result<(f64, Vec<DecodedUtterance>)> {
    let decoded = par_map(ExecMode::current(), test, |_, u| -> Result<DecodedUtterance> {
        let s = u.to_sample(audio_stack)?;
        let mut scorer = DecoderScorer::new(ft, params, &s, task)?;
        let h = beam_decode(&mut scorer, beam, max_len, length_norm)?;
        Ok(DecodedUtterance { utt_id: u.utt_id.clone(), hyp_tokens: from_decoder_ids(&h.ids), score: h.score })
    });
    let decoded: Vec<DecodedUtterance> = decoded.into_iter().collect::<Result<_>>()?;
    Ok((corpus_ter(&decoded, test), decoded))
}

pub fn corpus_ter(decoded: &[DecodedUtterance], refs: &[Utterance]) -> f64 {
    let mut edits = 0;
    let mut total = 0;
    for (d, u) in decoded.iter().zip(refs) {
        edits += edit_distance(&d.hyp_tokens, &u.tokens);
        total += u.tokens.len();
    }
    edits as f64 / total.max(1) as f64
}

/// Frame features from the frozen encoder for every utterance, with labels.
fn probe_features(
    model: &AvModel,
    params: &ParamStore<f32>,
    utts: &[Utterance],
    sel: Modality,
    stack: usize,
    fpt: usize,
) -> Result<(Vec<Vec<f32>>, Vec<u32>)> {
    let per = par_map(ExecMode::current(), utts, |_, u| -> Result<(Vec<Vec<f32>>, Vec<u32>)> {
        let z = model.represent(params, &u.to_sample(stack)?, sel)?;
        let (n, _) = z.dims2()?;
        Ok(((0..n).map(|i| z.row(i).to_vec()).collect(), u.frame_labels(fpt)))
    });
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for r in per {
        let (x, y) = r?;
        xs.extend(x);
        ys.extend(y);
    }
    Ok((xs, ys))
}

/// Ridge regression from frame representations to one-hot tokens, fitted on
/// `train` and scored on `test`. Returns the frame-level token error.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe(
    model: &AvModel,
    params: &ParamStore<f32>,
    sel: Modality,
    train: &[Utterance],
    test: &[Utterance],
    vocab: usize,
    ridge: f64,
    stack: usize,
    fpt: usize,
) -> Result<f64> {
    let (xs, ys) = probe_features(model, params, train, sel, stack, fpt)?;
    let d = xs.first().map(|r| r.len()).ok_or_else(|| Error::Contract("empty probe training set".into()))? + 1;
    let x = DMatrix::from_fn(xs.len(), d, |i, j| if j + 1 == d { 1.0 } else { xs[i][j] as f64 });
    let y = DMatrix::from_fn(ys.len(), vocab, |i, j| if ys[i] as usize == j { 1.0 } else { 0.0 });
    let gram = x.transpose() * &x + DMatrix::identity(d, d) * (ridge * xs.len() as f64);
    let w = gram
        .cholesky()
        .ok_or_else(|| Error::Numeric("probe normal equations are not positive definite".into()))?
        .solve(&(x.transpose() * &y));
    let (tx, ty) = probe_features(model, params, test, sel, stack, fpt)?;
    let mut wrong = 0;
    for (row, &label) in tx.iter().zip(&ty) {
        let mut best = (f64::NEG_INFINITY, 0);
        for c in 0..vocab {
            let s: f64 = (0..d).map(|j| w[(j, c)] * if j + 1 == d { 1.0 } else { row[j] as f64 }).sum();
            if s > best.0 {
                best = (s, c);
            }
        }
        wrong += usize::from(best.1 != label as usize);
    }
    Ok(wrong as f64 / ty.len().max(1) as f64)
}

fn meta_json(model: &ModelConfig, extra: serde_json::Value) -> String {
    serde_json::json!({ "model": model, "extra": extra }).to_string()
}

fn check_meta(meta: &str, model: &ModelConfig) -> Result<()> {
    let v: serde_json::Value = serde_json::from_str(meta).map_err(|e| Error::format(format!("checkpoint metadata: {e}")))?;
    let m: ModelConfig = serde_json::from_value(v["model"].clone()).map_err(|e| Error::format(format!("checkpoint metadata: {e}")))?;
    if &m != model {
        return Err(Error::config("checkpoint was trained with a different model configuration"));
    }
    Ok(())
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let errs = cfg.data.validate();
    if !errs.is_empty() {
        return Err(Error::config(errs.join("\n")));
    }
    let m = generate_corpus(&cfg.data, out)?;
    write_run_header(cfg, out)?;
    Ok(m)
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    pub audio_only: bool,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop after this many total updates instead of the configured count.
    pub stop_at: Option<u64>,
}

pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const FINETUNE_CKPT: &str = "finetune.ckpt";

/// Pretrain on the corpus's training split. Metrics go to `metrics.jsonl`;
/// the latest state to `pretrain.ckpt`.
pub fn cmd_pretrain(cfg: &RunConfig, out: &Path, opts: &PretrainOptions) -> Result<ModelState> {
    cfg.ensure_valid()?;
    let mut pcfg = cfg.pretrain_config();
    if opts.audio_only {
        pcfg = pcfg.audio_only();
    }
    let split = Split::load(cfg)?;
    write_run_header(cfg, out)?;
    let train = to_samples(&split.train, cfg.model.frontend.audio_stack)?;
    let meta = meta_json(&cfg.model, serde_json::json!({ "audio_only": opts.audio_only }));
    let (model, mut state) = ModelState::init(&cfg.model, cfg.seed)?;
    if let Some(p) = &opts.resume {
        let (s, m) = ModelState::load(p)?;
        check_meta(&m, &cfg.model)?;
        s.student.ensure_same_structure(&state.student)?;
        state = s;
    }
    let mut log = JsonLines::create(&out.join("metrics.jsonl"), opts.resume.is_some())?;
    let until = opts.stop_at.unwrap_or(pcfg.updates).min(pcfg.updates);
    let every = cfg.checkpoint_every;
    while state.step < until {
        let next = if every > 0 { (state.step / every + 1) * every } else { until };
        pretrain_loop(&model, &mut state, &pcfg, &train, next.min(until), |m| log.write(m))?;
        if every > 0 && state.step % every == 0 {
            state.save(&out.join(format!("pretrain_{}.ckpt", state.step)), &meta)?;
        }
    }
    state.save(&out.join(PRETRAIN_CKPT), &meta)?;
    Ok(state)
}

fn finetune_meta(cfg: &RunConfig, task: FinetuneTask) -> String {
    meta_json(&cfg.model, serde_json::json!({ "decoder": cfg.decoder, "task": task }))
}

/// Finetune on the labelled subset, from a pretraining checkpoint or from
/// scratch when `pretrained` is `None`.
pub fn cmd_finetune(cfg: &RunConfig, pretrained: Option<&Path>, task: FinetuneTask, out: &Path) -> Result<FinetuneState> {
    let mut cfg = cfg.clone();
    cfg.task = task;
    cfg.ensure_valid()?;
    let student = match pretrained {
        Some(p) => {
            let (s, meta) = ModelState::load(p)?;
            check_meta(&meta, &cfg.model)?;
            Some(s.student)
        }
        None => None,
    };
    let split = Split::load(&cfg)?;
    write_run_header(&cfg, out)?;
    let labelled = to_labelled(split.labelled(cfg.label_fraction), cfg.model.frontend.audio_stack)?;
    let mut log = JsonLines::create(&out.join("metrics.jsonl"), false)?;
    let (_, state) = run_finetune(&cfg.model, &cfg.finetune_config(), &labelled, student.as_ref(), cfg.seed, |m| log.write(m))?;
    let ck = Checkpoint {
        meta: finetune_meta(&cfg, task),
        step: state.step,
        opt_t: state.opt.t,
        rng: state.rng.clone(),
        stores: vec![
            ("params".into(), state.params.clone()),
            ("adam_m".into(), state.opt.m.clone()),
            ("adam_v".into(), state.opt.v.clone()),
        ],
    };
    ck.save(&out.join(FINETUNE_CKPT))?;
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamResult {
    pub beam: usize,
    pub ter: f64,
}

/// Decode the held-out split at every beam width; writes
/// `hyps_beam{N}.jsonl` per width and `report.json`.
pub fn cmd_decode_eval(cfg: &RunConfig, checkpoint: &Path, task: FinetuneTask, beams: &[usize], out: &Path) -> Result<Vec<BeamResult>> {
    cfg.ensure_valid()?;
    if beams.is_empty() || beams.contains(&0) {
        return Err(Error::config("beam widths must be positive"));
    }
    let ck = Checkpoint::load(checkpoint)?;
    check_meta(&ck.meta, &cfg.model)?;
    let params = ck.store("params")?.clone();
    let (ft, fresh) = FinetuneModel::init::<f32>(&cfg.model, &cfg.decoder, 0)?;
    fresh.ensure_same_structure(&params).map_err(|_| Error::config("checkpoint does not match the decoder configuration"))?;
    let split = Split::load(cfg)?;
    write_run_header(cfg, out)?;
    let mut results = Vec::new();
    for &b in beams {
        let (ter, hyps) = evaluate_ter(
            &ft,
            &params,
            &split.test,
            task,
            b,
            cfg.decode_max_len,
            cfg.length_norm,
            cfg.model.frontend.audio_stack,
        )?;
        let mut log = JsonLines::create(&out.join(format!("hyps_beam{b}.jsonl")), false)?;
        for h in &hyps {
            log.write(h)?;
        }
        results.push(BeamResult { beam: b, ter });
    }
    let report = serde_json::json!({ "task": task, "utterances": split.test.len(), "results": results });
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report).map_err(|e| Error::format(e.to_string()))? + "\n")?;
    Ok(results)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopKRow {
    pub k: usize,
    pub probe_error: f64,
    /// `NaN` when finetuning is disabled.
    pub ter: f64,
}

/// Format a metric for CSV; `NaN` marks a skipped measurement.
fn csv_num(x: f64) -> String {
    if x.is_nan() { "NaN".into() } else { format!("{x:.6}") }
}

/// `{1, ceil(N/2), N}` without duplicates.
pub fn default_k_list(n_blocks: usize) -> Vec<usize> {
    let mut ks = vec![1, n_blocks.div_ceil(2), n_blocks];
    ks.dedup();
    ks
}

/// Pretrain and probe once per K under the fixed 0.5/0.25/0.25 student mix.
pub fn cmd_ablate_topk(cfg: &RunConfig, ks: &[usize], out: &Path) -> Result<Vec<TopKRow>> {
    cfg.ensure_valid()?;
    let n = cfg.model.encoder.n_blocks;
    if ks.is_empty() {
        return Err(Error::config("empty K list"));
    }
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::config(format!("top-k {bad} outside 1..={n}")));
    }
    let split = Split::load(cfg)?;
    write_run_header(cfg, out)?;
    let stack = cfg.model.frontend.audio_stack;
    let train = to_samples(&split.train, stack)?;
    let probe_train = &split.train[..cfg.probe_train_utterances.min(split.train.len())];
    let mut rows = Vec::new();
    for &k in ks {
        let mut pcfg = cfg.pretrain_config();
        pcfg.student = ModalitySchedule::fixed(0.5, 0.5, 0.5);
        pcfg.teacher = ModalitySchedule::audio_only();
        pcfg.top_k = k;
        let (model, state) = run_pretrain(&pcfg, &train, cfg.seed, |_| Ok(()))?;
        let probe_error = linear_probe(
            &model,
            &state.student,
            Modality::AudioVisual,
            probe_train,
            &split.test,
            cfg.data.vocab_size,
            cfg.probe_ridge,
            stack,
            cfg.data.frames_per_token,
        )?;
        let ter = if cfg.ablate_finetune_updates > 0 {
            let mut fcfg = cfg.finetune_config();
            fcfg.updates = cfg.ablate_finetune_updates;
            fcfg.lr = FinetuneConfig::schedule_for(cfg.task, fcfg.updates, cfg.finetune_lr);
            fcfg.freeze_steps = fcfg.freeze_steps.min(fcfg.updates);
            let labelled = to_labelled(split.labelled(cfg.label_fraction), stack)?;
            let (ft, fs) = run_finetune(&cfg.model, &fcfg, &labelled, Some(&state.student), cfg.seed, |_| Ok(()))?;
            let beam = cfg.beams.iter().copied().min().unwrap_or(1);
            evaluate_ter(&ft, &fs.params, &split.test, cfg.task, beam, cfg.decode_max_len, cfg.length_norm, stack)?.0
        } else {
            f64::NAN
        };
        rows.push(TopKRow { k, probe_error, ter });
    }
    let mut csv = String::from("k,probe_error,ter\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.k, csv_num(r.probe_error), csv_num(r.ter)));
    }
    fs::write(out.join("topk.csv"), csv)?;
    Ok(rows)
}

/// Parse a `topk.csv` back into rows.
pub fn parse_topk_csv(text: &str) -> Result<Vec<TopKRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("k,probe_error,ter") {
        return Err(Error::format("unexpected top-k CSV header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::format(format!("bad top-k CSV row '{l}'"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(TopKRow {
                k: f[0].parse().map_err(|_| bad())?,
                probe_error: f[1].parse().map_err(|_| bad())?,
                ter: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub seed: u64,
    /// AV-pretrained encoder probed with audio-visual input.
    pub av_probe_error: f64,
    /// Audio-only-pretrained encoder probed with audio input.
    pub a_probe_error: f64,
    /// AV-pretrained encoder probed with audio input only.
    pub av_probe_error_audio_input: f64,
}

/// Pretrain AV and audio-only models on the same corpus for each seed and
/// probe each through its own input pipeline.
pub fn cmd_compare_av_a(cfg: &RunConfig, out: &Path) -> Result<Vec<CompareRow>> {
    cfg.ensure_valid()?;
    let split = Split::load(cfg)?;
    write_run_header(cfg, out)?;
    compare_av_a(cfg, &split, Some(out))
}

/// The comparison on an in-memory split; writes `compare.csv` when `out` is set.
pub fn compare_av_a(cfg: &RunConfig, split: &Split, out: Option<&Path>) -> Result<Vec<CompareRow>> {
    let stack = cfg.model.frontend.audio_stack;
    let train = to_samples(&split.train, stack)?;
    let probe_train = &split.train[..cfg.probe_train_utterances.min(split.train.len())];
    let probe = |model: &AvModel, p: &ParamStore<f32>, sel| {
        linear_probe(model, p, sel, probe_train, &split.test, cfg.data.vocab_size, cfg.probe_ridge, stack, cfg.data.frames_per_token)
    };
    let mut rows = Vec::new();
    for s in 0..cfg.compare_seeds as u64 {
        let seed = cfg.seed + s;
        let pcfg = cfg.pretrain_config();
        let (av_model, av) = run_pretrain(&pcfg, &train, seed, |_| Ok(()))?;
        let (a_model, a) = run_pretrain(&pcfg.clone().audio_only(), &train, seed, |_| Ok(()))?;
        rows.push(CompareRow {
            seed,
            av_probe_error: probe(&av_model, &av.student, Modality::AudioVisual)?,
            a_probe_error: probe(&a_model, &a.student, Modality::Audio)?,
            av_probe_error_audio_input: probe(&av_model, &av.student, Modality::Audio)?,
        });
    }
    if let Some(out) = out {
        let mut csv = String::from("seed,av_probe_error,a_probe_error,av_probe_error_audio_input\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                r.seed,
                csv_num(r.av_probe_error),
                csv_num(r.a_probe_error),
                csv_num(r.av_probe_error_audio_input)
            ));
        }
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&CompareRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        csv.push_str(&format!(
            "mean,{},{},{}\n",
            csv_num(mean(|r| r.av_probe_error)),
            csv_num(mean(|r| r.a_probe_error)),
            csv_num(mean(|r| r.av_probe_error_audio_input))
        ));
        fs::write(out.join("compare.csv"), csv)?;
    }
    Ok(rows)
}
