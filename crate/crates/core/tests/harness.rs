use std::path::Path;

use avd2v_core::config::RunConfig;
use avd2v_core::finetune::FinetuneTask;
use avd2v_core::harness::*;
use avd2v_core::pretrain::StepMetrics;
use avd2v_core::Error;

fn small_text(dir: &Path) -> String {
    format!(
        "# tiny but complete
seed = 1
data.dir = {}
data.utterance_count = 24
data.test_utterances = 4
data.vocab_size = 6
data.min_frames = 8
data.max_frames = 16
data.video_side = 12
model.dim = 16
model.ffn_dim = 32
model.n_heads = 2
model.n_blocks = 2
targets.top_k = 2
frontend.video_channels = 2,2,2,2
frontend.video_blocks_per_stage = 1
pretrain.updates = 50
pretrain.batch_size = 2
finetune.updates = 10
finetune.batch_size = 2
finetune.label_fraction = 0.5
decoder.ffn_dim = 32
decoder.n_heads = 2
decode.beams = 1,2
decode.max_len = 6
probe.train_utterances = 10
compare.seeds = 1
",
        dir.join("corpus").display()
    )
}

#[test]
fn unknown_keys_and_bad_values_are_all_reported() {
    let err = RunConfig::parse("model.dim = 8\nmodel.colour = blue\nmask.prob = lots\nno equals sign\n").unwrap_err();
    let Error::Config(msg) = err else { panic!("{err:?}") };
    assert!(msg.contains("line 2: model.colour: unknown key"), "{msg}");
    assert!(msg.contains("line 3: mask.prob"), "{msg}");
    assert!(msg.contains("line 4"), "{msg}");
    assert_eq!(err_code("model.colour = blue"), 2);
}

fn err_code(text: &str) -> i32 {
    RunConfig::parse(text).unwrap_err().exit_code()
}

#[test]
fn resolved_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(&small_text(dir.path())).unwrap();
    assert_eq!(cfg.decoder.vocab_size, 6 + 3);
    assert_eq!(cfg.model.frontend.dim, 16);
    cfg.ensure_valid().unwrap();
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    RunConfig::default().ensure_valid().unwrap();
}

#[test]
fn invalid_combinations_are_rejected() {
    let mut cfg = RunConfig::default();
    cfg.data.max_frames = 10_000;
    cfg.label_fraction = 0.0;
    let errs = cfg.validate();
    assert!(errs.iter().any(|e| e.contains("model.max_len")), "{errs:?}");
    assert!(errs.iter().any(|e| e.contains("label_fraction")), "{errs:?}");
}

#[test]
fn pretrain_smoke_logs_every_update_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(&small_text(dir.path())).unwrap();
    let m = cmd_gen_data(&cfg, &cfg.data_dir).unwrap();
    assert_eq!(m.utterances.len(), 24);

    let full = dir.path().join("full");
    let st = cmd_pretrain(&cfg, &full, &PretrainOptions::default()).unwrap();
    assert_eq!(st.step, 50);
    let lines = std::fs::read_to_string(full.join("metrics.jsonl")).unwrap();
    let metrics: Vec<StepMetrics> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(metrics.len(), 50);
    assert!(metrics.iter().enumerate().all(|(i, m)| m.step == i as u64 && m.loss.is_finite()));
    assert_eq!(RunConfig::load(&full.join("config.txt")).unwrap(), cfg);

    let half = dir.path().join("half");
    cmd_pretrain(&cfg, &half, &PretrainOptions { stop_at: Some(20), ..Default::default() }).unwrap();
    let resumed = cmd_pretrain(&cfg, &half, &PretrainOptions { resume: Some(half.join(PRETRAIN_CKPT)), ..Default::default() }).unwrap();
    assert_eq!(resumed, st);
    let strip = |s: String| s.lines().map(|l| l.split("\"wall_ms\"").next().unwrap().to_string()).collect::<Vec<_>>();
    assert_eq!(strip(std::fs::read_to_string(half.join("metrics.jsonl")).unwrap()), strip(lines));

    // Finetune, then decode at two widths.
    let ft = dir.path().join("ft");
    let fs = cmd_finetune(&cfg, Some(&full.join(PRETRAIN_CKPT)), FinetuneTask::Avsr, &ft).unwrap();
    assert_eq!(fs.step, 10);
    let res = cmd_decode_eval(&cfg, &ft.join(FINETUNE_CKPT), FinetuneTask::Avsr, &[1, 2], &dir.path().join("dec")).unwrap();
    assert_eq!(res.len(), 2);
    assert!(res.iter().all(|r| r.ter.is_finite() && r.ter >= 0.0));
    let hyps = std::fs::read_to_string(dir.path().join("dec/hyps_beam2.jsonl")).unwrap();
    assert_eq!(hyps.lines().count(), 4);
    // A pretraining checkpoint is not a finetuning checkpoint.
    assert!(cmd_decode_eval(&cfg, &full.join(PRETRAIN_CKPT), FinetuneTask::Avsr, &[1], &dir.path().join("bad")).is_err());
}

#[test]
fn labelled_subset_is_a_rounded_fraction_of_the_corpus() {
    let spec = avd2v_core::synth::SyntheticCorpusSpec { utterance_count: 30, min_frames: 8, max_frames: 12, ..Default::default() };
    let split = Split::new(avd2v_core::synth::generate_utterances(&spec).unwrap(), 10).unwrap();
    assert_eq!(split.labelled(0.1).len(), 3);
    assert_eq!(split.labelled(0.01).len(), 1);
    assert_eq!(split.labelled(1.0).len(), 20);
    assert!(Split::new(split.test.clone(), 10).is_err());
}

#[test]
fn topk_csv_round_trips() {
    assert_eq!(default_k_list(3), vec![1, 2, 3]);
    assert_eq!(default_k_list(1), vec![1]);
    assert_eq!(default_k_list(12), vec![1, 6, 12]);
    let text = "k,probe_error,ter\n1,0.250000,NaN\n3,0.125000,0.500000\n";
    let rows = parse_topk_csv(text).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[1].k, rows[1].probe_error, rows[1].ter), (3, 0.125, 0.5));
    assert!(rows[0].ter.is_nan());
    assert!(matches!(parse_topk_csv("k,ter\n"), Err(Error::Format(_))));
    assert!(matches!(parse_topk_csv("k,probe_error,ter\n1,x,2\n"), Err(Error::Format(_))));
}
