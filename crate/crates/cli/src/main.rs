//! `avd2v`: data generation, pretraining, finetuning, decoding and ablations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avd2v_core::config::RunConfig;
use avd2v_core::finetune::FinetuneTask;
use avd2v_core::harness::{self, PretrainOptions};
use avd2v_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "avd2v", version, about = "Audio-visual self-supervised pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus and its manifest.
    GenData(Common),
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Drop visual features before the transformer (A-data2vec).
        #[arg(long)]
        audio_only: bool,
        /// Continue from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total updates.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_task)]
        task: Option<FinetuneTask>,
        /// Pretraining checkpoint to initialize the encoder from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train from scratch (random encoder).
        #[arg(long, conflicts_with = "checkpoint")]
        no_init: bool,
    },
    /// Decode the held-out split and report token error rate per beam width.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_task)]
        task: Option<FinetuneTask>,
        /// Finetuning checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Beam width; repeat or comma-separate for a sweep. Defaults to `decode.beams`.
        #[arg(long, value_delimiter = ',')]
        beam: Vec<usize>,
    },
    AblateTopk {
        #[command(flatten)]
        common: Common,
        /// Comma-separated K values; defaults to 1, N/2, N.
        #[arg(long, value_delimiter = ',')]
        k_list: Vec<usize>,
    },
    CompareAvA(Common),
}

fn parse_task(s: &str) -> std::result::Result<FinetuneTask, String> {
    FinetuneTask::parse(s).map_err(|e| e.to_string())
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.ensure_valid()?;
    Ok(cfg)
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            mkdir(&c.out)?;
            let m = harness::cmd_gen_data(&cfg, &c.out)?;
            println!("wrote {} utterances to {}", m.utterances.len(), c.out.display());
        }
        Command::Pretrain { common, audio_only, resume, stop_at } => {
            let cfg = load_config(&common)?;
            mkdir(&common.out)?;
            let st = harness::cmd_pretrain(&cfg, &common.out, &PretrainOptions { audio_only, resume, stop_at })?;
            println!("pretrained to step {}", st.step);
        }
        Command::Finetune { common, task, checkpoint, no_init } => {
            let cfg = load_config(&common)?;
            if checkpoint.is_none() && !no_init {
                return Err(Error::Config("finetune needs --checkpoint or --no-init".into()));
            }
            mkdir(&common.out)?;
            let st = harness::cmd_finetune(&cfg, checkpoint.as_deref(), task.unwrap_or(cfg.task), &common.out)?;
            println!("finetuned to step {}", st.step);
        }
        Command::Decode { common, task, checkpoint, beam } => {
            let cfg = load_config(&common)?;
            let beams = if beam.is_empty() { cfg.beams.clone() } else { beam };
            mkdir(&common.out)?;
            for r in harness::cmd_decode_eval(&cfg, &checkpoint, task.unwrap_or(cfg.task), &beams, &common.out)? {
                println!("beam {:>3}  TER {:.4}", r.beam, r.ter);
            }
        }
        Command::AblateTopk { common, k_list } => {
            let cfg = load_config(&common)?;
            let ks = if k_list.is_empty() { harness::default_k_list(cfg.model.encoder.n_blocks) } else { k_list };
            mkdir(&common.out)?;
            for r in harness::cmd_ablate_topk(&cfg, &ks, &common.out)? {
                println!("K={}  probe error {:.4}  TER {:.4}", r.k, r.probe_error, r.ter);
            }
        }
        Command::CompareAvA(c) => {
            let cfg = load_config(&c)?;
            mkdir(&c.out)?;
            for r in harness::cmd_compare_av_a(&cfg, &c.out)? {
                println!("seed {}  AV {:.4}  A {:.4}", r.seed, r.av_probe_error, r.a_probe_error);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
