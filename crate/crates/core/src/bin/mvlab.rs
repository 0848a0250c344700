//! Command-line front end for the study pipeline. Exit codes: 0 success,
//! 2 invalid config, 3 missing checkpoint, 4 checkpoint CRC mismatch,
//! 1 any other failure. Errors print one machine-parseable line to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mvlab::checkpoint::CheckpointError;
use mvlab::config::{ConfigError, StudyConfig};
use mvlab::study::{Study, StudyError, CKPT_STAGE2};
use mvlab::training::BaselineKind;

#[derive(Parser)]
#[command(name = "mvlab", about = "Toy multiview diffusion lab", version)]
struct Cli {
    /// INI-style config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<String>,
    /// Per-key overrides: --set section.key=value (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Materialize the procedural dataset under the output directory.
    GenData,
    /// Pretrain the realistic prior on REAL data.
    Pretrain,
    /// Stage 1: train domain shifters on the frozen base model.
    Stage1,
    /// Stage 2: fine-tune the backbone with the binding policies.
    Stage2,
    /// Train one comparison baseline from the base checkpoint.
    TrainBaseline {
        /// One of: syn_only_full, syn_real_full, lora, linear_adapter,
        /// domain_adapter, spatial_adapter, domain_switcher_joint,
        /// domain_switcher_2stage.
        #[arg(long)]
        kind: String,
    },
    /// Sample grids from a checkpoint.
    Sample {
        #[arg(long, default_value = CKPT_STAGE2)]
        ckpt: String,
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Enable inference-time domain shifting.
        #[arg(long)]
        shift: bool,
        /// Also write SDEdit refinements against the base model.
        #[arg(long)]
        sdedit: bool,
    },
    /// Evaluate a checkpoint and append a metrics row.
    Eval {
        #[arg(long, default_value = CKPT_STAGE2)]
        ckpt: String,
        #[arg(long)]
        shift: bool,
    },
    /// Emit PCA feature maps (and optionally the layer-split case study).
    Probe {
        #[arg(long, default_value = CKPT_STAGE2)]
        ckpt: String,
        /// Run the layer-selective fine-tuning case study too.
        #[arg(long)]
        case_study: bool,
    },
    /// Train and evaluate the 8-row ablation table.
    Ablate,
    /// Grid-search the inference shift schedule (B_max, then t_max).
    TuneShift {
        #[arg(long, default_value = CKPT_STAGE2)]
        ckpt: String,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_MISSING_CKPT: u8 = 3;
const EXIT_CRC: u8 = 4;

fn build_config(cli: &Cli) -> Result<StudyConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Syntax {
                line: 0,
                msg: format!("cannot read {}: {e}", path.display()),
            })?;
            StudyConfig::from_ini(&text)?
        }
        None => StudyConfig::default(),
    };
    for s in &cli.sets {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn exit_code_for(err: &StudyError) -> u8 {
    match err {
        StudyError::Checkpoint(CheckpointError::Crc { .. }) => EXIT_CRC,
        StudyError::Checkpoint(CheckpointError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
            EXIT_MISSING_CKPT
        }
        _ => 1,
    }
}

fn fail(kind: &str, msg: impl std::fmt::Display, code: u8) -> ExitCode {
    eprintln!("error kind={kind} msg={:?}", msg.to_string());
    ExitCode::from(code)
}

fn run(study: &Study, cmd: &Cmd) -> Result<(), StudyError> {
    match cmd {
        Cmd::GenData => {
            let files = study.gen_data()?;
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Cmd::Pretrain => println!("wrote {}", study.pretrain()?.display()),
        Cmd::Stage1 => println!("wrote {}", study.stage1()?.display()),
        Cmd::Stage2 => println!("wrote {}", study.stage2()?.display()),
        Cmd::TrainBaseline { kind } => {
            let kind = BaselineKind::parse(kind).ok_or(StudyError::Contract {
                op: "train-baseline",
                msg: format!("unknown baseline {kind}"),
            })?;
            println!("wrote {}", study.baseline(kind)?.display());
        }
        Cmd::Sample { ckpt, n, shift, sdedit } => {
            for f in study.sample_cmd(ckpt, *n, *shift, *sdedit)? {
                println!("wrote {}", f.display());
            }
        }
        Cmd::Eval { ckpt, shift } => {
            let report = study.evaluate(ckpt, *shift)?;
            println!("{}", mvlab::eval::MetricsReport::CSV_HEADER);
            println!("{}", report.csv_row());
        }
        Cmd::Probe { ckpt, case_study } => {
            for f in study.probe_cmd(ckpt)? {
                println!("wrote {}", f.display());
            }
            if *case_study {
                let (full_syn, split) = study.case_study()?;
                println!("fid_full_syn={full_syn:.6} fid_layer_split={split:.6}");
            }
        }
        Cmd::Ablate => {
            let table = study.ablate()?;
            println!("{}", mvlab::eval::MetricsReport::CSV_HEADER);
            for row in table {
                println!("{}", row.csv_row());
            }
        }
        Cmd::TuneShift { ckpt } => {
            let (b_max, t_max) = study.tune_shift(ckpt)?;
            println!("b_max_frac={b_max} t_max={t_max}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => return fail("config", e, EXIT_CONFIG),
    };
    let study = Study::new(cfg);
    match run(&study, &cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code_for(&e);
            let kind = match code {
                EXIT_MISSING_CKPT => "missing-checkpoint",
                EXIT_CRC => "checkpoint-crc",
                _ => "run",
            };
            fail(kind, e, code)
        }
    }
}
