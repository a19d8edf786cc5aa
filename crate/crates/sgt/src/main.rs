use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use sgt::error::CliError;
use sgt::pipeline::{self, AttackSpec, MechSpec, TextSource};

/// Learned stochastic obfuscation of token embeddings: train, apply, attack
/// and evaluate.
///
/// Every command writes into `--out`; when it is omitted the output goes to
/// `$SGT_OUT_ROOT/<command>`.
#[derive(Parser)]
#[command(name = "sgt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MechArg {
    Sgt,
    Gaussian,
    Passthrough,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackArg {
    Nn,
    Mrp,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the toy target model on a corpus.
    TrainLm {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an obfuscation estimator against a frozen target.
    TrainSgt {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write obfuscated embeddings of a text as an embedding dump.
    Obfuscate {
        /// Estimator checkpoint; omit to use the constant Gaussian baseline.
        #[arg(long, required_unless_present = "sigma")]
        sgt: Option<PathBuf>,
        /// Noise scale of the constant Gaussian baseline (needs --target).
        #[arg(long, conflicts_with = "sgt", requires = "target")]
        sigma: Option<f64>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, required_unless_present = "stdin", conflicts_with = "stdin")]
        text: Option<PathBuf>,
        #[arg(long)]
        stdin: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Leave out the ground-truth id trailer.
        #[arg(long)]
        no_ids: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct tokens from an embedding dump.
    Attack {
        /// Mechanism that produced the dump (recorded in the summary).
        #[arg(long, value_enum)]
        mech: MechArg,
        #[arg(long, value_enum)]
        attack: AttackArg,
        /// Fixed MRP offset.
        #[arg(long, conflicts_with = "calibration")]
        r: Option<usize>,
        /// Dump with ids used to calibrate the MRP offset.
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Utility and privacy metrics of a mechanism on held-out chunks.
    Evaluate {
        #[arg(long, value_enum, default_value = "sgt")]
        mech: MechArg,
        #[arg(long, required_if_eq("mech", "sgt"))]
        sgt: Option<PathBuf>,
        #[arg(long, required_if_eq("mech", "gaussian"))]
        sigma: Option<f64>,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Constant-noise baseline across noise scales.
    DpSweep {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated noise scales; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the generated toy corpus.
    #[command(hide = true)]
    GenCorpus {
        #[arg(long, default_value_t = 1_000_000)]
        bytes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn out_dir(out: Option<PathBuf>, command: &str) -> Result<PathBuf, CliError> {
    if let Some(o) = out {
        return Ok(o);
    }
    match std::env::var_os("SGT_OUT_ROOT") {
        Some(root) => Ok(Path::new(&root).join(command)),
        None => Err(CliError::Usage(format!("{command}: pass --out or set SGT_OUT_ROOT"))),
    }
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    match cli.command {
        Command::TrainLm { corpus, config, out } => {
            let out = out_dir(out, "train-lm")?;
            let s = pipeline::train_lm(&corpus, config.as_deref(), &out)?;
            Ok(json!({
                "checkpoint": s.checkpoint,
                "initial_ce": s.initial_ce,
                "epoch_ce": s.epoch_ce,
                "eval_ce": s.eval_ce,
                "eval_top1_accuracy": s.eval_accuracy,
            }))
        }
        Command::TrainSgt { target, corpus, config, out } => {
            let out = out_dir(out, "train-sgt")?;
            let s = pipeline::train_sgt(&target, &corpus, config.as_deref(), &out)?;
            Ok(json!({
                "checkpoint": s.checkpoint,
                "steps": s.steps_completed,
                "final_nn_fr": s.final_probe.map(|p| p.nn_fr),
                "final_top1_agreement": s.final_probe.map(|p| p.utility.top1_agreement),
            }))
        }
        Command::Obfuscate { sgt, sigma, target, text, stdin, seed, no_ids, out } => {
            let out = file_in(out_dir(out, "obfuscate")?, "obfuscated.sgte");
            let mech = match (sgt, sigma) {
                (Some(p), _) => MechSpec::Sgt(p),
                (None, Some(s)) => MechSpec::Gaussian(s),
                (None, None) => return Err(CliError::Usage("pass --sgt or --sigma".into())),
            };
            let source = if stdin {
                let mut s = String::new();
                std::io::stdin()
                    .read_to_string(&mut s)
                    .map_err(|e| CliError::io(Path::new("<stdin>"), e))?;
                TextSource::Inline(s)
            } else {
                TextSource::File(text.as_deref().expect("clap enforces --text or --stdin"))
            };
            let d = pipeline::obfuscate(&mech, target.as_deref(), source, seed, !no_ids, &out)?;
            Ok(json!({ "dump": out, "sequences": d.count(), "seq_len": d.seq_len, "dim": d.dim() }))
        }
        Command::Attack { mech, attack, r, calibration, input, target, out } => {
            let out = out_dir(out, "attack")?;
            let spec = match (attack, r, calibration.as_deref()) {
                (AttackArg::Nn, _, _) => AttackSpec::Nn,
                (AttackArg::Mrp, Some(r), _) => AttackSpec::Mrp { r },
                (AttackArg::Mrp, None, Some(c)) => AttackSpec::MrpCalibrated { calibration: c },
                (AttackArg::Mrp, None, None) => {
                    return Err(CliError::Usage("mrp needs --r or --calibration".into()));
                }
            };
            let name = match mech {
                MechArg::Sgt => "sgt",
                MechArg::Gaussian => "gaussian",
                MechArg::Passthrough => "passthrough",
            };
            let s = pipeline::attack(name, spec, &input, &target, &out)?;
            Ok(json!({ "attack": s.attack, "r": s.r, "failure_rate": s.failure_rate, "positions": s.positions }))
        }
        Command::Evaluate { mech, sgt, sigma, target, corpus, split: SplitArg::Eval, config, out } => {
            let out = out_dir(out, "evaluate")?;
            let spec = match mech {
                MechArg::Sgt => MechSpec::Sgt(sgt.expect("clap enforces --sgt")),
                MechArg::Gaussian => MechSpec::Gaussian(sigma.expect("clap enforces --sigma")),
                MechArg::Passthrough => MechSpec::Passthrough,
            };
            let s = pipeline::evaluate(&spec, &target, &corpus, config.as_deref(), &out)?;
            Ok(s.report)
        }
        Command::DpSweep { target, corpus, sigmas, config, out } => {
            let out = out_dir(out, "dp-sweep")?;
            let rows = pipeline::dp_sweep(&target, &corpus, sigmas.as_deref(), config.as_deref(), &out)?;
            Ok(json!({ "rows": rows.len(), "sweep": out.join("sweep.csv") }))
        }
        Command::GenCorpus { bytes, seed, out } => {
            pipeline::gen_corpus(bytes, seed, &out)?;
            Ok(json!({ "corpus": out, "bytes": bytes }))
        }
    }
}

/// An existing directory gets a default file name.
fn file_in(path: PathBuf, name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(name)
    } else {
        path
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.render().to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
