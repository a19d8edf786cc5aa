//! The pipeline stages behind each command. Every stage reads its inputs,
//! writes its outputs into a directory (or one file plus a sidecar
//! manifest), and returns a summary.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sgt_core::baseline::{sensitivity, sweep, ConstantNoise};
use sgt_core::corpus::{chunk_tokens, Chunk};
use sgt_core::eval::{evaluate as eval_mechanism, Evaluation};
use sgt_core::lm::{pretrain, EmbeddingTable, TargetModel};
use sgt_core::privacy::{calibrate_mrp, ranks, run_attack, Attack, RankHistogram};
use sgt_core::sgt::{obfuscate as obfuscate_batch, Mechanism, Passthrough, SgtEstimator};
use sgt_core::train::{streams, train_sgt as run_training, TrainEvent};
use sgt_core::RngStream;

use crate::checkpoint::{params_hash, SgtCheckpoint, TargetCheckpoint};
use crate::config::RunConfig;
use crate::corpus_io::{build_tokenizer, chunk_corpus, read_corpus, write_tokenizer, Splits};
use crate::dump::EmbeddingDump;
use crate::error::CliError;
use crate::manifest::{sidecar_path, RunManifest, MANIFEST_NAME};
use crate::report::{
    attack_csv, histogram_csv, loss_row, probe_row, report_json, sweep_csv, utility_json, validate_report_json,
    LOSS_HEADER, PROBE_HEADER,
};

/// Stream ids for stages outside estimator training (which uses
/// [`streams`] under the same seed).
pub mod stage_streams {
    pub const LM_INIT: u64 = 100;
    pub const LM_PRETRAIN: u64 = 101;
    pub const EVAL: u64 = 200;
    pub const OBFUSCATE: u64 = 300;
    pub const SWEEP: u64 = 400;
}

pub const BUDGET_NOTE: &str = "step and token budgets are desk-scale choices, not values from a reference run";

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    let p = dir.join(name);
    fs::write(&p, contents).map_err(|e| CliError::io(&p, e))
}

fn json_text(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json serializes") + "\n"
}

/// Chunks `text` at the target's context length, split into train and
/// held-out sets.
pub fn corpus_splits(text: &str, target: &TargetCheckpoint, cfg: &RunConfig) -> Result<Splits, CliError> {
    let mut c = cfg.clone();
    c.data.context = target.model.config().context;
    chunk_corpus(text, &target.tokenizer, &c)
}

#[derive(Debug, Clone)]
pub struct TrainLmSummary {
    pub checkpoint: PathBuf,
    pub initial_ce: f64,
    pub epoch_ce: Vec<f64>,
    pub eval_ce: f64,
    pub eval_accuracy: f64,
}

pub fn train_lm(corpus: &Path, config: Option<&Path>, out: &Path) -> Result<TrainLmSummary, CliError> {
    let cfg = load_config(config)?;
    let mut manifest = RunManifest::new("train-lm", cfg.seed).with_config(config)?;
    manifest.input(corpus)?;
    manifest.notes.push(BUDGET_NOTE.into());
    let text = read_corpus(corpus)?;
    let tokenizer = build_tokenizer(cfg.data.tokenizer, &text)?;
    let splits = chunk_corpus(&text, &tokenizer, &cfg)?;
    let mut model = TargetModel::<f32>::new(
        cfg.lm_config(tokenizer.vocab_size()),
        &mut RngStream::new(cfg.seed, stage_streams::LM_INIT),
    )?;
    let mut rng = RngStream::new(cfg.seed, stage_streams::LM_PRETRAIN);
    let rep = pretrain(&mut model, &splits.train, &cfg.pretrain_config(), &mut rng, |_, _| {})?;
    let eval_ce = model.cross_entropy(&splits.eval)?;
    let eval_accuracy = model.top1_accuracy(&splits.eval)?;
    model.freeze();

    create_dir(out)?;
    let ckpt = TargetCheckpoint { model, tokenizer };
    ckpt.save(&out.join("target.sgtc"))?;
    write_tokenizer(&ckpt.tokenizer, &out.join("tokenizer.txt"))?;
    let mut csv = String::from("epoch,mean_ce\n");
    csv.push_str(&format!("0,{}\n", rep.initial_ce));
    for (i, ce) in rep.epoch_ce.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, ce));
    }
    write(out, "pretrain.csv", csv)?;
    write(out, "config.toml", cfg.to_toml())?;
    let summary = json!({
        "initial_ce": rep.initial_ce,
        "epoch_ce": rep.epoch_ce,
        "eval_ce": eval_ce,
        "eval_top1_accuracy": eval_accuracy,
        "steps": rep.steps,
        "train_chunks": splits.train.len(),
        "eval_chunks": splits.eval.len(),
        "params_sha256": params_hash(ckpt.model.params()),
    });
    write(out, "summary.json", json_text(&summary))?;
    manifest.finish(
        out,
        &["target.sgtc", "tokenizer.txt", "pretrain.csv", "config.toml", "summary.json"],
        &out.join(MANIFEST_NAME),
    )?;
    Ok(TrainLmSummary {
        checkpoint: out.join("target.sgtc"),
        initial_ce: rep.initial_ce,
        epoch_ce: rep.epoch_ce,
        eval_ce,
        eval_accuracy,
    })
}

/// The estimator a training run starts from.
pub fn initial_estimator(target: &TargetCheckpoint, cfg: &RunConfig) -> Result<SgtEstimator<f32>, CliError> {
    let table = target.model.embedding_table()?;
    let lm = target.model.config();
    let sc = cfg.sgt_config(lm.d_model, table.median_norm(), lm.context);
    Ok(SgtEstimator::new(sc, &mut RngStream::new(cfg.seed, streams::INIT))?)
}

#[derive(Debug, Clone)]
pub struct TrainSgtSummary {
    pub checkpoint: PathBuf,
    pub steps_completed: usize,
    pub final_probe: Option<sgt_core::train::ProbeLog>,
}

pub fn train_sgt(target_path: &Path, corpus: &Path, config: Option<&Path>, out: &Path) -> Result<TrainSgtSummary, CliError> {
    let cfg = load_config(config)?;
    let mut manifest = RunManifest::new("train-sgt", cfg.seed).with_config(config)?;
    manifest.input(target_path)?;
    manifest.input(corpus)?;
    manifest.notes.push(BUDGET_NOTE.into());
    let target = TargetCheckpoint::load(target_path)?;
    let before = params_hash(target.model.params());
    let splits = corpus_splits(&read_corpus(corpus)?, &target, &cfg)?;
    let est = initial_estimator(&target, &cfg)?;

    create_dir(out)?;
    let mut losses = String::from(LOSS_HEADER);
    let mut probes = String::from(PROBE_HEADER);
    let mut last_probe = None;
    let outcome = run_training(&target.model, est, &splits.train, &splits.eval, &cfg.train_config(), &mut |e| match e {
        TrainEvent::Step(s) => losses.push_str(&loss_row(&s)),
        TrainEvent::Probe(p) => {
            probes.push_str(&probe_row(&p));
            last_probe = Some(p);
        }
    })?;
    let after = params_hash(target.model.params());
    if before != after {
        return Err(CliError::HashMismatch {
            path: target_path.display().to_string(),
            expected: before,
            found: after,
        });
    }
    manifest.notes.push(format!("target parameters sha256 {before}, identical before and after training"));

    let ckpt = SgtCheckpoint {
        estimator: outcome.estimator,
        embeddings: target.model.embedding_table()?,
        tokenizer: target.tokenizer.clone(),
        target_hash: before,
    };
    let ckpt_path = out.join("sgt.sgts");
    ckpt.save(&ckpt_path)?;
    write(out, "loss.csv", losses)?;
    write(out, "probes.csv", probes)?;
    write(out, "config.toml", cfg.to_toml())?;
    if let Some(d) = &outcome.divergence {
        manifest.notes.push(format!("diverged: {d}"));
    }
    manifest.finish(
        out,
        &["sgt.sgts", "loss.csv", "probes.csv", "config.toml"],
        &out.join(MANIFEST_NAME),
    )?;
    if let Some(source) = outcome.divergence {
        return Err(CliError::Diverged {
            steps_completed: outcome.steps_completed,
            checkpoint: ckpt_path.display().to_string(),
            source,
        });
    }
    Ok(TrainSgtSummary {
        checkpoint: ckpt_path,
        steps_completed: outcome.steps_completed,
        final_probe: last_probe,
    })
}

/// Which mechanism a command applies.
#[derive(Debug, Clone)]
pub enum MechSpec {
    Sgt(PathBuf),
    Gaussian(f64),
    Passthrough,
}

impl MechSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MechSpec::Sgt(_) => "sgt",
            MechSpec::Gaussian(_) => "gaussian",
            MechSpec::Passthrough => "passthrough",
        }
    }
}

/// A mechanism loaded into memory together with its embedding table.
pub struct LoadedMech {
    pub mech: Box<dyn Mechanism<f32>>,
    pub sgt: Option<SgtCheckpoint>,
}

/// Resolves a mechanism; for an estimator, checks it was trained against
/// `target` when one is given.
pub fn load_mechanism(spec: &MechSpec, table: Option<&EmbeddingTable<f32>>, target: Option<&TargetCheckpoint>) -> Result<LoadedMech, CliError> {
    Ok(match spec {
        MechSpec::Sgt(p) => {
            let ck = SgtCheckpoint::load(p)?;
            if let Some(t) = target {
                let h = params_hash(t.model.params());
                if h != ck.target_hash {
                    return Err(CliError::HashMismatch {
                        path: p.display().to_string(),
                        expected: h,
                        found: ck.target_hash,
                    });
                }
            }
            LoadedMech {
                mech: Box::new(ck.estimator.clone()),
                sgt: Some(ck),
            }
        }
        MechSpec::Gaussian(s) => LoadedMech {
            mech: Box::new(ConstantNoise::new(*s)?),
            sgt: None,
        },
        MechSpec::Passthrough => {
            let table = table.ok_or_else(|| CliError::Usage("passthrough needs a target".into()))?;
            let scale = table.median_norm() / (table.dim() as f64).sqrt();
            let floor = sgt_core::sgt::SgtConfig::default().sigma_min_rel;
            LoadedMech {
                mech: Box::new(Passthrough { sigma: floor * scale }),
                sgt: None,
            }
        }
    })
}

#[derive(Debug, Clone)]
pub struct EvaluateSummary {
    pub evaluation: Evaluation,
    pub report: Value,
}

pub fn evaluate(
    mech: &MechSpec,
    target_path: &Path,
    corpus: &Path,
    config: Option<&Path>,
    out: &Path,
) -> Result<EvaluateSummary, CliError> {
    let cfg = load_config(config)?;
    let mut manifest = RunManifest::new("evaluate", cfg.seed).with_config(config)?;
    manifest.input(target_path)?;
    manifest.input(corpus)?;
    if let MechSpec::Sgt(p) = mech {
        manifest.input(p)?;
    }
    let target = TargetCheckpoint::load(target_path)?;
    let table = target.model.embedding_table()?;
    let loaded = load_mechanism(mech, Some(&table), Some(&target))?;
    let splits = corpus_splits(&read_corpus(corpus)?, &target, &cfg)?;
    let stream = RngStream::new(cfg.seed, stage_streams::EVAL);
    let ev = eval_mechanism(loaded.mech.as_ref(), &target.model, &splits.eval, &cfg.eval_config(), &stream)?;
    ev.report.validate()?;
    let report = report_json(&ev.report, &ev.utility);
    validate_report_json(&report).map_err(|e| CliError::format(&out.join("report.json"), e))?;

    create_dir(out)?;
    write(out, "report.json", json_text(&report))?;
    write(out, "utility.json", json_text(&utility_json(&ev.utility)))?;
    write(out, "histogram.csv", histogram_csv(&ev.histogram))?;
    write(out, "calibration_histogram.csv", histogram_csv(&ev.calibration))?;
    manifest.finish(
        out,
        &["report.json", "utility.json", "histogram.csv", "calibration_histogram.csv"],
        &out.join(MANIFEST_NAME),
    )?;
    Ok(EvaluateSummary { evaluation: ev, report })
}

/// Where the clean embeddings of an obfuscation come from.
pub enum TextSource<'a> {
    File(&'a Path),
    Inline(String),
}

/// Obfuscates text into an embedding dump. With an estimator checkpoint the
/// embedding table and tokenizer come from it; the Gaussian baseline needs
/// `target`.
pub fn obfuscate(
    mech: &MechSpec,
    target_path: Option<&Path>,
    text: TextSource<'_>,
    seed: u64,
    with_ids: bool,
    out: &Path,
) -> Result<EmbeddingDump, CliError> {
    let mut manifest = RunManifest::new("obfuscate", seed);
    if let MechSpec::Sgt(p) = mech {
        manifest.input(p)?;
    }
    if let Some(p) = target_path {
        manifest.input(p)?;
    }
    let text = match text {
        TextSource::File(p) => {
            manifest.input(p)?;
            read_corpus(p)?
        }
        TextSource::Inline(s) => s,
    };
    let target = target_path.map(TargetCheckpoint::load).transpose()?;
    let (table, tokenizer, context, loaded) = match (mech, &target) {
        (MechSpec::Sgt(_), _) => {
            let l = load_mechanism(mech, None, target.as_ref())?;
            let ck = l.sgt.as_ref().expect("estimator checkpoint");
            (ck.embeddings.clone(), ck.tokenizer.clone(), ck.estimator.config().context, l)
        }
        (_, Some(t)) => {
            let table = t.model.embedding_table()?;
            let l = load_mechanism(mech, Some(&table), Some(t))?;
            (table, t.tokenizer.clone(), t.model.config().context, l)
        }
        (_, None) => return Err(CliError::Usage(format!("mechanism {} needs --target", mech.name()))),
    };
    let ids = tokenizer.encode(&text)?;
    let chunks: Vec<Chunk> = chunk_tokens(&ids, context, &tokenizer)?;
    let flat: Vec<usize> = chunks.iter().flat_map(|c| c.seq.ids().iter().copied()).collect();
    let clean = table.embed(&flat)?;
    let mut stream = RngStream::new(seed, stage_streams::OBFUSCATE);
    let batch = obfuscate_batch(loaded.mech.as_ref(), &clean, context, &mut stream)?;
    let dump = EmbeddingDump::new(batch.obfuscated, context, with_ids.then_some(flat))?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    dump.save(out)?;
    let dir = out.parent().unwrap_or(Path::new("."));
    let name = out.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
    manifest.finish(dir, &[&name], &sidecar_path(out))?;
    Ok(dump)
}

#[derive(Debug, Clone, Copy)]
pub enum AttackSpec<'a> {
    Nn,
    Mrp { r: usize },
    /// MRP with the offset calibrated from a second dump with ids.
    MrpCalibrated { calibration: &'a Path },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSummary {
    pub attack: String,
    pub r: Option<usize>,
    pub failure_rate: f64,
    pub positions: usize,
}

pub fn attack(mech_name: &str, spec: AttackSpec<'_>, input: &Path, target_path: &Path, out: &Path) -> Result<AttackSummary, CliError> {
    let mut manifest = RunManifest::new("attack", 0);
    manifest.input(input)?;
    manifest.input(target_path)?;
    let target = TargetCheckpoint::load(target_path)?;
    let table = target.model.embedding_table()?;
    let dump = EmbeddingDump::load(input)?;
    if dump.dim() != table.dim() {
        return Err(CliError::format(input, "dump width differs from the target's embeddings"));
    }
    let truth = dump
        .ids
        .clone()
        .ok_or_else(|| CliError::format(input, "dump has no id trailer; attacks need ground truth"))?;
    let (attack, name) = match spec {
        AttackSpec::Nn => (Attack::Nn, "nn"),
        AttackSpec::Mrp { r } => (Attack::Mrp(r), "mrp"),
        AttackSpec::MrpCalibrated { calibration } => {
            manifest.input(calibration)?;
            let cal = EmbeddingDump::load(calibration)?;
            let cal_ids = cal
                .ids
                .clone()
                .ok_or_else(|| CliError::format(calibration, "calibration dump has no id trailer"))?;
            let rk = ranks(&cal.embeddings, &table, &cal_ids)?;
            let r = calibrate_mrp(&RankHistogram::from_ranks(&rk, table.vocab_size())?)?;
            (Attack::Mrp(r), "mrp")
        }
    };
    let res = run_attack(&dump.embeddings, &table, &truth, attack)?;
    let summary = AttackSummary {
        attack: name.into(),
        r: match attack {
            Attack::Mrp(r) => Some(r),
            Attack::Nn => None,
        },
        failure_rate: res.failure_rate(),
        positions: truth.len(),
    };
    create_dir(out)?;
    write(out, "attack.csv", attack_csv(&res))?;
    let s = json!({
        "mechanism": mech_name,
        "attack": summary.attack,
        "r": summary.r,
        "failure_rate": summary.failure_rate,
        "positions": summary.positions,
    });
    write(out, "summary.json", json_text(&s))?;
    manifest.finish(out, &["attack.csv", "summary.json"], &out.join(MANIFEST_NAME))?;
    Ok(summary)
}

pub fn dp_sweep(
    target_path: &Path,
    corpus: &Path,
    sigmas: Option<&[f64]>,
    config: Option<&Path>,
    out: &Path,
) -> Result<Vec<sgt_core::baseline::SweepRow>, CliError> {
    let cfg = load_config(config)?;
    let mut manifest = RunManifest::new("dp-sweep", cfg.seed).with_config(config)?;
    manifest.input(target_path)?;
    manifest.input(corpus)?;
    let target = TargetCheckpoint::load(target_path)?;
    let splits = corpus_splits(&read_corpus(corpus)?, &target, &cfg)?;
    let sigmas = sigmas.unwrap_or(&cfg.eval.sigmas);
    if sigmas.is_empty() || sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(CliError::Usage("sigmas must be a nonempty list of finite values ≥ 0".into()));
    }
    let stream = RngStream::new(cfg.seed, stage_streams::SWEEP);
    let rows = sweep(sigmas, &splits.eval, &target.model, cfg.eval.dp_delta, &cfg.eval_config(), &stream)?;
    create_dir(out)?;
    write(out, "sweep.csv", sweep_csv(&rows))?;
    manifest.notes.push(format!(
        "l2 sensitivity {} (largest pairwise embedding distance), delta {}",
        sensitivity(&target.model.embedding_table()?),
        cfg.eval.dp_delta
    ));
    manifest.finish(out, &["sweep.csv"], &out.join(MANIFEST_NAME))?;
    Ok(rows)
}

pub fn gen_corpus(bytes: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let text = sgt_core::corpus::generate_toy_corpus(bytes, &mut RngStream::new(seed, 0));
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(out, text).map_err(|e| CliError::io(out, e))
}
