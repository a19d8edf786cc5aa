//! End-to-end runs of the `sgt` binary on a small generated corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use sgt::checkpoint::{params_hash, TargetCheckpoint};
use sgt::manifest::{sidecar_path, RunManifest, MANIFEST_NAME};
use sgt::report::validate_report_json;

const TINY: &str = r#"
seed = 3

[data]
tokenizer = "whitespace"
context = 8
eval_every = 5

[model]
d_model = 16
layers = 1
heads = 2
ff_mult = 2

[pretrain]
epochs = 1
batch_size = 16

[sgt]
layers = 1
heads = 2
ff_mult = 2

[train]
steps = 12
batch_size = 4
probe_every = 6
probe_tokens = 64

[loss]
alpha_mi = 1e-4
alpha_abscos = 1.0
alpha_norm = 0.1

[eval]
tokens = 160
calibration_tokens = 64
mi_samples = 2000
mi_components = 32
sigmas = [0.0, 0.5, 4.0]
"#;

fn sgt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sgt"))
}

fn run(args: &[&str]) -> Output {
    sgt().args(args).output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).expect("stdout is json")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Corpus, config, target and estimator shared by the tests.
struct Stack {
    dir: PathBuf,
    corpus: PathBuf,
    config: PathBuf,
    target: PathBuf,
    sgt: PathBuf,
}

fn stack() -> &'static Stack {
    static STACK: OnceLock<Stack> = OnceLock::new();
    STACK.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let corpus = dir.join("corpus.txt");
        let config = dir.join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        ok_json(&["gen-corpus", "--bytes", "40000", "--seed", "9", "--out", p(&corpus)]);
        ok_json(&["train-lm", "--corpus", p(&corpus), "--config", p(&config), "--out", p(&dir.join("lm"))]);
        let target = dir.join("lm/target.sgtc");
        ok_json(&[
            "train-sgt", "--target", p(&target), "--corpus", p(&corpus), "--config", p(&config), "--out",
            p(&dir.join("sgt")),
        ]);
        let sgt = dir.join("sgt/sgt.sgts");
        Stack { dir, corpus, config, target, sgt }
    })
}

fn verify_manifest(manifest: &Path, dir: &Path) -> RunManifest {
    let m = RunManifest::load(manifest).unwrap();
    m.verify(dir).unwrap();
    assert!(!m.outputs.is_empty());
    m
}

#[test]
fn training_outputs_carry_verified_manifests() {
    let s = stack();
    for (sub, files) in [
        ("lm", &["target.sgtc", "tokenizer.txt", "pretrain.csv"][..]),
        ("sgt", &["sgt.sgts", "loss.csv", "probes.csv"][..]),
    ] {
        let dir = s.dir.join(sub);
        let m = verify_manifest(&dir.join(MANIFEST_NAME), &dir);
        for f in files {
            assert!(dir.join(f).exists(), "{sub}/{f}");
            assert!(m.outputs.iter().any(|o| o.path == *f), "{sub}/{f} not in manifest");
        }
        assert_eq!(m.seed, 3);
        assert!(m.config.is_some());
    }
    let loss = std::fs::read_to_string(s.dir.join("sgt/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 13);
    assert!(loss.starts_with("step,"));
}

#[test]
fn estimator_training_leaves_the_target_untouched() {
    let s = stack();
    let before = std::fs::read(&s.target).unwrap();
    let out = s.dir.join("sgt-again");
    ok_json(&[
        "train-sgt", "--target", p(&s.target), "--corpus", p(&s.corpus), "--config", p(&s.config), "--out", p(&out),
    ]);
    assert_eq!(std::fs::read(&s.target).unwrap(), before);
    let t = TargetCheckpoint::load(&s.target).unwrap();
    let m = RunManifest::load(&out.join(MANIFEST_NAME)).unwrap();
    let h = params_hash(t.model.params());
    assert!(m.notes.iter().any(|n| n.contains(&h)), "{:?}", m.notes);
}

#[test]
fn obfuscate_then_attack_round_trip() {
    let s = stack();
    let text = s.dir.join("probe.txt");
    std::fs::write(&text, "the captain was warm and the river was quiet.\nalice visited the old tower near the hill.\n")
        .unwrap();
    let dump = s.dir.join("probe.sgte");
    let v = ok_json(&["obfuscate", "--sgt", p(&s.sgt), "--text", p(&text), "--seed", "5", "--out", p(&dump)]);
    assert_eq!(v["seq_len"], 8);
    assert_eq!(v["dim"], 16);
    verify_manifest(&sidecar_path(&dump), &s.dir);

    let again = s.dir.join("probe-again.sgte");
    ok_json(&["obfuscate", "--sgt", p(&s.sgt), "--text", p(&text), "--seed", "5", "--out", p(&again)]);
    assert_eq!(std::fs::read(&dump).unwrap(), std::fs::read(&again).unwrap());

    let nn = ok_json(&[
        "attack", "--mech", "sgt", "--attack", "nn", "--input", p(&dump), "--target", p(&s.target), "--out",
        p(&s.dir.join("attack-nn")),
    ]);
    let fr = nn["failure_rate"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&fr));
    let mrp = ok_json(&[
        "attack", "--mech", "sgt", "--attack", "mrp", "--calibration", p(&dump), "--input", p(&dump), "--target",
        p(&s.target), "--out", p(&s.dir.join("attack-mrp")),
    ]);
    assert!(mrp["r"].as_u64().unwrap() >= 1);
    let csv = std::fs::read_to_string(s.dir.join("attack-nn/attack.csv")).unwrap();
    assert_eq!(csv.lines().count() as u64, 1 + nn["positions"].as_u64().unwrap());
}

#[test]
fn gaussian_obfuscation_with_zero_noise_is_clean() {
    let s = stack();
    let dump = s.dir.join("clean.sgte");
    let o = sgt()
        .args(["obfuscate", "--sigma", "0", "--target", p(&s.target), "--stdin", "--out", p(&dump)])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .and_then(|mut c| {
            use std::io::Write;
            c.stdin.take().unwrap().write_all(b"bob sold the green wagon in winter.")?;
            c.wait_with_output()
        })
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = ok_json(&[
        "attack", "--mech", "gaussian", "--attack", "nn", "--input", p(&dump), "--target", p(&s.target), "--out",
        p(&s.dir.join("attack-clean")),
    ]);
    assert_eq!(v["failure_rate"].as_f64().unwrap(), 0.0);
}

#[test]
fn evaluate_reports_validate_and_passthrough_is_harmless() {
    let s = stack();
    let out = s.dir.join("eval-sgt");
    let r = ok_json(&[
        "evaluate", "--mech", "sgt", "--sgt", p(&s.sgt), "--target", p(&s.target), "--corpus", p(&s.corpus),
        "--config", p(&s.config), "--out", p(&out),
    ]);
    validate_report_json(&r).unwrap();
    let on_disk: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(on_disk, r);
    verify_manifest(&out.join(MANIFEST_NAME), &out);
    let hist = std::fs::read_to_string(out.join("histogram.csv")).unwrap();
    let vocab = TargetCheckpoint::load(&s.target).unwrap().model.config().vocab_size;
    assert_eq!(hist.lines().count(), vocab + 1);

    let r = ok_json(&[
        "evaluate", "--mech", "passthrough", "--target", p(&s.target), "--corpus", p(&s.corpus), "--config",
        p(&s.config), "--out", p(&s.dir.join("eval-pass")),
    ]);
    validate_report_json(&r).unwrap();
    assert!(r["utility"]["top1_agreement"].as_f64().unwrap() > 99.0, "{r}");
    assert!(r["nn_fr"].as_f64().unwrap() < 1.0, "{r}");
}

#[test]
fn dp_sweep_writes_one_row_per_sigma() {
    let s = stack();
    let out = s.dir.join("sweep");
    let v = ok_json(&[
        "dp-sweep", "--target", p(&s.target), "--corpus", p(&s.corpus), "--config", p(&s.config), "--sigmas",
        "0,0.5,4", "--out", p(&out),
    ]);
    assert_eq!(v["rows"], 3);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][4], 0.0);
    assert_eq!(rows[0][2], 100.0);
    assert!(rows[0][1].is_infinite());
    assert!(rows[1][1] > rows[2][1]);
    let m = verify_manifest(&out.join(MANIFEST_NAME), &out);
    assert!(m.notes.iter().any(|n| n.contains("sensitivity")));
}

#[test]
fn every_stage_is_byte_reproducible() {
    let s = stack();
    let a = s.dir.join("repro-a");
    let b = s.dir.join("repro-b");
    for out in [&a, &b] {
        ok_json(&["train-lm", "--corpus", p(&s.corpus), "--config", p(&s.config), "--out", p(&out.join("lm"))]);
    }
    assert_eq!(std::fs::read(a.join("lm/target.sgtc")).unwrap(), std::fs::read(&s.target).unwrap());
    assert_eq!(std::fs::read(b.join("lm/target.sgtc")).unwrap(), std::fs::read(&s.target).unwrap());
}

#[test]
fn out_root_is_the_fallback_output_location() {
    let s = stack();
    let root = s.dir.join("root");
    let o = sgt()
        .env("SGT_OUT_ROOT", &root)
        .args(["dp-sweep", "--target", p(&s.target), "--corpus", p(&s.corpus), "--config", p(&s.config), "--sigmas", "1"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("dp-sweep/sweep.csv").exists());

    let o = sgt()
        .env_remove("SGT_OUT_ROOT")
        .args(["dp-sweep", "--target", p(&s.target), "--corpus", p(&s.corpus), "--sigmas", "1"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

fn error_of(o: &Output) -> (i32, String) {
    let v: Value = serde_json::from_slice(&o.stderr).unwrap_or_else(|_| {
        panic!("stderr is not json: {}", String::from_utf8_lossy(&o.stderr));
    });
    let e = &v["error"];
    assert!(e["message"].as_str().is_some_and(|m| !m.is_empty()));
    assert_eq!(e["exit_code"].as_i64(), o.status.code().map(i64::from));
    (o.status.code().unwrap(), e["kind"].as_str().unwrap().to_string())
}

#[test]
fn failures_are_reported_as_json_with_distinct_exit_codes() {
    let s = stack();
    let out = s.dir.join("errors");

    let o = run(&["train-lm", "--corpus", p(&s.dir.join("missing.txt")), "--out", p(&out)]);
    assert_eq!(error_of(&o), (4, "io".into()));

    let bad = s.dir.join("bad.toml");
    std::fs::write(&bad, "[model]\nd_model = 0\n").unwrap();
    let o = run(&["train-lm", "--corpus", p(&s.corpus), "--config", p(&bad), "--out", p(&out)]);
    assert_eq!(error_of(&o), (3, "config".into()));
    std::fs::write(&bad, "[model]\nwidth_typo = 3\n").unwrap();
    let o = run(&["train-lm", "--corpus", p(&s.corpus), "--config", p(&bad), "--out", p(&out)]);
    assert_eq!(error_of(&o).0, 3);

    let o = run(&["attack", "--mech", "sgt", "--attack", "bogus"]);
    assert_eq!(error_of(&o), (2, "usage".into()));
    let o = run(&["attack", "--mech", "sgt", "--attack", "mrp", "--input", p(&s.sgt), "--target", p(&s.target), "--out", p(&out)]);
    assert_eq!(error_of(&o), (2, "usage".into()));

    let corrupt = s.dir.join("corrupt.sgtc");
    let mut bytes = std::fs::read(&s.target).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&corrupt, bytes).unwrap();
    let o = run(&["dp-sweep", "--target", p(&corrupt), "--corpus", p(&s.corpus), "--sigmas", "1", "--out", p(&out)]);
    assert_eq!(error_of(&o).0, 5);
    let o = run(&["dp-sweep", "--target", p(&s.sgt), "--corpus", p(&s.corpus), "--sigmas", "1", "--out", p(&out)]);
    assert_eq!(error_of(&o), (5, "format".into()));
}
