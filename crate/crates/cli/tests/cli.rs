use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use molprompt_core::toy::embed_smiles;
use molprompt_core::Molecule;

fn molprompt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_molprompt"))
        .args(args)
        .env_remove("MOLPROMPT_CHECKPOINT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = molprompt(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
[model]
node_dim = 16
edge_dim = 8
pos_dim = 8
layers = 1
heads = 2
time_dim = 8

[train]
epochs = 1
learning_rate = 1e-3
diffusion_steps = 10

[align]
epochs = 1
learning_rate = 1e-3
batch_size = 16
embed_dim = 16
word_dim = 8
text_hidden = 16

[align.encoder]
node_dim = 16
edge_dim = 8
pos_dim = 8
layers = 1
heads = 2
time_dim = 8

[toy]
conformers = 1
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Workspace {
        let w = Workspace { dir: tempfile::tempdir().unwrap() };
        fs::write(w.config(), TINY).unwrap();
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("tiny.toml")
    }

    fn corpus(&self) -> PathBuf {
        let c = self.path("corpus");
        if !c.exists() {
            ok(&["make-toy-corpus", "--config", s(&self.config()), "--out", s(&c)]);
        }
        c
    }

    /// Trains both checkpoints under `root/diffusion` and `root/align`.
    fn checkpoints(&self, root: &str, seed: &str) -> PathBuf {
        let root = self.path(root);
        let (corpus, config) = (self.corpus(), self.config());
        let base = ["--config", s(&config), "--corpus", s(&corpus), "--checkpoint-root", s(&root), "--seed", seed];
        ok(&[&["train-diffusion"], &base[..]].concat());
        ok(&[&["train-align"], &base[..]].concat());
        root
    }
}

fn write_mol(dir: &Path, name: &str, smiles: &str) {
    fs::create_dir_all(dir).unwrap();
    embed_smiles(smiles, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().write(dir.join(format!("{name}.json"))).unwrap();
}

#[test]
fn missing_corpus_is_a_usage_error() {
    let w = Workspace::new();
    let out = molprompt(&["train-diffusion", "--corpus", s(&w.path("nope")), "--out", s(&w.path("ck"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let w = Workspace::new();
    fs::write(w.path("bad.json"), r#"{"train": {"epoch": 3}}"#).unwrap();
    let out = molprompt(&["train-diffusion", "--config", s(&w.path("bad.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_is_reproducible_and_writes_metrics() {
    let w = Workspace::new();
    let a = w.checkpoints("a", "3");
    let b = w.checkpoints("b", "3");
    let metrics = |root: &Path| fs::read_to_string(root.join("diffusion/metrics.csv")).unwrap();
    assert_eq!(metrics(&a).lines().count(), 2);
    assert_eq!(metrics(&a), metrics(&b));
    for f in ["params.safetensors", "resolved_config.toml"] {
        assert!(a.join("diffusion").join(f).exists(), "{f}");
    }
    let align = |root: &Path| fs::read(root.join("align/align.safetensors")).unwrap();
    assert_eq!(align(&a), align(&b));
    let resolved = fs::read_to_string(a.join("diffusion/resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 3"));
}

#[test]
fn optimize_and_sample_end_to_end() {
    let w = Workspace::new();
    let root = w.checkpoints("ck", "1");
    let inputs = w.path("inputs");
    write_mol(&inputs, "ethanol", "CCO");
    write_mol(&inputs, "propane", "CCC");
    let cfg = w.path("opt.toml");
    fs::write(
        &cfg,
        format!(
            "{TINY}\n[guidance]\nlambda = 0.0\npartial_t = 0\n\n[[optimize.specs]]\nname = \"hbd\"\ndirection = \"increase\"\nevaluator = \"hbd\"\n\n[[evaluate.specs]]\nname = \"hbd\"\ndirection = \"increase\"\nevaluator = \"hbd\"\n"
        ),
    )
    .unwrap();

    // Zero depth leaves every input untouched.
    let out = w.path("opt0");
    let args = ["optimize", "--config", s(&cfg), "--checkpoint-root", s(&root), "--molecule", s(&inputs)];
    ok(&[&args[..], &["--out", s(&out), "--prompt", "more donors"]].concat());
    for name in ["ethanol", "propane"] {
        let before = Molecule::read(inputs.join(format!("{name}.json"))).unwrap();
        let after = Molecule::read(out.join(format!("run_00/{name}.json"))).unwrap();
        assert_eq!(before.elements(), after.elements());
        assert_eq!(before.bond_list(), after.bond_list());
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["single_run"]["hit_ratio"].as_f64(), Some(0.0));

    let out10 = w.path("opt10");
    ok(&[&args[..], &["--out", s(&out10), "--n-runs", "10"]].concat());
    let manifest = fs::read_to_string(out10.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 10 * 2);

    // Evaluating a run directory against its inputs reproduces the summary.
    let ev = w.path("eval");
    ok(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--inputs",
        s(&inputs),
        "--outputs",
        s(&out10.join("run_00")),
        "--outputs",
        s(&out10.join("run_01")),
        "--out",
        s(&ev),
    ]);
    assert!(ev.join("report.csv").exists());

    let sample = |dir: &Path, n: &str| {
        ok(&["sample", "--checkpoint-root", s(&root), "--seed", "4", "--n", n, "--out", s(dir)]);
        fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|f| f.starts_with("sample_"))
            .count()
    };
    assert_eq!(sample(&w.path("s0"), "0"), 0);
    assert!(w.path("s0/metrics.json").exists());
    assert_eq!(sample(&w.path("s1"), "3"), 3);
    sample(&w.path("s2"), "3");
    for k in 0..3 {
        let f = format!("sample_{k:04}.json");
        assert_eq!(fs::read(w.path("s1").join(&f)).unwrap(), fs::read(w.path("s2").join(&f)).unwrap());
    }
}

#[test]
fn optimize_requires_checkpoints() {
    let w = Workspace::new();
    let inputs = w.path("inputs");
    write_mol(&inputs, "m", "CCO");
    let out = molprompt(&["optimize", "--molecule", s(&inputs), "--out", s(&w.path("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_hit_ratio_on_a_fixture() {
    let w = Workspace::new();
    let (inputs, outputs) = (w.path("in"), w.path("out"));
    for (name, before, after) in [("a", "C", "CO"), ("b", "CC", "CCO"), ("c", "CO", "OCCO"), ("d", "CN", "CC")] {
        write_mol(&inputs, name, before);
        write_mol(&outputs, name, after);
    }
    let cfg = w.path("eval.json");
    fs::write(&cfg, r#"{"evaluate": {"specs": [{"name": "hbd", "direction": "increase", "evaluator": "hbd"}]}}"#).unwrap();
    let report = w.path("report");
    ok(&["evaluate", "--config", s(&cfg), "--inputs", s(&inputs), "--outputs", s(&outputs), "--out", s(&report)]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(report.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"][0]["hit_ratio"].as_f64(), Some(0.75));
    assert_eq!(summary["any_hit"]["hit_ratio"].as_f64(), Some(0.75));
    let rows = fs::read_to_string(report.join("report.csv")).unwrap();
    assert_eq!(rows.lines().count(), 5);
    assert!(rows.lines().next().unwrap().contains("hbd_before,hbd_after"));

    let empty = w.path("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = molprompt(&["evaluate", "--config", s(&cfg), "--inputs", s(&inputs), "--outputs", s(&empty), "--out", s(&w.path("r2"))]);
    assert_eq!(out.status.code(), Some(2));
}
