use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;
use xaieval::cli::{load_run, RunFile};
use xaieval::render;

const BIN: &str = env!("CARGO_BIN_EXE_xaieval");
const REFADAPTER: &str = env!("CARGO_BIN_EXE_xaieval-refadapter");

fn xaieval(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Four small phantoms.
fn small_dataset(dir: &Path) {
    let phantom = dir.join("phantom.json");
    fs::write(&phantom, json!({"width": 64, "height": 64}).to_string()).unwrap();
    let out = dir.join("ds");
    let o = xaieval(&[
        "gen",
        "--out",
        p(&out),
        "--cases",
        "4",
        "--seed",
        "3",
        "--phantom",
        p(&phantom),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

/// A cheap configuration: one level per axis, short deletion curves.
fn cheap_config(dir: &Path, gates: serde_json::Value) -> std::path::PathBuf {
    let cfg = json!({
        "dataset": p(&dir.join("ds")),
        "methods": ["ablation"],
        "master_seed": 5,
        "pipeline": {
            "perturbations": [
                {"kind": "dose", "levels": [1.0, 0.5]},
                {"kind": "shift", "levels": [0.0, 2.0]}
            ],
            "randomization": {"modes": ["head-reinit"], "sigma": 1.0, "seeds": [0]},
            "incremental_deletion": {"patch": 16, "steps": 4, "random_orders": 1}
        },
        "gates": gates
    });
    let path = dir.join("run.json.in");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map(|d| {
            d.map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
                .collect()
        })
        .unwrap_or_default();
    names.sort();
    names
}

#[test]
fn unknown_flag_exits_two_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = xaieval(&["pipeline", "--out", p(&out), "--frobnicate"]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
    assert_eq!(code(&xaieval(&["--help"])), 0);
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&xaieval(&["consistency", "--out", p(&out)])), 2);
    let ds = dir.path().join("nope");
    assert_eq!(
        code(&xaieval(&["consistency", "--dataset", p(&ds), "--out", p(&out)])),
        2
    );
    assert!(!out.exists());
}

#[test]
fn bad_gate_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"gates": {"consistency": {"min_mean_ssim": "high"}}}"#).unwrap();
    let out = dir.path().join("out");
    let ds = dir.path().join("ds");
    let o = xaieval(&["pipeline", "--dataset", p(&ds), "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    fs::write(&cfg, r#"{"unknown_section": 1}"#).unwrap();
    assert_eq!(
        code(&xaieval(&[
            "pipeline",
            "--dataset",
            p(&ds),
            "--config",
            p(&cfg),
            "--out",
            p(&out)
        ])),
        2
    );
    assert!(!out.exists());
}

#[test]
fn explain_writes_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let out = dir.path().join("maps");
    let ds = dir.path().join("ds");
    let o = xaieval(&["explain", "--dataset", p(&ds), "--out", p(&out), "--case", "case-0001"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        files(&out),
        [
            "case-0001-ablation.f32",
            "case-0001-ablation.json",
            "case-0001-eigen.f32",
            "case-0001-eigen.json"
        ]
    );
    let h = xaieval::formats::read_heatmap(&out.join("case-0001-eigen.f32")).unwrap();
    assert_eq!(h.dims(), (64, 64));
    let o = xaieval(&["explain", "--dataset", p(&ds), "--out", p(&out), "--case", "case-9999"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn criterion_command_writes_only_its_outputs() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let cfg = cheap_config(dir.path(), json!(null));
    let out = dir.path().join("out");
    let o = xaieval(&["plausibility", "--config", p(&cfg), "--out", p(&out), "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files(&out), ["aggregate.csv", "plausibility.csv", "run.json"]);
    let run: RunFile = load_run(&out).unwrap();
    assert_eq!(run.command, "plausibility");
    assert_eq!(run.runs.len(), 1);
    assert_eq!(run.runs[0].pass, None);
    let csv = fs::read_to_string(out.join("plausibility.csv")).unwrap();
    assert!(csv.starts_with("case_id,method,criterion,variant,metric,value\n"));
}

#[test]
fn adapter_fault_exits_three_with_partial_results() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let cfg = cheap_config(dir.path(), json!(null));
    // Handshakes like the reference adapter, then dies on the first request.
    let hs = r#"{"id":0,"result":{"protocol":1,"supports":["predict","features","ablate"]}}"#;
    let adapter = format!("read l; echo '{hs}'; read l; exit 1");
    let out = dir.path().join("out");
    let o = xaieval(&[
        "consistency",
        "--config",
        p(&cfg),
        "--adapter",
        &adapter,
        "--out",
        p(&out),
        "--jobs",
        "1",
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let run = load_run(&out).unwrap();
    assert!(run.provider_fault);
    assert_eq!(serde_json::to_value(run.runs[0].status).unwrap(), "invalid");
}

#[test]
fn missing_capability_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let cfg = cheap_config(dir.path(), json!(null));
    let adapter = format!("{REFADAPTER} --supports predict,features");
    let out = dir.path().join("out");
    let o = xaieval(&[
        "consistency",
        "--config",
        p(&cfg),
        "--adapter",
        &adapter,
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("ablate"));
}

#[test]
fn dose_renoising_needs_generated_phantoms() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let manifest = dir.path().join("ds/manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    m.as_object_mut().unwrap().remove("generator");
    fs::write(&manifest, m.to_string()).unwrap();
    let cfg = cheap_config(dir.path(), json!(null));
    let out = dir.path().join("out");
    assert_eq!(
        code(&xaieval(&["consistency", "--config", p(&cfg), "--out", p(&out)])),
        2
    );

    let mut c: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    c["pipeline"]["dose_mode"] = json!("additive");
    fs::write(&cfg, c.to_string()).unwrap();
    let o = xaieval(&["consistency", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_and_scorecard_through_the_adapter() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let cfg = cheap_config(dir.path(), json!(null));
    let out = dir.path().join("out");
    let o = xaieval(&[
        "pipeline",
        "--config",
        p(&cfg),
        "--adapter",
        REFADAPTER,
        "--out",
        p(&out),
        "--jobs",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        files(&out),
        [
            "aggregate.csv",
            "consistency.csv",
            "fidelity.csv",
            "plausibility.csv",
            "run.json"
        ]
    );
    let run = load_run(&out).unwrap();
    assert!(run.model_id.starts_with("adapter:refmodel/"));
    assert_eq!(run.config.provider.command.as_deref(), Some(REFADAPTER));

    let card_dir = dir.path().join("card");
    let o = xaieval(&[
        "scorecard",
        "--run",
        p(&out),
        "--method",
        "ablation",
        "--out",
        p(&card_dir),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files(&card_dir), ["scorecard.json", "scorecard.md", "tables"]);
    assert_eq!(
        files(&card_dir.join("tables")),
        ["consistency.csv", "fidelity.csv", "plausibility.csv"]
    );
    let text = fs::read_to_string(card_dir.join("scorecard.json")).unwrap();
    let card = render::from_json(&text).unwrap();
    assert_eq!(render::to_json(&card), text);
    assert_eq!(card.provenance.master_seed, Some(5));
    assert!(!card.incomplete);

    let o = xaieval(&[
        "scorecard",
        "--run",
        p(&out),
        "--method",
        "eigen",
        "--format",
        "json",
        "--out",
        p(&card_dir),
    ]);
    assert_eq!(code(&o), 0);
    let card = render::from_json(&fs::read_to_string(card_dir.join("scorecard.json")).unwrap()).unwrap();
    assert!(card.incomplete);
}
