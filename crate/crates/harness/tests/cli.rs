use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn svt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svt")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn smoke() -> String {
    configs().join("smoke.json").display().to_string()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn train_twice_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        ok(&svt(&["train", "--config", &smoke(), "--out", d.path().to_str().unwrap()]));
    }
    let fa = files(a.path());
    let names: Vec<&str> = fa.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(names, ["checkpoint.bin", "config.json", "metrics.csv"]);
    assert_eq!(fa, files(b.path()));
    let c = tempfile::tempdir().unwrap();
    ok(&svt(&["train", "--config", &smoke(), "--seed", "5", "--out", c.path().to_str().unwrap()]));
    assert_ne!(files(c.path())[0], fa[0]);
}

#[test]
fn exports_twice_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let out = d.path().to_str().unwrap();
        ok(&svt(&["export-maps", "--config", &smoke(), "--layer", "1", "--membership", "--out", out]));
        ok(&svt(&["export-embeddings", "--config", &smoke(), "--layers", "1,2", "--clips", "2", "--out", out]));
    }
    let fa = files(a.path());
    assert!(fa.iter().filter(|f| f.0.ends_with(".pgm")).count() > 2);
    assert_eq!(fa, files(b.path()));
}

#[test]
fn generate_writes_splits() {
    let d = tempfile::tempdir().unwrap();
    ok(&svt(&["generate", "--config", &smoke(), "--out", d.path().to_str().unwrap()]));
    let clips = svt_harness::data::read_split(&d.path().join("train.bin")).unwrap();
    assert_eq!(clips.len(), 16);
    let names: Vec<String> = files(d.path()).into_iter().map(|f| f.0).collect();
    assert_eq!(names, ["dataset.json", "train.bin", "val.bin"]);
}

#[test]
fn eval_reads_a_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    ok(&svt(&["train", "--config", &smoke(), "--out", out]));
    let ckpt = d.path().join("checkpoint.bin");
    let text = ok(&svt(&["eval", "--config", &smoke(), "--checkpoint", ckpt.to_str().unwrap(), "--out", out]));
    assert!(text.starts_with("step,split,loss,top1,flops_g,tokens_final\n0,val,"));
    let metrics = std::fs::read_to_string(d.path().join("metrics.csv")).unwrap();
    let last_val = metrics.lines().filter(|l| l.contains(",val,")).last().unwrap();
    let field = |l: &str, i: usize| l.split(',').nth(i).unwrap().to_string();
    let eval_line = text.lines().nth(1).unwrap();
    assert_eq!(field(eval_line, 2), field(last_val, 2));
}

#[test]
fn audit_prints_views_and_reduction() {
    let d = tempfile::tempdir().unwrap();
    let text = ok(&svt(&[
        "audit",
        "--config",
        "vit-l-spm18",
        "--baseline",
        "vit-l",
        "--views",
        "3x7",
        "--out",
        d.path().to_str().unwrap(),
    ]));
    assert!(text.contains("views: 3x7"), "{text}");
    assert!(text.contains("reduction"), "{text}");
    assert!(d.path().join("audit.csv").exists());
}

#[test]
fn ablate_writes_results() {
    let d = tempfile::tempdir().unwrap();
    let sweep = configs().join("smoke-ablate.json");
    let text = ok(&svt(&["ablate", "--config", sweep.to_str().unwrap(), "--out", d.path().to_str().unwrap()]));
    assert_eq!(text.lines().count(), 3);
    assert!(d.path().join("results.csv").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(smoke()).unwrap()).unwrap();
    v["train"]["momentum_typo"] = serde_json::json!(0.9);
    let bad = d.path().join("bad.json");
    std::fs::write(&bad, v.to_string()).unwrap();
    let out = d.path().join("out");
    let r = svt(&["train", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("momentum_typo"));
    assert_eq!(svt(&["audit", "--config", "vit-z"]).status.code(), Some(2));
    assert_eq!(svt(&["train"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three() {
    let d = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(smoke()).unwrap()).unwrap();
    v["train"]["optimizer"] = serde_json::json!({ "kind": "sgd", "momentum": 0.0 });
    v["train"]["lr"] = serde_json::json!(1e300);
    v["train"]["steps"] = serde_json::json!(6);
    let bad = d.path().join("diverge.json");
    std::fs::write(&bad, v.to_string()).unwrap();
    let out = d.path().join("out");
    let r = svt(&["train", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("numerical abort"));
}

#[test]
fn export_of_a_plain_layer_is_an_argument_error() {
    let d = tempfile::tempdir().unwrap();
    let r = svt(&["export-maps", "--config", &smoke(), "--layer", "2", "--out", d.path().to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("hosts no SPM"));
}
