//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report prints in order and
//! uncaptured. Exits nonzero when any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use svt_core::config::SpmVariant;
use svt_core::{flops, presets, ModelConfig, ViTConfig};
use svt_harness::data::generate_dataset;
use svt_harness::train::train;
use svt_harness::ExperimentConfig;
use svt_testkit::suites::{self, run_property, run_suite, SuiteReport, GRAD_TOL, ORACLE_TOL, PROPERTIES};

/// Frozen from the reference baseline run of `configs/tiny.json`: 47 of 64
/// validation clips after 600 steps, 629 s wall time on one laptop core.
const BASELINE_TOP1: f64 = 0.734375;
const BASELINE_SECONDS: f64 = 629.0;

const RUN_LIMIT_SECONDS: f64 = 1800.0;
const ACCURACY_MARGIN: f64 = 0.05;
const MIN_REDUCTION: f64 = 0.30;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn gflops(cfg: ViTConfig) -> f64 {
    flops::audit(&ModelConfig::Vit(cfg)).unwrap().gflops()
}

fn flop_anchors() -> Outcome {
    let t = Instant::now();
    let b = gflops(presets::vit_b());
    let l = gflops(presets::vit_l());
    let secs = t.elapsed().as_secs_f64();
    let (eb, el) = (b / 180.0 - 1.0, l / 598.0 - 1.0);
    outcome(
        eb.abs() <= 0.05 && el.abs() <= 0.05 && secs < 1.0,
        format!(
            "ViT-B {b:.1} G ({:+.2}%), ViT-L {l:.1} G ({:+.2}%), {secs:.3} s",
            100.0 * eb,
            100.0 * el
        ),
    )
}

fn reduction_claims() -> Outcome {
    let base = ModelConfig::Vit(presets::vit_l());
    let spm18 = ModelConfig::Vit(presets::vit_l_spm18());
    let hier = ModelConfig::Vit(presets::vit_l_spm8_14_18());
    let r18 = flops::compare(&spm18, &base).unwrap().reduction;
    let rh = flops::compare(&hier, &base).unwrap().reduction;
    for (name, cfg) in [("vit-l-spm18", &spm18), ("vit-l-spm8-14-18", &hier)] {
        println!("-- ledger {name}");
        print!("{}", flops::audit(cfg).unwrap().to_table());
    }
    outcome(
        r18 >= 0.18 && rh >= 0.55,
        format!(
            "SPM18 {:.1}% (need 18%), SPM8/14/18 {:.1}% (need 55%)",
            100.0 * r18,
            100.0 * rh
        ),
    )
}

fn token_ledger() -> Outcome {
    let rows: [(&str, ViTConfig, &[usize]); 7] = [
        ("B-SPM6", presets::vit_b_spm6(), &[128]),
        ("B-SPM8", presets::vit_b_spm8(), &[128]),
        ("L-SPM12", presets::vit_l_spm12(), &[128]),
        ("L-SPM16", presets::vit_l_spm16(), &[128]),
        ("L-SPM18", presets::vit_l_spm18(), &[64]),
        ("L-SPM8/12/16", presets::vit_l_spm8_12_16(), &[1024, 512, 128]),
        ("L-SPM8/14/18", presets::vit_l_spm8_14_18(), &[1024, 512, 128]),
    ];
    let mut bad = Vec::new();
    for (name, cfg, want) in rows {
        let got: Vec<usize> = cfg.plan().unwrap().reducers.iter().map(|r| r.tokens_out).collect();
        if got != want {
            bad.push(format!("{name} {got:?} != {want:?}"));
        }
    }
    let detail = if bad.is_empty() {
        "all rows match".to_string()
    } else {
        bad.join("; ")
    };
    outcome(bad.is_empty(), detail)
}

fn summarize(reports: &[SuiteReport], tol: f64, limit: f64, min_cases: usize, per_suite: bool) -> Outcome {
    let secs: f64 = reports.iter().map(|r| r.seconds).sum();
    let total: usize = reports.iter().map(|r| r.cases).sum();
    let enough = if per_suite {
        reports.iter().all(|r| r.cases >= min_cases)
    } else {
        total >= min_cases
    };
    let worst = reports.iter().fold(0.0f64, |m, r| m.max(r.max_err));
    for r in reports {
        println!(
            "   {:<22} {:>4} cases  max err {:.2e}  seed {}  {:.1} s",
            r.name, r.cases, r.max_err, r.worst_seed, r.seconds
        );
    }
    outcome(
        enough && reports.iter().all(|r| r.passed(tol)) && secs < limit,
        format!("{total} cases, worst {worst:.2e} (tol {tol:.0e}), {secs:.1} s (limit {limit:.0} s)"),
    )
}

fn oracle_equivalence() -> Outcome {
    const CASES: usize = 200;
    let reports = [
        run_suite("spm elitism", 0, CASES, |s| suites::oracle_spm(s, SpmVariant::Elitism)),
        run_suite("spm neighbor", 10_000, CASES, |s| suites::oracle_spm(s, SpmVariant::Neighbor)),
        run_suite("pooling attention", 20_000, CASES, suites::oracle_pool_block),
        run_suite("semantic attention", 30_000, CASES, suites::oracle_semantic_block),
        run_suite("grouped conv", 40_000, CASES, suites::oracle_conv),
    ];
    summarize(&reports, ORACLE_TOL, 120.0, CASES, true)
}

fn gradient_suite() -> Outcome {
    let reports = [
        run_suite("tensor ops", 0, 200, suites::grad_tensor_op),
        run_suite("spm elitism", 100, 60, |s| suites::grad_spm(s, SpmVariant::Elitism)),
        run_suite("spm neighbor", 200, 60, |s| suites::grad_spm(s, SpmVariant::Neighbor)),
        run_suite("mhsa block", 300, 60, suites::grad_mhsa),
        run_suite("pooling block", 400, 60, suites::grad_pool_block),
        run_suite("semantic block", 500, 60, suites::grad_semantic_block),
    ];
    summarize(&reports, GRAD_TOL, 300.0, 100, false)
}

fn run_experiment(name: &str) -> (f64, f64) {
    let exp = ExperimentConfig::load(&configs().join(name)).unwrap();
    let t = Instant::now();
    let data = generate_dataset(&exp.data).unwrap();
    let out = train(&exp.model.resolve().unwrap(), &exp.train, &data, None).unwrap();
    (out.final_val.top1, t.elapsed().as_secs_f64())
}

fn mechanism_at_scale() -> Outcome {
    let spm_cfg = ExperimentConfig::load(&configs().join("tiny-spm.json")).unwrap();
    let base_cfg = ExperimentConfig::load(&configs().join("tiny.json")).unwrap();
    let cmp = flops::compare(&spm_cfg.model.resolve().unwrap(), &base_cfg.model.resolve().unwrap()).unwrap();
    // Retraining the baseline is opt-in; by default the frozen numbers stand.
    let (base_top1, base_secs) = if std::env::var_os("SVT_RETRAIN_BASELINE").is_some() {
        let (top1, secs) = run_experiment("tiny.json");
        println!("   baseline retrained: top1 {top1:.4} in {secs:.0} s (frozen {BASELINE_TOP1:.4})");
        (top1, secs)
    } else {
        (BASELINE_TOP1, BASELINE_SECONDS)
    };
    let (top1, secs) = run_experiment("tiny-spm.json");
    outcome(
        top1 >= base_top1 - ACCURACY_MARGIN
            && cmp.reduction >= MIN_REDUCTION
            && secs < RUN_LIMIT_SECONDS
            && base_secs < RUN_LIMIT_SECONDS,
        format!(
            "spm top1 {top1:.4} vs baseline {base_top1:.4} (margin {:.0} pts), {:.1}% fewer FLOPs, runs {secs:.0} s / {base_secs:.0} s",
            100.0 * ACCURACY_MARGIN,
            100.0 * cmp.reduction
        ),
    )
}

fn invariant_suite() -> Outcome {
    const CASES: u32 = 256;
    let mut failed = Vec::new();
    for (name, f) in PROPERTIES {
        if let Err(e) = run_property(CASES, *f) {
            println!("   {name}: {e}");
            failed.push(*name);
        }
    }
    let detail = if failed.is_empty() {
        format!("{} properties x {CASES} cases", PROPERTIES.len())
    } else {
        format!("failed: {}", failed.join(", "))
    };
    outcome(failed.is_empty(), detail)
}

fn svt(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_svt"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
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

fn determinism() -> Outcome {
    let smoke = configs().join("smoke.json");
    let smoke = smoke.to_str().unwrap();
    let mut trees = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let ok = svt(&["train", "--config", smoke, "--seed", "7", "--out", out])
            && svt(&["eval", "--config", smoke, "--checkpoint", &format!("{out}/checkpoint.bin"), "--out", out])
            && svt(&["export-maps", "--config", smoke, "--layer", "1", "--membership", "--checkpoint", &format!("{out}/checkpoint.bin"), "--out", out])
            && svt(&["export-embeddings", "--config", smoke, "--layers", "1,2", "--clips", "2", "--out", out])
            && svt(&["audit", "--config", smoke, "--out", out]);
        if !ok {
            return outcome(false, "a CLI run failed".into());
        }
        trees.push(tree(dir.path()));
    }
    let count = |ext: &str| trees[0].iter().filter(|f| f.0.ends_with(ext)).count();
    let (csv, bin, pgm) = (count(".csv"), count(".bin"), count(".pgm"));
    outcome(
        trees[0] == trees[1] && csv >= 3 && bin == 1 && pgm > 0,
        format!("{csv} CSVs, {bin} checkpoint, {pgm} PGMs compared byte for byte"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("FLOP anchors", flop_anchors),
        ("reduction claims", reduction_claims),
        ("token ledger", token_ledger),
        ("oracle equivalence", oracle_equivalence),
        ("gradient suite", gradient_suite),
        ("mechanism at scale", mechanism_at_scale),
        ("invariant suite", invariant_suite),
        ("determinism", determinism),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        failures += usize::from(!o.pass);
        println!(
            "criterion {} {:<20} {}  {}",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
