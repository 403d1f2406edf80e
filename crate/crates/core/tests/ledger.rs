//! Token bookkeeping and the analytical cost model.

use proptest::prelude::*;
use svt_core::config::{Reducer, ScheduleEntry};
use svt_core::flops::{self, audit_mvit, audit_vit};
use svt_core::mvit::MViT;
use svt_core::vit::ViT;
use svt_core::{presets, CoreError, ModelConfig, SpmConfig, ViTConfig, Window};
use svt_tensor::{DArray, Tape};

fn token_trail(cfg: &ViTConfig) -> Vec<usize> {
    cfg.plan().unwrap().reducers.iter().map(|r| r.tokens_out).collect()
}

#[test]
fn table_one_token_counts() {
    assert_eq!(token_trail(&presets::vit_b_spm6()), [128]);
    assert_eq!(token_trail(&presets::vit_b_spm8()), [128]);
    assert_eq!(token_trail(&presets::vit_l_spm12()), [128]);
    assert_eq!(token_trail(&presets::vit_l_spm16()), [128]);
    assert_eq!(token_trail(&presets::vit_l_spm18()), [64]);
    assert_eq!(token_trail(&presets::vit_l_spm8_12_16()), [1024, 512, 128]);
    assert_eq!(token_trail(&presets::vit_l_spm8_14_18()), [1024, 512, 128]);
}

#[test]
fn hierarchical_sites_split_into_windows_and_kept() {
    let plan = presets::vit_l_spm8_14_18().plan().unwrap();
    let first = plan.reducers[0].spm.unwrap();
    assert_eq!((first.n_windows, first.pooled, first.tokens_out), (4, 128, 1024));
    assert_eq!(plan.reducers[1].spm.unwrap().pooled, 128);
    assert_eq!(plan.block_tokens[7], 1568);
    assert_eq!(plan.block_tokens[8], 1024);
    assert_eq!(plan.block_tokens[14], 512);
    assert_eq!(plan.block_tokens[18], 128);
}

/// Hand ledger: 12·N·C² + 2·N²·C per block at MLP ratio 4, the tubelet
/// projection, 2·M·N·C per SPM and the classifier.
fn hand_vit_macs(depth: usize, c: u64, pd: u64, classes: u64, sites: &[(usize, u64, u64)], n0: u64) -> u64 {
    let mut n = n0;
    let mut total = n0 * pd * c + c * classes;
    for l in 1..=depth {
        total += 12 * n * c * c + 2 * n * n * c;
        if let Some(&(_, m, out)) = sites.iter().find(|s| s.0 == l) {
            total += 2 * m * n * c;
            n = out;
        }
    }
    total
}

#[test]
fn audit_matches_hand_ledger() {
    let pd = 2 * 16 * 16 * 3;
    let cases: [(ViTConfig, usize, u64, &[(usize, u64, u64)]); 5] = [
        (presets::vit_b(), 12, 768, &[]),
        (presets::vit_l(), 24, 1024, &[]),
        (presets::vit_l_spm16(), 24, 1024, &[(16, 32, 128)]),
        (presets::vit_l_spm18(), 24, 1024, &[(18, 64, 64)]),
        (presets::vit_l_spm8_14_18(), 24, 1024, &[(8, 32, 1024), (14, 128, 512), (18, 128, 128)]),
    ];
    for (cfg, depth, c, sites) in cases {
        let expect = hand_vit_macs(depth, c, pd, 400, sites, 1568);
        assert_eq!(audit_vit(&cfg).unwrap().total_macs(), expect, "{sites:?}");
    }
}

#[test]
fn baseline_anchors_within_five_percent() {
    let b = audit_vit(&presets::vit_b()).unwrap().gflops();
    let l = audit_vit(&presets::vit_l()).unwrap().gflops();
    assert!((b / 180.0 - 1.0).abs() < 0.05, "ViT-B {b}");
    assert!((l / 598.0 - 1.0).abs() < 0.05, "ViT-L {l}");
}

#[test]
fn views_multiply_per_view_cost() {
    let r = audit_vit(&presets::vit_l()).unwrap().with_views((3, 7));
    assert!((r.gflops_all_views() - 21.0 * r.gflops()).abs() < 1e-9);
    assert!(r.to_table().contains("views: 3x7"));
}

#[test]
fn compare_reductions_follow_the_ledger() {
    let base = ModelConfig::Vit(presets::vit_l());
    let pd = 2 * 16 * 16 * 3;
    let b = hand_vit_macs(24, 1024, pd, 400, &[], 1568) as f64;
    let sites = [(8, 32, 1024), (14, 128, 512), (18, 128, 128)];
    let h = hand_vit_macs(24, 1024, pd, 400, &sites, 1568) as f64;
    let r = flops::compare(&ModelConfig::Vit(presets::vit_l_spm8_14_18()), &base).unwrap();
    assert!((r.reduction - (1.0 - h / b)).abs() < 1e-12);
    assert_eq!(flops::compare(&base, &base).unwrap().reduction, 0.0);
    let tiny = ModelConfig::Vit(presets::tiny());
    assert!(matches!(flops::compare(&tiny, &base), Err(CoreError::Argument(_))));
}

#[test]
fn tiny_spm_reduction_matches_hand_computation() {
    // 256 tokens of width 64 for five blocks, then 8 supertokens + 8 kept.
    let (c, k) = (64u64, 8u64);
    let block = |n: u64| 12 * n * c * c + 2 * n * n * c;
    let fixed = 256 * 32 * c + c * k;
    let base = fixed + 8 * block(256);
    let spm = fixed + 5 * block(256) + 2 * 8 * 256 * c + 3 * block(16);
    let expect = 1.0 - spm as f64 / base as f64;
    let r = flops::compare(&ModelConfig::Vit(presets::tiny_spm()), &ModelConfig::Vit(presets::tiny())).unwrap();
    assert!((r.reduction - expect).abs() < 1e-12);
    assert!(r.reduction >= 0.30, "{}", r.reduction);
}

#[test]
fn csv_has_fixed_header_and_total() {
    let r = audit_mvit(&presets::mvit_tiny_semantic()).unwrap();
    let csv = r.to_csv();
    assert!(csv.starts_with("layer,op,tokens_in,tokens_out,macs,params\n"));
    let sum: u64 = r.rows.iter().map(|x| x.macs).sum();
    assert_eq!(sum, r.total_macs());
    assert!(csv.contains(",spm,"));
}

fn tape_macs_vit(cfg: ViTConfig) -> (u64, u64) {
    let model = ViT::new(cfg).unwrap();
    let params = model.init_params(3).unwrap();
    let tape = Tape::new();
    let clip = DArray::from_fn(&model.cfg.input, |i| ((i * 7919) % 101) as f64 / 101.0 - 0.5);
    model.forward(&tape, &params.bind(&tape), &clip).unwrap();
    (tape.macs().total(), params.numel() as u64)
}

fn tape_macs_mvit(cfg: svt_core::MViTConfig) -> (u64, u64) {
    let model = MViT::new(cfg).unwrap();
    let params = model.init_params(3).unwrap();
    let tape = Tape::new();
    let clip = DArray::from_fn(&model.cfg.input, |i| ((i * 7919) % 101) as f64 / 101.0 - 0.5);
    model.forward(&tape, &params.bind(&tape), &clip).unwrap();
    (tape.macs().total(), params.numel() as u64)
}

#[test]
fn audit_equals_instrumented_forward_vit() {
    for cfg in [presets::tiny(), presets::tiny_spm()] {
        let audit = audit_vit(&cfg).unwrap();
        let (macs, numel) = tape_macs_vit(cfg);
        assert_eq!(audit.total_macs(), macs);
        assert_eq!(audit.total_params(), numel);
    }
}

#[test]
fn audit_equals_instrumented_forward_pooling_reducers() {
    let mut cfg = presets::tiny();
    cfg.spm_schedule = vec![
        ScheduleEntry {
            layer: 2,
            reducer: Reducer::AvgPool([1, 2, 2]),
        },
        ScheduleEntry {
            layer: 4,
            reducer: Reducer::Spm(SpmConfig {
                output_projection: true,
                heads: 2,
                ..SpmConfig::elitism(3, 0.6, Window::Local([2, 2, 2]), 4)
            }),
        },
    ];
    let audit = audit_vit(&cfg).unwrap();
    let (macs, numel) = tape_macs_vit(cfg);
    assert_eq!(audit.total_macs(), macs);
    assert_eq!(audit.total_params(), numel);
}

#[test]
fn audit_equals_instrumented_forward_mvit() {
    for cfg in [presets::mvit_tiny(), presets::mvit_tiny_semantic()] {
        let audit = audit_mvit(&cfg).unwrap();
        let (macs, numel) = tape_macs_mvit(cfg);
        assert_eq!(audit.total_macs(), macs);
        assert_eq!(audit.total_params(), numel);
    }
}

#[test]
fn shipped_semantic_blocks_shrink_key_value_sets() {
    let plan = presets::mvit_tiny_semantic().plan().unwrap();
    let semantic: Vec<_> = plan.blocks.iter().filter(|b| b.spm.is_some()).collect();
    assert!(!semantic.is_empty());
    for b in semantic {
        assert!(b.kv_tokens() < b.q_tokens(), "block {}", b.index);
        assert_eq!(b.grid_q, b.grid_in);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Shrinking any site's output never raises the total.
    #[test]
    fn fewer_tokens_never_cost_more(
        layer in 1usize..8,
        m in 2usize..16,
        keep in 1usize..64,
        dm in 1usize..2,
        dk in 1usize..8,
    ) {
        let site = |m: usize, keep: usize| {
            let mut cfg = presets::tiny();
            cfg.spm_schedule = vec![ScheduleEntry {
                layer,
                reducer: Reducer::Spm(SpmConfig::elitism(m, 0.5, Window::Global, keep)),
            }];
            audit_vit(&cfg).unwrap().total_macs()
        };
        let big = site(m, keep);
        prop_assert!(site(m - dm.min(m - 1), keep) <= big);
        prop_assert!(site(m, keep - dk.min(keep)) <= big);
    }
}
