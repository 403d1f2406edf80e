//! Seeded random instances for oracle, gradient and property checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svt_core::config::{BlockKind, MBlockPlan, MViTConfig, SpmVariant, StageConfig, StemConfig};
use svt_core::spm::SpmRecord;
use svt_core::{Grid, ParamSet, SpmConfig, Window};
use svt_tensor::DArray;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], std: f64, r: &mut ChaCha8Rng) -> DArray {
    DArray::randn(shape, std, r)
}

/// A 3-D extent as `window * count` per axis.
fn tiled(r: &mut ChaCha8Rng, max_win: usize, max_count: usize, min_count: usize) -> ([usize; 3], Grid) {
    let win = [0; 3].map(|_| r.random_range(1..=max_win));
    let count = [0; 3].map(|_| r.random_range(min_count..=max_count));
    (win, [0, 1, 2].map(|d| win[d] * count[d]))
}

#[derive(Debug, Clone)]
pub struct SpmCase {
    pub grid: Option<Grid>,
    pub channels: usize,
    pub cfg: SpmConfig,
    pub x: DArray,
    /// One `[M, C / heads]` array per head.
    pub protos: Vec<DArray>,
    pub proj: Option<(DArray, DArray)>,
}

impl SpmCase {
    pub fn tokens(&self) -> usize {
        self.x.shape()[0]
    }
}

/// Random SPM instance over at most 48 tokens.
///
/// Local windows always carry a grid; global windows sometimes run on a bare
/// sequence, as after an earlier SPM.
pub fn spm_case(seed: u64, variant: SpmVariant) -> SpmCase {
    let mut r = rng(seed);
    let (win, grid) = tiled(&mut r, 2, 2, 1);
    let local = r.random_bool(0.6);
    let n: usize = grid.iter().product();
    let gridded = local || r.random_bool(0.5);
    let window = if local { Window::Local(win) } else { Window::Global };
    let window_len = if local { win.iter().product() } else { n };
    let heads = r.random_range(1..=2);
    let d = r.random_range(2..=3);
    let c = heads * d;
    let m = r.random_range(1..=3);
    let keep = r.random_range(0..=n.min(3));
    let mut cfg = match variant {
        SpmVariant::Elitism => SpmConfig::elitism(m, r.random_range(0.2..0.8), window, keep),
        SpmVariant::Neighbor => {
            let divisors: Vec<usize> = (1..=window_len).filter(|k| window_len % k == 0).collect();
            let k = divisors[r.random_range(0..divisors.len())];
            SpmConfig::neighbor(m, k, window, keep)
        }
    };
    cfg.heads = heads;
    cfg.output_projection = r.random_bool(0.3);
    let x = randn(&[n, c], 1.0, &mut r);
    let protos = (0..heads).map(|_| randn(&[m, d], 1.0, &mut r)).collect();
    let proj = cfg
        .output_projection
        .then(|| (randn(&[c, c], 0.5, &mut r), randn(&[c], 0.5, &mut r)));
    SpmCase {
        grid: gridded.then_some(grid),
        channels: c,
        cfg,
        x,
        protos,
        proj,
    }
}

/// SPM instance whose every window has at least two tokens, so that neither
/// input has a structurally zero gradient.
pub fn spm_grad_case(seed: u64, variant: SpmVariant) -> SpmCase {
    let mut s = seed;
    loop {
        let case = spm_case(s, variant);
        let wl = match case.cfg.window {
            Window::Local(w) => w.iter().product(),
            Window::Global => case.tokens(),
        };
        let groups = case.cfg.neighbor_groups.unwrap_or(1);
        if wl / groups >= 2 {
            return case;
        }
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    }
}

/// Whether every discrete decision in `rec` is at least `margin` away from
/// flipping: gate thresholds, neighbor group boundaries and the keep-top cut.
pub fn decisions_stable(rec: &SpmRecord, cfg: &SpmConfig, margin: f64) -> bool {
    let logit = (cfg.threshold / (1.0 - cfg.threshold)).ln();
    let part = &rec.partition;
    let n = part.n_tokens();
    for h in &rec.heads {
        let m = h.scores.shape()[0];
        let s = h.scores.data();
        match cfg.variant {
            SpmVariant::Elitism => {
                if s.iter().any(|&v| (v - logit).abs() < margin) {
                    return false;
                }
            }
            SpmVariant::Neighbor => {
                let len = part.window_len() / cfg.neighbor_groups.unwrap_or(1);
                for i in 0..m {
                    for w in 0..part.n_windows() {
                        let mut v: Vec<f64> = part.members(w).iter().map(|&j| s[i * n + j]).collect();
                        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
                        for b in (len..v.len()).step_by(len) {
                            if v[b - 1] - v[b] < margin {
                                return false;
                            }
                        }
                    }
                }
            }
        }
    }
    let k = cfg.keep_top;
    if k > 0 && k < n {
        let mut mean = rec.mean_score();
        mean.sort_by(|a, b| b.partial_cmp(a).unwrap());
        // Compressed scores move more slowly than raw ones.
        if mean[k - 1] - mean[k] < margin * 0.25 {
            return false;
        }
    }
    true
}

/// A pooling or semantic block with its owning config and perturbed params.
#[derive(Debug, Clone)]
pub struct BlockCase {
    pub cfg: MViTConfig,
    pub block: MBlockPlan,
    pub params: ParamSet,
    pub x: DArray,
}

impl BlockCase {
    pub fn spm(&self) -> &SpmConfig {
        self.cfg.spm.as_ref().expect("semantic case")
    }
}

fn odd_kernel(r: &mut ChaCha8Rng) -> [usize; 3] {
    [0; 3].map(|_| if r.random_bool(0.5) { 3 } else { 1 })
}

/// Initializes params from the config and adds N(0, 0.1) noise so that zero
/// biases, unit gains and center taps do not hide indexing mistakes.
fn noisy_params(cfg: &MViTConfig, block: &MBlockPlan, seed: u64, r: &mut ChaCha8Rng) -> ParamSet {
    let mut specs = Vec::new();
    svt_core::mvit::block_specs(&mut specs, cfg, block);
    let mut p = ParamSet::init(&specs, seed).expect("specs are valid");
    for (_, a) in p.iter_mut() {
        let noise = randn(a.shape(), 0.1, r);
        a.data_mut().iter_mut().zip(noise.data()).for_each(|(v, e)| *v += e);
    }
    p
}

fn single_block_config(grid: Grid, stages: Vec<StageConfig>, r: &mut ChaCha8Rng) -> MViTConfig {
    MViTConfig {
        input: [grid[0], grid[1], grid[2], 1],
        stem: StemConfig {
            kernel: [1, 1, 1],
            stride: [1, 1, 1],
        },
        stages,
        kernel_q: odd_kernel(r),
        kernel_kv: odd_kernel(r),
        mlp_ratio: r.random_range(1..=2),
        semantic_attention_period: None,
        spm: None,
        num_classes: 2,
    }
}

/// Per-head width. Gradient cases avoid width 2, where layer norm maps every
/// token to nearly the same two-point pattern and scores become degenerate.
fn head_width(r: &mut ChaCha8Rng, grad: bool) -> usize {
    if grad {
        r.random_range(3..=4)
    } else {
        r.random_range(2..=3)
    }
}

fn divisor_stride(r: &mut ChaCha8Rng, extent: usize) -> usize {
    let opts: Vec<usize> = (1..=extent.min(2)).filter(|s| extent % s == 0).collect();
    opts[r.random_range(0..opts.len())]
}

/// Pooling-attention block, optionally a stage transition.
///
/// With `grad` set, every key/value axis has at least two positions so each
/// relative-position table receives gradient.
pub fn pool_block_case(seed: u64, grad: bool) -> BlockCase {
    let mut r = rng(seed);
    let lo = if grad { 2 } else { 1 };
    let grid: Grid = [r.random_range(lo..=3), r.random_range(lo..=4), r.random_range(lo..=4)];
    let heads0 = r.random_range(1..=2);
    let c0 = heads0 * head_width(&mut r, grad);
    let kv0 = if grad { [1, 1, 1] } else { [0, 1, 2].map(|d| divisor_stride(&mut r, grid[d])) };
    let mut stages = vec![StageConfig {
        blocks: 1,
        channels: c0,
        heads: heads0,
        q_stride: [1, 1, 1],
        kv_stride: kv0,
    }];
    if r.random_bool(0.5) {
        let mut qs = [0, 1, 2].map(|d| divisor_stride(&mut r, grid[d]));
        if qs == [1, 1, 1] {
            // Stage boundaries must downsample; fall back to a single stage.
            let d = (0..3).find(|&d| grid[d] % 2 == 0);
            match d {
                Some(d) => qs[d] = 2,
                None => qs = [0; 3],
            }
        }
        if qs != [0; 3] {
            let heads1 = r.random_range(1..=2);
            stages.push(StageConfig {
                blocks: 1,
                channels: 2 * c0,
                heads: if (2 * c0) % heads1 == 0 { heads1 } else { 1 },
                q_stride: qs,
                kv_stride: [1, 1, 1],
            });
        }
    }
    let cfg = single_block_config(grid, stages, &mut r);
    let plan = cfg.plan().expect("generated config is valid");
    let block = plan.blocks.last().unwrap().clone();
    debug_assert_eq!(block.kind, BlockKind::PoolingAttention);
    let params = noisy_params(&cfg, &block, seed, &mut r);
    let x = randn(&[block.grid_in.iter().product(), block.c_in], 1.0, &mut r);
    BlockCase { cfg, block, params, x }
}

/// Semantic-attention block over a random window.
///
/// With `grad` set the window grid spans at least two cells per axis (so key
/// centers differ along every axis) and each window pool holds at least two
/// tokens.
pub fn semantic_block_case(seed: u64, variant: SpmVariant, grad: bool) -> BlockCase {
    let mut r = rng(seed);
    let (win, grid) = if grad {
        let win = [1, 1, 2];
        (win, [2, 2, 4])
    } else {
        tiled(&mut r, 2, 2, 1)
    };
    let local = grad || r.random_bool(0.7);
    let window = if local { Window::Local(win) } else { Window::Global };
    let window_len: usize = if local { win.iter().product() } else { grid.iter().product() };
    let heads = r.random_range(1..=2);
    let c = heads * head_width(&mut r, grad);
    let m = r.random_range(1..=2);
    let mut spm = match variant {
        SpmVariant::Elitism => SpmConfig::elitism(m, r.random_range(0.3..0.7), window, 0),
        SpmVariant::Neighbor => {
            let k = if window_len % 2 == 0 && !grad && r.random_bool(0.5) { 2 } else { 1 };
            SpmConfig::neighbor(m, k, window, 0)
        }
    };
    spm.heads = if r.random_bool(0.5) { heads } else { 1 };
    spm.output_projection = r.random_bool(0.3);
    let stages = vec![StageConfig {
        blocks: 1,
        channels: c,
        heads,
        q_stride: [1, 1, 1],
        kv_stride: [1, 1, 1],
    }];
    let mut cfg = single_block_config(grid, stages, &mut r);
    if grad {
        // A 1x1x1 key conv adds the same key bias to every supertoken of a
        // prototype; softmax cancels it and its gradient is identically zero.
        cfg.kernel_kv[2] = 3;
    }
    cfg.semantic_attention_period = Some(1);
    cfg.spm = Some(spm);
    let plan = cfg.plan().expect("generated config is valid");
    let block = plan.blocks[0].clone();
    debug_assert_eq!(block.kind, BlockKind::SemanticAttention);
    let params = noisy_params(&cfg, &block, seed, &mut r);
    let x = randn(&[grid.iter().product(), c], 1.0, &mut r);
    BlockCase { cfg, block, params, x }
}

/// Whether every max-pool window of `x` over `grid` has a unique maximum by
/// at least `margin` in every channel.
pub fn max_pool_stable(x: &DArray, grid: Grid, window: [usize; 3], margin: f64) -> bool {
    if window == [1, 1, 1] {
        return true;
    }
    let c = x.shape()[1];
    let part = svt_core::WindowPartition::new(grid, window).expect("window tiles grid");
    (0..part.n_windows()).all(|w| {
        (0..c).all(|ch| {
            let mut v: Vec<f64> = part.members(w).iter().map(|&j| x.data()[j * c + ch]).collect();
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            v.len() < 2 || v[0] - v[1] >= margin
        })
    })
}
