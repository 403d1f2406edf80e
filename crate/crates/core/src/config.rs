//! Declarative model descriptions and their build-time validation.
//!
//! Every config type deserializes from JSON with unknown keys rejected. The
//! `plan` methods resolve a config into the exact token bookkeeping used by
//! both the models and the FLOP audit.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::grid::Grid;

/// SPM pooling window: an explicit `T_w x H_w x W_w` block or the whole
/// sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "WindowRepr", into = "WindowRepr")]
pub enum Window {
    Global,
    Local([usize; 3]),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WindowRepr {
    Named(GlobalTag),
    Shape([usize; 3]),
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum GlobalTag {
    Global,
}

impl From<WindowRepr> for Window {
    fn from(r: WindowRepr) -> Self {
        match r {
            WindowRepr::Named(GlobalTag::Global) => Window::Global,
            WindowRepr::Shape(s) => Window::Local(s),
        }
    }
}

impl From<Window> for WindowRepr {
    fn from(w: Window) -> Self {
        match w {
            Window::Global => WindowRepr::Named(GlobalTag::Global),
            Window::Local(s) => WindowRepr::Shape(s),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpmVariant {
    /// Threshold gate on compressed scores, softmax over each window.
    #[default]
    Elitism,
    /// Rank tokens per prototype inside a window and pool `K` rank groups.
    Neighbor,
}

fn one() -> usize {
    1
}

/// Semantic pooling module settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpmConfig {
    /// Number of semantic prototypes `M`.
    pub prototypes: usize,
    /// Elitism threshold on `sigmoid(score)`, strictly inside (0, 1).
    pub threshold: f64,
    pub window: Window,
    /// Original tokens retained by mean compressed score (`N_k`).
    #[serde(default)]
    pub keep_top: usize,
    #[serde(default)]
    pub variant: SpmVariant,
    /// Rank groups per (prototype, window); neighbor variant only.
    #[serde(default)]
    pub neighbor_groups: Option<usize>,
    #[serde(default = "one")]
    pub heads: usize,
    #[serde(default)]
    pub output_projection: bool,
}

impl SpmConfig {
    pub fn elitism(prototypes: usize, threshold: f64, window: Window, keep_top: usize) -> Self {
        SpmConfig {
            prototypes,
            threshold,
            window,
            keep_top,
            variant: SpmVariant::Elitism,
            neighbor_groups: None,
            heads: 1,
            output_projection: false,
        }
    }

    pub fn neighbor(prototypes: usize, groups: usize, window: Window, keep_top: usize) -> Self {
        SpmConfig {
            variant: SpmVariant::Neighbor,
            neighbor_groups: Some(groups),
            ..Self::elitism(prototypes, 0.5, window, keep_top)
        }
    }

    /// Supertokens produced per window: `M` or `M * K`.
    pub fn tokens_per_window(&self) -> usize {
        match self.variant {
            SpmVariant::Elitism => self.prototypes,
            SpmVariant::Neighbor => self.prototypes * self.neighbor_groups.unwrap_or(1),
        }
    }

    /// Validates against the incoming sequence and resolves the window.
    pub fn resolve(&self, tokens: usize, grid: Option<Grid>, channels: usize) -> Result<SpmPlan> {
        if self.prototypes == 0 {
            return config_err("SPM needs at least one prototype");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return config_err(format!("SPM threshold {} outside (0, 1)", self.threshold));
        }
        if self.heads == 0 || channels % self.heads != 0 {
            return config_err(format!("SPM heads {} must divide width {channels}", self.heads));
        }
        if self.keep_top > tokens {
            return config_err(format!("keep_top {} exceeds {tokens} incoming tokens", self.keep_top));
        }
        let window = match (self.window, grid) {
            (Window::Global, _) => None,
            (Window::Local(w), Some(g)) => {
                if (0..3).any(|d| w[d] == 0 || g[d] % w[d] != 0) {
                    return config_err(format!("window {w:?} does not divide grid {g:?}"));
                }
                Some(w)
            }
            (Window::Local(w), None) => {
                return config_err(format!(
                    "window {w:?} needs a spatio-temporal grid; pooled sequences only admit global windows"
                ))
            }
        };
        let (n_windows, window_len) = match (window, grid) {
            (Some(w), Some(g)) => ((0..3).map(|d| g[d] / w[d]).product(), w.iter().product()),
            _ => (1, tokens),
        };
        match (self.variant, self.neighbor_groups) {
            (SpmVariant::Elitism, Some(_)) => {
                return config_err("neighbor_groups is only meaningful for the neighbor variant")
            }
            (SpmVariant::Neighbor, None) | (SpmVariant::Neighbor, Some(0)) => {
                return config_err("neighbor variant needs neighbor_groups >= 1")
            }
            (SpmVariant::Neighbor, Some(k)) if window_len % k != 0 => {
                return config_err(format!("window of {window_len} tokens not divisible into {k} groups"))
            }
            _ => {}
        }
        let pooled = n_windows * self.tokens_per_window();
        Ok(SpmPlan {
            window,
            n_windows,
            window_len,
            pooled,
            tokens_out: pooled + self.keep_top,
        })
    }
}

/// Resolved SPM geometry for one insertion site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpmPlan {
    /// `None` means one global window.
    pub window: Option<[usize; 3]>,
    pub n_windows: usize,
    pub window_len: usize,
    pub pooled: usize,
    pub tokens_out: usize,
}

/// Token reducer applied after a transformer block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reducer {
    Spm(SpmConfig),
    /// Window average over the grid; keeps only (pooled) original tokens.
    AvgPool([usize; 3]),
    MaxPool([usize; 3]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    /// 1-based block index after which the reducer runs.
    pub layer: usize,
    pub reducer: Reducer,
}

fn four() -> usize {
    4
}

/// Single-scale video transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    #[serde(default = "four")]
    pub mlp_ratio: usize,
    /// Tubelet extents `(p_t, p_h, p_w)`.
    pub patch: [usize; 3],
    /// `(frames, height, width, channels)`.
    pub input: [usize; 4],
    #[serde(default)]
    pub spm_schedule: Vec<ScheduleEntry>,
    pub num_classes: usize,
}

/// Resolved reducer site in a ViT.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducerPlan {
    pub layer: usize,
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub grid_in: Option<Grid>,
    pub grid_out: Option<Grid>,
    /// Present for SPM reducers.
    pub spm: Option<SpmPlan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTPlan {
    pub grid: Grid,
    pub patch_dim: usize,
    /// Tokens entering block `l` at index `l - 1`.
    pub block_tokens: Vec<usize>,
    pub reducers: Vec<ReducerPlan>,
    pub final_tokens: usize,
}

impl ViTConfig {
    pub fn plan(&self) -> Result<ViTPlan> {
        let [f, h, w, ch] = self.input;
        let [pt, ph, pw] = self.patch;
        if [f, h, w, ch, pt, ph, pw].contains(&0) {
            return config_err("input and patch extents must be positive");
        }
        if f % pt != 0 || h % ph != 0 || w % pw != 0 {
            return config_err(format!("input {:?} not divisible by patch {:?}", self.input, self.patch));
        }
        if self.depth == 0 || self.embed_dim == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return config_err("depth, embed_dim, mlp_ratio and num_classes must be positive");
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return config_err(format!("heads {} must divide embed_dim {}", self.heads, self.embed_dim));
        }
        let grid = [f / pt, h / ph, w / pw];
        let mut tokens: usize = grid.iter().product();
        let mut cur_grid = Some(grid);
        let mut last_layer = 0;
        let mut reducers = Vec::new();
        let mut by_layer = vec![None; self.depth + 1];
        for entry in &self.spm_schedule {
            if entry.layer <= last_layer || entry.layer > self.depth {
                return config_err(format!(
                    "spm_schedule layers must be strictly increasing within 1..={}; got {} after {last_layer}",
                    self.depth, entry.layer
                ));
            }
            last_layer = entry.layer;
            let rp = match &entry.reducer {
                Reducer::Spm(spm) => {
                    let sp = spm.resolve(tokens, cur_grid, self.embed_dim)?;
                    ReducerPlan {
                        layer: entry.layer,
                        tokens_in: tokens,
                        tokens_out: sp.tokens_out,
                        grid_in: cur_grid,
                        grid_out: None,
                        spm: Some(sp),
                    }
                }
                Reducer::AvgPool(win) | Reducer::MaxPool(win) => {
                    let Some(g) = cur_grid else {
                        return config_err(format!("pooling reducer at layer {} needs a grid", entry.layer));
                    };
                    if (0..3).any(|d| win[d] == 0 || g[d] % win[d] != 0) {
                        return config_err(format!("pool window {win:?} does not divide grid {g:?}"));
                    }
                    let out = [g[0] / win[0], g[1] / win[1], g[2] / win[2]];
                    ReducerPlan {
                        layer: entry.layer,
                        tokens_in: tokens,
                        tokens_out: out.iter().product(),
                        grid_in: cur_grid,
                        grid_out: Some(out),
                        spm: None,
                    }
                }
            };
            by_layer[entry.layer] = Some(rp.tokens_out);
            tokens = rp.tokens_out;
            cur_grid = rp.grid_out;
            reducers.push(rp);
        }
        let mut block_tokens = Vec::with_capacity(self.depth);
        let mut t: usize = grid.iter().product();
        for layer in 1..=self.depth {
            block_tokens.push(t);
            if let Some(out) = by_layer[layer] {
                t = out;
            }
        }
        Ok(ViTPlan {
            grid,
            patch_dim: pt * ph * pw * ch,
            block_tokens,
            reducers,
            final_tokens: tokens,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConfig {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub blocks: usize,
    pub channels: usize,
    pub heads: usize,
    /// Query stride of the first block in the stage; `[1, 1, 1]` for stage 0.
    pub q_stride: [usize; 3],
    /// Key/value pooling stride for every block in the stage.
    pub kv_stride: [usize; 3],
}

/// Multi-scale video transformer with pooling attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MViTConfig {
    pub input: [usize; 4],
    pub stem: StemConfig,
    pub stages: Vec<StageConfig>,
    pub kernel_q: [usize; 3],
    pub kernel_kv: [usize; 3],
    #[serde(default = "four")]
    pub mlp_ratio: usize,
    /// Replace every `period`-th block (global count) with semantic
    /// attention; `None` gives the plain pooling-attention baseline.
    #[serde(default)]
    pub semantic_attention_period: Option<usize>,
    #[serde(default)]
    pub spm: Option<SpmConfig>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    PoolingAttention,
    SemanticAttention,
}

/// Resolved geometry of one MViT block.
#[derive(Debug, Clone, PartialEq)]
pub struct MBlockPlan {
    /// 1-based global block index.
    pub index: usize,
    pub stage: usize,
    pub kind: BlockKind,
    pub c_in: usize,
    pub c_out: usize,
    pub heads: usize,
    pub grid_in: Grid,
    /// Query (and output) grid.
    pub grid_q: Grid,
    /// Key/value grid; for semantic blocks, the window grid.
    pub grid_kv: Grid,
    pub q_stride: [usize; 3],
    pub kv_stride: [usize; 3],
    /// Key/value tokens per key/value grid cell (`M` for semantic blocks).
    pub kv_per_cell: usize,
    pub spm: Option<SpmPlan>,
}

impl MBlockPlan {
    pub fn q_tokens(&self) -> usize {
        self.grid_q.iter().product()
    }

    pub fn kv_tokens(&self) -> usize {
        self.grid_kv.iter().product::<usize>() * self.kv_per_cell
    }

    pub fn is_transition(&self) -> bool {
        self.q_stride != [1, 1, 1] || self.c_in != self.c_out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MViTPlan {
    pub stem_grid: Grid,
    pub blocks: Vec<MBlockPlan>,
}

fn strided(ext: Grid, stride: [usize; 3]) -> Grid {
    [0, 1, 2].map(|d| ext[d].div_ceil(stride[d]))
}

impl MViTConfig {
    pub fn depth(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    /// 1-based indices of blocks using semantic attention.
    ///
    /// Candidates are multiples of the period counted over all stages; a
    /// candidate that lands on a stage-transition block moves to the next
    /// block.
    pub fn semantic_blocks(&self) -> Vec<usize> {
        let Some(period) = self.semantic_attention_period.filter(|&p| p > 0) else {
            return Vec::new();
        };
        let mut transitions = Vec::new();
        let mut start = 1;
        for (s, stage) in self.stages.iter().enumerate() {
            if s > 0 {
                transitions.push(start);
            }
            start += stage.blocks;
        }
        let depth = self.depth();
        let mut out: Vec<usize> = Vec::new();
        let mut candidate = period;
        while candidate <= depth {
            let mut b = candidate;
            while transitions.contains(&b) || out.last().is_some_and(|&l| l >= b) {
                b += 1;
            }
            if b <= depth {
                out.push(b);
            }
            candidate += period;
        }
        out
    }

    pub fn plan(&self) -> Result<MViTPlan> {
        let [f, h, w, ch] = self.input;
        if [f, h, w, ch].contains(&0) || self.num_classes == 0 || self.mlp_ratio == 0 {
            return config_err("input extents, mlp_ratio and num_classes must be positive");
        }
        if self.stages.is_empty() {
            return config_err("MViT needs at least one stage");
        }
        for k in [self.stem.kernel, self.kernel_q, self.kernel_kv] {
            if k.iter().any(|v| v % 2 == 0) {
                return config_err(format!("kernel {k:?} must be odd"));
            }
        }
        if self.stem.stride.contains(&0) {
            return config_err("stem stride must be positive");
        }
        let stem_grid = strided([f, h, w], self.stem.stride);
        let semantic = self.semantic_blocks();
        if !semantic.is_empty() && self.spm.is_none() {
            return config_err("semantic_attention_period set without an spm config");
        }
        let mut grid = stem_grid;
        let mut c_prev = self.stages[0].channels;
        let mut blocks = Vec::new();
        let mut index = 0;
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.blocks == 0 || stage.channels == 0 {
                return config_err(format!("stage {s} needs positive blocks and channels"));
            }
            if stage.heads == 0 || stage.channels % stage.heads != 0 {
                return config_err(format!("stage {s}: heads {} must divide {}", stage.heads, stage.channels));
            }
            if s == 0 && stage.q_stride != [1, 1, 1] {
                return config_err("stage 0 must not downsample queries");
            }
            if s > 0 {
                if stage.channels != 2 * c_prev {
                    return config_err(format!(
                        "stage {s}: channel width must double ({} -> {})",
                        c_prev, stage.channels
                    ));
                }
                if stage.q_stride == [1, 1, 1] {
                    return config_err(format!("stage {s} must downsample space-time at its boundary"));
                }
            }
            if stage.kv_stride.contains(&0) || stage.q_stride.contains(&0) {
                return config_err(format!("stage {s}: strides must be positive"));
            }
            for b in 0..stage.blocks {
                index += 1;
                let q_stride = if b == 0 { stage.q_stride } else { [1, 1, 1] };
                if (0..3).any(|d| q_stride[d] > grid[d] || stage.kv_stride[d] > grid[d]) {
                    return config_err(format!(
                        "block {index}: stride q{q_stride:?}/kv{:?} larger than grid {grid:?}",
                        stage.kv_stride
                    ));
                }
                if (0..3).any(|d| grid[d] % q_stride[d] != 0) {
                    return config_err(format!("block {index}: q stride {q_stride:?} does not tile grid {grid:?}"));
                }
                let c_in = if b == 0 { c_prev } else { stage.channels };
                let grid_q = strided(grid, q_stride);
                let plan = if semantic.contains(&index) {
                    let spm_cfg = self.spm.as_ref().expect("checked above");
                    if spm_cfg.keep_top != 0 {
                        return config_err("semantic attention pools only supertokens; keep_top must be 0");
                    }
                    let tokens = grid.iter().product();
                    let sp = spm_cfg.resolve(tokens, Some(grid), stage.channels)?;
                    let grid_kv = match sp.window {
                        Some(win) => [0, 1, 2].map(|d| grid[d] / win[d]),
                        None => [1, 1, 1],
                    };
                    MBlockPlan {
                        index,
                        stage: s,
                        kind: BlockKind::SemanticAttention,
                        c_in,
                        c_out: stage.channels,
                        heads: stage.heads,
                        grid_in: grid,
                        grid_q,
                        grid_kv,
                        q_stride,
                        kv_stride: [1, 1, 1],
                        kv_per_cell: spm_cfg.tokens_per_window(),
                        spm: Some(sp),
                    }
                } else {
                    MBlockPlan {
                        index,
                        stage: s,
                        kind: BlockKind::PoolingAttention,
                        c_in,
                        c_out: stage.channels,
                        heads: stage.heads,
                        grid_in: grid,
                        grid_q,
                        grid_kv: strided(grid, stage.kv_stride),
                        q_stride,
                        kv_stride: stage.kv_stride,
                        kv_per_cell: 1,
                        spm: None,
                    }
                };
                debug_assert!(plan.kind == BlockKind::PoolingAttention || !plan.is_transition());
                grid = grid_q;
                blocks.push(plan);
            }
            c_prev = stage.channels;
        }
        Ok(MViTPlan { stem_grid, blocks })
    }
}

/// Either architecture, tagged by `"arch"` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum ModelConfig {
    Vit(ViTConfig),
    Mvit(MViTConfig),
}

impl ModelConfig {
    pub fn input(&self) -> [usize; 4] {
        match self {
            ModelConfig::Vit(c) => c.input,
            ModelConfig::Mvit(c) => c.input,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelConfig::Vit(c) => c.num_classes,
            ModelConfig::Mvit(c) => c.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Vit(c) => c.plan().map(|_| ()),
            ModelConfig::Mvit(c) => c.plan().map(|_| ()),
        }
    }

    /// Tokens reaching the classifier.
    pub fn final_tokens(&self) -> Result<usize> {
        match self {
            ModelConfig::Vit(c) => Ok(c.plan()?.final_tokens),
            ModelConfig::Mvit(c) => Ok(c.plan()?.blocks.last().map(|b| b.q_tokens()).unwrap_or(0)),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| crate::error::CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    #[test]
    fn window_json_forms() {
        let g: Window = serde_json::from_str("\"global\"").unwrap();
        assert_eq!(g, Window::Global);
        let l: Window = serde_json::from_str("[2, 14, 14]").unwrap();
        assert_eq!(l, Window::Local([2, 14, 14]));
        assert_eq!(serde_json::to_string(&l).unwrap(), "[2,14,14]");
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(ModelConfig::Vit(presets::tiny())).unwrap();
        v["dropout"] = serde_json::json!(0.1);
        assert!(ModelConfig::from_json(&v.to_string()).is_err());
        let mut v = serde_json::to_value(ModelConfig::Vit(presets::tiny_spm())).unwrap();
        v["spm_schedule"][0]["reducer"]["spm"]["temperature"] = serde_json::json!(1.0);
        assert!(ModelConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn json_round_trip() {
        for cfg in [
            ModelConfig::Vit(presets::vit_l_spm8_14_18()),
            ModelConfig::Mvit(presets::mvit_tiny_semantic()),
        ] {
            let text = serde_json::to_string_pretty(&cfg).unwrap();
            assert_eq!(ModelConfig::from_json(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn window_must_divide_grid() {
        let spm = SpmConfig::elitism(4, 0.7, Window::Local([3, 8, 8]), 0);
        assert!(spm.resolve(256, Some([4, 8, 8]), 64).is_err());
        let ok = SpmConfig::elitism(4, 0.7, Window::Local([2, 8, 8]), 0);
        assert_eq!(ok.resolve(256, Some([4, 8, 8]), 64).unwrap().n_windows, 2);
    }

    #[test]
    fn threshold_bounds_and_heads() {
        let mut spm = SpmConfig::elitism(4, 1.0, Window::Global, 0);
        assert!(spm.resolve(16, None, 8).is_err());
        spm.threshold = 0.5;
        spm.heads = 3;
        assert!(spm.resolve(16, None, 8).is_err());
    }

    #[test]
    fn neighbor_groups_must_divide_window() {
        let spm = SpmConfig::neighbor(2, 3, Window::Global, 0);
        assert!(spm.resolve(16, None, 8).is_err());
        let spm = SpmConfig::neighbor(2, 4, Window::Global, 0);
        assert_eq!(spm.resolve(16, None, 8).unwrap().tokens_out, 8);
    }

    #[test]
    fn local_window_after_pooling_rejected() {
        let mut cfg = presets::tiny();
        cfg.spm_schedule = vec![
            ScheduleEntry {
                layer: 2,
                reducer: Reducer::Spm(SpmConfig::elitism(4, 0.7, Window::Global, 4)),
            },
            ScheduleEntry {
                layer: 4,
                reducer: Reducer::Spm(SpmConfig::elitism(2, 0.7, Window::Local([1, 2, 2]), 0)),
            },
        ];
        assert!(cfg.plan().is_err());
    }

    #[test]
    fn schedule_must_increase() {
        let mut cfg = presets::tiny_spm();
        let e = cfg.spm_schedule[0].clone();
        cfg.spm_schedule.push(e);
        assert!(cfg.plan().is_err());
        let mut cfg = presets::tiny_spm();
        cfg.spm_schedule[0].layer = 9;
        assert!(cfg.plan().is_err());
    }

    #[test]
    fn patch_divisibility() {
        let mut cfg = presets::tiny();
        cfg.input = [8, 30, 32, 1];
        assert!(cfg.plan().is_err());
    }

    #[test]
    fn semantic_schedule_is_global_and_skips_transitions() {
        let mut cfg = presets::mvit_tiny_semantic();
        assert_eq!(cfg.semantic_blocks(), vec![4, 8]);
        cfg.stages[0].blocks = 3;
        cfg.stages[1].blocks = 5;
        // Block 4 opens stage 1 and keeps conv pooling; the semantic block moves to 5.
        assert_eq!(cfg.semantic_blocks(), vec![5, 8]);
        cfg.semantic_attention_period = None;
        assert!(cfg.semantic_blocks().is_empty());
    }

    #[test]
    fn mvit_stage_rules() {
        let mut cfg = presets::mvit_tiny();
        cfg.stages[1].channels = 48;
        assert!(cfg.plan().is_err());
        let mut cfg = presets::mvit_tiny();
        cfg.stages[1].q_stride = [1, 1, 1];
        assert!(cfg.plan().is_err());
        let mut cfg = presets::mvit_tiny();
        cfg.stages[1].q_stride = [1, 16, 16];
        assert!(cfg.plan().is_err());
    }

    #[test]
    fn mvit_plan_shapes() {
        let plan = presets::mvit_tiny_semantic().plan().unwrap();
        assert_eq!(plan.stem_grid, [4, 8, 8]);
        let b3 = &plan.blocks[2];
        assert_eq!((b3.grid_in, b3.grid_q, b3.c_in, b3.c_out), ([4, 8, 8], [4, 4, 4], 32, 64));
        let b4 = &plan.blocks[3];
        assert_eq!(b4.kind, BlockKind::SemanticAttention);
        assert_eq!(b4.grid_q, b4.grid_in);
        assert!(b4.kv_tokens() < b4.q_tokens());
    }
}
