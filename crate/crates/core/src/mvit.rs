//! Multi-scale video transformer: pooling attention with decomposed relative
//! position bias, and the semantic attention block whose keys and values come
//! from supertokens.

use svt_tensor::{DArray, PoolKind, Tape, Var};

use crate::config::{BlockKind, MBlockPlan, MViTConfig, MViTPlan, SpmConfig};
use crate::error::{CoreError, Result};
use crate::grid::{coord_of, Grid};
use crate::layers::{self, WEIGHT_STD};
use crate::params::{Bound, Init, ParamSet, ParamSpec};
use crate::spm::{self, SpmRecord};
use crate::vit::reduce_pool;

const CONV_NOISE: f64 = 0.02;

/// Depthwise conv over a gridded `[N, C]` sequence; returns `[N', C]`.
pub fn conv_pool(tape: &Tape, x: Var, grid: Grid, w: Var, stride: [usize; 3]) -> Result<Var> {
    let c = tape.shape(x)[1];
    let xg = tape.reshape(x, &[grid[0], grid[1], grid[2], c])?;
    let y = tape.grouped_conv3d(xg, w, c, stride)?;
    let n = tape.shape(y)[..3].iter().product();
    Ok(tape.reshape(y, &[n, c])?)
}

/// Decomposed relative position bias `[heads, Nq, Nk]`.
///
/// Each axis has a `[heads, 2 * extent - 1]` table indexed by the offset
/// between query and key positions, both in input-grid coordinates.
pub fn relpos_bias(
    tape: &Tape,
    tables: [Var; 3],
    heads: usize,
    extent: Grid,
    q_pos: &[[usize; 3]],
    k_pos: &[[usize; 3]],
) -> Result<Var> {
    let (nq, nk) = (q_pos.len(), k_pos.len());
    let mut total: Option<Var> = None;
    for d in 0..3 {
        let width = 2 * extent[d] - 1;
        let mut idx = Vec::with_capacity(heads * nq * nk);
        for h in 0..heads {
            for qp in q_pos {
                for kp in k_pos {
                    let off = qp[d] + extent[d] - 1 - kp[d];
                    debug_assert!(off < width);
                    idx.push(h * width + off);
                }
            }
        }
        let flat = tape.reshape(tables[d], &[heads * width])?;
        let b = tape.index_select(flat, 0, &idx)?;
        let b = tape.reshape(b, &[heads, nq, nk])?;
        total = Some(match total {
            Some(t) => tape.add(t, b)?,
            None => b,
        });
    }
    Ok(total.expect("three axes"))
}

/// Positions of a strided output grid in input coordinates.
pub fn strided_positions(out: Grid, stride: [usize; 3]) -> Vec<[usize; 3]> {
    (0..out.iter().product())
        .map(|i| {
            let c = coord_of(out, i);
            [0, 1, 2].map(|d| c[d] * stride[d])
        })
        .collect()
}

fn relpos_specs(out: &mut Vec<ParamSpec>, prefix: &str, heads: usize, extent: Grid) {
    for (d, axis) in ["t", "h", "w"].iter().enumerate() {
        out.push(ParamSpec::new(
            format!("{prefix}.rel_{axis}"),
            &[heads, 2 * extent[d] - 1],
            Init::TruncNormal(WEIGHT_STD),
        ));
    }
}

fn relpos_tables(p: &Bound, prefix: &str) -> [Var; 3] {
    ["t", "h", "w"].map(|a| p.get(&format!("{prefix}.rel_{a}")))
}

fn dw_spec(out: &mut Vec<ParamSpec>, name: String, c: usize, k: [usize; 3]) {
    out.push(ParamSpec::new(name, &[c, k[0], k[1], k[2], 1], Init::CenterTap(CONV_NOISE)));
}

pub fn block_specs(out: &mut Vec<ParamSpec>, cfg: &MViTConfig, b: &MBlockPlan) {
    let prefix = format!("blk{}", b.index);
    let (ci, co) = (b.c_in, b.c_out);
    layers::norm_specs(out, &format!("{prefix}.ln1"), ci);
    match b.kind {
        BlockKind::PoolingAttention => {
            layers::linear_specs(out, &format!("{prefix}.qkv"), ci, 3 * co);
            for (n, k) in [("q", cfg.kernel_q), ("k", cfg.kernel_kv), ("v", cfg.kernel_kv)] {
                dw_spec(out, format!("{prefix}.pool_{n}"), co, k);
            }
            if ci != co {
                layers::linear_specs(out, &format!("{prefix}.res"), ci, co);
            }
        }
        BlockKind::SemanticAttention => {
            let spm_cfg = cfg.spm.as_ref().expect("semantic block has an SPM");
            let m = spm_cfg.tokens_per_window();
            for n in ["q", "k", "v"] {
                layers::linear_specs(out, &format!("{prefix}.{n}"), ci, co);
            }
            dw_spec(out, format!("{prefix}.pool_q"), co, cfg.kernel_q);
            dw_spec(out, format!("{prefix}.pool_k"), m * co, cfg.kernel_kv);
            dw_spec(out, format!("{prefix}.pool_v"), m * co, cfg.kernel_kv);
            spm::spm_specs(out, &format!("{prefix}.spm"), spm_cfg, ci);
        }
    }
    relpos_specs(out, &prefix, b.heads, b.grid_in);
    layers::linear_specs(out, &format!("{prefix}.proj"), co, co);
    layers::norm_specs(out, &format!("{prefix}.ln2"), co);
    layers::mlp_specs(out, &format!("{prefix}.mlp"), co, cfg.mlp_ratio);
}

fn finish_block(tape: &Tape, p: &Bound, prefix: &str, res: Var, attended: Var, q: Var) -> Result<Var> {
    let o = tape.add(attended, q)?;
    let o = layers::fc(tape, p, &format!("{prefix}.proj"), o)?;
    let x = tape.add(res, o)?;
    let h = layers::norm(tape, p, &format!("{prefix}.ln2"), x)?;
    let h = layers::mlp(tape, p, &format!("{prefix}.mlp"), h)?;
    Ok(tape.add(x, h)?)
}

/// Pooling attention: `FC_o(q + softmax(α·q·kᵀ + relpos)·v)` over
/// conv-pooled q/k/v, plus the pooled residual and MLP.
///
/// Returns the `[N_q, C_out]` output and the attention weights.
pub fn conv_attn_pool_block(tape: &Tape, p: &Bound, x: Var, b: &MBlockPlan) -> Result<(Var, Var)> {
    if b.kind != BlockKind::PoolingAttention {
        return Err(CoreError::Argument(format!("block {} is not a pooling block", b.index)));
    }
    let prefix = format!("blk{}", b.index);
    let co = b.c_out;
    let h = layers::norm(tape, p, &format!("{prefix}.ln1"), x)?;
    let qkv = layers::fc(tape, p, &format!("{prefix}.qkv"), h)?;
    let mut pooled = Vec::with_capacity(3);
    for (i, (n, stride)) in [("q", b.q_stride), ("k", b.kv_stride), ("v", b.kv_stride)].into_iter().enumerate() {
        let t = tape.slice(qkv, 1, i * co, co)?;
        pooled.push(conv_pool(tape, t, b.grid_in, p.get(&format!("{prefix}.pool_{n}")), stride)?);
    }
    let (q, k, v) = (pooled[0], pooled[1], pooled[2]);
    let bias = relpos_bias(
        tape,
        relpos_tables(p, &prefix),
        b.heads,
        b.grid_in,
        &strided_positions(b.grid_q, b.q_stride),
        &strided_positions(b.grid_kv, b.kv_stride),
    )?;
    let (attended, attn) = layers::attention(tape, q, k, v, b.heads, Some(bias))?;
    let mut res = x;
    if b.q_stride != [1, 1, 1] {
        res = reduce_pool(tape, res, Some(b.grid_in), b.q_stride, PoolKind::Max)?;
    }
    if b.c_in != b.c_out {
        res = layers::fc(tape, p, &format!("{prefix}.res"), res)?;
    }
    Ok((finish_block(tape, p, &prefix, res, attended, q)?, attn))
}

/// Semantic attention: full-resolution queries attend to conv-pooled
/// supertokens arranged on the window grid with `M·C` channels.
///
/// Returns the output, the attention weights and the SPM record.
pub fn semantic_attention_block(
    tape: &Tape,
    p: &Bound,
    x: Var,
    b: &MBlockPlan,
    spm_cfg: &SpmConfig,
) -> Result<(Var, Var, SpmRecord)> {
    if b.kind != BlockKind::SemanticAttention {
        return Err(CoreError::Argument(format!("block {} is not a semantic block", b.index)));
    }
    let prefix = format!("blk{}", b.index);
    let c = b.c_out;
    let m = spm_cfg.tokens_per_window();
    let h = layers::norm(tape, p, &format!("{prefix}.ln1"), x)?;
    let q = layers::fc(tape, p, &format!("{prefix}.q"), h)?;
    let q = conv_pool(tape, q, b.grid_in, p.get(&format!("{prefix}.pool_q")), [1, 1, 1])?;
    let sem = spm::spm_forward(tape, p, &format!("{prefix}.spm"), h, Some(b.grid_in), spm_cfg)?;
    let wg = sem.record.partition.window_grid();
    debug_assert_eq!(wg, b.grid_kv);
    let n_kv = b.kv_tokens();
    let mut kv = Vec::with_capacity(2);
    for n in ["k", "v"] {
        let t = layers::fc(tape, p, &format!("{prefix}.{n}"), sem.tokens)?;
        let t = tape.reshape(t, &[wg.iter().product(), m * c])?;
        let t = conv_pool(tape, t, wg, p.get(&format!("{prefix}.pool_{n}")), [1, 1, 1])?;
        kv.push(tape.reshape(t, &[n_kv, c])?);
    }
    let part = &sem.record.partition;
    let k_pos: Vec<[usize; 3]> = (0..n_kv).map(|t| part.center(t / m)).collect();
    let bias = relpos_bias(
        tape,
        relpos_tables(p, &prefix),
        b.heads,
        b.grid_in,
        &strided_positions(b.grid_q, [1, 1, 1]),
        &k_pos,
    )?;
    let (attended, attn) = layers::attention(tape, q, kv[0], kv[1], b.heads, Some(bias))?;
    let out = finish_block(tape, p, &prefix, x, attended, q)?;
    Ok((out, attn, sem.record))
}

#[derive(Default)]
pub struct MViTTrace {
    pub blocks: Vec<Var>,
    pub grids: Vec<Grid>,
    pub attention: Vec<Var>,
    /// `(block index, record)` for semantic blocks.
    pub spm: Vec<(usize, SpmRecord)>,
}

pub struct MViTOutput {
    /// `[1, num_classes]`.
    pub logits: Var,
    pub trace: MViTTrace,
}

#[derive(Debug, Clone)]
pub struct MViT {
    pub cfg: MViTConfig,
    pub plan: MViTPlan,
}

impl MViT {
    pub fn new(cfg: MViTConfig) -> Result<Self> {
        let plan = cfg.plan()?;
        Ok(MViT { cfg, plan })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c0 = self.cfg.stages[0].channels;
        let k = self.cfg.stem.kernel;
        let mut out = vec![
            ParamSpec::new("stem.w", &[c0, k[0], k[1], k[2], self.cfg.input[3]], Init::TruncNormal(WEIGHT_STD)),
            ParamSpec::new("stem.b", &[c0], Init::Zeros),
        ];
        for b in &self.plan.blocks {
            block_specs(&mut out, &self.cfg, b);
        }
        let c_last = self.plan.blocks.last().map(|b| b.c_out).unwrap_or(c0);
        layers::norm_specs(&mut out, "norm", c_last);
        layers::linear_specs(&mut out, "head", c_last, self.cfg.num_classes);
        out
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        ParamSet::init(&self.param_specs(), seed)
    }

    /// Overlapping conv patchify: `[F, H, W, Ch] -> [N, C_0]`.
    pub fn stem(&self, tape: &Tape, p: &Bound, video: &DArray) -> Result<Var> {
        if video.shape() != self.cfg.input {
            return Err(CoreError::Argument(format!(
                "clip shape {:?}, model expects {:?}",
                video.shape(),
                self.cfg.input
            )));
        }
        let v = tape.constant(video.clone());
        let y = tape.grouped_conv3d(v, p.get("stem.w"), 1, self.cfg.stem.stride)?;
        let y = tape.add(y, p.get("stem.b"))?;
        let n = self.plan.stem_grid.iter().product();
        Ok(tape.reshape(y, &[n, self.cfg.stages[0].channels])?)
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, video: &DArray) -> Result<MViTOutput> {
        let mut x = self.stem(tape, p, video)?;
        let mut trace = MViTTrace::default();
        for b in &self.plan.blocks {
            let (y, attn) = match b.kind {
                BlockKind::PoolingAttention => conv_attn_pool_block(tape, p, x, b)?,
                BlockKind::SemanticAttention => {
                    let cfg = self.cfg.spm.as_ref().expect("validated");
                    let (y, attn, rec) = semantic_attention_block(tape, p, x, b, cfg)?;
                    trace.spm.push((b.index, rec));
                    (y, attn)
                }
            };
            x = y;
            trace.blocks.push(y);
            trace.grids.push(b.grid_q);
            trace.attention.push(attn);
        }
        let c = tape.shape(x)[1];
        let h = layers::norm(tape, p, "norm", x)?;
        let pooled = tape.mean(h, 0)?;
        let pooled = tape.reshape(pooled, &[1, c])?;
        let logits = layers::fc(tape, p, "head", pooled)?;
        Ok(MViTOutput { logits, trace })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    #[test]
    fn forward_grids_match_plan() {
        let model = MViT::new(presets::mvit_tiny_semantic()).unwrap();
        let params = model.init_params(1).unwrap();
        let tape = Tape::new();
        let p = params.bind(&tape);
        let clip = DArray::from_fn(&[8, 32, 32, 1], |i| ((i * 31) % 17) as f64 / 17.0);
        let out = model.forward(&tape, &p, &clip).unwrap();
        for (i, b) in model.plan.blocks.iter().enumerate() {
            let s = tape.shape(out.trace.blocks[i]);
            assert_eq!(s, vec![b.q_tokens(), b.c_out], "block {}", b.index);
        }
        assert_eq!(out.trace.spm.iter().map(|r| r.0).collect::<Vec<_>>(), vec![4, 8]);
        assert_eq!(tape.shape(out.logits), vec![1, 8]);
    }

    #[test]
    fn strided_positions_are_input_coordinates() {
        let pos = strided_positions([1, 2, 2], [1, 2, 2]);
        assert_eq!(pos, vec![[0, 0, 0], [0, 0, 2], [0, 2, 0], [0, 2, 2]]);
    }
}
