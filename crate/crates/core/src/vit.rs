//! Single-scale video transformer with tubelet embedding and scheduled token
//! reducers between blocks.

use svt_tensor::{DArray, PoolKind, Tape, Var};

use crate::config::{Reducer, ViTConfig, ViTPlan};
use crate::error::{CoreError, Result};
use crate::grid::Grid;
use crate::layers::{self, WEIGHT_STD};
use crate::params::{Bound, Init, ParamSet, ParamSpec};
use crate::spm::{self, SpmRecord};

/// Pre-norm attention block: `x + MHSA(LN x)`, then `+ MLP(LN ·)`.
///
/// Returns the block output and its `[heads, N, N]` attention weights.
pub fn mhsa_block(tape: &Tape, p: &Bound, prefix: &str, x: Var, heads: usize) -> Result<(Var, Var)> {
    let c = tape.shape(x)[1];
    let h = layers::norm(tape, p, &format!("{prefix}.ln1"), x)?;
    let qkv = layers::fc(tape, p, &format!("{prefix}.qkv"), h)?;
    let q = tape.slice(qkv, 1, 0, c)?;
    let k = tape.slice(qkv, 1, c, c)?;
    let v = tape.slice(qkv, 1, 2 * c, c)?;
    let (o, attn) = layers::attention(tape, q, k, v, heads, None)?;
    let o = layers::fc(tape, p, &format!("{prefix}.proj"), o)?;
    let x = tape.add(x, o)?;
    let h = layers::norm(tape, p, &format!("{prefix}.ln2"), x)?;
    let h = layers::mlp(tape, p, &format!("{prefix}.mlp"), h)?;
    Ok((tape.add(x, h)?, attn))
}

pub fn block_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize, mlp_ratio: usize) {
    layers::norm_specs(out, &format!("{prefix}.ln1"), c);
    layers::linear_specs(out, &format!("{prefix}.qkv"), c, 3 * c);
    layers::linear_specs(out, &format!("{prefix}.proj"), c, c);
    layers::norm_specs(out, &format!("{prefix}.ln2"), c);
    layers::mlp_specs(out, &format!("{prefix}.mlp"), c, mlp_ratio);
}

/// Window mean or max over a gridded `[N, C]` sequence.
pub fn reduce_pool(tape: &Tape, x: Var, grid: Option<Grid>, window: [usize; 3], kind: PoolKind) -> Result<Var> {
    let Some(g) = grid else {
        return Err(CoreError::Config("pooling reducer needs a token grid".into()));
    };
    let c = tape.shape(x)[1];
    let xg = tape.reshape(x, &[g[0], g[1], g[2], c])?;
    let y = tape.pool3d(xg, window, kind)?;
    let n = tape.shape(y)[..3].iter().product();
    Ok(tape.reshape(y, &[n, c])?)
}

/// Cuts a `[frames, height, width, channels]` clip into flattened tubelets.
///
/// Tubelets are ordered raster-major over the token grid; each row lists its
/// voxels as `(t, h, w, channel)`.
pub fn patchify(video: &DArray, patch: [usize; 3]) -> Result<DArray> {
    let &[f, hh, ww, ch] = video.shape() else {
        return Err(CoreError::Config(format!("video must be [F, H, W, C], got {:?}", video.shape())));
    };
    let [pt, ph, pw] = patch;
    if f % pt != 0 || hh % ph != 0 || ww % pw != 0 {
        return Err(CoreError::Config(format!("video {:?} not divisible by patch {patch:?}", video.shape())));
    }
    let g = [f / pt, hh / ph, ww / pw];
    let pd = pt * ph * pw * ch;
    let n = g.iter().product::<usize>();
    let src = video.data();
    let mut out = Vec::with_capacity(n * pd);
    for gt in 0..g[0] {
        for gh in 0..g[1] {
            for gw in 0..g[2] {
                for t in 0..pt {
                    for h in 0..ph {
                        let row = ((gt * pt + t) * hh + gh * ph + h) * ww + gw * pw;
                        out.extend_from_slice(&src[row * ch..(row + pw) * ch]);
                    }
                }
            }
        }
    }
    Ok(DArray::new(vec![n, pd], out)?)
}

/// Intermediate values of one forward pass.
#[derive(Default)]
pub struct ViTTrace {
    /// Output of each block, before any reducer.
    pub blocks: Vec<Var>,
    /// `[heads, N, N]` attention of each block.
    pub attention: Vec<Var>,
    /// `(layer, tokens after the reducer)`.
    pub reduced: Vec<(usize, Var)>,
    pub spm: Vec<(usize, SpmRecord)>,
}

pub struct ViTOutput {
    /// `[1, num_classes]`.
    pub logits: Var,
    pub trace: ViTTrace,
}

#[derive(Debug, Clone)]
pub struct ViT {
    pub cfg: ViTConfig,
    pub plan: ViTPlan,
}

impl ViT {
    pub fn new(cfg: ViTConfig) -> Result<Self> {
        let plan = cfg.plan()?;
        Ok(ViT { cfg, plan })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.cfg.embed_dim;
        let n = self.plan.block_tokens[0];
        let mut out = Vec::new();
        layers::linear_specs(&mut out, "patch", self.plan.patch_dim, c);
        out.push(ParamSpec::new("pos", &[n, c], Init::TruncNormal(WEIGHT_STD)));
        for l in 1..=self.cfg.depth {
            block_specs(&mut out, &format!("blk{l}"), c, self.cfg.mlp_ratio);
            if let Some(entry) = self.cfg.spm_schedule.iter().find(|e| e.layer == l) {
                if let Reducer::Spm(s) = &entry.reducer {
                    spm::spm_specs(&mut out, &format!("spm{l}"), s, c);
                }
            }
        }
        layers::norm_specs(&mut out, "norm", c);
        layers::linear_specs(&mut out, "head", c, self.cfg.num_classes);
        out
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        ParamSet::init(&self.param_specs(), seed)
    }

    /// Tubelet projection plus positional embedding: `[N, Pd] -> [N, C]`.
    pub fn embed(&self, tape: &Tape, p: &Bound, patches: Var) -> Result<Var> {
        let x = layers::fc(tape, p, "patch", patches)?;
        Ok(tape.add(x, p.get("pos"))?)
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, video: &DArray) -> Result<ViTOutput> {
        if video.shape() != self.cfg.input {
            return Err(CoreError::Argument(format!(
                "clip shape {:?}, model expects {:?}",
                video.shape(),
                self.cfg.input
            )));
        }
        let patches = tape.constant(patchify(video, self.cfg.patch)?);
        let x = self.embed(tape, p, patches)?;
        self.forward_tokens(tape, p, x)
    }

    /// Blocks, reducers and classifier over embedded `[N, C]` tokens.
    pub fn forward_tokens(&self, tape: &Tape, p: &Bound, mut x: Var) -> Result<ViTOutput> {
        let mut trace = ViTTrace::default();
        let mut grid = Some(self.plan.grid);
        for l in 1..=self.cfg.depth {
            let (y, attn) = mhsa_block(tape, p, &format!("blk{l}"), x, self.cfg.heads)?;
            trace.blocks.push(y);
            trace.attention.push(attn);
            x = y;
            let Some(entry) = self.cfg.spm_schedule.iter().find(|e| e.layer == l) else {
                continue;
            };
            let rp = self
                .plan
                .reducers
                .iter()
                .find(|r| r.layer == l)
                .expect("plan covers the schedule");
            x = match &entry.reducer {
                Reducer::Spm(s) => {
                    let out = spm::spm_forward(tape, p, &format!("spm{l}"), x, grid, s)?;
                    trace.spm.push((l, out.record));
                    out.tokens
                }
                Reducer::AvgPool(w) => reduce_pool(tape, x, grid, *w, PoolKind::Avg)?,
                Reducer::MaxPool(w) => reduce_pool(tape, x, grid, *w, PoolKind::Max)?,
            };
            grid = rp.grid_out;
            trace.reduced.push((l, x));
        }
        let h = layers::norm(tape, p, "norm", x)?;
        let pooled = tape.mean(h, 0)?;
        let pooled = tape.reshape(pooled, &[1, self.cfg.embed_dim])?;
        let logits = layers::fc(tape, p, "head", pooled)?;
        Ok(ViTOutput { logits, trace })
    }
}
