//! Semantic pooling: score tokens against learned prototypes, gate them by an
//! elitism threshold, and softmax-pool each (prototype, window) slice into a
//! supertoken.
//!
//! Supertokens are laid out window-major, prototype-minor (and group-minor
//! for neighbor grouping). Within a slice, tokens are gathered in descending
//! raw-score order with ties to the lower index, which fixes the summation
//! order independently of how tokens are arranged inside the window.

use svt_tensor::{sigmoid, topk_of, DArray, Tape, Var};

use crate::config::{SpmConfig, SpmVariant};
use crate::error::{CoreError, Result};
use crate::grid::{Grid, WindowPartition};
use crate::layers;
use crate::params::{Bound, Init, ParamSpec};

/// Raw scores `S = E·Xᵀ` of shape `[M, N]`.
pub fn compute_scores(tape: &Tape, x: Var, prototypes: Var) -> Result<Var> {
    let (xs, es) = (tape.shape(x), tape.shape(prototypes));
    if xs.len() != 2 || es.len() != 2 || xs[1] != es[1] {
        return Err(CoreError::Config(format!(
            "token width {xs:?} does not match prototype width {es:?}"
        )));
    }
    let xt = tape.transpose(x, 0, 1)?;
    Ok(tape.matmul(prototypes, xt)?)
}

/// Elementwise `sigmoid(S)`.
pub fn compress(scores: &DArray) -> DArray {
    scores.map(sigmoid)
}

/// Survivorship of each (prototype, token) pair after the elitism gate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveMask {
    pub prototypes: usize,
    pub tokens: usize,
    pub n_windows: usize,
    /// `[M, N]` row-major.
    pub mask: Vec<bool>,
    /// `[M, N_win]` row-major.
    pub fallback: Vec<bool>,
}

impl ActiveMask {
    pub fn is_active(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.tokens + j]
    }

    pub fn fallback_applied(&self, i: usize, w: usize) -> bool {
        self.fallback[i * self.n_windows + w]
    }

    pub fn any_fallback(&self) -> bool {
        self.fallback.contains(&true)
    }
}

/// The bare gate `sigmoid(s) > theta`, before any fallback.
pub fn threshold_mask(scores: &DArray, theta: f64) -> Vec<bool> {
    scores.data().iter().map(|&s| sigmoid(s) > theta).collect()
}

/// Applies the elitism gate, then activates every token of any
/// (prototype, window) slice left empty.
pub fn elitism_filter(scores: &DArray, theta: f64, part: &WindowPartition) -> ActiveMask {
    let (m, n) = (scores.shape()[0], scores.shape()[1]);
    let mut mask = threshold_mask(scores, theta);
    let mut fallback = vec![false; m * part.n_windows()];
    for i in 0..m {
        for w in 0..part.n_windows() {
            let members = part.members(w);
            if members.iter().all(|&j| !mask[i * n + j]) {
                members.iter().for_each(|&j| mask[i * n + j] = true);
                fallback[i * part.n_windows() + w] = true;
            }
        }
    }
    ActiveMask {
        prototypes: m,
        tokens: n,
        n_windows: part.n_windows(),
        mask,
        fallback,
    }
}

/// Members of window `w` ordered by descending score under prototype `i`.
fn ranked(scores: &DArray, i: usize, members: &[usize]) -> Vec<usize> {
    let n = scores.shape()[1];
    let s = scores.data();
    topk_of(members.len(), members.len(), |p| s[i * n + members[p]])
        .into_iter()
        .map(|p| members[p])
        .collect()
}

/// Softmax-pools runs of `len` consecutive entries of `order`.
///
/// `order` lists `(prototype, token)` pairs; every `len` entries form one
/// output row. Returns `[rows, C]` and the `[rows, 1, len]` weight node.
fn pool_gathered(
    tape: &Tape,
    x: Var,
    s: Var,
    order: &[(usize, usize)],
    len: usize,
    mask: Option<Vec<bool>>,
) -> Result<(Var, Var)> {
    let (n, c) = {
        let sh = tape.shape(x);
        (sh[0], sh[1])
    };
    let rows = order.len() / len;
    let m = tape.shape(s)[0];
    let xi: Vec<usize> = order.iter().map(|&(_, j)| j).collect();
    let si: Vec<usize> = order.iter().map(|&(i, j)| i * n + j).collect();
    let xg = tape.index_select(x, 0, &xi)?;
    let xg = tape.reshape(xg, &[rows, len, c])?;
    let sf = tape.reshape(s, &[m * n])?;
    let sg = tape.index_select(sf, 0, &si)?;
    let sg = tape.reshape(sg, &[rows, 1, len])?;
    let weights = match mask {
        Some(mk) => tape.masked_softmax(sg, &mk, 2)?,
        None => tape.softmax(sg, 2)?,
    };
    let z = tape.matmul(weights, xg)?;
    Ok((tape.reshape(z, &[rows, c])?, weights))
}

/// Scatters gathered `[rows, 1, len]` weights back to a `[M, N]` map.
fn weight_map(weights: &DArray, order: &[(usize, usize)], m: usize, n: usize) -> DArray {
    let mut out = DArray::zeros(&[m, n]);
    for (&(i, j), &w) in order.iter().zip(weights.data()) {
        out.data_mut()[i * n + j] = w;
    }
    out
}

/// Elitism pooling: `[N_win * M, C]` supertokens and the `[M, N]` weight map.
pub fn pool_supertokens(
    tape: &Tape,
    x: Var,
    s: Var,
    mask: &ActiveMask,
    part: &WindowPartition,
) -> Result<(Var, DArray)> {
    let scores = tape.value(s).clone();
    let (m, n) = (scores.shape()[0], scores.shape()[1]);
    if n != part.n_tokens() || mask.mask.len() != m * n {
        return Err(CoreError::Contract(format!(
            "scores {:?} do not match partition of {} tokens",
            scores.shape(),
            part.n_tokens()
        )));
    }
    let mut order = Vec::with_capacity(m * n);
    for w in 0..part.n_windows() {
        for i in 0..m {
            let members = part.members(w);
            if !members.iter().any(|&j| mask.is_active(i, j)) {
                return Err(CoreError::Contract(format!(
                    "prototype {i} has no active token in window {w}"
                )));
            }
            order.extend(ranked(&scores, i, members).into_iter().map(|j| (i, j)));
        }
    }
    let active: Vec<bool> = order.iter().map(|&(i, j)| mask.is_active(i, j)).collect();
    let (z, weights) = pool_gathered(tape, x, s, &order, part.window_len(), Some(active))?;
    let wm = weight_map(&tape.value(weights), &order, m, n);
    Ok((z, wm))
}

/// Neighbor grouping: per (prototype, window), split the score-ranked tokens
/// into `groups` contiguous equal groups and softmax-pool each one.
pub fn neighbor_pool(tape: &Tape, x: Var, s: Var, part: &WindowPartition, groups: usize) -> Result<(Var, DArray)> {
    let scores = tape.value(s).clone();
    let (m, n) = (scores.shape()[0], scores.shape()[1]);
    let len = part.window_len();
    if groups == 0 || len % groups != 0 {
        return Err(CoreError::Config(format!("window of {len} tokens not divisible into {groups} groups")));
    }
    let mut order = Vec::with_capacity(m * n);
    for w in 0..part.n_windows() {
        for i in 0..m {
            order.extend(ranked(&scores, i, part.members(w)).into_iter().map(|j| (i, j)));
        }
    }
    let (z, weights) = pool_gathered(tape, x, s, &order, len / groups, None)?;
    let wm = weight_map(&tape.value(weights), &order, m, n);
    Ok((z, wm))
}

/// Indices of the `k` tokens with the highest mean compressed score over all
/// prototypes of all heads, in ascending index order.
pub fn keep_top_k(compressed: &[DArray], k: usize) -> Result<Vec<usize>> {
    let n = compressed.first().map(|c| c.shape()[1]).unwrap_or(0);
    if k > n {
        return Err(CoreError::Config(format!("cannot keep {k} of {n} tokens")));
    }
    let rows: usize = compressed.iter().map(|c| c.shape()[0]).sum();
    let mut mean = vec![0.0; n];
    for c in compressed {
        for row in c.data().chunks(n) {
            mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
    }
    mean.iter_mut().for_each(|v| *v /= rows as f64);
    let mut kept = topk_of(n, k, |j| mean[j]);
    kept.sort_unstable();
    Ok(kept)
}

/// Per-head diagnostics of one SPM application.
#[derive(Debug, Clone)]
pub struct SpmHeadRecord {
    /// Raw scores `[M, N]`.
    pub scores: DArray,
    /// Elitism only.
    pub mask: Option<ActiveMask>,
    /// Pooling weight of each token in its (prototype, window[, group]) pool.
    pub weights: DArray,
}

#[derive(Debug, Clone)]
pub struct SpmRecord {
    pub partition: WindowPartition,
    pub heads: Vec<SpmHeadRecord>,
    pub kept: Vec<usize>,
    pub tokens_out: usize,
}

impl SpmRecord {
    /// Mean compressed score per token over every prototype of every head.
    pub fn mean_score(&self) -> Vec<f64> {
        let n = self.partition.n_tokens();
        let mut out = vec![0.0; n];
        let mut rows = 0;
        for h in &self.heads {
            let c = compress(&h.scores);
            for row in c.data().chunks(n) {
                out.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                rows += 1;
            }
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        out
    }

    /// Whether each token carries nonzero weight in at least one pool.
    pub fn coverage(&self) -> Vec<bool> {
        let n = self.partition.n_tokens();
        let mut out = vec![false; n];
        for h in &self.heads {
            for row in h.weights.data().chunks(n) {
                out.iter_mut().zip(row).for_each(|(c, &w)| *c |= w > 0.0);
            }
        }
        out
    }
}

pub struct SpmOutput {
    /// `[N_r, C]`: kept originals, then supertokens.
    pub tokens: Var,
    pub record: SpmRecord,
}

fn proto_name(prefix: &str, h: usize) -> String {
    format!("{prefix}.proto.{h}")
}

pub fn spm_specs(out: &mut Vec<ParamSpec>, prefix: &str, cfg: &SpmConfig, c: usize) {
    let d = c / cfg.heads;
    for h in 0..cfg.heads {
        out.push(ParamSpec::new(
            proto_name(prefix, h),
            &[cfg.prototypes, d],
            Init::Normal((d as f64).powf(-0.5)),
        ));
    }
    if cfg.output_projection {
        layers::linear_specs(out, &format!("{prefix}.out"), c, c);
    }
}

/// Full module over `x: [N, C]` with explicitly supplied parameters.
///
/// `prototypes` holds one `[M, C / heads]` node per head; `projection` is the
/// optional `(w, b)` output map.
pub fn spm_apply(
    tape: &Tape,
    x: Var,
    grid: Option<Grid>,
    cfg: &SpmConfig,
    prototypes: &[Var],
    projection: Option<(Var, Var)>,
) -> Result<SpmOutput> {
    let (n, c) = {
        let s = tape.shape(x);
        if s.len() != 2 {
            return Err(CoreError::Config(format!("SPM expects [N, C] tokens, got {s:?}")));
        }
        (s[0], s[1])
    };
    if let Some(g) = grid {
        if g.iter().product::<usize>() != n {
            return Err(CoreError::Contract(format!("grid {g:?} does not hold {n} tokens")));
        }
    }
    let plan = cfg.resolve(n, grid, c)?;
    if prototypes.len() != cfg.heads {
        return Err(CoreError::Config(format!(
            "{} prototype sets for {} heads",
            prototypes.len(),
            cfg.heads
        )));
    }
    // A global window over a gridded sequence keeps the grid so the window
    // center stays meaningful.
    let part = match (grid, plan.window) {
        (Some(g), None) => WindowPartition::new(g, g)?,
        _ => WindowPartition::resolve(n, grid, plan.window)?,
    };
    let d = c / cfg.heads;
    let mut pooled = Vec::with_capacity(cfg.heads);
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut compressed = Vec::with_capacity(cfg.heads);
    for (h, &e) in prototypes.iter().enumerate() {
        let xh = if cfg.heads == 1 { x } else { tape.slice(x, 1, h * d, d)? };
        let s = compute_scores(tape, xh, e)?;
        let scores = tape.value(s).clone();
        compressed.push(compress(&scores));
        let (z, mask, weights) = match cfg.variant {
            SpmVariant::Elitism => {
                let mask = elitism_filter(&scores, cfg.threshold, &part);
                let (z, w) = pool_supertokens(tape, xh, s, &mask, &part)?;
                (z, Some(mask), w)
            }
            SpmVariant::Neighbor => {
                let k = cfg.neighbor_groups.unwrap_or(1);
                let (z, w) = neighbor_pool(tape, xh, s, &part, k)?;
                (z, None, w)
            }
        };
        pooled.push(z);
        heads.push(SpmHeadRecord { scores, mask, weights });
    }
    let z = if pooled.len() == 1 { pooled[0] } else { tape.concat(&pooled, 1)? };
    let kept = keep_top_k(&compressed, cfg.keep_top)?;
    let mut out = if kept.is_empty() {
        z
    } else {
        let xk = tape.index_select(x, 0, &kept)?;
        tape.concat(&[xk, z], 0)?
    };
    if let Some((w, b)) = projection {
        out = tape.linear(out, w, Some(b))?;
    }
    debug_assert_eq!(tape.shape(out)[0], plan.tokens_out);
    Ok(SpmOutput {
        tokens: out,
        record: SpmRecord {
            partition: part,
            heads,
            kept,
            tokens_out: plan.tokens_out,
        },
    })
}

/// [`spm_apply`] with parameters looked up under `prefix`.
pub fn spm_forward(
    tape: &Tape,
    p: &Bound,
    prefix: &str,
    x: Var,
    grid: Option<Grid>,
    cfg: &SpmConfig,
) -> Result<SpmOutput> {
    let protos: Vec<Var> = (0..cfg.heads).map(|h| p.get(&proto_name(prefix, h))).collect();
    let proj = cfg
        .output_projection
        .then(|| (p.get(&format!("{prefix}.out.w")), p.get(&format!("{prefix}.out.b"))));
    spm_apply(tape, x, grid, cfg, &protos, proj)
}
