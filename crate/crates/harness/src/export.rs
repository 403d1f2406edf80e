//! Score heatmaps, pool-membership images and token-embedding dumps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use svt_core::config::SpmVariant;
use svt_core::spm::SpmRecord;
use svt_core::{Grid, ParamSet, SpmConfig};
use svt_tensor::Tape;

use crate::data::Clip;
use crate::error::{HarnessError, Result};
use crate::model::{bind_frozen, Model};

/// Tolerance on the per-pool weight sums.
pub const SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, one byte per pixel.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = || HarnessError::Argument("not a binary PGM with maxval 255".into());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let (width, height) = (num(fields[1])?, num(fields[2])?);
        if fields[0] != "P5" || fields[3] != "255" || bytes.len() != pos + 1 + width * height {
            return Err(bad());
        }
        Ok(GrayImage {
            width,
            height,
            pixels: bytes[pos + 1..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| HarnessError::io(path, e))
    }
}

/// Min-max scaling to bytes; a constant input maps to mid-gray.
pub fn normalize(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values.iter().map(|v| (255.0 * (v - lo) / (hi - lo)).round() as u8).collect()
}

/// One `H x W` image per temporal slice of `grid`, normalized jointly.
pub fn heatmap_images(values: &[f64], grid: Grid) -> Vec<GrayImage> {
    assert_eq!(values.len(), grid.iter().product::<usize>(), "values cover the grid");
    let pixels = normalize(values);
    let plane = grid[1] * grid[2];
    pixels
        .chunks(plane)
        .map(|p| GrayImage {
            width: grid[2],
            height: grid[1],
            pixels: p.to_vec(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MapSource {
    /// Mean compressed SPM score over prototypes.
    Spm,
    /// Mean attention each token receives, over heads and queries.
    Attention,
}

/// Re-checks the pooling laws on an exported record: every (prototype,
/// window) pool has an active token, zero weight exactly off the mask, and
/// weights summing to one per pool (to `K` per window for neighbor groups).
pub fn check_record(rec: &SpmRecord, cfg: &SpmConfig) -> Result<()> {
    let part = &rec.partition;
    let n = part.n_tokens();
    let per_window = match cfg.variant {
        SpmVariant::Elitism => 1.0,
        SpmVariant::Neighbor => cfg.neighbor_groups.unwrap_or(1) as f64,
    };
    let fail = |msg: String| Err(HarnessError::Contract(msg));
    for (h, head) in rec.heads.iter().enumerate() {
        let m = head.weights.shape()[0];
        for i in 0..m {
            let row = &head.weights.data()[i * n..(i + 1) * n];
            for w in 0..part.n_windows() {
                let members = part.members(w);
                let sum: f64 = members.iter().map(|&j| row[j]).sum();
                if (sum - per_window).abs() > SUM_TOL {
                    return fail(format!("head {h} prototype {i} window {w}: weights sum to {sum}"));
                }
                if let Some(mask) = &head.mask {
                    if !members.iter().any(|&j| mask.is_active(i, j)) {
                        return fail(format!("head {h} prototype {i} window {w}: empty pool"));
                    }
                    if mask.fallback_applied(i, w) && !members.iter().all(|&j| mask.is_active(i, j)) {
                        return fail(format!("head {h} prototype {i} window {w}: partial fallback"));
                    }
                    if members.iter().any(|&j| (row[j] > 0.0) != mask.is_active(i, j)) {
                        return fail(format!("head {h} prototype {i} window {w}: weight off the mask"));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Grayscale weights of one (prototype, window) pool over the whole token
/// grid, frames side by side. Members scale by the pool maximum; active
/// members never round to black; everything else is 0.
pub fn membership_image(rec: &SpmRecord, head: usize, prototype: usize, window: usize, grid: Grid) -> GrayImage {
    let n = rec.partition.n_tokens();
    let row = &rec.heads[head].weights.data()[prototype * n..(prototype + 1) * n];
    let members = rec.partition.members(window);
    let max = members.iter().map(|&j| row[j]).fold(0.0, f64::max);
    let (t, h, w) = (grid[0], grid[1], grid[2]);
    let mut pixels = vec![0u8; n];
    for &j in members {
        if row[j] > 0.0 {
            let (tt, rest) = (j / (h * w), j % (h * w));
            let (y, x) = (rest / w, rest % w);
            pixels[y * (t * w) + tt * w + x] = ((255.0 * row[j] / max).round() as u8).max(1);
        }
    }
    GrayImage {
        width: t * w,
        height: h,
        pixels,
    }
}

/// Grid of the SPM input; a flat row when the sequence has none.
fn record_grid(model: &Model, layer: usize, rec: &SpmRecord) -> Grid {
    rec.partition
        .grid
        .or_else(|| model.grid_at(layer))
        .unwrap_or([1, 1, rec.partition.n_tokens()])
}

fn spm_record(model: &Model, params: &ParamSet, clip: &Clip, layer: usize) -> Result<(SpmRecord, SpmConfig)> {
    let Some(cfg) = model.spm_config(layer).cloned() else {
        return Err(HarnessError::Argument(format!("layer {layer} hosts no SPM")));
    };
    let tape = Tape::new();
    let out = model.forward(&tape, &bind_frozen(params, &tape), &clip.video)?;
    let rec = out
        .spm
        .into_iter()
        .find(|(l, _)| *l == layer)
        .map(|(_, r)| r)
        .ok_or_else(|| HarnessError::Contract(format!("layer {layer} produced no SPM record")))?;
    check_record(&rec, &cfg)?;
    Ok((rec, cfg))
}

/// Per-token values of a heatmap and the grid they live on.
pub fn token_map(model: &Model, params: &ParamSet, clip: &Clip, layer: usize, source: MapSource) -> Result<(Vec<f64>, Grid)> {
    match source {
        MapSource::Spm => {
            let (rec, _) = spm_record(model, params, clip, layer)?;
            let grid = record_grid(model, layer, &rec);
            Ok((rec.mean_score(), grid))
        }
        MapSource::Attention => {
            if layer == 0 || layer > model.depth() {
                return Err(HarnessError::Argument(format!(
                    "layer {layer} outside 1..={}",
                    model.depth()
                )));
            }
            let grid = match model {
                Model::Vit(_) => model.grid_at(layer),
                Model::Mvit(m) => {
                    let b = &m.plan.blocks[layer - 1];
                    (b.spm.is_none()).then_some(b.grid_kv)
                }
            };
            let tape = Tape::new();
            let out = model.forward(&tape, &bind_frozen(params, &tape), &clip.video)?;
            let attn = tape.value(out.attention[layer - 1]).clone();
            let (h, q, k) = (attn.shape()[0], attn.shape()[1], attn.shape()[2]);
            let grid = match (model, grid) {
                (_, Some(g)) if g.iter().product::<usize>() == k => g,
                (Model::Vit(_), _) => [1, 1, k],
                (Model::Mvit(_), _) => {
                    return Err(HarnessError::Argument(format!(
                        "keys of layer {layer} are pooled supertokens, not grid tokens"
                    )))
                }
            };
            let mut received = vec![0.0; k];
            for row in attn.data().chunks(k) {
                received.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            received.iter_mut().for_each(|v| *v /= (h * q) as f64);
            Ok((received, grid))
        }
    }
}

/// Writes `{prefix}_l{layer}_t{t}.pgm` per temporal slice.
pub fn export_score_heatmaps(
    model: &Model,
    params: &ParamSet,
    clip: &Clip,
    layer: usize,
    source: MapSource,
    dir: &Path,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    let (values, grid) = token_map(model, params, clip, layer, source)?;
    let mut paths = Vec::new();
    for (t, img) in heatmap_images(&values, grid).iter().enumerate() {
        let path = dir.join(format!("{prefix}_l{layer}_t{t}.pgm"));
        img.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Membership images of every (head, prototype, window) pool at `layer`.
pub fn pool_membership(model: &Model, params: &ParamSet, clip: &Clip, layer: usize) -> Result<Vec<((usize, usize, usize), GrayImage)>> {
    let (rec, _) = spm_record(model, params, clip, layer)?;
    let grid = record_grid(model, layer, &rec);
    let mut out = Vec::new();
    for (h, head) in rec.heads.iter().enumerate() {
        for i in 0..head.weights.shape()[0] {
            for w in 0..rec.partition.n_windows() {
                out.push(((h, i, w), membership_image(&rec, h, i, w, grid)));
            }
        }
    }
    Ok(out)
}

/// Writes `{prefix}_l{layer}_h{h}_p{i}_w{w}.pgm` per pool.
pub fn export_pool_membership(
    model: &Model,
    params: &ParamSet,
    clip: &Clip,
    layer: usize,
    dir: &Path,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for ((h, i, w), img) in pool_membership(model, params, clip, layer)? {
        let path = dir.join(format!("{prefix}_l{layer}_h{h}_p{i}_w{w}.pgm"));
        img.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

pub const EMBEDDING_HEADER: &str = "clip,class,layer,token,values";

/// Tokens leaving each requested layer. Trailing columns hold the `C`
/// values in scientific notation with 17 significant digits, which
/// round-trips every `f64`.
pub fn export_token_embeddings(model: &Model, params: &ParamSet, clips: &[(usize, &Clip)], layers: &[usize]) -> Result<String> {
    if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > model.depth()) {
        return Err(HarnessError::Argument(format!("layer {bad} outside 1..={}", model.depth())));
    }
    let mut out = String::from(EMBEDDING_HEADER);
    out.push('\n');
    for &(id, clip) in clips {
        let tape = Tape::new();
        let fwd = model.forward(&tape, &bind_frozen(params, &tape), &clip.video)?;
        for &l in layers {
            let x = tape.value(fwd.layers[l - 1]);
            let c = x.shape()[1];
            for (t, row) in x.data().chunks(c).enumerate() {
                let _ = write!(out, "{id},{},{l},{t}", clip.label);
                for v in row {
                    let _ = write!(out, ",{v:.16e}");
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub clip: usize,
    pub class: usize,
    pub layer: usize,
    pub token: usize,
    pub values: Vec<f64>,
}

pub fn read_embeddings(text: &str) -> Result<Vec<EmbeddingRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(EMBEDDING_HEADER) {
        return Err(HarnessError::Argument("missing embedding header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || HarnessError::Argument(format!("embedding row {}: {line:?}", i + 1));
            let mut f = line.split(',');
            let mut int = || f.next().and_then(|s| s.parse::<usize>().ok()).ok_or_else(bad);
            let (clip, class, layer, token) = (int()?, int()?, int()?, int()?);
            let values = f.map(|s| s.parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
            Ok(EmbeddingRow {
                clip,
                class,
                layer,
                token,
                values,
            })
        })
        .collect()
}
