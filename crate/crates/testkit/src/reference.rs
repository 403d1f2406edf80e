//! Naive loop implementations. Nothing here calls into the tape; values are
//! computed directly from the definitions with explicit exp/sum loops.

use svt_core::config::{MBlockPlan, SpmConfig, SpmVariant, Window};
use svt_core::{Grid, ParamSet};
use svt_tensor::DArray;

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(a: &DArray) -> Rows {
    let c = *a.shape().last().unwrap();
    a.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn max_abs_diff(a: &Rows, b: &DArray) -> f64 {
    let flat: Vec<f64> = a.concat();
    assert_eq!(flat.len(), b.numel(), "element count");
    flat.iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + erf(v / std::f64::consts::SQRT_2))
}

/// Maclaurin series for small |x|, continued fraction tail otherwise.
fn erf(x: f64) -> f64 {
    if x.abs() < 3.0 {
        let mut sum = 0.0f64;
        let mut term = x;
        let mut n = 0.0;
        while term.abs() > 1e-17 * sum.abs().max(1e-300) || n < 3.0 {
            sum += term / (2.0 * n + 1.0);
            n += 1.0;
            term *= -x * x / n;
            if n > 200.0 {
                break;
            }
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    } else {
        // erfc(x) = exp(-x^2)/(x sqrt(pi)) * CF, evaluated by Lentz.
        let ax = x.abs();
        let mut f = 0.0;
        for k in (1..60).rev() {
            f = (k as f64 / 2.0) / (ax + f);
        }
        let erfc = (-ax * ax).exp() / std::f64::consts::PI.sqrt() / (ax + f);
        x.signum() * (1.0 - erfc)
    }
}

fn arr<'a>(p: &'a ParamSet, name: &str) -> &'a DArray {
    p.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
}

pub fn linear(x: &Rows, w: &DArray, b: Option<&DArray>) -> Rows {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), cin);
            (0..cout)
                .map(|o| {
                    let mut acc = b.map(|b| b.data()[o]).unwrap_or(0.0);
                    for i in 0..cin {
                        acc += row[i] * w.data()[i * cout + o];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn fc(p: &ParamSet, prefix: &str, x: &Rows) -> Rows {
    linear(x, arr(p, &format!("{prefix}.w")), Some(arr(p, &format!("{prefix}.b"))))
}

pub fn layernorm(x: &Rows, g: &DArray, b: &DArray, eps: f64) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / (var + eps).sqrt() * g.data()[c] + b.data()[c])
                .collect()
        })
        .collect()
}

pub fn norm(p: &ParamSet, prefix: &str, x: &Rows) -> Rows {
    layernorm(x, arr(p, &format!("{prefix}.g")), arr(p, &format!("{prefix}.b")), svt_core::layers::LN_EPS)
}

pub fn mlp(p: &ParamSet, prefix: &str, x: &Rows) -> Rows {
    let h = fc(p, &format!("{prefix}.fc1"), x);
    let h: Rows = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    fc(p, &format!("{prefix}.fc2"), &h)
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

fn coords(g: Grid, i: usize) -> [usize; 3] {
    let t = i / (g[1] * g[2]);
    let h = (i - t * g[1] * g[2]) / g[2];
    [t, h, i - t * g[1] * g[2] - h * g[2]]
}

/// Same-padded grouped conv with odd kernels, written as nested loops over
/// output voxel, output channel and kernel taps.
pub fn conv3d(x: &Rows, grid: Grid, w: &DArray, groups: usize, stride: [usize; 3]) -> (Rows, Grid) {
    let s = w.shape();
    let (c_out, k, ipg) = (s[0], [s[1], s[2], s[3]], s[4]);
    let c_in = x[0].len();
    let opg = c_out / groups;
    assert_eq!(ipg * groups, c_in);
    let out_g: Grid = [0, 1, 2].map(|d| (grid[d] + stride[d] - 1) / stride[d]);
    let mut out = vec![vec![0.0; c_out]; out_g.iter().product()];
    for ot in 0..out_g[0] {
        for oh in 0..out_g[1] {
            for ow in 0..out_g[2] {
                let o = (ot * out_g[1] + oh) * out_g[2] + ow;
                for co in 0..c_out {
                    let grp = co / opg;
                    let mut acc = 0.0;
                    for kt in 0..k[0] {
                        for kh in 0..k[1] {
                            for kw in 0..k[2] {
                                let it = (ot * stride[0] + kt) as isize - (k[0] / 2) as isize;
                                let ih = (oh * stride[1] + kh) as isize - (k[1] / 2) as isize;
                                let iw = (ow * stride[2] + kw) as isize - (k[2] / 2) as isize;
                                if it < 0
                                    || ih < 0
                                    || iw < 0
                                    || it >= grid[0] as isize
                                    || ih >= grid[1] as isize
                                    || iw >= grid[2] as isize
                                {
                                    continue;
                                }
                                let i = ((it as usize * grid[1]) + ih as usize) * grid[2] + iw as usize;
                                for ci in 0..ipg {
                                    let widx = (((co * k[0] + kt) * k[1] + kh) * k[2] + kw) * ipg + ci;
                                    acc += x[i][grp * ipg + ci] * w.data()[widx];
                                }
                            }
                        }
                    }
                    out[o][co] = acc;
                }
            }
        }
    }
    (out, out_g)
}

/// Non-overlapping window mean or max.
pub fn window_pool(x: &Rows, grid: Grid, window: [usize; 3], max: bool) -> Rows {
    let og: Grid = [0, 1, 2].map(|d| grid[d] / window[d]);
    let c = x[0].len();
    let mut out = Vec::new();
    for o in 0..og.iter().product() {
        let oc = coords(og, o);
        let mut acc = vec![if max { f64::NEG_INFINITY } else { 0.0 }; c];
        let mut count = 0.0;
        for i in 0..x.len() {
            let ic = coords(grid, i);
            if (0..3).all(|d| ic[d] / window[d] == oc[d]) {
                count += 1.0;
                for ch in 0..c {
                    if max {
                        acc[ch] = acc[ch].max(x[i][ch]);
                    } else {
                        acc[ch] += x[i][ch];
                    }
                }
            }
        }
        if !max {
            acc.iter_mut().for_each(|v| *v /= count);
        }
        out.push(acc);
    }
    out
}

/// Multi-head attention with an additive bias `bias(head, query, key)`.
pub fn attention(q: &Rows, k: &Rows, v: &Rows, heads: usize, bias: impl Fn(usize, usize, usize) -> f64) -> Rows {
    let c = q[0].len();
    let d = c / heads;
    let alpha = 1.0 / (d as f64).sqrt();
    let mut out = vec![vec![0.0; c]; q.len()];
    for h in 0..heads {
        for (iq, qr) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .enumerate()
                .map(|(ik, kr)| {
                    let dot: f64 = (0..d).map(|t| qr[h * d + t] * kr[h * d + t]).sum();
                    alpha * dot + bias(h, iq, ik)
                })
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (ik, vr) in v.iter().enumerate() {
                for t in 0..d {
                    out[iq][h * d + t] += e[ik] / z * vr[h * d + t];
                }
            }
        }
    }
    out
}

/// Pre-norm ViT block.
pub fn mhsa_block(p: &ParamSet, prefix: &str, x: &Rows, heads: usize) -> Rows {
    let c = x[0].len();
    let h = norm(p, &format!("{prefix}.ln1"), x);
    let qkv = fc(p, &format!("{prefix}.qkv"), &h);
    let part = |o: usize| -> Rows { qkv.iter().map(|r| r[o * c..(o + 1) * c].to_vec()).collect() };
    let a = attention(&part(0), &part(1), &part(2), heads, |_, _, _| 0.0);
    let x1 = add(x, &fc(p, &format!("{prefix}.proj"), &a));
    let m = mlp(p, &format!("{prefix}.mlp"), &norm(p, &format!("{prefix}.ln2"), &x1));
    add(&x1, &m)
}

/// Token windows: each list holds token indices in ascending order; windows
/// are ordered by their raster position on the window grid.
pub fn windows(n: usize, grid: Option<Grid>, window: Window) -> Vec<Vec<usize>> {
    match (window, grid) {
        (Window::Global, _) => vec![(0..n).collect()],
        (Window::Local(w), Some(g)) => {
            let wg: Grid = [0, 1, 2].map(|d| g[d] / w[d]);
            let mut out = vec![Vec::new(); wg.iter().product()];
            for i in 0..n {
                let c = coords(g, i);
                let wc = [0, 1, 2].map(|d| c[d] / w[d]);
                out[(wc[0] * wg[1] + wc[1]) * wg[2] + wc[2]].push(i);
            }
            out
        }
        (Window::Local(_), None) => panic!("local window without grid"),
    }
}

/// Weighted sum of `x` over `members` with softmax of `scores` restricted to
/// those members.
fn softmax_pool(x: &Rows, members: &[usize], score: impl Fn(usize) -> f64) -> Vec<f64> {
    let c = x[0].len();
    let m = members.iter().map(|&j| score(j)).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = members.iter().map(|&j| (score(j) - m).exp()).sum();
    let mut out = vec![0.0; c];
    for &j in members {
        let w = (score(j) - m).exp() / z;
        for ch in 0..c {
            out[ch] += w * x[j][ch];
        }
    }
    out
}

/// Single-head pooling output plus per-token mean-score contributions.
fn spm_head(x: &Rows, e: &DArray, wins: &[Vec<usize>], cfg: &SpmConfig) -> (Rows, Vec<Vec<f64>>) {
    let (m, d) = (e.shape()[0], e.shape()[1]);
    let s: Vec<Vec<f64>> = (0..m)
        .map(|i| x.iter().map(|xr| (0..d).map(|t| xr[t] * e.data()[i * d + t]).sum()).collect())
        .collect();
    let mut z = Vec::new();
    for win in wins {
        for i in 0..m {
            match cfg.variant {
                SpmVariant::Elitism => {
                    let mut act: Vec<usize> = win.iter().copied().filter(|&j| sigmoid(s[i][j]) > cfg.threshold).collect();
                    if act.is_empty() {
                        act = win.clone();
                    }
                    z.push(softmax_pool(x, &act, |j| s[i][j]));
                }
                SpmVariant::Neighbor => {
                    let k = cfg.neighbor_groups.unwrap();
                    let mut sorted = win.clone();
                    sorted.sort_by(|&a, &b| s[i][b].partial_cmp(&s[i][a]).unwrap().then(a.cmp(&b)));
                    for g in sorted.chunks(win.len() / k) {
                        z.push(softmax_pool(x, g, |j| s[i][j]));
                    }
                }
            }
        }
    }
    (z, s)
}

/// Whole module: kept originals then supertokens, heads concatenated along
/// channels, optional output projection.
pub fn spm(
    x: &Rows,
    grid: Option<Grid>,
    cfg: &SpmConfig,
    protos: &[DArray],
    proj: Option<(&DArray, &DArray)>,
) -> Rows {
    let n = x.len();
    let c = x[0].len();
    let d = c / cfg.heads;
    let wins = windows(n, grid, cfg.window);
    let mut z: Rows = Vec::new();
    let mut mean = vec![0.0; n];
    let mut rows = 0.0;
    for (h, e) in protos.iter().enumerate() {
        let xh: Rows = x.iter().map(|r| r[h * d..(h + 1) * d].to_vec()).collect();
        let (zh, s) = spm_head(&xh, e, &wins, cfg);
        if z.is_empty() {
            z = zh;
        } else {
            z.iter_mut().zip(zh).for_each(|(a, b)| a.extend(b));
        }
        for row in &s {
            rows += 1.0;
            for j in 0..n {
                mean[j] += sigmoid(row[j]);
            }
        }
    }
    mean.iter_mut().for_each(|v| *v /= rows);
    let kept = keep_top(&mean, cfg.keep_top);
    let mut out: Rows = kept.iter().map(|&j| x[j].clone()).collect();
    out.extend(z);
    match proj {
        Some((w, b)) => linear(&out, w, Some(b)),
        None => out,
    }
}

/// Full sort by (score descending, index ascending), truncate, restore order.
pub fn keep_top(mean: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..mean.len()).collect();
    idx.sort_by(|&a, &b| mean[b].partial_cmp(&mean[a]).unwrap().then(a.cmp(&b)));
    let mut kept = idx[..k].to_vec();
    kept.sort();
    kept
}

fn rel_bias(p: &ParamSet, prefix: &str, extent: Grid, qp: [usize; 3], kp: [usize; 3], h: usize) -> f64 {
    ["t", "h", "w"]
        .iter()
        .enumerate()
        .map(|(d, a)| {
            let t = arr(p, &format!("{prefix}.rel_{a}"));
            let width = 2 * extent[d] - 1;
            let off = qp[d] as isize - kp[d] as isize + extent[d] as isize - 1;
            t.data()[h * width + off as usize]
        })
        .sum()
}

fn positions(g: Grid, stride: [usize; 3]) -> Vec<[usize; 3]> {
    (0..g.iter().product()).map(|i| coords(g, i)).map(|c| [0, 1, 2].map(|d| c[d] * stride[d])).collect()
}

/// Pooling-attention block.
pub fn pool_block(p: &ParamSet, b: &MBlockPlan, x: &Rows) -> Rows {
    let prefix = format!("blk{}", b.index);
    let co = b.c_out;
    let h = norm(p, &format!("{prefix}.ln1"), x);
    let qkv = fc(p, &format!("{prefix}.qkv"), &h);
    let part = |o: usize| -> Rows { qkv.iter().map(|r| r[o * co..(o + 1) * co].to_vec()).collect() };
    let conv = |r: &Rows, n: &str, s| conv3d(r, b.grid_in, arr(p, &format!("{prefix}.pool_{n}")), co, s).0;
    let q = conv(&part(0), "q", b.q_stride);
    let k = conv(&part(1), "k", b.kv_stride);
    let v = conv(&part(2), "v", b.kv_stride);
    let qp = positions(b.grid_q, b.q_stride);
    let kp = positions(b.grid_kv, b.kv_stride);
    let a = attention(&q, &k, &v, b.heads, |hh, iq, ik| rel_bias(p, &prefix, b.grid_in, qp[iq], kp[ik], hh));
    let o = fc(p, &format!("{prefix}.proj"), &add(&a, &q));
    let mut res = x.clone();
    if b.q_stride != [1, 1, 1] {
        res = window_pool(&res, b.grid_in, b.q_stride, true);
    }
    if b.c_in != b.c_out {
        res = fc(p, &format!("{prefix}.res"), &res);
    }
    let x1 = add(&res, &o);
    add(&x1, &mlp(p, &format!("{prefix}.mlp"), &norm(p, &format!("{prefix}.ln2"), &x1)))
}

/// Semantic-attention block.
pub fn semantic_block(p: &ParamSet, b: &MBlockPlan, cfg: &SpmConfig, x: &Rows) -> Rows {
    let prefix = format!("blk{}", b.index);
    let c = b.c_out;
    let m = cfg.tokens_per_window();
    let h = norm(p, &format!("{prefix}.ln1"), x);
    let q = conv3d(&fc(p, &format!("{prefix}.q"), &h), b.grid_in, arr(p, &format!("{prefix}.pool_q")), c, [1, 1, 1]).0;
    let protos: Vec<DArray> = (0..cfg.heads).map(|i| arr(p, &format!("{prefix}.spm.proto.{i}")).clone()).collect();
    let proj = cfg
        .output_projection
        .then(|| (arr(p, &format!("{prefix}.spm.out.w")), arr(p, &format!("{prefix}.spm.out.b"))));
    let sem = spm(&h, Some(b.grid_in), cfg, &protos, proj);
    let win = match cfg.window {
        Window::Global => b.grid_in,
        Window::Local(w) => w,
    };
    let wg: Grid = [0, 1, 2].map(|d| b.grid_in[d] / win[d]);
    let kv = |n: &str| -> Rows {
        let t = fc(p, &format!("{prefix}.{n}"), &sem);
        let cells: Rows = t.chunks(m).map(|ch| ch.concat()).collect();
        let (out, _) = conv3d(&cells, wg, arr(p, &format!("{prefix}.pool_{n}")), m * c, [1, 1, 1]);
        out.iter().flat_map(|cell| cell.chunks(c).map(<[f64]>::to_vec).collect::<Vec<_>>()).collect()
    };
    let (k, v) = (kv("k"), kv("v"));
    let qp = positions(b.grid_q, [1, 1, 1]);
    let kp: Vec<[usize; 3]> = (0..k.len())
        .map(|t| {
            let wc = coords(wg, t / m);
            [0, 1, 2].map(|d| wc[d] * win[d] + (win[d] - 1) / 2)
        })
        .collect();
    let a = attention(&q, &k, &v, b.heads, |hh, iq, ik| rel_bias(p, &prefix, b.grid_in, qp[iq], kp[ik], hh));
    let o = fc(p, &format!("{prefix}.proj"), &add(&a, &q));
    let x1 = add(x, &o);
    add(&x1, &mlp(p, &format!("{prefix}.mlp"), &norm(p, &format!("{prefix}.ln2"), &x1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_matches_known_values() {
        assert!((erf(0.5) - 0.520_499_877_813_046_5).abs() < 1e-15);
        assert!((erf(1.0) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((erf(3.5) - 0.999_999_256_901_627_7).abs() < 1e-15);
        assert!((erf(-2.0) + 0.995_322_265_018_952_7).abs() < 1e-15);
    }
}
