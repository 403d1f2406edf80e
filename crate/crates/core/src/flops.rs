//! Analytical cost model: one multiply-accumulate counts as one FLOP.
//!
//! Only matrix products, affine maps and convolutions are counted; norms,
//! activations, softmax and pooling reductions are excluded. Every row is the
//! exact MAC count that the tape records for the same op sequence.

use std::fmt::Write as _;

use crate::config::{BlockKind, MViTConfig, ModelConfig, Reducer, SpmConfig, ViTConfig};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopRow {
    pub layer: String,
    pub op: &'static str,
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    pub input: [usize; 4],
    pub rows: Vec<FlopRow>,
    /// `(temporal clips, spatial crops)` multiplier for multi-view testing.
    pub views: (usize, usize),
}

impl FlopReport {
    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    /// Per-view GFLOPs.
    pub fn gflops(&self) -> f64 {
        self.total_macs() as f64 / 1e9
    }

    pub fn gflops_all_views(&self) -> f64 {
        self.gflops() * (self.views.0 * self.views.1) as f64
    }

    pub fn with_views(mut self, views: (usize, usize)) -> Self {
        self.views = views;
        self
    }

    pub fn tokens_final(&self) -> usize {
        self.rows
            .iter()
            .rev()
            .find(|r| r.op != "linear_head")
            .map(|r| r.tokens_out)
            .unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,op,tokens_in,tokens_out,macs,params\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.layer, r.op, r.tokens_in, r.tokens_out, r.macs, r.params);
        }
        let _ = writeln!(s, "total,,,,{},{}", self.total_macs(), self.total_params());
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:<20} {:>9} {:>10} {:>16} {:>12}",
            "layer", "op", "tokens_in", "tokens_out", "MACs", "params"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:<20} {:>9} {:>10} {:>16} {:>12}",
                r.layer, r.op, r.tokens_in, r.tokens_out, r.macs, r.params
            );
        }
        let _ = writeln!(
            s,
            "{:<10} {:<20} {:>9} {:>10} {:>16} {:>12}",
            "total",
            "",
            "",
            self.tokens_final(),
            self.total_macs(),
            self.total_params()
        );
        let _ = writeln!(
            s,
            "GFLOPs per view: {:.2}   views: {}x{}   all views: {:.1}",
            self.gflops(),
            self.views.0,
            self.views.1,
            self.gflops_all_views()
        );
        s
    }
}

fn u(v: usize) -> u64 {
    v as u64
}

/// Attention sub-block of a ViT layer: q/k/v/o projections plus `QKᵀ` and `AV`.
pub fn vit_attention_macs(n: usize, c: usize) -> u64 {
    u(4 * n * c * c + 2 * n * n * c)
}

pub fn mlp_macs(n: usize, c: usize, ratio: usize) -> u64 {
    u(2 * ratio * n * c * c)
}

/// Scoring `E·Xᵀ` plus weighted sums, plus the optional output map.
pub fn spm_macs(cfg: &SpmConfig, n: usize, c: usize, tokens_out: usize) -> u64 {
    let proj = if cfg.output_projection { tokens_out * c * c } else { 0 };
    u(2 * cfg.prototypes * n * c + proj)
}

pub fn spm_params(cfg: &SpmConfig, c: usize) -> u64 {
    let proj = if cfg.output_projection { c * c + c } else { 0 };
    u(cfg.prototypes * c + proj)
}

pub fn audit_vit(cfg: &ViTConfig) -> Result<FlopReport> {
    let plan = cfg.plan()?;
    let c = cfg.embed_dim;
    let n0 = plan.block_tokens[0];
    let mut rows = vec![FlopRow {
        layer: "patch".into(),
        op: "patch_embed",
        tokens_in: n0,
        tokens_out: n0,
        macs: u(n0 * plan.patch_dim * c),
        params: u(plan.patch_dim * c + c + n0 * c),
    }];
    for l in 1..=cfg.depth {
        let n = plan.block_tokens[l - 1];
        rows.push(FlopRow {
            layer: format!("blk{l}"),
            op: "attention",
            tokens_in: n,
            tokens_out: n,
            macs: vit_attention_macs(n, c),
            params: u(2 * c + 4 * c * c + 4 * c),
        });
        rows.push(FlopRow {
            layer: format!("blk{l}"),
            op: "mlp",
            tokens_in: n,
            tokens_out: n,
            macs: mlp_macs(n, c, cfg.mlp_ratio),
            params: u(2 * c + 2 * cfg.mlp_ratio * c * c + cfg.mlp_ratio * c + c),
        });
        let Some(entry) = cfg.spm_schedule.iter().find(|e| e.layer == l) else {
            continue;
        };
        let rp = plan.reducers.iter().find(|r| r.layer == l).expect("planned");
        rows.push(match &entry.reducer {
            Reducer::Spm(s) => FlopRow {
                layer: format!("spm{l}"),
                op: "spm",
                tokens_in: rp.tokens_in,
                tokens_out: rp.tokens_out,
                macs: spm_macs(s, rp.tokens_in, c, rp.tokens_out),
                params: spm_params(s, c),
            },
            Reducer::AvgPool(_) | Reducer::MaxPool(_) => FlopRow {
                layer: format!("pool{l}"),
                op: if matches!(entry.reducer, Reducer::AvgPool(_)) { "avg_pool" } else { "max_pool" },
                tokens_in: rp.tokens_in,
                tokens_out: rp.tokens_out,
                macs: 0,
                params: 0,
            },
        });
    }
    rows.push(FlopRow {
        layer: "head".into(),
        op: "linear_head",
        tokens_in: plan.final_tokens,
        tokens_out: 1,
        macs: u(c * cfg.num_classes),
        params: u(2 * c + c * cfg.num_classes + cfg.num_classes),
    });
    Ok(FlopReport {
        input: cfg.input,
        rows,
        views: (1, 1),
    })
}

pub fn audit_mvit(cfg: &MViTConfig) -> Result<FlopReport> {
    let plan = cfg.plan()?;
    let kq: usize = cfg.kernel_q.iter().product();
    let kkv: usize = cfg.kernel_kv.iter().product();
    let ks: usize = cfg.stem.kernel.iter().product();
    let c0 = cfg.stages[0].channels;
    let n_stem: usize = plan.stem_grid.iter().product();
    let r = cfg.mlp_ratio;
    let mut rows = vec![FlopRow {
        layer: "stem".into(),
        op: "conv_stem",
        tokens_in: cfg.input[..3].iter().product(),
        tokens_out: n_stem,
        macs: u(n_stem * c0 * ks * cfg.input[3]),
        params: u(c0 * ks * cfg.input[3] + c0),
    }];
    for b in &plan.blocks {
        let (ci, c) = (b.c_in, b.c_out);
        let n_in: usize = b.grid_in.iter().product();
        let nq = b.q_tokens();
        let nkv = b.kv_tokens();
        let relpos: usize = b.heads * b.grid_in.iter().map(|e| 2 * e - 1).sum::<usize>();
        let (op, macs, params) = match b.kind {
            BlockKind::PoolingAttention => {
                let res = if ci != c { nq * ci * c } else { 0 };
                let macs = n_in * ci * 3 * c + nq * c * kq + 2 * nkv * c * kkv + 2 * nq * nkv * c + nq * c * c + res;
                let res_p = if ci != c { ci * c + c } else { 0 };
                let params = 2 * ci + 3 * ci * c + 3 * c + c * kq + 2 * c * kkv + res_p + relpos + c * c + c;
                ("pool_attention", u(macs), u(params))
            }
            BlockKind::SemanticAttention => {
                let s = cfg.spm.as_ref().expect("validated");
                let sp = b.spm.expect("semantic block has an SPM plan");
                let macs = n_in * ci * c
                    + nq * c * kq
                    + 2 * nkv * ci * c
                    + 2 * nkv * c * kkv
                    + 2 * nq * nkv * c
                    + nq * c * c;
                let m = s.tokens_per_window();
                let params = 2 * ci + 3 * (ci * c + c) + c * kq + 2 * m * c * kkv + relpos + c * c + c;
                rows.push(FlopRow {
                    layer: format!("blk{}", b.index),
                    op: "spm",
                    tokens_in: n_in,
                    tokens_out: sp.tokens_out,
                    macs: spm_macs(s, n_in, ci, sp.tokens_out),
                    params: spm_params(s, ci),
                });
                ("semantic_attention", u(macs), u(params))
            }
        };
        rows.push(FlopRow {
            layer: format!("blk{}", b.index),
            op,
            tokens_in: n_in,
            tokens_out: nq,
            macs,
            params,
        });
        rows.push(FlopRow {
            layer: format!("blk{}", b.index),
            op: "mlp",
            tokens_in: nq,
            tokens_out: nq,
            macs: mlp_macs(nq, c, r),
            params: u(2 * c + 2 * r * c * c + r * c + c),
        });
    }
    let c_last = plan.blocks.last().map(|b| b.c_out).unwrap_or(c0);
    let n_last = plan.blocks.last().map(|b| b.q_tokens()).unwrap_or(n_stem);
    rows.push(FlopRow {
        layer: "head".into(),
        op: "linear_head",
        tokens_in: n_last,
        tokens_out: 1,
        macs: u(c_last * cfg.num_classes),
        params: u(2 * c_last + c_last * cfg.num_classes + cfg.num_classes),
    });
    Ok(FlopReport {
        input: cfg.input,
        rows,
        views: (1, 1),
    })
}

pub fn audit(cfg: &ModelConfig) -> Result<FlopReport> {
    match cfg {
        ModelConfig::Vit(c) => audit_vit(c),
        ModelConfig::Mvit(c) => audit_mvit(c),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub gflops: f64,
    pub baseline_gflops: f64,
    /// `1 - flops / baseline`.
    pub reduction: f64,
}

pub fn compare(cfg: &ModelConfig, baseline: &ModelConfig) -> Result<Comparison> {
    if cfg.input() != baseline.input() {
        return Err(CoreError::Argument(format!(
            "input {:?} differs from baseline input {:?}",
            cfg.input(),
            baseline.input()
        )));
    }
    let (a, b) = (audit(cfg)?, audit(baseline)?);
    Ok(Comparison {
        gflops: a.gflops(),
        baseline_gflops: b.gflops(),
        reduction: 1.0 - a.total_macs() as f64 / b.total_macs() as f64,
    })
}
