//! Shared building blocks: affine maps, normalization, MLP and multi-head
//! attention over `[N, C]` token matrices.

use svt_tensor::{Tape, Var};

use crate::error::Result;
use crate::params::{Bound, Init, ParamSpec};

pub const LN_EPS: f64 = 1e-6;
pub const WEIGHT_STD: f64 = 0.02;

pub fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize) {
    out.push(ParamSpec::new(format!("{prefix}.w"), &[cin, cout], Init::TruncNormal(WEIGHT_STD)));
    out.push(ParamSpec::new(format!("{prefix}.b"), &[cout], Init::Zeros));
}

pub fn norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    out.push(ParamSpec::new(format!("{prefix}.g"), &[c], Init::Ones));
    out.push(ParamSpec::new(format!("{prefix}.b"), &[c], Init::Zeros));
}

pub fn mlp_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize, ratio: usize) {
    linear_specs(out, &format!("{prefix}.fc1"), c, ratio * c);
    linear_specs(out, &format!("{prefix}.fc2"), ratio * c, c);
}

pub fn fc(tape: &Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    Ok(tape.linear(x, p.get(&format!("{prefix}.w")), Some(p.get(&format!("{prefix}.b"))))?)
}

pub fn norm(tape: &Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    Ok(tape.layernorm(x, p.get(&format!("{prefix}.g")), p.get(&format!("{prefix}.b")), LN_EPS)?)
}

pub fn mlp(tape: &Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = fc(tape, p, &format!("{prefix}.fc1"), x)?;
    let h = tape.gelu(h);
    fc(tape, p, &format!("{prefix}.fc2"), h)
}

/// `[N, C] -> [heads, N, C / heads]`.
pub fn split_heads(tape: &Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x);
    let x = tape.reshape(x, &[s[0], heads, s[1] / heads])?;
    Ok(tape.permute(x, &[1, 0, 2])?)
}

/// `[heads, N, d] -> [N, heads * d]`.
pub fn merge_heads(tape: &Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let x = tape.permute(x, &[1, 0, 2])?;
    Ok(tape.reshape(x, &[s[1], s[0] * s[2]])?)
}

/// Scaled dot-product attention with optional additive logit bias.
///
/// `q: [Nq, C]`, `k, v: [Nk, C]`, `bias: [heads, Nq, Nk]`. Returns the merged
/// `[Nq, C]` output and the `[heads, Nq, Nk]` attention weights.
pub fn attention(tape: &Tape, q: Var, k: Var, v: Var, heads: usize, bias: Option<Var>) -> Result<(Var, Var)> {
    let c = tape.shape(q)[1];
    let alpha = ((c / heads) as f64).powf(-0.5);
    let qh = split_heads(tape, q, heads)?;
    let kt = {
        let s = tape.shape(k);
        let k = tape.reshape(k, &[s[0], heads, c / heads])?;
        tape.permute(k, &[1, 2, 0])?
    };
    let vh = split_heads(tape, v, heads)?;
    let logits = tape.matmul(qh, kt)?;
    let mut logits = tape.scale(logits, alpha);
    if let Some(b) = bias {
        logits = tape.add(logits, b)?;
    }
    let attn = tape.softmax(logits, 2)?;
    let out = tape.matmul(attn, vh)?;
    Ok((merge_heads(tape, out)?, attn))
}
