use crate::array::{split_axis, DArray};
use crate::error::{Result, TensorError};
use crate::tape::{Node, Op, Tape, Var};

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::arg(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

/// Softmax of `x` over one strided slice; entries with `active == false` get
/// exactly zero weight.
fn softmax_slice(x: &[f64], active: impl Fn(usize) -> bool, at: impl Fn(usize) -> usize, len: usize, out: &mut [f64]) -> bool {
    let mut max = f64::NEG_INFINITY;
    let mut any = false;
    for j in 0..len {
        if active(j) {
            any = true;
            max = max.max(x[at(j)]);
        }
    }
    if !any {
        return false;
    }
    let mut sum = 0.0;
    for j in 0..len {
        let e = if active(j) { (x[at(j)] - max).exp() } else { 0.0 };
        out[at(j)] = e;
        sum += e;
    }
    for j in 0..len {
        out[at(j)] /= sum;
    }
    true
}

impl Tape {
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, None, axis)
    }

    /// Softmax along `axis` restricted to entries where `active` is true.
    ///
    /// Inactive entries come out as exactly `0.0` and pass no gradient. Every
    /// slice along `axis` must contain at least one active entry.
    pub fn masked_softmax(&self, x: Var, active: &[bool], axis: usize) -> Result<Var> {
        self.softmax_impl(x, Some(active.to_vec()), axis)
    }

    fn softmax_impl(&self, x: Var, mask: Option<Vec<bool>>, axis: usize) -> Result<Var> {
        let op_name = if mask.is_some() { "masked_softmax" } else { "softmax" };
        let (value, outer, len, inner) = {
            let nodes = self.nodes();
            let xv = &nodes[x.0].value;
            check_axis(op_name, xv.shape(), axis)?;
            if let Some(m) = &mask {
                if m.len() != xv.numel() {
                    return Err(TensorError::shape(op_name, xv.shape(), &[m.len()]));
                }
            }
            let (outer, len, inner) = split_axis(xv.shape(), axis);
            let mut out = vec![0.0; xv.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let ok = match &mask {
                        Some(m) => softmax_slice(xv.data(), |j| m[at(j)], at, len, &mut out),
                        None => softmax_slice(xv.data(), |_| true, at, len, &mut out),
                    };
                    if !ok {
                        return Err(TensorError::Contract {
                            op: op_name,
                            msg: format!("slice (outer {o}, inner {i}) has no active entries"),
                        });
                    }
                }
            }
            (DArray::new(xv.shape().to_vec(), out)?, outer, len, inner)
        };
        Ok(self.push(
            value,
            Op::Softmax {
                x,
                mask,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Layer normalization over the last axis, biased variance.
    pub fn layernorm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, cols, xhat, rstd) = {
            let nodes = self.nodes();
            let xv = &nodes[x.0].value;
            let cols = *xv.shape().last().ok_or_else(|| TensorError::arg("layernorm", "scalar input"))?;
            for p in [gamma, beta] {
                if nodes[p.0].value.shape() != [cols] {
                    return Err(TensorError::shape("layernorm", xv.shape(), nodes[p.0].value.shape()));
                }
            }
            let (gv, bv) = (nodes[gamma.0].value.data(), nodes[beta.0].value.data());
            let rows = xv.numel() / cols;
            let mut xhat = vec![0.0; xv.numel()];
            let mut rstd = vec![0.0; rows];
            let mut out = vec![0.0; xv.numel()];
            for r in 0..rows {
                let row = &xv.data()[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let s = 1.0 / (var + eps).sqrt();
                rstd[r] = s;
                for c in 0..cols {
                    let h = (row[c] - mean) * s;
                    xhat[r * cols + c] = h;
                    out[r * cols + c] = h * gv[c] + bv[c];
                }
            }
            (DArray::new(xv.shape().to_vec(), out)?, cols, xhat, rstd)
        };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean along `axis`; the axis is removed (a rank-1 input yields `[1]`).
    pub fn mean(&self, x: Var, axis: usize) -> Result<Var> {
        let (value, outer, len, inner) = {
            let nodes = self.nodes();
            let xv = &nodes[x.0].value;
            check_axis("mean", xv.shape(), axis)?;
            let (outer, len, inner) = split_axis(xv.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += xv.data()[(o * len + j) * inner + i];
                    }
                }
            }
            out.iter_mut().for_each(|v| *v /= len as f64);
            let mut shape: Vec<usize> = xv.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            (DArray::new(shape, out)?, outer, len, inner)
        };
        Ok(self.push(value, Op::Mean { x, outer, len, inner }))
    }

    /// Scalar `Σ x·w` against a fixed weight array of the same shape.
    pub fn weighted_sum(&self, x: Var, weights: &DArray) -> Result<Var> {
        let value = {
            let nodes = self.nodes();
            let xv = &nodes[x.0].value;
            if xv.shape() != weights.shape() {
                return Err(TensorError::shape("weighted_sum", xv.shape(), weights.shape()));
            }
            DArray::scalar(xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
        };
        Ok(self.push(
            value,
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
        ))
    }

    pub fn sum(&self, x: Var) -> Var {
        let ones = DArray::full(&self.shape(x), 1.0);
        self.weighted_sum(x, &ones).expect("shapes agree by construction")
    }

    /// Mean softmax cross-entropy of `logits: [B, K]` against class labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (value, probs, classes) = {
            let nodes = self.nodes();
            let lv = &nodes[logits.0].value;
            let s = lv.shape();
            if s.len() != 2 || s[0] != labels.len() {
                return Err(TensorError::shape("cross_entropy", s, &[labels.len()]));
            }
            let classes = s[1];
            if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
                return Err(TensorError::arg("cross_entropy", format!("label {bad} >= {classes} classes")));
            }
            let mut probs = vec![0.0; lv.numel()];
            let mut loss = 0.0;
            for (b, &label) in labels.iter().enumerate() {
                let row = &lv.data()[b * classes..(b + 1) * classes];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for c in 0..classes {
                    probs[b * classes + c] = (row[c] - lse).exp();
                }
                loss += lse - row[label];
            }
            (DArray::scalar(loss / labels.len() as f64), probs, classes)
        };
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                classes,
            },
        ))
    }
}

pub(crate) fn backward(nodes: &[Node], out: &DArray, op: &Op, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let mut res = Vec::new();
    match op {
        Op::Softmax {
            x,
            mask,
            outer,
            len,
            inner,
        } => {
            let y = out.data();
            let mut dx = vec![0.0; y.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..*len).map(|j| y[at(j)] * g[at(j)]).sum();
                    for j in 0..*len {
                        if mask.as_ref().is_none_or(|m| m[at(j)]) {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            res.push((*x, dx));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            cols,
            xhat,
            rstd,
        } => {
            let cols = *cols;
            let gv = nodes[gamma.0].value.data();
            if nodes[x.0].requires_grad {
                let mut dx = vec![0.0; g.len()];
                for (r, s) in rstd.iter().enumerate() {
                    let base = r * cols;
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        let d = g[base + c] * gv[c];
                        mean_d += d;
                        mean_dx += d * xhat[base + c];
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    for c in 0..cols {
                        let d = g[base + c] * gv[c];
                        dx[base + c] = s * (d - mean_d - xhat[base + c] * mean_dx);
                    }
                }
                res.push((*x, dx));
            }
            if nodes[gamma.0].requires_grad {
                let mut dg = vec![0.0; cols];
                for (k, gi) in g.iter().enumerate() {
                    dg[k % cols] += gi * xhat[k];
                }
                res.push((*gamma, dg));
            }
            if nodes[beta.0].requires_grad {
                let mut db = vec![0.0; cols];
                for (k, gi) in g.iter().enumerate() {
                    db[k % cols] += gi;
                }
                res.push((*beta, db));
            }
        }
        Op::Mean { x, outer, len, inner } => {
            let mut dx = vec![0.0; outer * len * inner];
            let scale = 1.0 / *len as f64;
            for o in 0..*outer {
                for j in 0..*len {
                    for i in 0..*inner {
                        dx[(o * len + j) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            res.push((*x, dx));
        }
        Op::WeightedSum { x, weights } => {
            res.push((*x, weights.iter().map(|w| w * g[0]).collect()));
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
            classes,
        } => {
            let scale = g[0] / labels.len() as f64;
            let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (b, &l) in labels.iter().enumerate() {
                d[b * classes + l] -= scale;
            }
            res.push((*logits, d));
        }
        _ => unreachable!("reduce::backward called for {}", op.name()),
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> DArray {
        DArray::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn single_active_entry_gets_full_weight() {
        let tape = Tape::new();
        let x = tape.constant(arr(&[3], &[0.3, -2.0, 7.0]));
        let y = tape.masked_softmax(x, &[false, true, false], 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn equal_pair_splits_evenly() {
        let tape = Tape::new();
        let x = tape.constant(arr(&[3], &[1.25, 1.25, 40.0]));
        let y = tape.masked_softmax(x, &[true, true, false], 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn fully_masked_slice_is_contract_violation() {
        let tape = Tape::new();
        let x = tape.constant(DArray::zeros(&[2, 2]));
        let err = tape.masked_softmax(x, &[true, false, false, false], 1).unwrap_err();
        assert!(matches!(err, TensorError::Contract { .. }));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let tape = Tape::new();
        let x = tape.constant(arr(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layernorm_constant_input_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(DArray::full(&[2, 4], 3.5));
        let g = tape.constant(DArray::full(&[4], 1.0));
        let b = tape.constant(DArray::zeros(&[4]));
        let y = tape.layernorm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layernorm_two_values_map_to_plus_minus_one() {
        let tape = Tape::new();
        let x = tape.constant(arr(&[2], &[1.0, 3.0]));
        let g = tape.constant(DArray::full(&[2], 1.0));
        let b = tape.constant(DArray::zeros(&[2]));
        let y = tape.layernorm(x, g, b, 1e-12).unwrap();
        let v = tape.value(y);
        assert!((v.data()[0] + 1.0).abs() < 1e-9 && (v.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mean_removes_axis() {
        let tape = Tape::new();
        let x = tape.constant(arr(&[2, 3], &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]));
        let m0 = tape.mean(x, 0).unwrap();
        let m1 = tape.mean(x, 1).unwrap();
        assert_eq!(tape.value(m0).data(), &[3.0, 4.0, 5.0]);
        assert_eq!(tape.value(m1).data(), &[2.0, 6.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let tape = Tape::new();
        let x = tape.leaf(DArray::zeros(&[2, 4]));
        let l = tape.cross_entropy(x, &[1, 3]).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
        assert!(tape.cross_entropy(x, &[4, 0]).is_err());
    }
}
