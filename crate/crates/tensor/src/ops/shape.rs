use crate::array::{split_axis, DArray};
use crate::error::{Result, TensorError};
use crate::tape::{Node, Op, Tape, Var};

pub(crate) fn permute_data(data: &[f64], in_shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = in_shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

impl Tape {
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes()[x.0].value.reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// General axis permutation; output axis `k` is input axis `axes[k]`.
    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let (value, in_shape) = {
            let nodes = self.nodes();
            let xv = &nodes[x.0].value;
            let rank = xv.ndim();
            let mut seen = vec![false; rank];
            if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
                return Err(TensorError::arg("permute", format!("{axes:?} is not a permutation of rank {rank}")));
            }
            let out_shape: Vec<usize> = axes.iter().map(|&a| xv.shape()[a]).collect();
            let data = permute_data(xv.data(), xv.shape(), axes);
            (DArray::new(out_shape, data)?, xv.shape().to_vec())
        };
        Ok(self.push(
            value,
            Op::Permute {
                x,
                in_shape,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if a >= rank || b >= rank {
            return Err(TensorError::arg("transpose", format!("axes ({a}, {b}) out of range for rank {rank}")));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(x, &axes)
    }

    /// Gathers entries `idx` along `axis`; repeated indices are allowed.
    pub fn index_select(&self, x: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let (value, outer, len, inner) = {
            let nodes = self.nodes();
            let xv = &nodes[x.0].value;
            if axis >= xv.ndim() {
                return Err(TensorError::arg("index_select", format!("axis {axis} out of range")));
            }
            let (outer, len, inner) = split_axis(xv.shape(), axis);
            if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
                return Err(TensorError::arg("index_select", format!("index {bad} >= extent {len}")));
            }
            let mut out = Vec::with_capacity(outer * idx.len() * inner);
            for o in 0..outer {
                for &j in idx {
                    let base = (o * len + j) * inner;
                    out.extend_from_slice(&xv.data()[base..base + inner]);
                }
            }
            let mut shape = xv.shape().to_vec();
            shape[axis] = idx.len();
            (DArray::new(shape, out)?, outer, len, inner)
        };
        Ok(self.push(
            value,
            Op::IndexSelect {
                x,
                outer,
                len,
                inner,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::arg("concat", "no inputs"))?;
        let (value, outer, widths) = {
            let nodes = self.nodes();
            let s0 = nodes[first.0].value.shape().to_vec();
            if axis >= s0.len() {
                return Err(TensorError::arg("concat", format!("axis {axis} out of range")));
            }
            let mut total = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                let compatible = s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(TensorError::shape("concat", &s0, s));
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(&s0, axis);
            let widths: Vec<usize> = parts.iter().map(|p| nodes[p.0].value.shape()[axis] * inner).collect();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (p, &w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[p.0].value.data()[o * w..(o + 1) * w]);
                }
            }
            let mut shape = s0;
            shape[axis] = total;
            (DArray::new(shape, out)?, outer, widths)
        };
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
        ))
    }

    /// `count` consecutive entries along `axis` starting at `start`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, count: usize) -> Result<Var> {
        let (value, outer, width) = {
            let nodes = self.nodes();
            let xv = &nodes[x.0].value;
            if axis >= xv.ndim() || count == 0 || start + count > xv.shape()[axis] {
                return Err(TensorError::arg(
                    "slice",
                    format!("[{start}, {}) along axis {axis} of {:?}", start + count, xv.shape()),
                ));
            }
            let (outer, len, inner) = split_axis(xv.shape(), axis);
            let mut out = Vec::with_capacity(outer * count * inner);
            for o in 0..outer {
                let base = (o * len + start) * inner;
                out.extend_from_slice(&xv.data()[base..base + count * inner]);
            }
            let mut shape = xv.shape().to_vec();
            shape[axis] = count;
            (DArray::new(shape, out)?, outer, len * inner)
        };
        let inner = value.numel() / (outer * count);
        Ok(self.push(
            value,
            Op::Slice {
                x,
                outer,
                width,
                start: start * inner,
                count: count * inner,
            },
        ))
    }
}

pub(crate) fn backward(nodes: &[Node], op: &Op, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    match op {
        Op::Reshape { x } => vec![(*x, g.to_vec())],
        Op::Permute { x, in_shape, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (k, &a) in axes.iter().enumerate() {
                inverse[a] = k;
            }
            let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
            vec![(*x, permute_data(g, &out_shape, &inverse))]
        }
        Op::IndexSelect {
            x,
            outer,
            len,
            inner,
            idx,
        } => {
            let mut dx = vec![0.0; outer * len * inner];
            let mut src = 0;
            for o in 0..*outer {
                for &j in idx {
                    let base = (o * len + j) * inner;
                    dx[base..base + inner].iter_mut().zip(&g[src..src + inner]).for_each(|(d, v)| *d += v);
                    src += inner;
                }
            }
            vec![(*x, dx)]
        }
        Op::Concat { parts, outer, widths } => {
            let total: usize = widths.iter().sum();
            parts
                .iter()
                .enumerate()
                .filter(|(_, p)| nodes[p.0].requires_grad)
                .map(|(k, p)| {
                    let w = widths[k];
                    let off: usize = widths[..k].iter().sum();
                    let mut d = Vec::with_capacity(outer * w);
                    for o in 0..*outer {
                        d.extend_from_slice(&g[o * total + off..o * total + off + w]);
                    }
                    (*p, d)
                })
                .collect()
        }
        Op::Slice {
            x,
            outer,
            width,
            start,
            count,
        } => {
            let mut dx = vec![0.0; outer * width];
            for o in 0..*outer {
                dx[o * width + start..o * width + start + count].copy_from_slice(&g[o * count..(o + 1) * count]);
            }
            vec![(*x, dx)]
        }
        _ => unreachable!("shape::backward called for {}", op.name()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_3d_matches_manual_index() {
        let tape = Tape::new();
        let a = DArray::from_fn(&[2, 3, 4], |i| i as f64);
        let x = tape.constant(a.clone());
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        let yv = tape.value(y);
        assert_eq!(yv.shape(), &[4, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(yv.get(&[k, i, j]), a.get(&[i, j, k]));
                }
            }
        }
    }

    #[test]
    fn index_select_then_concat_and_slice() {
        let tape = Tape::new();
        let x = tape.constant(DArray::from_fn(&[3, 2], |i| i as f64));
        let g = tape.index_select(x, 0, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(g).data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let c = tape.concat(&[x, g], 0).unwrap();
        assert_eq!(tape.shape(c), vec![6, 2]);
        let s = tape.slice(c, 1, 1, 1).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 3.0, 5.0, 5.0, 1.0, 5.0]);
    }

    #[test]
    fn invalid_permutation_rejected() {
        let tape = Tape::new();
        let x = tape.constant(DArray::zeros(&[2, 2]));
        assert!(tape.permute(x, &[0, 0]).is_err());
        assert!(tape.reshape(x, &[3]).is_err());
    }
}
