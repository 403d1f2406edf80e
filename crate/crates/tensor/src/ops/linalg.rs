use crate::array::DArray;
use crate::error::{Result, TensorError};
use crate::tape::{Node, Op, Tape, Var};

/// `c = a·b + beta·c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= extent(m, k, a_strides), "gemm: lhs buffer too short");
    assert!(b.len() >= extent(k, n, b_strides), "gemm: rhs buffer too short");
    assert!(c.len() >= m * n, "gemm: output buffer too short");
    // SAFETY: the asserts above bound every offset the kernel can touch for
    // the given extents and strides; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    /// Batched matrix product `[..., P, Q] x [..., Q, R] -> [..., P, R]`.
    ///
    /// Leading batch dims must agree, or one operand may be a plain matrix
    /// shared across the other's batch.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, op) = {
            let nodes = self.nodes();
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let (sa, sb) = (av.shape(), bv.shape());
            if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
                return Err(TensorError::shape("matmul", sa, sb));
            }
            let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
            let batch_shape = if ba == bb || bb.is_empty() {
                ba
            } else if ba.is_empty() {
                bb
            } else {
                return Err(TensorError::shape("matmul", sa, sb));
            };
            let batch: usize = batch_shape.iter().product();
            let (p, q, r) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
            let a_batched = !ba.is_empty();
            let b_batched = !bb.is_empty();
            let mut out = vec![0.0; batch * p * r];
            for i in 0..batch {
                let ao = if a_batched { i * p * q } else { 0 };
                let bo = if b_batched { i * q * r } else { 0 };
                gemm(
                    p,
                    q,
                    r,
                    &av.data()[ao..ao + p * q],
                    (q, 1),
                    &bv.data()[bo..bo + q * r],
                    (r, 1),
                    &mut out[i * p * r..(i + 1) * p * r],
                    0.0,
                );
            }
            let mut shape = batch_shape.to_vec();
            shape.extend([p, r]);
            (
                DArray::new(shape, out)?,
                Op::Matmul {
                    a,
                    b,
                    batch,
                    a_batched,
                    b_batched,
                    p,
                    q,
                    r,
                },
            )
        };
        if let Op::Matmul { batch, p, q, r, .. } = op {
            self.count_macs(|m| m.matmul += (batch * p * q * r) as u64);
        }
        Ok(self.push(value, op))
    }

    /// Affine map over the last axis: `x·w + b` with `w: [C_in, C_out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (value, rows, cin, cout) = {
            let nodes = self.nodes();
            let xv = &nodes[x.0].value;
            let wv = &nodes[w.0].value;
            let (sx, sw) = (xv.shape(), wv.shape());
            if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[0] {
                return Err(TensorError::shape("linear", sx, sw));
            }
            let (cin, cout) = (sw[0], sw[1]);
            let rows = xv.numel() / cin;
            let mut out = vec![0.0; rows * cout];
            if let Some(b) = b {
                let bv = &nodes[b.0].value;
                if bv.shape() != [cout] {
                    return Err(TensorError::shape("linear", sw, bv.shape()));
                }
                for row in out.chunks_mut(cout) {
                    row.copy_from_slice(bv.data());
                }
            }
            gemm(rows, cin, cout, xv.data(), (cin, 1), wv.data(), (cout, 1), &mut out, 1.0);
            let mut shape = sx[..sx.len() - 1].to_vec();
            shape.push(cout);
            (DArray::new(shape, out)?, rows, cin, cout)
        };
        self.count_macs(|m| m.linear += (rows * cin * cout) as u64);
        Ok(self.push(
            value,
            Op::Linear {
                x,
                w,
                b,
                rows,
                cin,
                cout,
            },
        ))
    }
}

pub(crate) fn backward(nodes: &[Node], op: &Op, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let mut out = Vec::new();
    match *op {
        Op::Matmul {
            a,
            b,
            batch,
            a_batched,
            b_batched,
            p,
            q,
            r,
        } => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            if nodes[a.0].requires_grad {
                let mut da = vec![0.0; nodes[a.0].value.numel()];
                for i in 0..batch {
                    let bo = if b_batched { i * q * r } else { 0 };
                    let ao = if a_batched { i * p * q } else { 0 };
                    // da = g · bᵀ
                    gemm(
                        p,
                        r,
                        q,
                        &g[i * p * r..(i + 1) * p * r],
                        (r, 1),
                        &bv[bo..bo + q * r],
                        (1, r),
                        &mut da[ao..ao + p * q],
                        1.0,
                    );
                }
                out.push((a, da));
            }
            if nodes[b.0].requires_grad {
                let mut db = vec![0.0; nodes[b.0].value.numel()];
                for i in 0..batch {
                    let ao = if a_batched { i * p * q } else { 0 };
                    let bo = if b_batched { i * q * r } else { 0 };
                    // db = aᵀ · g
                    gemm(
                        q,
                        p,
                        r,
                        &av[ao..ao + p * q],
                        (1, q),
                        &g[i * p * r..(i + 1) * p * r],
                        (r, 1),
                        &mut db[bo..bo + q * r],
                        1.0,
                    );
                }
                out.push((b, db));
            }
        }
        Op::Linear {
            x,
            w,
            b,
            rows,
            cin,
            cout,
        } => {
            if nodes[x.0].requires_grad {
                let mut dx = vec![0.0; rows * cin];
                gemm(rows, cout, cin, g, (cout, 1), nodes[w.0].value.data(), (1, cout), &mut dx, 0.0);
                out.push((x, dx));
            }
            if nodes[w.0].requires_grad {
                let mut dw = vec![0.0; cin * cout];
                gemm(cin, rows, cout, nodes[x.0].value.data(), (1, cin), g, (cout, 1), &mut dw, 0.0);
                out.push((w, dw));
            }
            if let Some(b) = b.filter(|b| nodes[b.0].requires_grad) {
                let mut db = vec![0.0; cout];
                for row in g.chunks(cout) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                out.push((b, db));
            }
        }
        _ => unreachable!("linalg::backward called for {}", op.name()),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_a() {
        let tape = Tape::new();
        let a = DArray::from_fn(&[3, 4], |i| i as f64 * 0.5 - 1.0);
        let i3 = tape.constant(DArray::eye(3));
        let av = tape.constant(a.clone());
        let c = tape.matmul(i3, av).unwrap();
        assert_eq!(*tape.value(c), a);
    }

    #[test]
    fn hand_expansion() {
        let tape = Tape::new();
        let a = tape.constant(DArray::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(DArray::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
        assert_eq!(tape.macs().matmul, 2);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(DArray::zeros(&[2, 3]));
        let b = tape.constant(DArray::zeros(&[4, 5]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn shared_rhs_broadcasts_over_batch() {
        let tape = Tape::new();
        let a = tape.constant(DArray::from_fn(&[2, 1, 2], |i| i as f64));
        let b = tape.constant(DArray::new(vec![2, 1], vec![1.0, 10.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), vec![2, 1, 1]);
        assert_eq!(tape.value(c).data(), &[10.0, 32.0]);
    }

    #[test]
    fn mismatched_batches_rejected() {
        let tape = Tape::new();
        let a = tape.constant(DArray::zeros(&[2, 1, 2]));
        let b = tape.constant(DArray::zeros(&[3, 2, 1]));
        assert!(tape.matmul(a, b).is_err());
    }
}
