use crate::array::DArray;
use crate::error::{Result, TensorError};
use crate::tape::{ConvGeom, Node, Op, PoolKind, Tape, Var};

fn grid_of(op: &'static str, shape: &[usize]) -> Result<([usize; 3], usize)> {
    match *shape {
        [t, h, w, c] => Ok(([t, h, w], c)),
        _ => Err(TensorError::arg(op, format!("expected [T, H, W, C], got {shape:?}"))),
    }
}

/// Calls `f(out_voxel, tap, in_voxel)` for every in-bounds kernel tap.
fn for_each_tap(geom: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let [ot, oh, ow] = geom.out_ext;
    let [kt, kh, kw] = geom.kernel;
    let [it, ih, iw] = geom.in_ext;
    let mut out_vox = 0;
    for t in 0..ot {
        for h in 0..oh {
            for w in 0..ow {
                let mut tap = 0;
                for dt in 0..kt {
                    let st = (t * geom.stride[0] + dt) as isize - geom.pad[0] as isize;
                    for dh in 0..kh {
                        let sh = (h * geom.stride[1] + dh) as isize - geom.pad[1] as isize;
                        for dw in 0..kw {
                            let sw = (w * geom.stride[2] + dw) as isize - geom.pad[2] as isize;
                            let inside = (0..it as isize).contains(&st)
                                && (0..ih as isize).contains(&sh)
                                && (0..iw as isize).contains(&sw);
                            if inside {
                                let in_vox = ((st as usize) * ih + sh as usize) * iw + sw as usize;
                                f(out_vox, tap, in_vox);
                            }
                            tap += 1;
                        }
                    }
                }
                out_vox += 1;
            }
        }
    }
}

impl Tape {
    /// Grouped 3-D convolution over a channels-last `[T, H, W, C_in]` grid.
    ///
    /// `w` has shape `[C_out, k_t, k_h, k_w, C_in / groups]`; kernels must be
    /// odd and are zero-padded by `k / 2` per side, so stride 1 preserves the
    /// extents and stride `s` yields `ceil(n / s)`. No bias term.
    pub fn grouped_conv3d(&self, x: Var, w: Var, groups: usize, stride: [usize; 3]) -> Result<Var> {
        let (value, geom) = {
            let nodes = self.nodes();
            let xv = &nodes[x.0].value;
            let wv = &nodes[w.0].value;
            let (in_ext, c_in) = grid_of("grouped_conv3d", xv.shape())?;
            let &[c_out, kt, kh, kw, ipg] = wv.shape() else {
                return Err(TensorError::shape("grouped_conv3d", xv.shape(), wv.shape()));
            };
            if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
                return Err(TensorError::arg(
                    "grouped_conv3d",
                    format!("channels in={c_in} out={c_out} not divisible by groups={groups}"),
                ));
            }
            if ipg != c_in / groups {
                return Err(TensorError::shape("grouped_conv3d", xv.shape(), wv.shape()));
            }
            let kernel = [kt, kh, kw];
            if kernel.iter().any(|k| k % 2 == 0) || stride.contains(&0) {
                return Err(TensorError::arg(
                    "grouped_conv3d",
                    format!("kernel {kernel:?} must be odd and stride {stride:?} positive"),
                ));
            }
            let pad = kernel.map(|k| k / 2);
            let out_ext = [0, 1, 2].map(|d| (in_ext[d] + 2 * pad[d] - kernel[d]) / stride[d] + 1);
            let geom = ConvGeom {
                in_ext,
                out_ext,
                kernel,
                stride,
                pad,
                c_in,
                c_out,
                groups,
            };
            let kvol = kt * kh * kw;
            let opg = c_out / groups;
            let (xd, wd) = (xv.data(), wv.data());
            let mut out = vec![0.0; out_ext.iter().product::<usize>() * c_out];
            for_each_tap(&geom, |ov, tap, iv| {
                let xin = &xd[iv * c_in..(iv + 1) * c_in];
                let dst = &mut out[ov * c_out..(ov + 1) * c_out];
                for (co, o) in dst.iter_mut().enumerate() {
                    let xs = &xin[(co / opg) * ipg..(co / opg + 1) * ipg];
                    let wb = (co * kvol + tap) * ipg;
                    *o += xs.iter().zip(&wd[wb..wb + ipg]).map(|(a, b)| a * b).sum::<f64>();
                }
            });
            let shape = vec![out_ext[0], out_ext[1], out_ext[2], c_out];
            (DArray::new(shape, out)?, geom)
        };
        let macs = geom.out_ext.iter().product::<usize>() * geom.c_out * geom.kernel.iter().product::<usize>() * (geom.c_in / geom.groups);
        self.count_macs(|m| m.conv += macs as u64);
        Ok(self.push(value, Op::Conv3d { x, w, geom }))
    }

    /// Non-overlapping window pooling over a `[T, H, W, C]` grid.
    pub fn pool3d(&self, x: Var, window: [usize; 3], kind: PoolKind) -> Result<Var> {
        let (value, in_ext, channels, argmax) = {
            let nodes = self.nodes();
            let xv = &nodes[x.0].value;
            let (in_ext, c) = grid_of("pool3d", xv.shape())?;
            if (0..3).any(|d| window[d] == 0 || in_ext[d] % window[d] != 0) {
                return Err(TensorError::arg("pool3d", format!("window {window:?} does not tile grid {in_ext:?}")));
            }
            let out_ext = [0, 1, 2].map(|d| in_ext[d] / window[d]);
            let n_out = out_ext.iter().product::<usize>();
            let vol = window.iter().product::<usize>() as f64;
            let mut out = vec![0.0; n_out * c];
            let mut argmax = vec![usize::MAX; if kind == PoolKind::Max { n_out * c } else { 0 }];
            let xd = xv.data();
            for (ov, iv) in window_members(in_ext, window) {
                for ch in 0..c {
                    let src = iv * c + ch;
                    let dst = ov * c + ch;
                    match kind {
                        PoolKind::Avg => out[dst] += xd[src] / vol,
                        PoolKind::Max => {
                            if argmax[dst] == usize::MAX || xd[src] > out[dst] {
                                out[dst] = xd[src];
                                argmax[dst] = src;
                            }
                        }
                    }
                }
            }
            let shape = vec![out_ext[0], out_ext[1], out_ext[2], c];
            (DArray::new(shape, out)?, in_ext, c, argmax)
        };
        Ok(self.push(
            value,
            Op::WindowPool {
                x,
                kind,
                in_ext,
                window,
                channels,
                argmax,
            },
        ))
    }
}

/// `(output voxel, input voxel)` pairs for non-overlapping windows, visiting
/// the members of each window in raster order.
fn window_members(in_ext: [usize; 3], window: [usize; 3]) -> impl Iterator<Item = (usize, usize)> {
    let out_ext = [0, 1, 2].map(|d| in_ext[d] / window[d]);
    let [it, ih, iw] = in_ext;
    (0..it).flat_map(move |t| {
        (0..ih).flat_map(move |h| {
            (0..iw).map(move |w| {
                let ov = ((t / window[0]) * out_ext[1] + h / window[1]) * out_ext[2] + w / window[2];
                (ov, (t * ih + h) * iw + w)
            })
        })
    })
}

pub(crate) fn backward(nodes: &[Node], op: &Op, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let mut res = Vec::new();
    match op {
        Op::Conv3d { x, w, geom } => {
            let xd = nodes[x.0].value.data();
            let wd = nodes[w.0].value.data();
            let (c_in, c_out) = (geom.c_in, geom.c_out);
            let ipg = c_in / geom.groups;
            let opg = c_out / geom.groups;
            let kvol: usize = geom.kernel.iter().product();
            let need_x = nodes[x.0].requires_grad;
            let need_w = nodes[w.0].requires_grad;
            let mut dx = vec![0.0; if need_x { xd.len() } else { 0 }];
            let mut dw = vec![0.0; if need_w { wd.len() } else { 0 }];
            for_each_tap(geom, |ov, tap, iv| {
                for co in 0..c_out {
                    let go = g[ov * c_out + co];
                    if go == 0.0 {
                        continue;
                    }
                    let xb = iv * c_in + (co / opg) * ipg;
                    let wb = (co * kvol + tap) * ipg;
                    for ci in 0..ipg {
                        if need_x {
                            dx[xb + ci] += go * wd[wb + ci];
                        }
                        if need_w {
                            dw[wb + ci] += go * xd[xb + ci];
                        }
                    }
                }
            });
            if need_x {
                res.push((*x, dx));
            }
            if need_w {
                res.push((*w, dw));
            }
        }
        Op::WindowPool {
            x,
            kind,
            in_ext,
            window,
            channels,
            argmax,
        } => {
            let mut dx = vec![0.0; in_ext.iter().product::<usize>() * channels];
            match kind {
                PoolKind::Avg => {
                    let vol = window.iter().product::<usize>() as f64;
                    for (ov, iv) in window_members(*in_ext, *window) {
                        for ch in 0..*channels {
                            dx[iv * channels + ch] += g[ov * channels + ch] / vol;
                        }
                    }
                }
                PoolKind::Max => {
                    for (dst, &src) in argmax.iter().enumerate() {
                        dx[src] += g[dst];
                    }
                }
            }
            res.push((*x, dx));
        }
        _ => unreachable!("conv::backward called for {}", op.name()),
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_kernel_is_identity() {
        let tape = Tape::new();
        let a = DArray::from_fn(&[2, 3, 3, 4], |i| (i as f64).sin());
        let x = tape.constant(a.clone());
        let w = tape.constant(DArray::full(&[4, 1, 1, 1, 1], 1.0));
        let y = tape.grouped_conv3d(x, w, 4, [1, 1, 1]).unwrap();
        assert_eq!(*tape.value(y), a);
    }

    #[test]
    fn all_ones_depthwise_counts_27_in_interior() {
        let tape = Tape::new();
        let x = tape.constant(DArray::full(&[3, 3, 3, 2], 1.0));
        let w = tape.constant(DArray::full(&[2, 3, 3, 3, 1], 1.0));
        let y = tape.grouped_conv3d(x, w, 2, [1, 1, 1]).unwrap();
        let v = tape.value(y);
        assert_eq!(v.get(&[1, 1, 1, 0]), 27.0);
        assert_eq!(v.get(&[0, 0, 0, 1]), 8.0);
    }

    #[test]
    fn strided_output_extent() {
        let tape = Tape::new();
        let x = tape.constant(DArray::zeros(&[4, 8, 8, 2]));
        let w = tape.constant(DArray::zeros(&[2, 3, 3, 3, 1]));
        let y = tape.grouped_conv3d(x, w, 2, [1, 2, 2]).unwrap();
        assert_eq!(tape.shape(y), vec![4, 4, 4, 2]);
    }

    #[test]
    fn indivisible_groups_rejected() {
        let tape = Tape::new();
        let x = tape.constant(DArray::zeros(&[1, 1, 1, 3]));
        let w = tape.constant(DArray::zeros(&[3, 1, 1, 1, 1]));
        assert!(matches!(tape.grouped_conv3d(x, w, 2, [1, 1, 1]), Err(TensorError::Argument { .. })));
    }

    #[test]
    fn pooling_avg_and_max() {
        let tape = Tape::new();
        let x = tape.constant(DArray::from_fn(&[1, 2, 2, 1], |i| i as f64));
        let a = tape.pool3d(x, [1, 2, 2], PoolKind::Avg).unwrap();
        let m = tape.pool3d(x, [1, 2, 2], PoolKind::Max).unwrap();
        assert_eq!(tape.value(a).data(), &[1.5]);
        assert_eq!(tape.value(m).data(), &[3.0]);
        assert!(tape.pool3d(x, [1, 3, 1], PoolKind::Avg).is_err());
    }
}
