use std::fmt;

use rand::Rng;

use crate::error::{Result, TensorError};

/// Dense row-major array of `f64`.
#[derive(Clone, PartialEq)]
pub struct DArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(TensorError::arg("DArray::new", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Argument {
                op: "DArray::new",
                msg: format!("shape {shape:?} holds {n} elements, data has {}", data.len()),
            });
        }
        Ok(DArray { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        DArray {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        DArray {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        DArray {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    /// Samples i.i.d. values from `N(0, std^2)` using Box-Muller on the given RNG.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| std * standard_normal(rng))
    }

    /// Uniform values in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * d + i;
        }
        off
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::shape("reshape", &self.shape, shape));
        }
        Ok(DArray {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        DArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &DArray) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Indices of the `k` largest values along `axis`, one list per slice.
    ///
    /// Slices are enumerated outer-major; within a slice indices come back in
    /// descending value order, ties resolved toward the lower index.
    pub fn topk_indices(&self, axis: usize, k: usize) -> Result<Vec<Vec<usize>>> {
        if axis >= self.ndim() {
            return Err(TensorError::arg("topk_indices", format!("axis {axis} out of range for {:?}", self.shape)));
        }
        let (outer, len, inner) = split_axis(&self.shape, axis);
        if k > len {
            return Err(TensorError::arg("topk_indices", format!("k={k} exceeds axis length {len}")));
        }
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| self.data[(o * len + j) * inner + i];
                out.push(topk_of(len, k, at));
            }
        }
        Ok(out)
    }
}

/// `k` largest of `n` values given by `value(j)`, ties broken toward lower `j`.
pub fn topk_of(n: usize, k: usize, value: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| value(b).total_cmp(&value(a)).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

impl fmt::Debug for DArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DArray{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.data.len())
        }
    }
}

/// Splits a shape into `(outer, len, inner)` around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller; u1 in (0, 1] keeps ln finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_ties_go_to_lower_index() {
        let x = DArray::new(vec![3], vec![5.0, 5.0, 1.0]).unwrap();
        assert_eq!(x.topk_indices(0, 1).unwrap(), vec![vec![0]]);
        assert_eq!(x.topk_indices(0, 3).unwrap(), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn topk_rejects_oversized_k() {
        let x = DArray::zeros(&[2, 3]);
        assert!(matches!(x.topk_indices(1, 4), Err(TensorError::Argument { .. })));
    }

    #[test]
    fn topk_along_inner_axis() {
        let x = DArray::new(vec![2, 3], vec![1.0, 9.0, 3.0, 4.0, 2.0, 8.0]).unwrap();
        assert_eq!(x.topk_indices(0, 1).unwrap(), vec![vec![1], vec![0], vec![1]]);
        assert_eq!(x.topk_indices(1, 2).unwrap(), vec![vec![1, 2], vec![2, 0]]);
    }

    #[test]
    fn new_checks_element_count() {
        assert!(DArray::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
