use crate::array::DArray;
use crate::error::{Result, TensorError};
use crate::tape::{Node, Op, Tape, Var};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn check_suffix(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(TensorError::shape(op, a, b));
    }
    Ok(())
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(v: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
    cdf + v * FRAC_1_SQRT_2PI * (-0.5 * v * v).exp()
}

impl Tape {
    /// Elementwise sum. `b` may have a shape equal to a suffix of `a`'s
    /// shape, in which case it repeats over `a`'s leading dims.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            check_suffix("add", av.shape(), bv.shape())?;
            let n = bv.numel();
            let data = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + bv.data()[i % n])
                .collect();
            DArray::new(av.shape().to_vec(), data)?
        };
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Elementwise product with the same suffix rule as [`Tape::add`].
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            check_suffix("mul", av.shape(), bv.shape())?;
            let n = bv.numel();
            let data = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x * bv.data()[i % n])
                .collect();
            DArray::new(av.shape().to_vec(), data)?
        };
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&self, x: Var, factor: f64) -> Var {
        let value = self.nodes()[x.0].value.map(|v| v * factor);
        self.push(value, Op::Scale { x, factor })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let value = self.nodes()[x.0].value.map(sigmoid);
        self.push(value, Op::Sigmoid { x })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, x: Var) -> Var {
        let value = self.nodes()[x.0].value.map(gelu);
        self.push(value, Op::Gelu { x })
    }
}

pub(crate) fn backward(nodes: &[Node], out: &DArray, op: &Op, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let mut res = Vec::new();
    match *op {
        Op::Add { a, b } => {
            if nodes[a.0].requires_grad {
                res.push((a, g.to_vec()));
            }
            if nodes[b.0].requires_grad {
                let n = nodes[b.0].value.numel();
                let mut db = vec![0.0; n];
                for (i, gi) in g.iter().enumerate() {
                    db[i % n] += gi;
                }
                res.push((b, db));
            }
        }
        Op::Mul { a, b } => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            let n = bv.len();
            if nodes[a.0].requires_grad {
                res.push((a, g.iter().enumerate().map(|(i, gi)| gi * bv[i % n]).collect()));
            }
            if nodes[b.0].requires_grad {
                let mut db = vec![0.0; n];
                for (i, gi) in g.iter().enumerate() {
                    db[i % n] += gi * av[i];
                }
                res.push((b, db));
            }
        }
        Op::Scale { x, factor } => res.push((x, g.iter().map(|gi| gi * factor).collect())),
        Op::Sigmoid { x } => {
            let y = out.data();
            res.push((x, g.iter().zip(y).map(|(gi, s)| gi * s * (1.0 - s)).collect()));
        }
        Op::Gelu { x } => {
            let xv = nodes[x.0].value.data();
            res.push((x, g.iter().zip(xv).map(|(gi, &v)| gi * gelu_grad(v)).collect()));
        }
        _ => unreachable!("elementwise::backward called for {}", op.name()),
    }
    res
}
