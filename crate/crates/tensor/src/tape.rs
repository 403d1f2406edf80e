//! Reverse-mode tape.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! nodes in exact reverse order of execution and accumulates adjoints into
//! the nodes that require gradients.

use std::cell::{Cell, Ref, RefCell};

use crate::array::DArray;
use crate::error::{Result, TensorError};
use crate::ops;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Multiply-accumulate counts recorded by forward ops.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCount {
    pub matmul: u64,
    pub linear: u64,
    pub conv: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.matmul + self.linear + self.conv
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvGeom {
    pub in_ext: [usize; 3],
    pub out_ext: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        a_batched: bool,
        b_batched: bool,
        p: usize,
        q: usize,
        r: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        cin: usize,
        cout: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Sigmoid {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
        mask: Option<Vec<bool>>,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cols: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Mean {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
        classes: usize,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        in_shape: Vec<usize>,
        axes: Vec<usize>,
    },
    IndexSelect {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        idx: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        width: usize,
        start: usize,
        count: usize,
    },
    Conv3d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    WindowPool {
        x: Var,
        kind: PoolKind,
        in_ext: [usize; 3],
        window: [usize; 3],
        channels: usize,
        /// Flat input offset selected by each output element (max pooling).
        argmax: Vec<usize>,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { mask: None, .. } => "softmax",
            Op::Softmax { .. } => "masked_softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Mean { .. } => "mean",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::IndexSelect { .. } => "index_select",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Conv3d { .. } => "grouped_conv3d",
            Op::WindowPool { kind: PoolKind::Avg, .. } => "avg_pool3d",
            Op::WindowPool { .. } => "max_pool3d",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Linear { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv3d { x, w, .. } => vec![*x, *w],
            Op::Concat { parts, .. } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Scale { x, .. }
            | Op::Sigmoid { x }
            | Op::Gelu { x }
            | Op::Softmax { x, .. }
            | Op::Mean { x, .. }
            | Op::WeightedSum { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::IndexSelect { x, .. }
            | Op::Slice { x, .. }
            | Op::WindowPool { x, .. } => vec![*x],
        }
    }
}

pub(crate) struct Node {
    pub value: DArray,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub op: Op,
}

/// Records executed ops for a single forward pass.
///
/// Ops take `&self`; the node list lives behind a `RefCell`, so a `Ref`
/// returned by [`Tape::value`] must be dropped before the next op runs.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    differentiated: Cell<bool>,
    macs: Cell<MacCount>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Trainable input: gradients accumulate into it.
    pub fn leaf(&self, value: DArray) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: DArray) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Ref<'_, DArray> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradient accumulated by `backward`, if any reached this node.
    pub fn grad(&self, v: Var) -> Option<DArray> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| DArray::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes.borrow()[v.0].op.name()
    }

    pub fn macs(&self) -> MacCount {
        self.macs.get()
    }

    /// First node (in execution order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.differentiated.set(false);
        self.macs.set(MacCount::default());
    }

    /// Propagates adjoints from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<()> {
        if self.differentiated.get() {
            return Err(TensorError::BackwardTwice);
        }
        let mut nodes = self.nodes.borrow_mut();
        let root_shape = nodes[root.0].value.shape().to_vec();
        if nodes[root.0].value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        self.differentiated.set(true);
        nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !nodes[i].requires_grad || matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = nodes[i].grad.take() else {
                continue;
            };
            let contributions = ops::backward(&nodes, i, &g);
            nodes[i].grad = Some(g);
            for (input, delta) in contributions {
                let node = &mut nodes[input.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    pub(crate) fn push(&self, value: DArray, op: Op) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&self, value: DArray, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    pub(crate) fn count_macs(&self, f: impl FnOnce(&mut MacCount)) {
        let mut m = self.macs.get();
        f(&mut m);
        self.macs.set(m);
    }
}
