mod conv;
mod elementwise;
pub(crate) mod linalg;
mod reduce;
mod shape;

use crate::tape::{Node, Op, Var};

pub(crate) use elementwise::sigmoid;

/// Adjoint contributions of node `i` to its inputs given upstream `g`.
pub(crate) fn backward(nodes: &[Node], i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => Vec::new(),
        op @ (Op::Matmul { .. } | Op::Linear { .. }) => linalg::backward(nodes, op, g),
        op @ (Op::Add { .. } | Op::Mul { .. } | Op::Scale { .. } | Op::Sigmoid { .. } | Op::Gelu { .. }) => {
            elementwise::backward(nodes, &node.value, op, g)
        }
        op @ (Op::Softmax { .. }
        | Op::LayerNorm { .. }
        | Op::Mean { .. }
        | Op::WeightedSum { .. }
        | Op::CrossEntropy { .. }) => reduce::backward(nodes, &node.value, op, g),
        op @ (Op::Reshape { .. }
        | Op::Permute { .. }
        | Op::IndexSelect { .. }
        | Op::Concat { .. }
        | Op::Slice { .. }) => shape::backward(nodes, op, g),
        op @ (Op::Conv3d { .. } | Op::WindowPool { .. }) => conv::backward(nodes, op, g),
    }
}
