//! Reverse-mode differentiation over dense matrices.
//!
//! Second-order terms are only supported for one pattern: the input
//! gradient of a leaky-relu MLP that ends in a scalar, which is what the
//! gradient penalty needs (see [`critic_input_gradient`]).

mod graph;
mod params;

pub use graph::{
    splice_rows, BatchNormMode, Bindings, Gradients, Graph, NodeId, Op, BATCH_NORM_EPS, STATS_VARIANCE_FLOOR,
};
pub use params::{sgd_step, Direction, Param, ParamSet};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("input {0:?} is not bound")]
    Unbound(String),
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward root must be scalar, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("graph has not been evaluated")]
    NotEvaluated,
    #[error("sequence shorter than context span {span}")]
    SequenceTooShort { span: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid learning rate {0}")]
    InvalidRate(f64),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("unsupported critic: {0}")]
    UnsupportedCritic(String),
}

/// Weight and bias nodes of one affine layer (`in x out` weight, `1 x out` bias).
#[derive(Clone, Copy, Debug)]
pub struct AffineNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// Forward pass of a leaky-relu MLP: affine layers separated by leaky-relu,
/// activation after every layer except the last.
pub fn leaky_mlp(g: &mut Graph, h: NodeId, layers: &[AffineNodes], slope: f64) -> NodeId {
    let mut x = h;
    for (i, l) in layers.iter().enumerate() {
        x = g.affine(x, l.weight, l.bias);
        if i + 1 < layers.len() {
            x = g.leaky_relu(x, slope);
        }
    }
    x
}

/// Builds the differentiable input gradient `d f(h) / d h` for every row of
/// `h`, where `f` is the scalar leaky-relu MLP described by `layers`.
///
/// With pre-activations `z_i` and masks `D_i = diag(f'(z_i))` the row gradient
/// is `W_1 D_1 W_2 D_2 ... w_L`. The masks are constants for differentiation
/// since the second derivative of leaky-relu is zero almost everywhere, so
/// backpropagating through the returned node gives exact parameter gradients
/// of any function of the input gradient.
///
/// `rows` is the number of rows of `h`.
pub fn critic_input_gradient(
    g: &mut Graph,
    h: NodeId,
    rows: usize,
    layers: &[AffineNodes],
    slope: f64,
) -> Result<NodeId, GraphError> {
    let Some((last, hidden)) = layers.split_last() else {
        return Err(GraphError::UnsupportedCritic("no layers".into()));
    };
    let mut masks = Vec::with_capacity(hidden.len());
    let mut x = h;
    for l in hidden {
        let z = g.affine(x, l.weight, l.bias);
        masks.push(g.activation_mask(z, slope));
        x = g.leaky_relu(z, slope);
    }
    // d f / d a_L for every row: the final weight column broadcast to rows.
    let w_out = g.transpose(last.weight);
    let mut grad = g.broadcast_rows(w_out, rows);
    for (l, mask) in hidden.iter().zip(masks).rev() {
        let gz = g.mul(grad, mask);
        let wt = g.transpose(l.weight);
        grad = g.matmul(gz, wt);
    }
    Ok(grad)
}
