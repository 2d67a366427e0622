//! Small parameterized building blocks shared by the attention modules.

use crate::autodiff::{Graph, NodeId};

/// Node ids of one affine map, stored as `w: [d_in, d_out]`, `b: [d_out]`.
#[derive(Debug, Clone, Copy)]
pub struct AffineIds {
    pub w: NodeId,
    pub b: NodeId,
}

/// `x[n, d_in] · w + b` per row.
pub fn affine_rows(g: &mut Graph, x: NodeId, p: &AffineIds) -> NodeId {
    let lin = g.matmul(x, p.w);
    g.add_bias(lin, p.b)
}

/// `v[d_in] · w + b`.
pub fn affine_vec(g: &mut Graph, v: NodeId, p: &AffineIds) -> NodeId {
    let lin = g.vecmat(v, p.w);
    g.add(lin, p.b)
}

/// Non-linear feature transform used for every attention-space projection:
/// affine followed by tanh.
pub fn transform_rows(g: &mut Graph, x: NodeId, p: &AffineIds) -> NodeId {
    let a = affine_rows(g, x, p);
    g.tanh(a)
}

/// Vector variant of [`transform_rows`].
pub fn transform_vec(g: &mut Graph, v: NodeId, p: &AffineIds) -> NodeId {
    let a = affine_vec(g, v, p);
    g.tanh(a)
}
