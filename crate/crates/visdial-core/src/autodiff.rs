//! Dense f64 tensors on a define-by-run tape with reverse-mode differentiation.
//!
//! Every operation records itself on the owning [`Graph`]; [`Graph::backward`]
//! replays the tape in exact reverse recording order. Shapes are explicit:
//! binary elementwise ops require identical shapes (no implicit broadcasting),
//! and the few patterned expansions the model needs (bias over rows, repeating
//! a vector into rows) are dedicated ops with their own adjoints. Outputs are
//! checked finite after every op; a NaN or Inf is a hard error at the op that
//! produced it.

/// Index of a node on the tape. Inputs always precede outputs.
pub type NodeId = usize;

/// Epsilon used to clamp near-zero norms in [`Graph::l2_normalize`].
pub const L2_NORM_EPS: f64 = 1e-12;

/// A dense value node. `grad` is populated by `backward` iff `requires_grad`.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    VecMat { v: NodeId, m: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MulScalar { x: NodeId, c: f64 },
    AddBias { m: NodeId, bias: NodeId },
    BroadcastRows { v: NodeId, rows: usize },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Relu { x: NodeId },
    Exp { x: NodeId },
    Log { x: NodeId },
    Neg { x: NodeId },
    Softmax { x: NodeId, axis: usize, mask: Option<Vec<bool>> },
    L2Normalize { x: NodeId, axis: usize },
    Concat { xs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, start: usize, len: usize },
    WeightedSum { w: NodeId, items: NodeId },
    Sum { x: NodeId },
    Select { x: NodeId, index: usize },
    GatherRows { table: NodeId, ids: Vec<usize> },
    Reshape { x: NodeId },
}

/// Define-by-run tape. Rebuilt for every forward pass; a graph and its
/// tensors stay on one thread for the duration of a forward/backward pair.
pub struct Graph {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
    backward_done: bool,
}

fn assert_finite(op: &str, values: &[f64]) {
    for &v in values {
        assert!(v.is_finite(), "{op}: produced a non-finite value ({v})");
    }
}

/// Iterate the lines of `shape` along `axis` as (start, stride, len).
fn for_each_line(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let extent = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * extent * inner + i, inner, extent);
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), ops: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        assert_eq!(self.nodes[id].numel(), 1, "scalar_value: node is not a scalar");
        self.nodes[id].values[0]
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> NodeId {
        let numel: usize = shape.iter().product();
        assert_eq!(values.len(), numel, "value count does not match shape {shape:?}");
        assert!(shape.iter().all(|&e| e > 0), "zero extent in shape {shape:?}");
        assert_finite(op_name(&op), &values);
        debug_assert!(op_inputs(&op).iter().all(|&i| i < self.nodes.len()));
        let id = self.nodes.len();
        self.nodes.push(Tensor { shape, values, requires_grad, grad: None });
        self.ops.push(op);
        id
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ── Leaves ──────────────────────────────────────────────────────

    /// Leaf that never receives gradient (inputs, fixed values).
    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> NodeId {
        self.push(values, shape, false, Op::Leaf)
    }

    /// Leaf that accumulates gradient during backward (parameters).
    pub fn leaf(&mut self, values: Vec<f64>, shape: Vec<usize>) -> NodeId {
        self.push(values, shape, true, Op::Leaf)
    }

    /// Single-element constant of shape `[1]`.
    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(vec![v], vec![1])
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> NodeId {
        let n = shape.iter().product();
        self.constant(vec![0.0; n], shape)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// `a[m,k] · b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ash, bsh) = (&self.nodes[a].shape, &self.nodes[b].shape);
        assert_eq!(ash.len(), 2, "matmul: lhs must be 2-d, got {ash:?}");
        assert_eq!(bsh.len(), 2, "matmul: rhs must be 2-d, got {bsh:?}");
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        assert_eq!(
            bsh[0], k,
            "matmul: inner extents differ (lhs {ash:?}, rhs {bsh:?})"
        );
        let av = &self.nodes[a].values;
        let bv = &self.nodes[b].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        self.push(out, vec![m, n], rg, Op::Matmul { a, b })
    }

    /// `v[k] · m[k,n] -> [n]` (row vector times matrix).
    pub fn vecmat(&mut self, v: NodeId, m: NodeId) -> NodeId {
        let (vsh, msh) = (&self.nodes[v].shape, &self.nodes[m].shape);
        assert_eq!(vsh.len(), 1, "vecmat: lhs must be 1-d, got {vsh:?}");
        assert_eq!(msh.len(), 2, "vecmat: rhs must be 2-d, got {msh:?}");
        let (k, n) = (msh[0], msh[1]);
        assert_eq!(vsh[0], k, "vecmat: extents differ (lhs {vsh:?}, rhs {msh:?})");
        let vv = &self.nodes[v].values;
        let mv = &self.nodes[m].values;
        let mut out = vec![0.0; n];
        for p in 0..k {
            let x = vv[p];
            if x == 0.0 {
                continue;
            }
            let row = &mv[p * n..(p + 1) * n];
            for j in 0..n {
                out[j] += x * row[j];
            }
        }
        let rg = self.any_grad(&[v, m]);
        self.push(out, vec![n], rg, Op::VecMat { v, m })
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let sh = &self.nodes[x].shape;
        assert_eq!(sh.len(), 2, "transpose: expects 2-d, got {sh:?}");
        let (r, c) = (sh[0], sh[1]);
        let xv = &self.nodes[x].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.nodes[x].requires_grad;
        self.push(out, vec![c, r], rg, Op::Transpose { x })
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn binary_values(&self, op: &str, a: NodeId, b: NodeId) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
        let (ash, bsh) = (&self.nodes[a].shape, &self.nodes[b].shape);
        assert_eq!(ash, bsh, "{op}: shapes differ ({ash:?} vs {bsh:?})");
        (ash.clone(), self.nodes[a].values.clone(), self.nodes[b].values.clone())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sh, av, bv) = self.binary_values("add", a, b);
        let out = av.iter().zip(&bv).map(|(x, y)| x + y).collect();
        let rg = self.any_grad(&[a, b]);
        self.push(out, sh, rg, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sh, av, bv) = self.binary_values("mul", a, b);
        let out = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
        let rg = self.any_grad(&[a, b]);
        self.push(out, sh, rg, Op::Mul { a, b })
    }

    /// Multiply every element by a fixed host-side scalar.
    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let sh = self.nodes[x].shape.clone();
        let out = self.nodes[x].values.iter().map(|v| v * c).collect();
        let rg = self.nodes[x].requires_grad;
        self.push(out, sh, rg, Op::MulScalar { x, c })
    }

    /// `m[r,c] + bias[c]` applied to every row.
    pub fn add_bias(&mut self, m: NodeId, bias: NodeId) -> NodeId {
        let (msh, bsh) = (&self.nodes[m].shape, &self.nodes[bias].shape);
        assert_eq!(msh.len(), 2, "add_bias: matrix must be 2-d, got {msh:?}");
        assert_eq!(
            bsh,
            &vec![msh[1]],
            "add_bias: bias shape {bsh:?} does not match columns of {msh:?}"
        );
        let (r, c) = (msh[0], msh[1]);
        let mv = &self.nodes[m].values;
        let bv = &self.nodes[bias].values;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(mv[i * c + j] + bv[j]);
            }
        }
        let rg = self.any_grad(&[m, bias]);
        self.push(out, vec![r, c], rg, Op::AddBias { m, bias })
    }

    /// Repeat `v[d]` into `rows` identical rows: `[rows, d]`.
    pub fn broadcast_rows(&mut self, v: NodeId, rows: usize) -> NodeId {
        let vsh = &self.nodes[v].shape;
        assert_eq!(vsh.len(), 1, "broadcast_rows: expects 1-d, got {vsh:?}");
        assert!(rows > 0, "broadcast_rows: rows must be positive");
        let d = vsh[0];
        let vv = &self.nodes[v].values;
        let mut out = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            out.extend_from_slice(vv);
        }
        let rg = self.nodes[v].requires_grad;
        self.push(out, vec![rows, d], rg, Op::BroadcastRows { v, rows })
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let sh = self.nodes[x].shape.clone();
        let out = self.nodes[x].values.iter().map(|&v| f(v)).collect();
        let rg = self.nodes[x].requires_grad;
        self.push(out, sh, rg, op)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::exp, Op::Exp { x })
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        for &v in &self.nodes[x].values {
            assert!(v > 0.0, "log: non-positive input ({v})");
        }
        self.unary(x, f64::ln, Op::Log { x })
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| -v, Op::Neg { x })
    }

    // ── Normalizations ──────────────────────────────────────────────

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.softmax_impl(x, axis, None)
    }

    /// Softmax along `axis` restricted to positions where `mask` is true;
    /// masked positions get weight exactly 0. `mask.len()` must equal the
    /// extent of `axis` and is applied identically to every line.
    pub fn softmax_masked(&mut self, x: NodeId, axis: usize, mask: &[bool]) -> NodeId {
        self.softmax_impl(x, axis, Some(mask.to_vec()))
    }

    fn softmax_impl(&mut self, x: NodeId, axis: usize, mask: Option<Vec<bool>>) -> NodeId {
        let sh = self.nodes[x].shape.clone();
        if let Some(m) = &mask {
            assert_eq!(
                m.len(),
                sh[axis],
                "softmax: mask length {} does not match axis extent {}",
                m.len(),
                sh[axis]
            );
            assert!(m.iter().any(|&b| b), "softmax: fully masked axis");
        }
        let xv = self.nodes[x].values.clone();
        let mut out = vec![0.0; xv.len()];
        let live = |p: usize| mask.as_ref().map_or(true, |m| m[p]);
        for_each_line(&sh, axis, |start, stride, len| {
            let mut max = f64::NEG_INFINITY;
            for p in 0..len {
                if live(p) {
                    max = max.max(xv[start + p * stride]);
                }
            }
            let mut denom = 0.0;
            for p in 0..len {
                if live(p) {
                    let e = (xv[start + p * stride] - max).exp();
                    out[start + p * stride] = e;
                    denom += e;
                }
            }
            for p in 0..len {
                if live(p) {
                    out[start + p * stride] /= denom;
                }
            }
        });
        let rg = self.nodes[x].requires_grad;
        self.push(out, sh, rg, Op::Softmax { x, axis, mask })
    }

    /// Scale each line along `axis` to unit L2 norm; norms below
    /// [`L2_NORM_EPS`] are clamped to the epsilon instead.
    pub fn l2_normalize(&mut self, x: NodeId, axis: usize) -> NodeId {
        let sh = self.nodes[x].shape.clone();
        let xv = self.nodes[x].values.clone();
        let mut out = vec![0.0; xv.len()];
        for_each_line(&sh, axis, |start, stride, len| {
            let mut sq = 0.0;
            for p in 0..len {
                sq += xv[start + p * stride] * xv[start + p * stride];
            }
            let norm = sq.sqrt().max(L2_NORM_EPS);
            for p in 0..len {
                out[start + p * stride] = xv[start + p * stride] / norm;
            }
        });
        let rg = self.nodes[x].requires_grad;
        self.push(out, sh, rg, Op::L2Normalize { x, axis })
    }

    // ── Shape and gather ────────────────────────────────────────────

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> NodeId {
        assert!(!xs.is_empty(), "concat: no inputs");
        let first = self.nodes[xs[0]].shape.clone();
        assert!(axis < first.len(), "concat: axis {axis} out of range for {first:?}");
        let mut total = 0;
        for &x in xs {
            let sh = &self.nodes[x].shape;
            assert_eq!(sh.len(), first.len(), "concat: rank mismatch ({sh:?} vs {first:?})");
            for (d, (&a, &b)) in sh.iter().zip(&first).enumerate() {
                assert!(
                    d == axis || a == b,
                    "concat: extent mismatch on axis {d} ({sh:?} vs {first:?})"
                );
            }
            total += sh[axis];
        }
        let mut oshape = first.clone();
        oshape[axis] = total;
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let onumel: usize = oshape.iter().product();
        let mut out = Vec::with_capacity(onumel);
        for o in 0..outer {
            for &x in xs {
                let ext = self.nodes[x].shape[axis];
                let chunk = ext * inner;
                let from = o * chunk;
                out.extend_from_slice(&self.nodes[x].values[from..from + chunk]);
            }
        }
        let rg = self.any_grad(xs);
        self.push(out, oshape, rg, Op::Concat { xs: xs.to_vec(), axis })
    }

    /// Contiguous slice of a 1-d tensor.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let sh = &self.nodes[x].shape;
        assert_eq!(sh.len(), 1, "slice: expects 1-d, got {sh:?}");
        assert!(start + len <= sh[0], "slice: {start}+{len} exceeds extent {}", sh[0]);
        let out = self.nodes[x].values[start..start + len].to_vec();
        let rg = self.nodes[x].requires_grad;
        self.push(out, vec![len], rg, Op::Slice { x, start, len })
    }

    /// `Σ_i w[i] · items[i,:] -> [d]`.
    pub fn weighted_sum(&mut self, w: NodeId, items: NodeId) -> NodeId {
        let (wsh, ish) = (&self.nodes[w].shape, &self.nodes[items].shape);
        assert_eq!(wsh.len(), 1, "weighted_sum: weights must be 1-d, got {wsh:?}");
        assert_eq!(ish.len(), 2, "weighted_sum: items must be 2-d, got {ish:?}");
        assert_eq!(
            wsh[0], ish[0],
            "weighted_sum: {} weights vs {} items",
            wsh[0], ish[0]
        );
        let (n, d) = (ish[0], ish[1]);
        let wv = &self.nodes[w].values;
        let iv = &self.nodes[items].values;
        let mut out = vec![0.0; d];
        for i in 0..n {
            let wi = wv[i];
            let row = &iv[i * d..(i + 1) * d];
            for j in 0..d {
                out[j] += wi * row[j];
            }
        }
        let rg = self.any_grad(&[w, items]);
        self.push(out, vec![d], rg, Op::WeightedSum { w, items })
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].values.iter().sum();
        let rg = self.nodes[x].requires_grad;
        self.push(vec![s], vec![1], rg, Op::Sum { x })
    }

    /// Pick one element of a 1-d tensor, as a `[1]` tensor.
    pub fn select(&mut self, x: NodeId, index: usize) -> NodeId {
        let sh = &self.nodes[x].shape;
        assert_eq!(sh.len(), 1, "select: expects 1-d, got {sh:?}");
        assert!(index < sh[0], "select: index {index} out of range {}", sh[0]);
        let v = self.nodes[x].values[index];
        let rg = self.nodes[x].requires_grad;
        self.push(vec![v], vec![1], rg, Op::Select { x, index })
    }

    /// Gather rows of `table[v,d]` by id: `[ids.len(), d]`. Duplicate ids
    /// accumulate gradient into the same row.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tsh = &self.nodes[table].shape;
        assert_eq!(tsh.len(), 2, "gather_rows: table must be 2-d, got {tsh:?}");
        assert!(!ids.is_empty(), "gather_rows: no ids");
        let (v, d) = (tsh[0], tsh[1]);
        for &id in ids {
            assert!(id < v, "gather_rows: id {id} out of range {v}");
        }
        let tv = &self.nodes[table].values;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.nodes[table].requires_grad;
        self.push(out, vec![ids.len(), d], rg, Op::GatherRows { table, ids: ids.to_vec() })
    }

    /// Reinterpret the value buffer under a new shape of equal size.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            self.nodes[x].numel(),
            "reshape: {shape:?} does not match {} elements",
            self.nodes[x].numel()
        );
        let out = self.nodes[x].values.clone();
        let rg = self.nodes[x].requires_grad;
        self.push(out, shape, rg, Op::Reshape { x })
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Populate `grad` of every `requires_grad` node with d(loss)/d(node).
    /// `loss` must be a single-element tensor; running backward twice on the
    /// same graph is an error.
    pub fn backward(&mut self, loss: NodeId) {
        assert!(!self.backward_done, "backward: already run on this graph (rebuild the graph instead)");
        assert_eq!(self.nodes[loss].numel(), 1, "backward: loss is not a scalar");
        assert!(
            self.nodes[loss].requires_grad,
            "backward: loss does not depend on any requires_grad leaf"
        );
        self.backward_done = true;
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(vec![0.0; node.values.len()]);
            }
        }
        self.nodes[loss].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.take().unwrap();
            let op = self.ops[i].clone();
            self.adjoint(i, &op, &g);
            self.nodes[i].grad = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(g) = &node.grad {
                for &v in g {
                    assert!(v.is_finite(), "backward: non-finite gradient at node {i}");
                }
            }
        }
    }

    fn accum(&mut self, id: NodeId, delta: &[f64]) {
        if let Some(g) = self.nodes[id].grad.as_mut() {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
    }

    fn adjoint(&mut self, out: NodeId, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.nodes[a].grad.is_some() {
                    // da = g · bᵀ
                    let bv = &self.nodes[b].values;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    self.accum(a, &da);
                }
                if self.nodes[b].grad.is_some() {
                    // db = aᵀ · g
                    let av = &self.nodes[a].values;
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                    self.accum(b, &db);
                }
            }

            Op::VecMat { v, m } => {
                let (k, n) = (self.nodes[m].shape[0], self.nodes[m].shape[1]);
                if self.nodes[v].grad.is_some() {
                    let mv = &self.nodes[m].values;
                    let mut dv = vec![0.0; k];
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += mv[p * n + j] * g[j];
                        }
                        dv[p] = s;
                    }
                    self.accum(v, &dv);
                }
                if self.nodes[m].grad.is_some() {
                    let vv = &self.nodes[v].values;
                    let mut dm = vec![0.0; k * n];
                    for p in 0..k {
                        let x = vv[p];
                        if x == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            dm[p * n + j] = x * g[j];
                        }
                    }
                    self.accum(m, &dm);
                }
            }

            Op::Transpose { x } => {
                let (c, r) = (self.nodes[out].shape[0], self.nodes[out].shape[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        dx[j * c + i] = g[i * r + j];
                    }
                }
                self.accum(x, &dx);
            }

            Op::Add { a, b } => {
                self.accum(a, g);
                self.accum(b, g);
            }

            Op::Mul { a, b } => {
                if self.nodes[a].grad.is_some() {
                    let da: Vec<f64> =
                        g.iter().zip(&self.nodes[b].values).map(|(gi, bi)| gi * bi).collect();
                    self.accum(a, &da);
                }
                if self.nodes[b].grad.is_some() {
                    let db: Vec<f64> =
                        g.iter().zip(&self.nodes[a].values).map(|(gi, ai)| gi * ai).collect();
                    self.accum(b, &db);
                }
            }

            Op::MulScalar { x, c } => {
                let dx: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                self.accum(x, &dx);
            }

            Op::AddBias { m, bias } => {
                self.accum(m, g);
                if self.nodes[bias].grad.is_some() {
                    let c = self.nodes[bias].shape[0];
                    let mut db = vec![0.0; c];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % c] += gi;
                    }
                    self.accum(bias, &db);
                }
            }

            Op::BroadcastRows { v, rows } => {
                let d = self.nodes[v].shape[0];
                let mut dv = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        dv[j] += g[r * d + j];
                    }
                }
                self.accum(v, &dv);
            }

            Op::Sigmoid { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[out].values)
                    .map(|(gi, &s)| gi * s * (1.0 - s))
                    .collect();
                self.accum(x, &dx);
            }

            Op::Tanh { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[out].values)
                    .map(|(gi, &t)| gi * (1.0 - t * t))
                    .collect();
                self.accum(x, &dx);
            }

            Op::Relu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x].values)
                    .map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accum(x, &dx);
            }

            Op::Exp { x } => {
                let dx: Vec<f64> =
                    g.iter().zip(&self.nodes[out].values).map(|(gi, &e)| gi * e).collect();
                self.accum(x, &dx);
            }

            Op::Log { x } => {
                let dx: Vec<f64> =
                    g.iter().zip(&self.nodes[x].values).map(|(gi, &v)| gi / v).collect();
                self.accum(x, &dx);
            }

            Op::Neg { x } => {
                let dx: Vec<f64> = g.iter().map(|gi| -gi).collect();
                self.accum(x, &dx);
            }

            Op::Softmax { x, axis, ref mask } => {
                // dx_p = s_p · (g_p − Σ_q g_q s_q) over live positions
                let sh = self.nodes[out].shape.clone();
                let sv = self.nodes[out].values.clone();
                let live = |p: usize| mask.as_ref().map_or(true, |m| m[p]);
                let mut dx = vec![0.0; sv.len()];
                for_each_line(&sh, axis, |start, stride, len| {
                    let mut dot = 0.0;
                    for p in 0..len {
                        if live(p) {
                            dot += g[start + p * stride] * sv[start + p * stride];
                        }
                    }
                    for p in 0..len {
                        if live(p) {
                            let idx = start + p * stride;
                            dx[idx] = sv[idx] * (g[idx] - dot);
                        }
                    }
                });
                self.accum(x, &dx);
            }

            Op::L2Normalize { x, axis } => {
                let sh = self.nodes[x].shape.clone();
                let xv = self.nodes[x].values.clone();
                let yv = self.nodes[out].values.clone();
                let mut dx = vec![0.0; xv.len()];
                for_each_line(&sh, axis, |start, stride, len| {
                    let mut sq = 0.0;
                    for p in 0..len {
                        sq += xv[start + p * stride] * xv[start + p * stride];
                    }
                    let raw = sq.sqrt();
                    if raw < L2_NORM_EPS {
                        // clamped: y = x / eps, a plain rescale
                        for p in 0..len {
                            dx[start + p * stride] = g[start + p * stride] / L2_NORM_EPS;
                        }
                    } else {
                        let mut dot = 0.0;
                        for p in 0..len {
                            dot += g[start + p * stride] * yv[start + p * stride];
                        }
                        for p in 0..len {
                            let idx = start + p * stride;
                            dx[idx] = (g[idx] - yv[idx] * dot) / raw;
                        }
                    }
                });
                self.accum(x, &dx);
            }

            Op::Concat { ref xs, axis } => {
                let oshape = self.nodes[out].shape.clone();
                let inner: usize = oshape[axis + 1..].iter().product();
                let outer: usize = oshape[..axis].iter().product();
                let ochunk = oshape[axis] * inner;
                for o in 0..outer {
                    let mut offset = 0;
                    for &x in xs {
                        let ext = self.nodes[x].shape[axis];
                        let chunk = ext * inner;
                        if self.nodes[x].grad.is_some() {
                            let src = &g[o * ochunk + offset..o * ochunk + offset + chunk];
                            let dst = self.nodes[x].grad.as_mut().unwrap();
                            for (gi, si) in dst[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *gi += si;
                            }
                        }
                        offset += chunk;
                    }
                }
            }

            Op::Slice { x, start, len } => {
                if let Some(dst) = self.nodes[x].grad.as_mut() {
                    for p in 0..len {
                        dst[start + p] += g[p];
                    }
                }
            }

            Op::WeightedSum { w, items } => {
                let (n, d) = (self.nodes[items].shape[0], self.nodes[items].shape[1]);
                if self.nodes[w].grad.is_some() {
                    let iv = &self.nodes[items].values;
                    let mut dw = vec![0.0; n];
                    for i in 0..n {
                        let mut s = 0.0;
                        for j in 0..d {
                            s += g[j] * iv[i * d + j];
                        }
                        dw[i] = s;
                    }
                    self.accum(w, &dw);
                }
                if self.nodes[items].grad.is_some() {
                    let wv = &self.nodes[w].values;
                    let mut di = vec![0.0; n * d];
                    for i in 0..n {
                        let wi = wv[i];
                        for j in 0..d {
                            di[i * d + j] = wi * g[j];
                        }
                    }
                    self.accum(items, &di);
                }
            }

            Op::Sum { x } => {
                if let Some(dst) = self.nodes[x].grad.as_mut() {
                    for gi in dst.iter_mut() {
                        *gi += g[0];
                    }
                }
            }

            Op::Select { x, index } => {
                if let Some(dst) = self.nodes[x].grad.as_mut() {
                    dst[index] += g[0];
                }
            }

            Op::GatherRows { table, ref ids } => {
                if self.nodes[table].grad.is_some() {
                    let d = self.nodes[table].shape[1];
                    let dst = self.nodes[table].grad.as_mut().unwrap();
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dst[id * d + j] += g[k * d + j];
                        }
                    }
                }
            }

            Op::Reshape { x } => {
                self.accum(x, g);
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::VecMat { .. } => "vecmat",
        Op::Transpose { .. } => "transpose",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::MulScalar { .. } => "mul_scalar",
        Op::AddBias { .. } => "add_bias",
        Op::BroadcastRows { .. } => "broadcast_rows",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Tanh { .. } => "tanh",
        Op::Relu { .. } => "relu",
        Op::Exp { .. } => "exp",
        Op::Log { .. } => "log",
        Op::Neg { .. } => "neg",
        Op::Softmax { .. } => "softmax",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::WeightedSum { .. } => "weighted_sum",
        Op::Sum { .. } => "sum",
        Op::Select { .. } => "select",
        Op::GatherRows { .. } => "gather_rows",
        Op::Reshape { .. } => "reshape",
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match *op {
        Op::Leaf => vec![],
        Op::Matmul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
        Op::VecMat { v, m } => vec![v, m],
        Op::Transpose { x }
        | Op::MulScalar { x, .. }
        | Op::Sigmoid { x }
        | Op::Tanh { x }
        | Op::Relu { x }
        | Op::Exp { x }
        | Op::Log { x }
        | Op::Neg { x }
        | Op::Softmax { x, .. }
        | Op::L2Normalize { x, .. }
        | Op::Slice { x, .. }
        | Op::Sum { x }
        | Op::Select { x, .. }
        | Op::Reshape { x } => vec![x],
        Op::AddBias { m, bias } => vec![m, bias],
        Op::BroadcastRows { v, .. } => vec![v],
        Op::Concat { ref xs, .. } => xs.clone(),
        Op::WeightedSum { w, items } => vec![w, items],
        Op::GatherRows { table, .. } => vec![table],
    }
}

// ── LSTM cell ───────────────────────────────────────────────────────

/// Node ids of one LSTM cell's parameters: `w` is `[d_in + hidden, 4·hidden]`
/// with gate blocks ordered input, forget, candidate, output; `b` is `[4·hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmCellIds {
    pub w: NodeId,
    pub b: NodeId,
    pub hidden: usize,
}

/// One step of a standard LSTM cell over vector state.
pub fn lstm_cell(
    g: &mut Graph,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    p: &LstmCellIds,
) -> (NodeId, NodeId) {
    let h = p.hidden;
    let xh = g.concat(&[x, h_prev], 0);
    let zlin = g.vecmat(xh, p.w);
    let z = g.add(zlin, p.b);
    let zi = g.slice(z, 0, h);
    let zf = g.slice(z, h, h);
    let zg = g.slice(z, 2 * h, h);
    let zo = g.slice(z, 3 * h, h);
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let fc = g.mul(f, c_prev);
    let ic = g.mul(i, cand);
    let c = g.add(fc, ic);
    let tc = g.tanh(c);
    let hn = g.mul(o, tc);
    (hn, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    /// Central finite differences of a scalar function of flat inputs.
    fn fd_grad(eval: &dyn Fn(&[Vec<f64>]) -> f64, inputs: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
        let mut grads = Vec::new();
        for p in 0..inputs.len() {
            let mut gp = vec![0.0; inputs[p].len()];
            for e in 0..inputs[p].len() {
                let mut plus = inputs.to_vec();
                plus[p][e] += h;
                let mut minus = inputs.to_vec();
                minus[p][e] -= h;
                gp[e] = (eval(&plus) - eval(&minus)) / (2.0 * h);
            }
            grads.push(gp);
        }
        grads
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        let denom = a.abs().max(n.abs());
        if denom < 1e-8 {
            (a - n).abs()
        } else {
            (a - n).abs() / denom
        }
    }

    fn seeded(seed: u64, n: usize) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let m = g.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let c = g.matmul(i2, m);
        assert_eq!(g.values(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut g = Graph::new();
        let a = g.constant(vec![1.0, 2.0], vec![1, 2]);
        let b = g.constant(vec![3.0, 4.0], vec![2, 1]);
        let c = g.matmul(a, b);
        assert_eq!(g.values(c), &[11.0]);
    }

    #[test]
    #[should_panic(expected = "inner extents differ")]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(vec![0.0; 6], vec![2, 3]);
        let b = g.constant(vec![0.0; 8], vec![2, 4]);
        g.matmul(a, b);
    }

    #[test]
    fn matmul_gradient_vs_finite_differences() {
        let av = seeded(1, 12);
        let bv = seeded(2, 8);
        let eval = |inp: &[Vec<f64>]| {
            let mut g = Graph::new();
            let a = g.leaf(inp[0].clone(), vec![3, 4]);
            let b = g.leaf(inp[1].clone(), vec![4, 2]);
            let c = g.matmul(a, b);
            let s = g.sum(c);
            g.scalar_value(s)
        };
        let inputs = vec![av.clone(), bv.clone()];
        let fd = fd_grad(&eval, &inputs, 1e-5);

        let mut g = Graph::new();
        let a = g.leaf(av, vec![3, 4]);
        let b = g.leaf(bv, vec![4, 2]);
        let c = g.matmul(a, b);
        let s = g.sum(c);
        g.backward(s);
        for (an, nm) in g.grad(a).unwrap().iter().zip(&fd[0]) {
            assert!(rel_err(*an, *nm) < 1e-6, "matmul dA: {an} vs {nm}");
        }
        for (an, nm) in g.grad(b).unwrap().iter().zip(&fd[1]) {
            assert!(rel_err(*an, *nm) < 1e-6, "matmul dB: {an} vs {nm}");
        }
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let x = g.constant(vec![0.0], vec![1]);
        let s = g.sigmoid(x);
        assert_eq!(g.values(s), &[0.5]);
        let y = g.constant(vec![-3.0, 3.0], vec![2]);
        let r = g.relu(y);
        assert_eq!(g.values(r), &[0.0, 3.0]);
    }

    #[test]
    fn mul_gradient_is_other_factor() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, -2.0, 0.5], vec![3]);
        let y = g.constant(vec![4.0, 5.0, -6.0], vec![3]);
        let m = g.mul(x, y);
        let s = g.sum(m);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap(), &[4.0, 5.0, -6.0]);
    }

    #[test]
    fn softmax_uniform_and_single() {
        let mut g = Graph::new();
        let x = g.constant(vec![0.0, 0.0, 0.0], vec![3]);
        let s = g.softmax(x, 0);
        for v in g.values(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let one = g.constant(vec![7.0], vec![1]);
        let s1 = g.softmax(one, 0);
        assert_eq!(g.values(s1), &[1.0]);
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        // exp([1,2,3]) normalized, computed independently at 40 digits
        let expect = [
            0.09003057317038045799802210148449179786793,
            0.2447284710547976524729596183407627971993,
            0.6652409557748218895290182801747454049328,
        ];
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 2.0, 3.0], vec![3]);
        let s = g.softmax(x, 0);
        assert!(max_abs_diff(g.values(s), &expect) < 1e-12);
        let total: f64 = g.values(s).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_masked_zeroes_dead_lanes() {
        let mut g = Graph::new();
        let x = g.constant(vec![5.0, 1.0, 1.0, 100.0], vec![4]);
        let s = g.softmax_masked(x, 0, &[true, true, true, false]);
        let v = g.values(s);
        assert_eq!(v[3], 0.0);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_three_four() {
        let mut g = Graph::new();
        let x = g.constant(vec![3.0, 4.0], vec![2]);
        let y = g.l2_normalize(x, 0);
        assert!(max_abs_diff(g.values(y), &[0.6, 0.8]) < 1e-15);
        // unit vector is unchanged
        let u = g.constant(vec![0.0, 1.0], vec![2]);
        let yu = g.l2_normalize(u, 0);
        assert_eq!(g.values(yu), &[0.0, 1.0]);
        // random vector normalizes to unit length
        let r = g.constant(seeded(3, 5), vec![5]);
        let yr = g.l2_normalize(r, 0);
        let norm: f64 = g.values(yr).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_near_zero_is_clamped() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1e-15, 0.0], vec![2]);
        let y = g.l2_normalize(x, 0);
        // clamped: y = x / eps
        assert!((g.values(y)[0] - 1e-15 / L2_NORM_EPS).abs() < 1e-12);
        let s = g.sum(y);
        g.backward(s);
        assert!((g.grad(x).unwrap()[0] - 1.0 / L2_NORM_EPS).abs() < 1e-3);
    }

    #[test]
    fn weighted_sum_one_hot_selects_item() {
        let mut g = Graph::new();
        let w = g.constant(vec![0.0, 1.0, 0.0], vec![3]);
        let items = g.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2]);
        let out = g.weighted_sum(w, items);
        assert_eq!(g.values(out), &[3.0, 4.0]);
    }

    #[test]
    fn weighted_sum_uniform_over_equal_items() {
        let mut g = Graph::new();
        let w = g.constant(vec![0.5, 0.5], vec![2]);
        let items = g.constant(vec![7.0, -1.0, 7.0, -1.0], vec![2, 2]);
        let out = g.weighted_sum(w, items);
        assert_eq!(g.values(out), &[7.0, -1.0]);
    }

    #[test]
    fn weighted_sum_matches_loop_oracle() {
        let wv = seeded(4, 4);
        let iv = seeded(5, 12);
        let mut expect = vec![0.0; 3];
        for i in 0..4 {
            for j in 0..3 {
                expect[j] += wv[i] * iv[i * 3 + j];
            }
        }
        let mut g = Graph::new();
        let w = g.constant(wv, vec![4]);
        let items = g.constant(iv, vec![4, 3]);
        let out = g.weighted_sum(w, items);
        assert!(max_abs_diff(g.values(out), &expect) < 1e-15);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1.0, 2.0], vec![2]);
        let b = g.leaf(vec![3.0], vec![1]);
        let c = g.concat(&[a, b], 0);
        assert_eq!(g.values(c), &[1.0, 2.0, 3.0]);
        let s = g.slice(c, 1, 2);
        assert_eq!(g.values(s), &[2.0, 3.0]);
        let total = g.sum(s);
        g.backward(total);
        assert_eq!(g.grad(a).unwrap(), &[0.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0], vec![3]);
        let s = g.sum(x);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_gives_two_x() {
        let mut g = Graph::new();
        let x = g.leaf(vec![3.0], vec![1]);
        let sq = g.mul(x, x);
        g.backward(sq);
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    #[should_panic(expected = "already run")]
    fn backward_twice_panics() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0], vec![1]);
        let s = g.sum(x);
        g.backward(s);
        g.backward(s);
    }

    #[test]
    #[should_panic(expected = "not a scalar")]
    fn backward_non_scalar_panics() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], vec![2]);
        g.backward(x);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn overflow_is_a_hard_error() {
        let mut g = Graph::new();
        let x = g.constant(vec![1000.0], vec![1]);
        g.exp(x);
    }

    #[test]
    #[should_panic(expected = "non-positive")]
    fn log_of_non_positive_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(vec![0.0], vec![1]);
        g.log(x);
    }

    #[test]
    fn lstm_cell_zero_params_zero_inputs() {
        let mut g = Graph::new();
        let h = 3;
        let w = g.leaf(vec![0.0; (2 + h) * 4 * h], vec![2 + h, 4 * h]);
        let b = g.leaf(vec![0.0; 4 * h], vec![4 * h]);
        let p = LstmCellIds { w, b, hidden: h };
        let x = g.constant(vec![0.0; 2], vec![2]);
        let h0 = g.zeros(vec![h]);
        let c0 = g.zeros(vec![h]);
        let (h1, c1) = lstm_cell(&mut g, x, h0, c0, &p);
        assert_eq!(g.values(h1), &[0.0; 3]);
        assert_eq!(g.values(c1), &[0.0; 3]);
    }

    #[test]
    fn lstm_cell_forced_gates_carry_cell_state() {
        // forget bias +50, input bias -50: c' ~= c_prev
        let mut g = Graph::new();
        let h = 2;
        let w = g.constant(vec![0.0; (1 + h) * 4 * h], vec![1 + h, 4 * h]);
        let mut bias = vec![0.0; 4 * h];
        for j in 0..h {
            bias[j] = -50.0; // input gate off
            bias[h + j] = 50.0; // forget gate on
        }
        let b = g.constant(bias, vec![4 * h]);
        let p = LstmCellIds { w, b, hidden: h };
        let x = g.constant(vec![0.3], vec![1]);
        let h0 = g.constant(vec![0.1, -0.2], vec![h]);
        let c0 = g.constant(vec![0.7, -1.3], vec![h]);
        let (_h1, c1) = lstm_cell(&mut g, x, h0, c0, &p);
        assert!(max_abs_diff(g.values(c1), &[0.7, -1.3]) < 1e-12);
    }

    #[test]
    fn lstm_three_step_unroll_gradcheck() {
        let h = 2;
        let d = 2;
        let wv = seeded(6, (d + h) * 4 * h);
        let bv = seeded(7, 4 * h);
        let xs: Vec<Vec<f64>> = (0..3).map(|i| seeded(8 + i, d)).collect();
        let eval = |inp: &[Vec<f64>]| {
            let mut g = Graph::new();
            let w = g.leaf(inp[0].clone(), vec![d + h, 4 * h]);
            let b = g.leaf(inp[1].clone(), vec![4 * h]);
            let p = LstmCellIds { w, b, hidden: h };
            let mut hh = g.zeros(vec![h]);
            let mut cc = g.zeros(vec![h]);
            for x in &xs {
                let xi = g.constant(x.clone(), vec![d]);
                let (nh, nc) = lstm_cell(&mut g, xi, hh, cc, &p);
                hh = nh;
                cc = nc;
            }
            let s = g.sum(hh);
            g.scalar_value(s)
        };
        let inputs = vec![wv.clone(), bv.clone()];
        let fd = fd_grad(&eval, &inputs, 1e-5);

        let mut g = Graph::new();
        let w = g.leaf(wv, vec![d + h, 4 * h]);
        let b = g.leaf(bv, vec![4 * h]);
        let p = LstmCellIds { w, b, hidden: h };
        let mut hh = g.zeros(vec![h]);
        let mut cc = g.zeros(vec![h]);
        for x in &xs {
            let xi = g.constant(x.clone(), vec![d]);
            let (nh, nc) = lstm_cell(&mut g, xi, hh, cc, &p);
            hh = nh;
            cc = nc;
        }
        let s = g.sum(hh);
        g.backward(s);
        for (an, nm) in g.grad(w).unwrap().iter().zip(&fd[0]) {
            assert!(rel_err(*an, *nm) < 1e-4, "lstm dW: {an} vs {nm}");
        }
        for (an, nm) in g.grad(b).unwrap().iter().zip(&fd[1]) {
            assert!(rel_err(*an, *nm) < 1e-4, "lstm db: {an} vs {nm}");
        }
    }

    #[test]
    fn primitive_gradcheck_sweep() {
        // every differentiable primitive against central differences
        type Build = fn(&mut Graph, &[Vec<f64>]) -> NodeId;
        let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
            ("matmul", vec![vec![2, 3], vec![3, 2]], |g, inp| {
                let a = g.leaf(inp[0].clone(), vec![2, 3]);
                let b = g.leaf(inp[1].clone(), vec![3, 2]);
                g.matmul(a, b)
            }),
            ("vecmat", vec![vec![3], vec![3, 2]], |g, inp| {
                let v = g.leaf(inp[0].clone(), vec![3]);
                let m = g.leaf(inp[1].clone(), vec![3, 2]);
                g.vecmat(v, m)
            }),
            ("transpose", vec![vec![2, 3]], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![2, 3]);
                g.transpose(x)
            }),
            ("add", vec![vec![4], vec![4]], |g, inp| {
                let a = g.leaf(inp[0].clone(), vec![4]);
                let b = g.leaf(inp[1].clone(), vec![4]);
                g.add(a, b)
            }),
            ("mul", vec![vec![4], vec![4]], |g, inp| {
                let a = g.leaf(inp[0].clone(), vec![4]);
                let b = g.leaf(inp[1].clone(), vec![4]);
                g.mul(a, b)
            }),
            ("mul_scalar", vec![vec![4]], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![4]);
                g.mul_scalar(x, -1.7)
            }),
            ("add_bias", vec![vec![6], vec![3]], |g, inp| {
                let m = g.leaf(inp[0].clone(), vec![2, 3]);
                let b = g.leaf(inp[1].clone(), vec![3]);
                g.add_bias(m, b)
            }),
            ("broadcast_rows", vec![vec![3]], |g, inp| {
                let v = g.leaf(inp[0].clone(), vec![3]);
                g.broadcast_rows(v, 4)
            }),
            ("sigmoid", vec![vec![4]], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![4]);
                g.sigmoid(x)
            }),
            ("tanh", vec![vec![4]], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![4]);
                g.tanh(x)
            }),
            ("exp", vec![vec![4]], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![4]);
                g.exp(x)
            }),
            ("softmax", vec![vec![6]], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![2, 3]);
                g.softmax(x, 1)
            }),
            ("softmax_masked", vec![vec![8]], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![2, 4]);
                g.softmax_masked(x, 1, &[true, true, false, true])
            }),
            ("l2_normalize", vec![vec![6]], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![2, 3]);
                g.l2_normalize(x, 1)
            }),
            ("concat", vec![vec![2], vec![3]], |g, inp| {
                let a = g.leaf(inp[0].clone(), vec![2]);
                let b = g.leaf(inp[1].clone(), vec![3]);
                g.concat(&[a, b], 0)
            }),
            ("weighted_sum", vec![vec![3], vec![6]], |g, inp| {
                let w = g.leaf(inp[0].clone(), vec![3]);
                let items = g.leaf(inp[1].clone(), vec![3, 2]);
                g.weighted_sum(w, items)
            }),
            ("slice", vec![vec![5]], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![5]);
                g.slice(x, 1, 3)
            }),
            ("select", vec![vec![4]], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![4]);
                g.select(x, 2)
            }),
            ("gather_rows", vec![vec![6]], |g, inp| {
                let t = g.leaf(inp[0].clone(), vec![3, 2]);
                g.gather_rows(t, &[1, 0, 1])
            }),
            ("reshape", vec![vec![6]], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![6]);
                g.reshape(x, vec![2, 3])
            }),
        ];
        for (trial, (name, shapes, build)) in cases.iter().enumerate() {
            let inputs: Vec<Vec<f64>> = shapes
                .iter()
                .enumerate()
                .map(|(i, sh)| seeded(100 + (trial * 7 + i) as u64, sh.iter().product()))
                .collect();
            let eval = |inp: &[Vec<f64>]| {
                let mut g = Graph::new();
                let out = build(&mut g, inp);
                // weight the output so the grad is not uniform
                let n = g.values(out).len();
                let wts: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
                let flat = g.reshape(out, vec![n]);
                let wn = g.constant(wts, vec![n]);
                let prod = g.mul(flat, wn);
                let s = g.sum(prod);
                g.scalar_value(s)
            };
            let fd = fd_grad(&eval, &inputs, 1e-5);
            let mut g = Graph::new();
            let leaves: Vec<NodeId> = (0..inputs.len()).collect();
            let out = build(&mut g, &inputs);
            let n = g.values(out).len();
            let wts: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
            let flat = g.reshape(out, vec![n]);
            let wn = g.constant(wts, vec![n]);
            let prod = g.mul(flat, wn);
            let s = g.sum(prod);
            g.backward(s);
            for (li, &leaf) in leaves.iter().enumerate() {
                let an = g.grad(leaf).unwrap();
                for (a, m) in an.iter().zip(&fd[li]) {
                    assert!(rel_err(*a, *m) < 1e-4, "{name} input {li}: {a} vs {m}");
                }
            }
        }
    }

    #[test]
    fn relu_gradcheck_away_from_kink() {
        let xv: Vec<f64> = seeded(42, 6).iter().map(|v| v + v.signum() * 0.1).collect();
        let eval = |inp: &[Vec<f64>]| {
            let mut g = Graph::new();
            let x = g.leaf(inp[0].clone(), vec![6]);
            let r = g.relu(x);
            let s = g.sum(r);
            g.scalar_value(s)
        };
        let fd = fd_grad(&eval, &[xv.clone()], 1e-5);
        let mut g = Graph::new();
        let x = g.leaf(xv, vec![6]);
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s);
        for (a, m) in g.grad(x).unwrap().iter().zip(&fd[0]) {
            assert!(rel_err(*a, *m) < 1e-4);
        }
    }

    #[test]
    fn determinism_bit_identical_runs() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(seeded(11, 12), vec![3, 4]);
            let w = g.leaf(seeded(12, 8), vec![4, 2]);
            let y = g.matmul(x, w);
            let sm = g.softmax(y, 1);
            let s = g.sum(sm);
            g.backward(s);
            (
                g.values(sm).to_vec(),
                g.grad(x).unwrap().to_vec(),
                g.grad(w).unwrap().to_vec(),
            )
        };
        let (v1, gx1, gw1) = run();
        let (v2, gx2, gw2) = run();
        assert!(v1.iter().zip(&v2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gx1.iter().zip(&gx2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gw1.iter().zip(&gw2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1.0], vec![1]);
        let b = g.leaf(vec![2.0], vec![1]);
        let c = g.add(a, b);
        let d = g.mul(c, a);
        assert!(a < c && b < c && c < d);
    }
}
