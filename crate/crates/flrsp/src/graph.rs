//! Static computation graphs with reverse-mode differentiation by source
//! transformation.
//!
//! A [`Graph`] is an append-only list of nodes; every node references only
//! earlier nodes, so node order is already a topological order. Differentiation
//! appends adjoint nodes to the same graph ([`Graph::gradients`]) rather than
//! interpreting a tape, which means the output of differentiation is itself a
//! differentiable graph: second-order quantities (gradients of functions of
//! gradients) come from applying `gradients` twice. The primitive set below is
//! closed under the vector-Jacobian rules used here, which is what makes that
//! work.
//!
//! Values are bound at execution time: [`Op::Input`] and [`Op::Param`] nodes
//! are placeholders fed through a [`Bindings`] map, so one graph can be run
//! against many samples or parameter vectors.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Patch extraction geometry, recorded so the inverse permutation can be
/// reconstructed when differentiating.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Whether the image node was rank-2 `[H, W]` rather than `[C, H, W]`.
    pub rank2: bool,
}

impl PatchGeom {
    fn patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Geometry for an image-shaped tensor (`[H, W]` or `[C, H, W]`).
    pub(crate) fn for_shape(shape: &[usize], patch: usize) -> Result<PatchGeom> {
        let (c, h, w, rank2) = match shape.len() {
            2 => (1, shape[0], shape[1], true),
            3 => (shape[0], shape[1], shape[2], false),
            _ => {
                return Err(Error::shape(
                    "patch geometry",
                    "rank-2 or rank-3 image",
                    format!("{:?}", shape),
                ))
            }
        };
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::shape(
                "patch geometry",
                format!("patch size dividing [{h}, {w}]"),
                format!("{patch}"),
            ));
        }
        Ok(PatchGeom {
            channels: c,
            height: h,
            width: w,
            patch,
            rank2,
        })
    }
}

/// Tensor-level [`Op::Patchify`], for code that splits images outside any
/// graph. Layout-identical to the graph op by construction.
pub fn patchify_tensor(image: &Tensor, geom: PatchGeom) -> Result<Tensor> {
    let expect: Vec<usize> = if geom.rank2 {
        vec![geom.height, geom.width]
    } else {
        vec![geom.channels, geom.height, geom.width]
    };
    if image.shape() != expect {
        return Err(Error::shape(
            "patchify_tensor",
            format!("{:?}", expect),
            format!("{:?}", image.shape()),
        ));
    }
    let shape = vec![geom.patches(), geom.patch_dim()];
    Ok(permute(image, &shape, |dst| patch_source(geom, dst)))
}

/// Tensor-level [`Op::Unpatchify`]: `[(H/P)*(W/P), P*P*C]` back to image
/// layout.
pub fn unpatchify_tensor(patches: &Tensor, geom: PatchGeom) -> Result<Tensor> {
    if patches.shape() != [geom.patches(), geom.patch_dim()] {
        return Err(Error::shape(
            "unpatchify_tensor",
            format!("[{}, {}]", geom.patches(), geom.patch_dim()),
            format!("{:?}", patches.shape()),
        ));
    }
    let shape: Vec<usize> = if geom.rank2 {
        vec![geom.height, geom.width]
    } else {
        vec![geom.channels, geom.height, geom.width]
    };
    let mut out = Tensor::zeros(&shape);
    for dst in 0..patches.len() {
        out.data_mut()[patch_source(geom, dst)] = patches.data()[dst];
    }
    Ok(out)
}

/// Primitive operations. Each owns the ids of its operands; constants own
/// their value.
#[derive(Clone, Debug)]
pub enum Op {
    /// Placeholder bound per run (sample data, attack candidates).
    Input,
    /// Placeholder bound per run (model weights).
    Param,
    Const(Tensor),
    /// Rank-2 matrix product.
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// Multiply by a compile-time constant.
    Scale(NodeId, f64),
    /// Add a compile-time constant to every element.
    AddScalar(NodeId, f64),
    /// Broadcast a `[1, n]` row across the rows of an `[m, n]` operand.
    AddRowVec(NodeId, NodeId),
    /// Broadcast an `[m, 1]` column across the columns of an `[m, n]` operand.
    AddColVec(NodeId, NodeId),
    MulRowVec(NodeId, NodeId),
    MulColVec(NodeId, NodeId),
    /// Multiply a tensor by a runtime scalar (shape `[1]`) node.
    MulScalarT(NodeId, NodeId),
    /// `[m, n] -> [m, 1]` sum over columns.
    RowSum(NodeId),
    /// `[m, n] -> [1, n]` sum over rows.
    ColSum(NodeId),
    /// Any shape -> `[1]`.
    SumAll(NodeId),
    Relu(NodeId),
    /// Heaviside step; differentiates to zero.
    Step(NodeId),
    Erf(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    /// Row-wise softmax with internal max-shift.
    Softmax(NodeId),
    /// Target shape is the node's recorded shape.
    Reshape(NodeId),
    /// `[H, W]` or `[C, H, W]` image -> `[num_patches, P*P*C]` rows.
    Patchify(NodeId, PatchGeom),
    /// Inverse permutation of [`Op::Patchify`].
    Unpatchify(NodeId, PatchGeom),
    /// Stack two rank-2 operands with equal column counts vertically.
    ConcatRows(NodeId, NodeId),
    /// `(start, len)` row window of a rank-2 operand.
    SliceRows(NodeId, usize, usize),
    /// Scatter rows into a zero matrix of `total` rows at `start`.
    PadRows(NodeId, usize, usize),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Per-run values for `Input` and `Param` nodes.
pub type Bindings = HashMap<NodeId, Tensor>;

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId, context: &str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::shape(context, "existing node", format!("{:?}", id)));
        }
        Ok(())
    }

    fn rank2(&self, id: NodeId, context: &str) -> Result<(usize, usize)> {
        self.check(id, context)?;
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::shape(context, "rank-2 operand", format!("{:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, context: &str) -> Result<Vec<usize>> {
        self.check(a, context)?;
        self.check(b, context)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                context,
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        Ok(self.shape(a).to_vec())
    }

    // ── leaf constructors ────────────────────────────────────────────────

    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        self.push(Op::Input, shape.to_vec())
    }

    pub fn param(&mut self, shape: &[usize]) -> NodeId {
        self.push(Op::Param, shape.to_vec())
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    fn const_filled(&mut self, shape: &[usize], v: f64) -> NodeId {
        self.constant(Tensor::filled(shape, v))
    }

    // ── primitive builders ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k1) = self.rank2(a, "matmul lhs")?;
        let (k2, n) = self.rank2(b, "matmul rhs")?;
        if k1 != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims equal, lhs [{m}, {k1}]"),
                format!("rhs [{k2}, {n}]"),
            ));
        }
        Ok(self.push(Op::MatMul(a, b), vec![m, n]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.rank2(a, "transpose")?;
        Ok(self.push(Op::Transpose(a), vec![n, m]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "div")?;
        Ok(self.push(Op::Div(a, b), s))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a, "scale")?;
        let s = self.shape(a).to_vec();
        Ok(self.push(Op::Scale(a, c), s))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a, "add_scalar")?;
        let s = self.shape(a).to_vec();
        Ok(self.push(Op::AddScalar(a, c), s))
    }

    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (m, n) = self.rank2(a, "add_row_vec")?;
        let (vm, vn) = self.rank2(v, "add_row_vec")?;
        if vm != 1 || vn != n {
            return Err(Error::shape(
                "add_row_vec",
                format!("[1, {n}]"),
                format!("[{vm}, {vn}]"),
            ));
        }
        Ok(self.push(Op::AddRowVec(a, v), vec![m, n]))
    }

    pub fn add_col_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (m, n) = self.rank2(a, "add_col_vec")?;
        let (vm, vn) = self.rank2(v, "add_col_vec")?;
        if vm != m || vn != 1 {
            return Err(Error::shape(
                "add_col_vec",
                format!("[{m}, 1]"),
                format!("[{vm}, {vn}]"),
            ));
        }
        Ok(self.push(Op::AddColVec(a, v), vec![m, n]))
    }

    pub fn mul_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (m, n) = self.rank2(a, "mul_row_vec")?;
        let (vm, vn) = self.rank2(v, "mul_row_vec")?;
        if vm != 1 || vn != n {
            return Err(Error::shape(
                "mul_row_vec",
                format!("[1, {n}]"),
                format!("[{vm}, {vn}]"),
            ));
        }
        Ok(self.push(Op::MulRowVec(a, v), vec![m, n]))
    }

    pub fn mul_col_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (m, n) = self.rank2(a, "mul_col_vec")?;
        let (vm, vn) = self.rank2(v, "mul_col_vec")?;
        if vm != m || vn != 1 {
            return Err(Error::shape(
                "mul_col_vec",
                format!("[{m}, 1]"),
                format!("[{vm}, {vn}]"),
            ));
        }
        Ok(self.push(Op::MulColVec(a, v), vec![m, n]))
    }

    pub fn mul_scalar_t(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.check(a, "mul_scalar_t")?;
        self.check(s, "mul_scalar_t")?;
        if self.shape(s) != [1] {
            return Err(Error::shape(
                "mul_scalar_t",
                "[1] scalar operand",
                format!("{:?}", self.shape(s)),
            ));
        }
        let sh = self.shape(a).to_vec();
        Ok(self.push(Op::MulScalarT(a, s), sh))
    }

    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, _) = self.rank2(a, "row_sum")?;
        Ok(self.push(Op::RowSum(a), vec![m, 1]))
    }

    pub fn col_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, n) = self.rank2(a, "col_sum")?;
        Ok(self.push(Op::ColSum(a), vec![1, n]))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "sum_all")?;
        Ok(self.push(Op::SumAll(a), vec![1]))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "relu")?;
        let s = self.shape(a).to_vec();
        Ok(self.push(Op::Relu(a), s))
    }

    pub fn step(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "step")?;
        let s = self.shape(a).to_vec();
        Ok(self.push(Op::Step(a), s))
    }

    pub fn erf(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "erf")?;
        let s = self.shape(a).to_vec();
        Ok(self.push(Op::Erf(a), s))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "exp")?;
        let s = self.shape(a).to_vec();
        Ok(self.push(Op::Exp(a), s))
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "ln")?;
        let s = self.shape(a).to_vec();
        Ok(self.push(Op::Ln(a), s))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "sqrt")?;
        let s = self.shape(a).to_vec();
        Ok(self.push(Op::Sqrt(a), s))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.rank2(a, "softmax")?;
        Ok(self.push(Op::Softmax(a), vec![m, n]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(a, "reshape")?;
        let from: usize = self.shape(a).iter().product();
        let to: usize = shape.iter().product();
        if from != to {
            return Err(Error::shape(
                "reshape",
                format!("{from} elements"),
                format!("{:?} = {to} elements", shape),
            ));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    /// `[H, W]` or `[C, H, W]` -> `[(H/P)*(W/P), P*P*C]`, patches row-major
    /// over the patch grid, row-major pixels within a patch, channel-major
    /// within a row.
    pub fn patchify(&mut self, a: NodeId, patch: usize) -> Result<NodeId> {
        self.check(a, "patchify")?;
        let s = self.shape(a).to_vec();
        let (c, h, w, rank2) = match s.len() {
            2 => (1, s[0], s[1], true),
            3 => (s[0], s[1], s[2], false),
            _ => {
                return Err(Error::shape(
                    "patchify",
                    "rank-2 or rank-3 image",
                    format!("{:?}", s),
                ))
            }
        };
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::shape(
                "patchify",
                format!("patch size dividing [{h}, {w}]"),
                format!("{patch}"),
            ));
        }
        let geom = PatchGeom {
            channels: c,
            height: h,
            width: w,
            patch,
            rank2,
        };
        let shape = vec![geom.patches(), geom.patch_dim()];
        Ok(self.push(Op::Patchify(a, geom), shape))
    }

    pub fn unpatchify(&mut self, a: NodeId, geom: PatchGeom) -> Result<NodeId> {
        let (m, n) = self.rank2(a, "unpatchify")?;
        if m != geom.patches() || n != geom.patch_dim() {
            return Err(Error::shape(
                "unpatchify",
                format!("[{}, {}]", geom.patches(), geom.patch_dim()),
                format!("[{m}, {n}]"),
            ));
        }
        let shape = if geom.rank2 {
            vec![geom.height, geom.width]
        } else {
            vec![geom.channels, geom.height, geom.width]
        };
        Ok(self.push(Op::Unpatchify(a, geom), shape))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ma, na) = self.rank2(a, "concat_rows")?;
        let (mb, nb) = self.rank2(b, "concat_rows")?;
        if na != nb {
            return Err(Error::shape(
                "concat_rows",
                format!("{na} columns"),
                format!("{nb} columns"),
            ));
        }
        Ok(self.push(Op::ConcatRows(a, b), vec![ma + mb, na]))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.rank2(a, "slice_rows")?;
        if start + len > m || len == 0 {
            return Err(Error::shape(
                "slice_rows",
                format!("window within {m} rows"),
                format!("start {start}, len {len}"),
            ));
        }
        Ok(self.push(Op::SliceRows(a, start, len), vec![len, n]))
    }

    pub fn pad_rows(&mut self, a: NodeId, start: usize, total: usize) -> Result<NodeId> {
        let (m, n) = self.rank2(a, "pad_rows")?;
        if start + m > total {
            return Err(Error::shape(
                "pad_rows",
                format!("{m} rows at offset {start} within {total}"),
                "overflow",
            ));
        }
        Ok(self.push(Op::PadRows(a, start, total), vec![total, n]))
    }

    // ── composites ───────────────────────────────────────────────────────

    /// Exact GELU: `0.5 * x * (1 + erf(x / sqrt(2)))`.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let scaled = self.scale(x, 1.0 / std::f64::consts::SQRT_2)?;
        let e = self.erf(scaled)?;
        let gate = self.add_scalar(e, 1.0)?;
        let prod = self.mul(x, gate)?;
        self.scale(prod, 0.5)
    }

    /// Cross-entropy of row logits against a one-hot row:
    /// `-sum(onehot * ln(softmax(logits)))`, returned as a `[1]` scalar.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, onehot: NodeId) -> Result<NodeId> {
        self.same_shape(logits, onehot, "softmax_cross_entropy")?;
        let sm = self.softmax(logits)?;
        let lsm = self.ln(sm)?;
        let picked = self.mul(onehot, lsm)?;
        let total = self.sum_all(picked)?;
        self.scale(total, -1.0)
    }

    /// Squared Euclidean distance between two same-shape nodes, `[1]` scalar.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.sum_all(sq)
    }

    // ── differentiation ──────────────────────────────────────────────────

    /// Append adjoint nodes computing `d of / d wrt[i]` for each requested
    /// node and return their ids, aligned with `wrt`. `of` must be a `[1]`
    /// scalar. Nodes that `of` does not depend on get a zero constant of the
    /// right shape. The appended nodes are ordinary primitives, so the result
    /// of one call can be differentiated again.
    pub fn gradients(&mut self, of: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        self.check(of, "gradients")?;
        if self.shape(of) != [1] {
            return Err(Error::shape(
                "gradients",
                "[1] scalar objective",
                format!("{:?}", self.shape(of)),
            ));
        }
        for &w in wrt {
            self.check(w, "gradients wrt")?;
        }

        // Restrict the sweep to nodes the objective actually depends on.
        let mut reachable = vec![false; self.nodes.len()];
        let mut stack = vec![of];
        while let Some(id) = stack.pop() {
            if reachable[id.0] {
                continue;
            }
            reachable[id.0] = true;
            for dep in operands(&self.nodes[id.0].op) {
                stack.push(dep);
            }
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; self.nodes.len()];
        adjoint[of.0] = Some(self.const_filled(&[1], 1.0));

        for i in (0..=of.0).rev() {
            if !reachable[i] {
                continue;
            }
            let g = match adjoint[i] {
                Some(g) => g,
                None => continue,
            };
            let node_id = NodeId(i);
            // Clone the op descriptor: the match arms below append nodes.
            let op = self.nodes[i].op.clone();
            match op {
                Op::Input | Op::Param | Op::Const(_) => {}
                Op::MatMul(a, b) => {
                    let bt = self.transpose(b)?;
                    let ga = self.matmul(g, bt)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                    let at = self.transpose(a)?;
                    let gb = self.matmul(at, g)?;
                    self.accumulate(&mut adjoint, b, gb)?;
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut adjoint, a, g)?;
                    self.accumulate(&mut adjoint, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adjoint, a, g)?;
                    let gb = self.scale(g, -1.0)?;
                    self.accumulate(&mut adjoint, b, gb)?;
                }
                Op::Mul(a, b) => {
                    let ga = self.mul(g, b)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                    let gb = self.mul(g, a)?;
                    self.accumulate(&mut adjoint, b, gb)?;
                }
                Op::Div(a, b) => {
                    let ga = self.div(g, b)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                    // d(a/b)/db = -a/b^2 = -(out)/b
                    let gob = self.div(g, b)?;
                    let t = self.mul(gob, node_id)?;
                    let gb = self.scale(t, -1.0)?;
                    self.accumulate(&mut adjoint, b, gb)?;
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                }
                Op::AddScalar(a, _) => {
                    self.accumulate(&mut adjoint, a, g)?;
                }
                Op::AddRowVec(a, v) => {
                    self.accumulate(&mut adjoint, a, g)?;
                    let gv = self.col_sum(g)?;
                    self.accumulate(&mut adjoint, v, gv)?;
                }
                Op::AddColVec(a, v) => {
                    self.accumulate(&mut adjoint, a, g)?;
                    let gv = self.row_sum(g)?;
                    self.accumulate(&mut adjoint, v, gv)?;
                }
                Op::MulRowVec(a, v) => {
                    let ga = self.mul_row_vec(g, v)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                    let prod = self.mul(g, a)?;
                    let gv = self.col_sum(prod)?;
                    self.accumulate(&mut adjoint, v, gv)?;
                }
                Op::MulColVec(a, v) => {
                    let ga = self.mul_col_vec(g, v)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                    let prod = self.mul(g, a)?;
                    let gv = self.row_sum(prod)?;
                    self.accumulate(&mut adjoint, v, gv)?;
                }
                Op::MulScalarT(a, s) => {
                    let ga = self.mul_scalar_t(g, s)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                    let prod = self.mul(g, a)?;
                    let gs = self.sum_all(prod)?;
                    self.accumulate(&mut adjoint, s, gs)?;
                }
                Op::RowSum(a) => {
                    let zeros = self.const_filled(&self.nodes[a.0].shape.clone(), 0.0);
                    let ga = self.add_col_vec(zeros, g)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                }
                Op::ColSum(a) => {
                    let zeros = self.const_filled(&self.nodes[a.0].shape.clone(), 0.0);
                    let ga = self.add_row_vec(zeros, g)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                }
                Op::SumAll(a) => {
                    let ones = self.const_filled(&self.nodes[a.0].shape.clone(), 1.0);
                    let ga = self.mul_scalar_t(ones, g)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                }
                Op::Relu(a) => {
                    let gate = self.step(a)?;
                    let ga = self.mul(g, gate)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                }
                // Heaviside step is flat almost everywhere.
                Op::Step(_) => {}
                Op::Erf(a) => {
                    // d erf/dx = 2/sqrt(pi) * exp(-x^2)
                    let sq = self.mul(a, a)?;
                    let neg = self.scale(sq, -1.0)?;
                    let e = self.exp(neg)?;
                    let d = self.scale(e, 2.0 / std::f64::consts::PI.sqrt())?;
                    let ga = self.mul(g, d)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, node_id)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                }
                Op::Ln(a) => {
                    let ga = self.div(g, a)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                }
                Op::Sqrt(a) => {
                    let twice = self.scale(node_id, 2.0)?;
                    let ga = self.div(g, twice)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                }
                Op::Softmax(a) => {
                    // ga = s * (g - rowsum(g * s)) with s the softmax output.
                    let gs = self.mul(g, node_id)?;
                    let dot = self.row_sum(gs)?;
                    let neg = self.scale(dot, -1.0)?;
                    let centered = self.add_col_vec(g, neg)?;
                    let ga = self.mul(node_id, centered)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].shape.clone();
                    let ga = self.reshape(g, &shape)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                }
                Op::Patchify(a, geom) => {
                    let ga = self.unpatchify(g, geom)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                }
                Op::Unpatchify(a, geom) => {
                    let ga = self.patchify(g, geom.patch)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                }
                Op::ConcatRows(a, b) => {
                    let rows_a = self.nodes[a.0].shape[0];
                    let rows_b = self.nodes[b.0].shape[0];
                    let ga = self.slice_rows(g, 0, rows_a)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                    let gb = self.slice_rows(g, rows_a, rows_b)?;
                    self.accumulate(&mut adjoint, b, gb)?;
                }
                Op::SliceRows(a, start, _) => {
                    let total = self.nodes[a.0].shape[0];
                    let ga = self.pad_rows(g, start, total)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                }
                Op::PadRows(a, start, _) => {
                    let len = self.nodes[a.0].shape[0];
                    let ga = self.slice_rows(g, start, len)?;
                    self.accumulate(&mut adjoint, a, ga)?;
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match adjoint[w.0] {
                Some(g) => out.push(g),
                None => {
                    let shape = self.nodes[w.0].shape.clone();
                    out.push(self.const_filled(&shape, 0.0));
                }
            }
        }
        Ok(out)
    }

    fn accumulate(
        &mut self,
        adjoint: &mut [Option<NodeId>],
        target: NodeId,
        contribution: NodeId,
    ) -> Result<()> {
        adjoint[target.0] = Some(match adjoint[target.0] {
            Some(prev) => self.add(prev, contribution)?,
            None => contribution,
        });
        Ok(())
    }

    // ── execution ────────────────────────────────────────────────────────

    /// Evaluate the requested nodes under the given bindings. Only nodes the
    /// outputs depend on are computed.
    pub fn run(&self, bindings: &Bindings, outputs: &[NodeId]) -> Result<Vec<Tensor>> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = outputs.to_vec();
        while let Some(id) = stack.pop() {
            self.check(id, "run")?;
            if needed[id.0] {
                continue;
            }
            needed[id.0] = true;
            for dep in operands(&self.nodes[id.0].op) {
                stack.push(dep);
            }
        }

        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for i in 0..self.nodes.len() {
            if !needed[i] {
                continue;
            }
            let value = self.eval_node(NodeId(i), bindings, &values)?;
            if value.shape() != self.nodes[i].shape {
                return Err(Error::shape(
                    "run",
                    format!("{:?}", self.nodes[i].shape),
                    format!("{:?} at node {i}", value.shape()),
                ));
            }
            values[i] = Some(value);
        }

        // The same node may be requested more than once (e.g. `gradients`
        // yields one node for two wrt entries whose adjoints coincide);
        // move the stored value out only at its last occurrence.
        let mut remaining: HashMap<usize, usize> = HashMap::new();
        for id in outputs {
            *remaining.entry(id.0).or_insert(0) += 1;
        }
        Ok(outputs
            .iter()
            .map(|id| {
                let left = remaining.get_mut(&id.0).expect("counted above");
                *left -= 1;
                if *left == 0 {
                    values[id.0].take().expect("output evaluated")
                } else {
                    values_clone(&values, *id)
                }
            })
            .collect())
    }

    fn eval_node(
        &self,
        id: NodeId,
        bindings: &Bindings,
        values: &[Option<Tensor>],
    ) -> Result<Tensor> {
        let val = |n: NodeId| -> &Tensor { values[n.0].as_ref().expect("operand evaluated") };
        let node = &self.nodes[id.0];
        Ok(match &node.op {
            Op::Input | Op::Param => bindings
                .get(&id)
                .cloned()
                .ok_or_else(|| Error::Config(format!("unbound placeholder node {}", id.0)))
                .and_then(|t| {
                    if t.shape() == node.shape.as_slice() {
                        Ok(t)
                    } else {
                        Err(Error::shape(
                            "binding",
                            format!("{:?}", node.shape),
                            format!("{:?} at node {}", t.shape(), id.0),
                        ))
                    }
                })?,
            Op::Const(t) => t.clone(),
            Op::MatMul(a, b) => matmul(val(*a), val(*b)),
            Op::Transpose(a) => transpose(val(*a)),
            Op::Add(a, b) => val(*a).zip(val(*b), |x, y| x + y)?,
            Op::Sub(a, b) => val(*a).zip(val(*b), |x, y| x - y)?,
            Op::Mul(a, b) => val(*a).zip(val(*b), |x, y| x * y)?,
            Op::Div(a, b) => val(*a).zip(val(*b), |x, y| x / y)?,
            Op::Scale(a, c) => val(*a).map(|x| x * c),
            Op::AddScalar(a, c) => val(*a).map(|x| x + c),
            Op::AddRowVec(a, v) => broadcast_row(val(*a), val(*v), |x, y| x + y),
            Op::AddColVec(a, v) => broadcast_col(val(*a), val(*v), |x, y| x + y),
            Op::MulRowVec(a, v) => broadcast_row(val(*a), val(*v), |x, y| x * y),
            Op::MulColVec(a, v) => broadcast_col(val(*a), val(*v), |x, y| x * y),
            Op::MulScalarT(a, s) => {
                let c = val(*s).item();
                val(*a).map(|x| x * c)
            }
            Op::RowSum(a) => {
                let t = val(*a);
                let (m, n) = (t.rows(), t.cols());
                let mut out = Tensor::zeros(&[m, 1]);
                for i in 0..m {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += t.get2(i, j);
                    }
                    out.data_mut()[i] = acc;
                }
                out
            }
            Op::ColSum(a) => {
                let t = val(*a);
                let (m, n) = (t.rows(), t.cols());
                let mut out = Tensor::zeros(&[1, n]);
                for i in 0..m {
                    for j in 0..n {
                        out.data_mut()[j] += t.get2(i, j);
                    }
                }
                out
            }
            Op::SumAll(a) => Tensor::scalar(val(*a).data().iter().sum()),
            Op::Relu(a) => val(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Step(a) => val(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Erf(a) => val(*a).map(statrs::function::erf::erf),
            Op::Exp(a) => val(*a).map(f64::exp),
            Op::Ln(a) => val(*a).map(f64::ln),
            Op::Sqrt(a) => val(*a).map(f64::sqrt),
            Op::Softmax(a) => softmax_rows(val(*a)),
            Op::Reshape(a) => {
                let mut t = val(*a).clone();
                t = Tensor::new(node.shape.clone(), t.into_data())?;
                t
            }
            Op::Patchify(a, geom) => permute(val(*a), &node.shape, |dst| patch_source(*geom, dst)),
            Op::Unpatchify(a, geom) => {
                // Scatter through the inverse of the patchify map.
                let t = val(*a);
                let mut out = Tensor::zeros(&node.shape);
                for dst in 0..t.len() {
                    let src = patch_source(*geom, dst);
                    out.data_mut()[src] = t.data()[dst];
                }
                out
            }
            Op::ConcatRows(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let mut data = Vec::with_capacity(ta.len() + tb.len());
                data.extend_from_slice(ta.data());
                data.extend_from_slice(tb.data());
                Tensor::new(node.shape.clone(), data)?
            }
            Op::SliceRows(a, start, len) => {
                let t = val(*a);
                let n = t.cols();
                let data = t.data()[start * n..(start + len) * n].to_vec();
                Tensor::new(vec![*len, n], data)?
            }
            Op::PadRows(a, start, total) => {
                let t = val(*a);
                let n = t.cols();
                let mut out = Tensor::zeros(&[*total, n]);
                out.data_mut()[start * n..(start + t.rows()) * n].copy_from_slice(t.data());
                out
            }
        })
    }
}

/// Flat source index in the image for flat destination index `dst` in the
/// patch matrix.
fn patch_source(geom: PatchGeom, dst: usize) -> usize {
    let pd = geom.patch_dim();
    let (row, col) = (dst / pd, dst % pd);
    let grid_w = geom.width / geom.patch;
    let (gi, gj) = (row / grid_w, row % grid_w);
    let c = col / (geom.patch * geom.patch);
    let within = col % (geom.patch * geom.patch);
    let (pi, pj) = (within / geom.patch, within % geom.patch);
    c * geom.height * geom.width + (gi * geom.patch + pi) * geom.width + (gj * geom.patch + pj)
}

fn permute(t: &Tensor, shape: &[usize], source: impl Fn(usize) -> usize) -> Tensor {
    let mut out = Tensor::zeros(shape);
    for dst in 0..out.len() {
        out.data_mut()[dst] = t.data()[source(dst)];
    }
    out
}

fn operands(op: &Op) -> Vec<NodeId> {
    match *op {
        Op::Input | Op::Param | Op::Const(_) => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::AddRowVec(a, b)
        | Op::AddColVec(a, b)
        | Op::MulRowVec(a, b)
        | Op::MulColVec(a, b)
        | Op::MulScalarT(a, b)
        | Op::ConcatRows(a, b) => vec![a, b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a, _)
        | Op::RowSum(a)
        | Op::ColSum(a)
        | Op::SumAll(a)
        | Op::Relu(a)
        | Op::Step(a)
        | Op::Erf(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Sqrt(a)
        | Op::Softmax(a)
        | Op::Reshape(a)
        | Op::Patchify(a, _)
        | Op::Unpatchify(a, _)
        | Op::SliceRows(a, _, _)
        | Op::PadRows(a, _, _) => vec![a],
    }
}

fn values_clone(values: &[Option<Tensor>], id: NodeId) -> Tensor {
    values[id.0].clone().expect("output evaluated")
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for l in 0..k {
            let av = a.get2(i, l);
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out.data_mut()[i * n + j] += av * b.get2(l, j);
            }
        }
    }
    out
}

fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.set2(j, i, a.get2(i, j));
        }
    }
    out
}

fn broadcast_row(a: &Tensor, v: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            out.set2(i, j, f(a.get2(i, j), v.data()[j]));
        }
    }
    out
}

fn broadcast_col(a: &Tensor, v: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            out.set2(i, j, f(a.get2(i, j), v.data()[i]));
        }
    }
    out
}

fn softmax_rows(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            max = max.max(a.get2(i, j));
        }
        let mut denom = 0.0;
        for j in 0..n {
            let e = (a.get2(i, j) - max).exp();
            out.set2(i, j, e);
            denom += e;
        }
        for j in 0..n {
            out.set2(i, j, out.get2(i, j) / denom);
        }
    }
    out
}
