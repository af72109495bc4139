//! Reverse-mode gradient tape over dense `f64` tensors.
//!
//! A [`Graph`] records operations as they are evaluated (eager forward, like a
//! Wengert tape) and replays them in reverse to accumulate vector-Jacobian
//! products. Leaves are either constants ([`Graph::input`]) or named trainable
//! parameters ([`Graph::param`]); after [`Graph::backward`] each registered
//! parameter has a gradient of its own shape, zero if the seed never reaches it.
//!
//! Recording is single-writer by construction (`&mut Graph`); distinct graphs
//! may be evaluated on distinct threads. Node values are immutable once
//! attached — the only sanctioned mutation is [`Graph::nudge_param`], used by
//! the finite-difference checker between full forward recomputations.
//!
//! The op set is intentionally small: dense matmul, elementwise arithmetic and
//! activations, row softmax, row reductions (sum/mean/max), gather/scatter,
//! 3×3 convolution, 2×2 max pooling, global average pooling, layer norm, and
//! two structural ops used to fold a frame axis into row blocks. Larger fused
//! kernels plug in through [`CustomOp`].

use crate::error::{Error, Result};
use crate::tensor::{gemm, sigmoid, softmax_row, softplus, MatLayout, Tensor};
use std::any::Any;
use std::sync::Arc;

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Stable identifier of a trainable parameter, assigned by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A fused operation with a hand-derived backward pass.
///
/// `forward` may stash intermediates for `backward` in an opaque box.
/// `backward` returns one optional gradient per input; `needs[i] == false`
/// signals that input `i` is not reached by any parameter, so its gradient
/// may be skipped.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Option<Box<dyn Any + Send>>)>;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        saved: Option<&(dyn Any + Send)>,
        d_out: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

#[derive(Clone)]
enum Op {
    Input,
    Param,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddRow { m: NodeId, row: NodeId },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId, c: f64 },
    Exp { x: NodeId },
    Log { x: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Silu { x: NodeId },
    Softplus { x: NodeId },
    LeakyRelu { x: NodeId, slope: f64 },
    PowConst { x: NodeId, p: f64 },
    SoftmaxRows { x: NodeId },
    SumAll { x: NodeId },
    MeanRows { x: NodeId },
    MaxRows { x: NodeId },
    Reshape { x: NodeId },
    GatherRows { x: NodeId, idx: Arc<Vec<usize>> },
    SelectPerRow { x: NodeId, cols: Arc<Vec<usize>> },
    Conv3x3 { x: NodeId, w: NodeId, bias: NodeId },
    MaxPool2x2 { x: NodeId },
    GlobalAvgPool { x: NodeId },
    LayerNormRows { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    InterleaveRows { a: NodeId, b: NodeId, p: usize, q: usize },
    SegmentWeightedSum { alpha: NodeId, x: NodeId },
    Custom { inputs: Vec<NodeId>, op: Arc<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Tanh { .. } => "tanh",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Silu { .. } => "silu",
            Op::Softplus { .. } => "softplus",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::PowConst { .. } => "pow_const",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::SumAll { .. } => "sum_all",
            Op::MeanRows { .. } => "mean_rows",
            Op::MaxRows { .. } => "max_rows",
            Op::Reshape { .. } => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::SelectPerRow { .. } => "select_per_row",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::MaxPool2x2 { .. } => "max_pool2x2",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::InterleaveRows { .. } => "interleave_rows",
            Op::SegmentWeightedSum { .. } => "segment_weighted_sum",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

/// State a forward pass stashes for backward and for introspection.
enum Saved {
    /// Flat argmax indices of max-type ops (first maximal index on ties).
    Argmax(Vec<u32>),
    /// Per-row (mean, 1/std) of layer norm.
    RowStats(Vec<(f64, f64)>),
    Custom(Box<dyn Any + Send>),
}

struct Node {
    op: Op,
    value: Tensor,
    saved: Option<Saved>,
    requires_grad: bool,
}

/// Gradients keyed by [`ParamId`], produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, t)| t)
    }

    /// Iterate in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(id, t)| (*id, t))
    }

    pub fn into_vec(self) -> Vec<(ParamId, Tensor)> {
        self.grads
    }
}

/// Recording tape. See module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Argmax record of a max-type node, if it has one.
    pub fn argmax_of(&self, id: NodeId) -> Option<&[u32]> {
        match self.nodes[id.0].saved {
            Some(Saved::Argmax(ref v)) => Some(v),
            _ => None,
        }
    }

    /// Registered parameters in registration order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.params.iter().copied()
    }

    // ── Leaves ───────────────────────────────────────────────────

    /// Attach a constant leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value, None, false)
    }

    /// Attach a trainable parameter leaf.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> NodeId {
        let node = self.push(Op::Param, value, None, true);
        self.params.push((id, node));
        node
    }

    fn push(&mut self, op: Op, value: Tensor, saved: Option<Saved>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            saved,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn mismatch(&self, op: &'static str, detail: String) -> Error {
        Error::ShapeMismatch {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    // ── Recording API ────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(self.mismatch(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let value = crate::tensor::matmul(va, vb);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(Op::MatMul { a, b }, value, None, rg))
    }

    fn binary_elementwise(
        &mut self,
        opname: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch(
                opname,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(make(a, b), value, None, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    /// `m + row` broadcast over rows; `m` is `(r, c)`, `row` is `(1, c)`.
    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        let (vm, vr) = (self.value(m), self.value(row));
        if vm.shape().len() != 2 || vr.shape() != [1, vm.cols()] {
            return Err(self.mismatch(
                "add_row",
                format!("{:?} + {:?}", vm.shape(), vr.shape()),
            ));
        }
        let c = vm.cols();
        let data = vm
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vr.data()[i % c])
            .collect();
        let value = Tensor::from_vec(vm.shape().to_vec(), data);
        let rg = self.any_requires(&[m, row]);
        Ok(self.push(Op::AddRow { m, row }, value, None, rg))
    }

    fn unary(
        &mut self,
        x: NodeId,
        f: impl Fn(f64) -> f64,
        make: impl Fn(NodeId) -> Op,
    ) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_vec(self.value(x).shape().to_vec(), data);
        let rg = self.nodes[x.0].requires_grad;
        self.push(make(x), value, None, rg)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v * c, |x| Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v + c, |x| Op::AddScalar { x, c })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::exp, |x| Op::Exp { x })
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::ln, |x| Op::Log { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, |x| Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, |x| Op::Sigmoid { x })
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v * sigmoid(v), |x| Op::Silu { x })
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, softplus, |x| Op::Softplus { x })
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.unary(
            x,
            |v| if v >= 0.0 { v } else { slope * v },
            |x| Op::LeakyRelu { x, slope },
        )
    }

    /// `x^p` for constant `p`; defined on `x >= 0` (gradient at 0 taken as 0).
    pub fn pow_const(&mut self, x: NodeId, p: f64) -> NodeId {
        self.unary(x, |v| v.powf(p), |x| Op::PowConst { x, p })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(self.mismatch("softmax_rows", format!("{:?}", vx.shape())));
        }
        let (r, c) = (vx.rows(), vx.cols());
        let mut data = vx.data().to_vec();
        for i in 0..r {
            softmax_row(&mut data[i * c..(i + 1) * c]);
        }
        let value = Tensor::from_vec(vec![r, c], data);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::SoftmaxRows { x }, value, None, rg))
    }

    /// Sum of all entries, producing a `(1,1)` scalar.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::SumAll { x }, Tensor::scalar(s), None, rg)
    }

    /// Column means over rows: `(r, c) -> (1, c)`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(self.mismatch("mean_rows", format!("{:?}", vx.shape())));
        }
        let (r, c) = (vx.rows(), vx.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += vx.data()[i * c + j];
            }
        }
        for v in &mut out {
            *v /= r as f64;
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::MeanRows { x }, Tensor::from_vec(vec![1, c], out), None, rg))
    }

    /// Column maxima over rows: `(r, c) -> (1, c)`; records the first argmax
    /// row per column for backward routing and saliency tracking.
    pub fn max_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 || vx.rows() == 0 {
            return Err(self.mismatch("max_rows", format!("{:?}", vx.shape())));
        }
        let (r, c) = (vx.rows(), vx.cols());
        let mut out = vx.data()[..c].to_vec();
        let mut arg = vec![0u32; c];
        for i in 1..r {
            for j in 0..c {
                let v = vx.data()[i * c + j];
                if v > out[j] {
                    out[j] = v;
                    arg[j] = i as u32;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Op::MaxRows { x },
            Tensor::from_vec(vec![1, c], out),
            Some(Saved::Argmax(arg)),
            rg,
        ))
    }

    /// Same data under a new shape (copies; shapes must agree in size).
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        if shape.iter().product::<usize>() != vx.numel() {
            return Err(self.mismatch(
                "reshape",
                format!("{:?} -> {:?}", vx.shape(), shape),
            ));
        }
        let value = Tensor::from_vec(shape.to_vec(), vx.data().to_vec());
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Reshape { x }, value, None, rg))
    }

    /// Gather rows by index; backward scatter-adds.
    pub fn gather_rows(&mut self, x: NodeId, idx: Arc<Vec<usize>>) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(self.mismatch("gather_rows", format!("{:?}", vx.shape())));
        }
        let (r, c) = (vx.rows(), vx.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(self.mismatch("gather_rows", format!("row {bad} out of {r}")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(&vx.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::from_vec(vec![idx.len(), c], data);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::GatherRows { x, idx }, value, None, rg))
    }

    /// Pick one entry per row: `out[i] = x[i, cols[i]]`, shape `(r, 1)`.
    pub fn select_per_row(&mut self, x: NodeId, cols: Arc<Vec<usize>>) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 || cols.len() != vx.rows() {
            return Err(self.mismatch(
                "select_per_row",
                format!("{:?} with {} selectors", vx.shape(), cols.len()),
            ));
        }
        let c = vx.cols();
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(self.mismatch("select_per_row", format!("col {bad} out of {c}")));
        }
        let data: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(i, &j)| vx.data()[i * c + j])
            .collect();
        let value = Tensor::from_vec(vec![cols.len(), 1], data);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::SelectPerRow { x, cols }, value, None, rg))
    }

    /// 3×3 convolution, stride 1, zero padding 1. `x` is `[B, C, H, W]`,
    /// `w` is `[O, C, 3, 3]`, `bias` is `[1, O]`; output `[B, O, H, W]`.
    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(bias));
        let xs = vx.shape().to_vec();
        let ws = vw.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || ws[1] != xs[1] {
            return Err(self.mismatch("conv3x3", format!("x {xs:?}, w {ws:?}")));
        }
        if vb.shape() != [1, ws[0]] {
            return Err(self.mismatch("conv3x3", format!("bias {:?}", vb.shape())));
        }
        let value = conv3x3_forward(vx, vw, vb);
        let rg = self.any_requires(&[x, w, bias]);
        Ok(self.push(Op::Conv3x3 { x, w, bias }, value, None, rg))
    }

    /// 2×2 max pooling, stride 2; `[B, C, H, W] -> [B, C, H/2, W/2]`.
    pub fn max_pool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(self.mismatch("max_pool2x2", format!("{s:?}")));
        }
        let (value, arg) = max_pool2x2_forward(vx);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::MaxPool2x2 { x }, value, Some(Saved::Argmax(arg)), rg))
    }

    /// Spatial mean per channel: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        if s.len() != 4 {
            return Err(self.mismatch("global_avg_pool", format!("{s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let inv = 1.0 / hw as f64;
        let mut out = vec![0.0; b * c];
        for i in 0..b * c {
            out[i] = vx.data()[i * hw..(i + 1) * hw].iter().sum::<f64>() * inv;
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Op::GlobalAvgPool { x },
            Tensor::from_vec(vec![b, c], out),
            None,
            rg,
        ))
    }

    /// Per-row layer normalization with learnable scale/shift.
    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        const EPS: f64 = 1e-5;
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        if vx.shape().len() != 2 || vg.shape() != [1, vx.cols()] || vb.shape() != [1, vx.cols()] {
            return Err(self.mismatch(
                "layer_norm_rows",
                format!("x {:?}, gamma {:?}, beta {:?}", vx.shape(), vg.shape(), vb.shape()),
            ));
        }
        let (r, c) = (vx.rows(), vx.cols());
        let mut data = vec![0.0; r * c];
        let mut stats = Vec::with_capacity(r);
        for i in 0..r {
            let row = &vx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + EPS).sqrt();
            stats.push((mean, rstd));
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * rstd * vg.data()[j] + vb.data()[j];
            }
        }
        let rg = self.any_requires(&[x, gamma, beta]);
        Ok(self.push(
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                eps: EPS,
            },
            Tensor::from_vec(vec![r, c], data),
            Some(Saved::RowStats(stats)),
            rg,
        ))
    }

    /// Interleave per-frame row blocks: `a` is `(F*p, d)`, `b` is `(F*q, d)`;
    /// output frame f holds a's p rows then b's q rows.
    pub fn interleave_rows(&mut self, a: NodeId, b: NodeId, p: usize, q: usize) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2
            || vb.shape().len() != 2
            || va.cols() != vb.cols()
            || va.rows() % p != 0
            || vb.rows() % q != 0
            || va.rows() / p != vb.rows() / q
        {
            return Err(self.mismatch(
                "interleave_rows",
                format!("{:?} (p={p}) with {:?} (q={q})", va.shape(), vb.shape()),
            ));
        }
        let frames = va.rows() / p;
        let d = va.cols();
        let mut data = Vec::with_capacity(frames * (p + q) * d);
        for f in 0..frames {
            data.extend_from_slice(&va.data()[f * p * d..(f + 1) * p * d]);
            data.extend_from_slice(&vb.data()[f * q * d..(f + 1) * q * d]);
        }
        let value = Tensor::from_vec(vec![frames * (p + q), d], data);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(Op::InterleaveRows { a, b, p, q }, value, None, rg))
    }

    /// Per-frame weighted sum of row blocks: `alpha` is `(F, s)`, `x` is
    /// `(F*s, d)`; output `(F, d)` with row f = sum_i alpha[f,i] * x[f*s+i].
    pub fn segment_weighted_sum(&mut self, alpha: NodeId, x: NodeId) -> Result<NodeId> {
        let (va, vx) = (self.value(alpha), self.value(x));
        if va.shape().len() != 2 || vx.shape().len() != 2 || va.rows() * va.cols() != vx.rows() {
            return Err(self.mismatch(
                "segment_weighted_sum",
                format!("alpha {:?}, x {:?}", va.shape(), vx.shape()),
            ));
        }
        let (frames, s) = (va.rows(), va.cols());
        let d = vx.cols();
        let mut data = vec![0.0; frames * d];
        for f in 0..frames {
            for i in 0..s {
                let w = va.data()[f * s + i];
                let row = &vx.data()[(f * s + i) * d..(f * s + i + 1) * d];
                let out = &mut data[f * d..(f + 1) * d];
                for j in 0..d {
                    out[j] += w * row[j];
                }
            }
        }
        let value = Tensor::from_vec(vec![frames, d], data);
        let rg = self.any_requires(&[alpha, x]);
        Ok(self.push(Op::SegmentWeightedSum { alpha, x }, value, None, rg))
    }

    /// Record a fused operation.
    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let (value, saved) = op.forward(&vals)?;
        let rg = self.any_requires(inputs);
        Ok(self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            value,
            saved.map(Saved::Custom),
            rg,
        ))
    }

    // ── Forward recomputation (finite differences) ───────────────

    /// Add `delta` to one element of a leaf. Only meaningful between full
    /// forward recomputations; used by the gradient checker.
    pub fn nudge_param(&mut self, leaf: NodeId, elem: usize, delta: f64) {
        debug_assert!(matches!(self.nodes[leaf.0].op, Op::Param | Op::Input));
        self.nodes[leaf.0].value.data_mut()[elem] += delta;
    }

    /// Re-execute every non-leaf node in recording order, refreshing values
    /// and saved state from current leaf contents.
    pub fn recompute_forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            let (value, saved) = match op {
                Op::Input | Op::Param => continue,
                Op::MatMul { a, b } => (crate::tensor::matmul(self.value(a), self.value(b)), None),
                Op::Add { a, b } => (self.ew2(a, b, |x, y| x + y), None),
                Op::Sub { a, b } => (self.ew2(a, b, |x, y| x - y), None),
                Op::Mul { a, b } => (self.ew2(a, b, |x, y| x * y), None),
                Op::AddRow { m, row } => {
                    let c = self.value(m).cols();
                    let rv = self.value(row).data();
                    let data = self
                        .value(m)
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x + rv[i % c])
                        .collect();
                    (
                        Tensor::from_vec(self.value(m).shape().to_vec(), data),
                        None,
                    )
                }
                Op::Scale { x, c } => (self.ew1(x, |v| v * c), None),
                Op::AddScalar { x, c } => (self.ew1(x, |v| v + c), None),
                Op::Exp { x } => (self.ew1(x, f64::exp), None),
                Op::Log { x } => (self.ew1(x, f64::ln), None),
                Op::Tanh { x } => (self.ew1(x, f64::tanh), None),
                Op::Sigmoid { x } => (self.ew1(x, sigmoid), None),
                Op::Silu { x } => (self.ew1(x, |v| v * sigmoid(v)), None),
                Op::Softplus { x } => (self.ew1(x, softplus), None),
                Op::LeakyRelu { x, slope } => {
                    (self.ew1(x, |v| if v >= 0.0 { v } else { slope * v }), None)
                }
                Op::PowConst { x, p } => (self.ew1(x, |v| v.powf(p)), None),
                Op::SoftmaxRows { x } => {
                    let vx = self.value(x);
                    let (r, c) = (vx.rows(), vx.cols());
                    let mut data = vx.data().to_vec();
                    for i in 0..r {
                        softmax_row(&mut data[i * c..(i + 1) * c]);
                    }
                    (Tensor::from_vec(vec![r, c], data), None)
                }
                Op::SumAll { x } => (Tensor::scalar(self.value(x).data().iter().sum()), None),
                Op::MeanRows { x } => {
                    let vx = self.value(x);
                    let (r, c) = (vx.rows(), vx.cols());
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j] += vx.data()[i * c + j];
                        }
                    }
                    for v in &mut out {
                        *v /= r as f64;
                    }
                    (Tensor::from_vec(vec![1, c], out), None)
                }
                Op::MaxRows { x } => {
                    let vx = self.value(x);
                    let (r, c) = (vx.rows(), vx.cols());
                    let mut out = vx.data()[..c].to_vec();
                    let mut arg = vec![0u32; c];
                    for i in 1..r {
                        for j in 0..c {
                            let v = vx.data()[i * c + j];
                            if v > out[j] {
                                out[j] = v;
                                arg[j] = i as u32;
                            }
                        }
                    }
                    (Tensor::from_vec(vec![1, c], out), Some(Saved::Argmax(arg)))
                }
                Op::Reshape { x } => {
                    let shape = self.nodes[i].value.shape().to_vec();
                    (
                        Tensor::from_vec(shape, self.value(x).data().to_vec()),
                        None,
                    )
                }
                Op::GatherRows { x, ref idx } => {
                    let vx = self.value(x);
                    let c = vx.cols();
                    let mut data = Vec::with_capacity(idx.len() * c);
                    for &i in idx.iter() {
                        data.extend_from_slice(&vx.data()[i * c..(i + 1) * c]);
                    }
                    (Tensor::from_vec(vec![idx.len(), c], data), None)
                }
                Op::SelectPerRow { x, ref cols } => {
                    let vx = self.value(x);
                    let c = vx.cols();
                    let data: Vec<f64> = cols
                        .iter()
                        .enumerate()
                        .map(|(i, &j)| vx.data()[i * c + j])
                        .collect();
                    (Tensor::from_vec(vec![cols.len(), 1], data), None)
                }
                Op::Conv3x3 { x, w, bias } => (
                    conv3x3_forward(self.value(x), self.value(w), self.value(bias)),
                    None,
                ),
                Op::MaxPool2x2 { x } => {
                    let (v, arg) = max_pool2x2_forward(self.value(x));
                    (v, Some(Saved::Argmax(arg)))
                }
                Op::GlobalAvgPool { x } => {
                    let vx = self.value(x);
                    let s = vx.shape();
                    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let inv = 1.0 / hw as f64;
                    let mut out = vec![0.0; b * c];
                    for i in 0..b * c {
                        out[i] = vx.data()[i * hw..(i + 1) * hw].iter().sum::<f64>() * inv;
                    }
                    (Tensor::from_vec(vec![b, c], out), None)
                }
                Op::LayerNormRows { x, gamma, beta, eps } => {
                    let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
                    let (r, c) = (vx.rows(), vx.cols());
                    let mut data = vec![0.0; r * c];
                    let mut stats = Vec::with_capacity(r);
                    for i in 0..r {
                        let row = &vx.data()[i * c..(i + 1) * c];
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let rstd = 1.0 / (var + eps).sqrt();
                        stats.push((mean, rstd));
                        for j in 0..c {
                            data[i * c + j] = (row[j] - mean) * rstd * vg.data()[j] + vb.data()[j];
                        }
                    }
                    (
                        Tensor::from_vec(vec![r, c], data),
                        Some(Saved::RowStats(stats)),
                    )
                }
                Op::InterleaveRows { a, b, p, q } => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let frames = va.rows() / p;
                    let d = va.cols();
                    let mut data = Vec::with_capacity(frames * (p + q) * d);
                    for f in 0..frames {
                        data.extend_from_slice(&va.data()[f * p * d..(f + 1) * p * d]);
                        data.extend_from_slice(&vb.data()[f * q * d..(f + 1) * q * d]);
                    }
                    (Tensor::from_vec(vec![frames * (p + q), d], data), None)
                }
                Op::SegmentWeightedSum { alpha, x } => {
                    let (va, vx) = (self.value(alpha), self.value(x));
                    let (frames, s) = (va.rows(), va.cols());
                    let d = vx.cols();
                    let mut data = vec![0.0; frames * d];
                    for f in 0..frames {
                        for i in 0..s {
                            let w = va.data()[f * s + i];
                            let row = &vx.data()[(f * s + i) * d..(f * s + i + 1) * d];
                            let out = &mut data[f * d..(f + 1) * d];
                            for j in 0..d {
                                out[j] += w * row[j];
                            }
                        }
                    }
                    (Tensor::from_vec(vec![frames, d], data), None)
                }
                Op::Custom { ref inputs, ref op } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                    let (v, s) = op.forward(&vals)?;
                    (v, s.map(Saved::Custom))
                }
            };
            self.nodes[i].value = value;
            if saved.is_some() {
                self.nodes[i].saved = saved;
            }
        }
        Ok(())
    }

    fn ew1(&self, x: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let vx = self.value(x);
        Tensor::from_vec(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect())
    }

    fn ew2(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::from_vec(
            va.shape().to_vec(),
            va.data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    /// Signature of all max-type decisions in the graph; two forward passes
    /// whose signatures differ crossed a non-differentiable tie point.
    pub fn argmax_signature(&self) -> Vec<u32> {
        let mut sig = Vec::new();
        for n in &self.nodes {
            if let Some(Saved::Argmax(ref a)) = n.saved {
                sig.extend_from_slice(a);
            }
        }
        sig
    }

    // ── Backward ─────────────────────────────────────────────────

    /// Reverse sweep from `terminal` seeded with `seed` (shape must match).
    /// Returns one gradient per registered parameter, in registration order;
    /// parameters the seed never reaches get zeros.
    pub fn backward(&self, terminal: NodeId, seed: &Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(terminal).shape() {
            return Err(Error::ShapeMismatch {
                node: terminal.0,
                op: self.nodes[terminal.0].op.name(),
                detail: format!(
                    "seed {:?} vs terminal {:?}",
                    seed.shape(),
                    self.value(terminal).shape()
                ),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[terminal.0] = Some(seed.clone());

        for i in (0..self.nodes.len()).rev() {
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &dy, &mut grads);
        }

        let out = self
            .params
            .iter()
            .map(|&(pid, node)| {
                let g = grads[node.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.value(node).shape()));
                (pid, g)
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    /// Convenience for loss graphs: backward from a scalar terminal with seed 1.
    pub fn backward_scalar(&self, terminal: NodeId) -> Result<Gradients> {
        if self.value(terminal).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward_scalar needs a scalar terminal, got shape {:?}",
                self.value(terminal).shape()
            )));
        }
        self.backward(terminal, &Tensor::scalar(1.0))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: NodeId, add: Tensor) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match grads[target.0] {
            Some(ref mut g) => {
                for (a, b) in g.data_mut().iter_mut().zip(add.data()) {
                    *a += b;
                }
            }
            None => grads[target.0] = Some(add),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backward_node(&self, i: usize, dy: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        match self.nodes[i].op.clone() {
            Op::Input | Op::Param => {
                // Leaves keep their accumulated gradient; put it back.
                grads[i] = Some(dy.clone());
            }
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k) = (va.rows(), va.cols());
                let n = vb.cols();
                if self.needs(a) {
                    // dA = dC @ B^T
                    let mut da = Tensor::zeros(&[m, k]);
                    gemm(MatLayout::NT, m, n, k, 1.0, dy.data(), vb.data(), 0.0, da.data_mut());
                    self.accumulate(grads, a, da);
                }
                if self.needs(b) {
                    // dB = A^T @ dC
                    let mut db = Tensor::zeros(&[k, n]);
                    gemm(MatLayout::TN, k, m, n, 1.0, va.data(), dy.data(), 0.0, db.data_mut());
                    self.accumulate(grads, b, db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(a) {
                    self.accumulate(grads, a, dy.clone());
                }
                if self.needs(b) {
                    self.accumulate(grads, b, dy.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(a) {
                    self.accumulate(grads, a, dy.clone());
                }
                if self.needs(b) {
                    let neg = Tensor::from_vec(
                        dy.shape().to_vec(),
                        dy.data().iter().map(|v| -v).collect(),
                    );
                    self.accumulate(grads, b, neg);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    self.accumulate(grads, a, hadamard(dy, self.value(b)));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, hadamard(dy, self.value(a)));
                }
            }
            Op::AddRow { m, row } => {
                if self.needs(m) {
                    self.accumulate(grads, m, dy.clone());
                }
                if self.needs(row) {
                    let c = self.value(row).cols();
                    let mut dr = vec![0.0; c];
                    for (idx, v) in dy.data().iter().enumerate() {
                        dr[idx % c] += v;
                    }
                    self.accumulate(grads, row, Tensor::from_vec(vec![1, c], dr));
                }
            }
            Op::Scale { x, c } => {
                self.acc_map(grads, x, dy, |_, _, d| d * c);
            }
            Op::AddScalar { x, .. } => {
                if self.needs(x) {
                    self.accumulate(grads, x, dy.clone());
                }
            }
            Op::Exp { x } => {
                let y = self.value(NodeId(i));
                self.acc_zip(grads, x, dy, y, |d, yv| d * yv);
            }
            Op::Log { x } => {
                self.acc_map(grads, x, dy, |xv, _, d| d / xv);
            }
            Op::Tanh { x } => {
                let y = self.value(NodeId(i));
                self.acc_zip(grads, x, dy, y, |d, yv| d * (1.0 - yv * yv));
            }
            Op::Sigmoid { x } => {
                let y = self.value(NodeId(i));
                self.acc_zip(grads, x, dy, y, |d, yv| d * yv * (1.0 - yv));
            }
            Op::Silu { x } => {
                self.acc_map(grads, x, dy, |xv, _, d| {
                    let s = sigmoid(xv);
                    d * (s + xv * s * (1.0 - s))
                });
            }
            Op::Softplus { x } => {
                self.acc_map(grads, x, dy, |xv, _, d| d * sigmoid(xv));
            }
            Op::LeakyRelu { x, slope } => {
                self.acc_map(grads, x, dy, |xv, _, d| if xv >= 0.0 { d } else { d * slope });
            }
            Op::PowConst { x, p } => {
                self.acc_map(grads, x, dy, |xv, _, d| {
                    if xv == 0.0 {
                        0.0 // subgradient at the domain edge
                    } else {
                        d * p * xv.powf(p - 1.0)
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                if !self.needs(x) {
                    return;
                }
                let y = self.value(NodeId(i));
                let (r, c) = (y.rows(), y.cols());
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    let ys = &y.data()[row * c..(row + 1) * c];
                    let ds = &dy.data()[row * c..(row + 1) * c];
                    let dot: f64 = ys.iter().zip(ds).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[row * c + j] = ys[j] * (ds[j] - dot);
                    }
                }
                self.accumulate(grads, x, Tensor::from_vec(vec![r, c], dx));
            }
            Op::SumAll { x } => {
                if self.needs(x) {
                    let v = dy.item();
                    let shape = self.value(x).shape().to_vec();
                    self.accumulate(grads, x, Tensor::filled(&shape, v));
                }
            }
            Op::MeanRows { x } => {
                if !self.needs(x) {
                    return;
                }
                let vx = self.value(x);
                let (r, c) = (vx.rows(), vx.cols());
                let inv = 1.0 / r as f64;
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    for j in 0..c {
                        dx[row * c + j] = dy.data()[j] * inv;
                    }
                }
                self.accumulate(grads, x, Tensor::from_vec(vec![r, c], dx));
            }
            Op::MaxRows { x } => {
                if !self.needs(x) {
                    return;
                }
                let vx = self.value(x);
                let (r, c) = (vx.rows(), vx.cols());
                let arg = match self.nodes[i].saved {
                    Some(Saved::Argmax(ref a)) => a,
                    _ => unreachable!("max_rows without argmax record"),
                };
                let mut dx = vec![0.0; r * c];
                for j in 0..c {
                    dx[arg[j] as usize * c + j] = dy.data()[j];
                }
                self.accumulate(grads, x, Tensor::from_vec(vec![r, c], dx));
            }
            Op::Reshape { x } => {
                if self.needs(x) {
                    let shape = self.value(x).shape().to_vec();
                    self.accumulate(
                        grads,
                        x,
                        Tensor::from_vec(shape, dy.data().to_vec()),
                    );
                }
            }
            Op::GatherRows { x, idx } => {
                if !self.needs(x) {
                    return;
                }
                let vx = self.value(x);
                let (r, c) = (vx.rows(), vx.cols());
                let mut dx = vec![0.0; r * c];
                for (out_row, &in_row) in idx.iter().enumerate() {
                    let src = &dy.data()[out_row * c..(out_row + 1) * c];
                    let dst = &mut dx[in_row * c..(in_row + 1) * c];
                    for j in 0..c {
                        dst[j] += src[j];
                    }
                }
                self.accumulate(grads, x, Tensor::from_vec(vec![r, c], dx));
            }
            Op::SelectPerRow { x, cols } => {
                if !self.needs(x) {
                    return;
                }
                let vx = self.value(x);
                let (r, c) = (vx.rows(), vx.cols());
                let mut dx = vec![0.0; r * c];
                for (row, &col) in cols.iter().enumerate() {
                    dx[row * c + col] += dy.data()[row];
                }
                self.accumulate(grads, x, Tensor::from_vec(vec![r, c], dx));
            }
            Op::Conv3x3 { x, w, bias } => {
                let (dx, dw, db) = conv3x3_backward(
                    self.value(x),
                    self.value(w),
                    dy,
                    self.needs(x),
                    self.needs(w),
                    self.needs(bias),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, dw);
                }
                if let Some(db) = db {
                    self.accumulate(grads, bias, db);
                }
            }
            Op::MaxPool2x2 { x } => {
                if !self.needs(x) {
                    return;
                }
                let vx = self.value(x);
                let arg = match self.nodes[i].saved {
                    Some(Saved::Argmax(ref a)) => a,
                    _ => unreachable!("max_pool2x2 without argmax record"),
                };
                let mut dx = vec![0.0; vx.numel()];
                for (o, &src) in arg.iter().enumerate() {
                    dx[src as usize] += dy.data()[o];
                }
                self.accumulate(grads, x, Tensor::from_vec(vx.shape().to_vec(), dx));
            }
            Op::GlobalAvgPool { x } => {
                if !self.needs(x) {
                    return;
                }
                let vx = self.value(x);
                let s = vx.shape();
                let hw = s[2] * s[3];
                let inv = 1.0 / hw as f64;
                let mut dx = vec![0.0; vx.numel()];
                for i in 0..s[0] * s[1] {
                    let g = dy.data()[i] * inv;
                    for v in &mut dx[i * hw..(i + 1) * hw] {
                        *v = g;
                    }
                }
                self.accumulate(grads, x, Tensor::from_vec(s.to_vec(), dx));
            }
            Op::LayerNormRows { x, gamma, beta, .. } => {
                let vx = self.value(x);
                let vg = self.value(gamma);
                let (r, c) = (vx.rows(), vx.cols());
                let stats = match self.nodes[i].saved {
                    Some(Saved::RowStats(ref s)) => s,
                    _ => unreachable!("layer_norm without stats"),
                };
                let mut dx = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for row in 0..r {
                    let (mean, rstd) = stats[row];
                    let xs = &vx.data()[row * c..(row + 1) * c];
                    let ds = &dy.data()[row * c..(row + 1) * c];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let xhat = (xs[j] - mean) * rstd;
                        let dxhat = ds[j] * vg.data()[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dg[j] += ds[j] * xhat;
                        db[j] += ds[j];
                    }
                    let inv_c = 1.0 / c as f64;
                    for j in 0..c {
                        let xhat = (xs[j] - mean) * rstd;
                        let dxhat = ds[j] * vg.data()[j];
                        dx[row * c + j] =
                            rstd * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
                    }
                }
                if self.needs(x) {
                    self.accumulate(grads, x, Tensor::from_vec(vec![r, c], dx));
                }
                if self.needs(gamma) {
                    self.accumulate(grads, gamma, Tensor::from_vec(vec![1, c], dg));
                }
                if self.needs(beta) {
                    self.accumulate(grads, beta, Tensor::from_vec(vec![1, c], db));
                }
            }
            Op::InterleaveRows { a, b, p, q } => {
                let d = self.value(a).cols();
                let frames = self.value(a).rows() / p;
                if self.needs(a) {
                    let mut da = vec![0.0; frames * p * d];
                    for f in 0..frames {
                        let src = &dy.data()[f * (p + q) * d..f * (p + q) * d + p * d];
                        da[f * p * d..(f + 1) * p * d].copy_from_slice(src);
                    }
                    self.accumulate(grads, a, Tensor::from_vec(vec![frames * p, d], da));
                }
                if self.needs(b) {
                    let mut db = vec![0.0; frames * q * d];
                    for f in 0..frames {
                        let src = &dy.data()[f * (p + q) * d + p * d..(f + 1) * (p + q) * d];
                        db[f * q * d..(f + 1) * q * d].copy_from_slice(src);
                    }
                    self.accumulate(grads, b, Tensor::from_vec(vec![frames * q, d], db));
                }
            }
            Op::SegmentWeightedSum { alpha, x } => {
                let va = self.value(alpha);
                let vx = self.value(x);
                let (frames, s) = (va.rows(), va.cols());
                let d = vx.cols();
                if self.needs(alpha) {
                    let mut da = vec![0.0; frames * s];
                    for f in 0..frames {
                        let g = &dy.data()[f * d..(f + 1) * d];
                        for i in 0..s {
                            let row = &vx.data()[(f * s + i) * d..(f * s + i + 1) * d];
                            da[f * s + i] = row.iter().zip(g).map(|(a, b)| a * b).sum();
                        }
                    }
                    self.accumulate(grads, alpha, Tensor::from_vec(vec![frames, s], da));
                }
                if self.needs(x) {
                    let mut dx = vec![0.0; frames * s * d];
                    for f in 0..frames {
                        let g = &dy.data()[f * d..(f + 1) * d];
                        for i in 0..s {
                            let w = va.data()[f * s + i];
                            let dst = &mut dx[(f * s + i) * d..(f * s + i + 1) * d];
                            for j in 0..d {
                                dst[j] = w * g[j];
                            }
                        }
                    }
                    self.accumulate(grads, x, Tensor::from_vec(vec![frames * s, d], dx));
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&n| self.value(n)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&n| self.needs(n)).collect();
                let saved = match self.nodes[i].saved {
                    Some(Saved::Custom(ref b)) => Some(b.as_ref()),
                    _ => None,
                };
                let din = op.backward(&vals, self.value(NodeId(i)), saved, dy, &needs);
                debug_assert_eq!(din.len(), inputs.len());
                for (node, g) in inputs.iter().zip(din) {
                    if let Some(g) = g {
                        self.accumulate(grads, *node, g);
                    }
                }
            }
        }
    }

    fn acc_map(
        &self,
        grads: &mut [Option<Tensor>],
        x: NodeId,
        dy: &Tensor,
        f: impl Fn(f64, f64, f64) -> f64,
    ) {
        if !self.needs(x) {
            return;
        }
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&xv, &d)| f(xv, 0.0, d))
            .collect();
        self.accumulate(grads, x, Tensor::from_vec(vx.shape().to_vec(), data));
    }

    fn acc_zip(
        &self,
        grads: &mut [Option<Tensor>],
        x: NodeId,
        dy: &Tensor,
        y: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) {
        if !self.needs(x) {
            return;
        }
        let data = dy
            .data()
            .iter()
            .zip(y.data())
            .map(|(&d, &yv)| f(d, yv))
            .collect();
        self.accumulate(grads, x, Tensor::from_vec(dy.shape().to_vec(), data));
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_vec(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
    )
}

// ── Convolution kernels ──────────────────────────────────────────────

/// Column index map for a 3×3/pad-1 patch: output pixel row -> 9·C input
/// offsets, `usize::MAX` marking zero padding.
fn im2col_map(c: usize, h: usize, w: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; h * w * c * 9];
    for oy in 0..h {
        for ox in 0..w {
            let base = (oy * w + ox) * c * 9;
            for ci in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = oy as isize + ky as isize - 1;
                        let ix = ox as isize + kx as isize - 1;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            map[base + ci * 9 + ky * 3 + kx] =
                                ci * h * w + iy as usize * w + ix as usize;
                        }
                    }
                }
            }
        }
    }
    map
}

fn gather_cols(x_img: &[f64], map: &[usize], out: &mut [f64]) {
    for (dst, &src) in out.iter_mut().zip(map) {
        *dst = if src == usize::MAX { 0.0 } else { x_img[src] };
    }
}

fn conv3x3_forward(x: &Tensor, w: &Tensor, bias: &Tensor) -> Tensor {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let o = w.shape()[0];
    let hw = h * wd;
    let k = c * 9;
    let map = im2col_map(c, h, wd);
    let mut col = vec![0.0; hw * k];
    let mut out = vec![0.0; b * o * hw];
    for bi in 0..b {
        gather_cols(&x.data()[bi * c * hw..(bi + 1) * c * hw], &map, &mut col);
        // (hw, k) @ (k, o) written transposed into [o, hw] layout.
        unsafe {
            matrixmultiply::dgemm(
                hw,
                k,
                o,
                1.0,
                col.as_ptr(),
                k as isize,
                1,
                w.data().as_ptr(),
                1,
                k as isize, // w stored (o, k); read as (k, o)
                0.0,
                out[bi * o * hw..].as_mut_ptr(),
                1,
                hw as isize,
            );
        }
        for oc in 0..o {
            let bv = bias.data()[oc];
            for v in &mut out[bi * o * hw + oc * hw..bi * o * hw + (oc + 1) * hw] {
                *v += bv;
            }
        }
    }
    Tensor::from_vec(vec![b, o, h, wd], out)
}

fn conv3x3_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let o = w.shape()[0];
    let hw = h * wd;
    let k = c * 9;
    let map = im2col_map(c, h, wd);
    let mut col = vec![0.0; hw * k];

    let mut dw = if need_w { Some(vec![0.0; o * k]) } else { None };
    let mut dx = if need_x { Some(vec![0.0; b * c * hw]) } else { None };
    let mut dcol = if need_x { vec![0.0; hw * k] } else { Vec::new() };

    for bi in 0..b {
        let dy_img = &dy.data()[bi * o * hw..(bi + 1) * o * hw]; // [o, hw]
        if let Some(ref mut dw) = dw {
            gather_cols(&x.data()[bi * c * hw..(bi + 1) * c * hw], &map, &mut col);
            // dW (o, k) += dy_img (o, hw) @ col (hw, k)
            unsafe {
                matrixmultiply::dgemm(
                    o,
                    hw,
                    k,
                    1.0,
                    dy_img.as_ptr(),
                    hw as isize,
                    1,
                    col.as_ptr(),
                    k as isize,
                    1,
                    1.0,
                    dw.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        }
        if let Some(ref mut dx) = dx {
            // dcol (hw, k) = dy viewed (hw, o) @ w (o, k)
            unsafe {
                matrixmultiply::dgemm(
                    hw,
                    o,
                    k,
                    1.0,
                    dy_img.as_ptr(),
                    1,
                    hw as isize,
                    w.data().as_ptr(),
                    k as isize,
                    1,
                    0.0,
                    dcol.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
            let dst = &mut dx[bi * c * hw..(bi + 1) * c * hw];
            for (v, &src) in dcol.iter().zip(&map) {
                if src != usize::MAX {
                    dst[src] += v;
                }
            }
        }
    }

    let db = if need_b {
        let mut db = vec![0.0; o];
        for bi in 0..b {
            for oc in 0..o {
                db[oc] += dy.data()[bi * o * hw + oc * hw..bi * o * hw + (oc + 1) * hw]
                    .iter()
                    .sum::<f64>();
            }
        }
        Some(Tensor::from_vec(vec![1, o], db))
    } else {
        None
    };

    (
        dx.map(|d| Tensor::from_vec(vec![b, c, h, wd], d)),
        dw.map(|d| Tensor::from_vec(vec![o, c, 3, 3], d)),
        db,
    )
}

fn max_pool2x2_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; b * c * oh * ow];
    let mut arg = vec![0u32; b * c * oh * ow];
    for img in 0..b * c {
        let base = img * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                // fixed scan order gives the first-maximal tie rule
                for ky in 0..2 {
                    for kx in 0..2 {
                        let idx = base + (oy * 2 + ky) * w + ox * 2 + kx;
                        let v = x.data()[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let oidx = img * oh * ow + oy * ow + ox;
                out[oidx] = best;
                arg[oidx] = best_idx as u32;
            }
        }
    }
    (Tensor::from_vec(vec![b, c, oh, ow], out), arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        // d(x*x)/dx = 2x = 6 at x = 3
        let mut g = Graph::new();
        let x = g.param(ParamId(0), Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward_scalar(y).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().item(), 6.0);
    }

    #[test]
    fn matmul_adjoint_identity() {
        // Adjoint of C = A @ B is dA = seed @ B^T; with A = B = I2 and an
        // identity seed (trace scalarization), grad(A) = B^T = I.
        let mut g = Graph::new();
        let a = g.param(ParamId(0), Tensor::from_vec(vec![2, 2], vec![1., 0., 0., 1.]));
        let b = g.input(Tensor::from_vec(vec![2, 2], vec![1., 0., 0., 1.]));
        let prod = g.matmul(a, b).unwrap();
        let seed = Tensor::from_vec(vec![2, 2], vec![1., 0., 0., 1.]);
        let grads = g.backward(prod, &seed).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[1., 0., 0., 1.]);

        // Plain scalar-sum seeding of the same graph gives dA = 1 @ B^T.
        let s = g.sum_all(prod);
        let grads = g.backward_scalar(s).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[1., 1., 1., 1.]);
    }

    #[test]
    fn leaky_relu_negative_side() {
        let mut g = Graph::new();
        let x = g.param(ParamId(0), Tensor::scalar(-2.0));
        let y = g.leaky_relu(x, 0.01);
        let s = g.sum_all(y);
        let grads = g.backward_scalar(s).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().item(), 0.01);
    }

    #[test]
    fn non_participating_param_gets_zeros() {
        let mut g = Graph::new();
        let x = g.param(ParamId(0), Tensor::scalar(2.0));
        let unused = g.param(ParamId(1), Tensor::from_vec(vec![2, 1], vec![5.0, 6.0]));
        let _ = unused;
        let y = g.mul(x, x).unwrap();
        let grads = g.backward_scalar(y).unwrap();
        assert_eq!(grads.get(ParamId(1)).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn gradient_sum_linearity_is_exact() {
        // grad of (f+g) equals grad(f) + grad(g) bitwise: identical subpaths
        // are accumulated in the same order.
        let make = |both: bool| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.param(ParamId(0), Tensor::from_vec(vec![2, 1], vec![1.3, -0.7]));
            let f = {
                let t = g.tanh(x);
                g.sum_all(t)
            };
            let h = {
                let e = g.exp(x);
                g.sum_all(e)
            };
            let top = if both { g.add(f, h).unwrap() } else { f };
            let grads = g.backward_scalar(top).unwrap();
            grads.get(ParamId(0)).unwrap().data().to_vec()
        };
        let gf = {
            let mut g = Graph::new();
            let x = g.param(ParamId(0), Tensor::from_vec(vec![2, 1], vec![1.3, -0.7]));
            let t = g.tanh(x);
            let f = g.sum_all(t);
            g.backward_scalar(f)
                .unwrap()
                .get(ParamId(0))
                .unwrap()
                .data()
                .to_vec()
        };
        let gh = {
            let mut g = Graph::new();
            let x = g.param(ParamId(0), Tensor::from_vec(vec![2, 1], vec![1.3, -0.7]));
            let e = g.exp(x);
            let h = g.sum_all(e);
            g.backward_scalar(h)
                .unwrap()
                .get(ParamId(0))
                .unwrap()
                .data()
                .to_vec()
        };
        let sum: Vec<f64> = gf.iter().zip(&gh).map(|(a, b)| a + b).collect();
        assert_eq!(make(true), sum);
        let _ = make(false);
    }

    #[test]
    fn deterministic_backward() {
        let run = || {
            let mut g = Graph::new();
            let x = g.param(
                ParamId(0),
                Tensor::from_vec(vec![2, 3], vec![0.3, -1.2, 2.2, 0.9, -0.4, 1.7]),
            );
            let w = g.param(
                ParamId(1),
                Tensor::from_vec(vec![3, 2], vec![0.5, -0.25, 1.5, 0.75, -1.0, 2.0]),
            );
            let mm = g.matmul(x, w).unwrap();
            let a = g.softmax_rows(mm).unwrap();
            let s = g.sum_all(a);
            let grads = g.backward_scalar(s).unwrap();
            (
                grads.get(ParamId(0)).unwrap().data().to_vec(),
                grads.get(ParamId(1)).unwrap().data().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_names_node_and_op() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("node"), "{msg}");
    }

    #[test]
    fn max_rows_first_tie_and_argmax() {
        let mut g = Graph::new();
        let x = g.param(
            ParamId(0),
            Tensor::from_vec(vec![3, 2], vec![5.0, 1.0, 5.0, 3.0, 2.0, 3.0]),
        );
        let m = g.max_rows(x).unwrap();
        assert_eq!(g.value(m).data(), &[5.0, 3.0]);
        assert_eq!(g.argmax_of(m).unwrap(), &[0, 1]); // ties -> first row
        let s = g.sum_all(m);
        let grads = g.backward_scalar(s).unwrap();
        assert_eq!(
            grads.get(ParamId(0)).unwrap().data(),
            &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let mut g = Graph::new();
        let x = g.param(ParamId(0), Tensor::from_vec(vec![2, 2], vec![1., 2., 3., 4.]));
        let gathered = g
            .gather_rows(x, Arc::new(vec![0, 0, 1]))
            .unwrap();
        let s = g.sum_all(gathered);
        let grads = g.backward_scalar(s).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[2., 2., 1., 1.]);
    }

    #[test]
    fn conv3x3_zero_weights_give_bias() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[1, 3, 4, 4], 2.0));
        let w = g.param(ParamId(0), Tensor::zeros(&[2, 3, 3, 3]));
        let bias = g.param(ParamId(1), Tensor::from_vec(vec![1, 2], vec![0.5, -0.5]));
        let y = g.conv3x3(x, w, bias).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 4, 4]);
        assert!(g.value(y).data()[..16].iter().all(|&v| v == 0.5));
        assert!(g.value(y).data()[16..].iter().all(|&v| v == -0.5));
    }

    #[test]
    fn recompute_forward_tracks_nudges() {
        let mut g = Graph::new();
        let x = g.param(ParamId(0), Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        g.nudge_param(x, 0, 1.0);
        g.recompute_forward().unwrap();
        assert_eq!(g.value(y).item(), 16.0);
    }
}
