//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every op is evaluated eagerly when it is pushed onto a [`Graph`]; the
//! graph keeps the output of each node so [`Graph::backward`] can walk the
//! nodes in reverse insertion order. Insertion order is a topological order
//! because an op can only reference nodes that already exist.
//!
//! Layout conventions: images and feature maps are `[B, C, H, W]`, vectors
//! are `[B, N]`, per-sample reductions produce `[B]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Upsample(NodeId, usize),
    AvgPool(NodeId, usize),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    /// Natural log with the argument clamped to `[lo, hi]`.
    Ln {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    Sqrt(NodeId),
    Abs(NodeId),
    Gap(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Reshape(NodeId),
    ConcatChannels(NodeId, NodeId),
    Mean(NodeId),
    Sum(NodeId),
    MeanPerSample(NodeId),
    SumSqPerSample(NodeId),
    Kld(NodeId, NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Trainable leaf: receives a gradient slot in `backward`.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, true)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: Tensor, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, name: &'static str, value: Tensor, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NumericOverflow { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn rank4(&self, op: &'static str, x: NodeId) -> Result<[usize; 4]> {
        match *self.shape(x) {
            [b, c, h, w] => Ok([b, c, h, w]),
            ref s => Err(Error::shape(op, format!("expected [B,C,H,W], got {s:?}"))),
        }
    }

    fn rank2(&self, op: &'static str, x: NodeId) -> Result<[usize; 2]> {
        match *self.shape(x) {
            [r, c] => Ok([r, c]),
            ref s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    // ---- ops -------------------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [m, k] = self.rank2("matmul", a)?;
        let [k2, n] = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Op::MatMul(a, b), "matmul", Tensor::new(vec![m, n], out)?, &[a, b])
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let [m, n] = self.rank2("add_row_bias", x)?;
        if self.value(bias).len() != n {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} for rows of {n}", self.shape(bias)),
            ));
        }
        let bv = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        self.push(Op::AddRowBias(x, bias), "add_row_bias", Tensor::new(vec![m, n], out)?, &[x, bias])
    }

    /// Stride-1 convolution with zero "same" padding and an odd square kernel.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let [bs, ci, h, wd] = self.rank4("conv2d", x)?;
        let [co, ci2, kh, kw] = self.rank4("conv2d", w)?;
        if ci != ci2 || kh != kw || kh % 2 == 0 || self.value(b).len() != co {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?}, kernel {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        let dims = ConvDims { bs, ci, co, h, w: wd, k: kh };
        let out = conv2d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), dims);
        self.push(
            Op::Conv2d { x, w, b },
            "conv2d",
            Tensor::new(vec![bs, co, h, wd], out)?,
            &[x, w, b],
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let [bs, c, h, w] = self.rank4("upsample", x)?;
        if factor == 0 {
            return Err(Error::shape("upsample", "factor 0"));
        }
        let out = upsample_raw(self.value(x).data(), bs * c, h, w, factor);
        self.push(
            Op::Upsample(x, factor),
            "upsample",
            Tensor::new(vec![bs, c, h * factor, w * factor], out)?,
            &[x],
        )
    }

    /// Non-overlapping average pooling with window and stride `factor`.
    pub fn avg_pool(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let [bs, c, h, w] = self.rank4("avg_pool", x)?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(
                "avg_pool",
                format!("{h}x{w} not divisible by {factor}"),
            ));
        }
        let (oh, ow) = (h / factor, w / factor);
        let src = self.value(x).data();
        let inv = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; bs * c * oh * ow];
        for p in 0..bs * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..h {
                for x in 0..w {
                    dst[(y / factor) * ow + x / factor] += plane[y * w + x] * inv;
                }
            }
        }
        self.push(
            Op::AvgPool(x, factor),
            "avg_pool",
            Tensor::new(vec![bs, c, oh, ow], out)?,
            &[x],
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), "relu", out, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(crate::tensor::sigmoid);
        self.push(Op::Sigmoid(x), "sigmoid", out, &[x])
    }

    /// Row-wise softmax of a `[B, C]` matrix.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let [b, c] = self.rank2("softmax", x)?;
        let mut out = Vec::with_capacity(b * c);
        for row in self.value(x).data().chunks(c) {
            out.extend(crate::tensor::softmax(row));
        }
        self.push(Op::Softmax(x), "softmax", Tensor::new(vec![b, c], out)?, &[x])
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let out = self.value(x).map(|v| v.clamp(lo, hi).ln());
        self.push(Op::Ln { x, lo, hi }, "ln", out, &[x])
    }

    /// Elementwise square root; the gradient at 0 is taken as 0.
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("sqrt of a negative value".into()));
        }
        let out = self.value(x).map(f64::sqrt);
        self.push(Op::Sqrt(x), "sqrt", out, &[x])
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(f64::abs);
        self.push(Op::Abs(x), "abs", out, &[x])
    }

    /// Global average pooling `[B, C, H, W] -> [B, C]`.
    pub fn gap(&mut self, x: NodeId) -> Result<NodeId> {
        let [b, c, h, w] = self.rank4("gap", x)?;
        let hw = h * w;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Op::Gap(x), "gap", Tensor::new(vec![b, c], out)?, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(Op::Add(a, b), "add", out, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(Op::Sub(a, b), "sub", out, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), "mul", out, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        let out = self.value(x).map(|v| v * s);
        self.push(Op::Scale(x, s), "scale", out, &[x])
    }

    pub fn add_scalar(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        let out = self.value(x).map(|v| v + s);
        self.push(Op::AddScalar(x), "add_scalar", out, &[x])
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape(x), "reshape", out, &[x])
    }

    /// Concatenates two `[B, C, H, W]` maps along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [ba, ca, ha, wa] = self.rank4("concat_channels", a)?;
        let [bb, cb, hb, wb] = self.rank4("concat_channels", b)?;
        if ba != bb || ha != hb || wa != wb {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let hw = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * hw);
        for i in 0..ba {
            out.extend_from_slice(&da[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&db[i * cb * hw..(i + 1) * cb * hw]);
        }
        self.push(
            Op::ConcatChannels(a, b),
            "concat_channels",
            Tensor::new(vec![ba, ca + cb, ha, wa], out)?,
            &[a, b],
        )
    }

    /// Mean of all elements, producing a scalar.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).mean();
        self.push(Op::Mean(x), "mean", Tensor::scalar(v), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).sum();
        self.push(Op::Sum(x), "sum", Tensor::scalar(v), &[x])
    }

    /// Mean over every axis except the leading one: `[B, ...] -> [B]`.
    pub fn mean_per_sample(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let b = t.shape()[0];
        let n = t.len() / b;
        let out: Vec<f64> = t.data().chunks(n).map(|c| c.iter().sum::<f64>() / n as f64).collect();
        self.push(Op::MeanPerSample(x), "mean_per_sample", Tensor::new(vec![b], out)?, &[x])
    }

    /// Squared L2 norm of each sample: `[B, ...] -> [B]`.
    pub fn sum_sq_per_sample(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let b = t.shape()[0];
        let n = t.len() / b;
        let out: Vec<f64> = t.data().chunks(n).map(|c| c.iter().map(|v| v * v).sum()).collect();
        self.push(Op::SumSqPerSample(x), "sum_sq_per_sample", Tensor::new(vec![b], out)?, &[x])
    }

    /// Row-wise `KL(p || q) = sum p (ln p - ln q)` for `[B, C]` inputs.
    /// `q` is clamped to at least [`PROB_FLOOR`]; entries with `p == 0`
    /// contribute nothing.
    pub fn kld(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        let [b, c] = self.rank2("kld", p)?;
        self.same_shape("kld", p, q)?;
        let (pd, qd) = (self.value(p).data(), self.value(q).data());
        let mut out = vec![0.0; b];
        for (i, o) in out.iter_mut().enumerate() {
            for j in 0..c {
                let pv = pd[i * c + j];
                if pv > 0.0 {
                    *o += pv * (pv.ln() - qd[i * c + j].max(PROB_FLOOR).ln());
                }
            }
        }
        self.push(Op::Kld(p, q), "kld", Tensor::new(vec![b], out)?, &[p, q])
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar node. Returns gradients for every node that
    /// requires one; constant leaves are left without a slot.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let [m, k] = self.rank2("matmul", a)?;
                let n = out.shape()[1];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.requires_grad(a) {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g.data()[i * n + j];
                            for p in 0..k {
                                da[i * k + p] += gij * bv[p * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, a, Tensor::new(vec![m, k], da)?);
                }
                if self.requires_grad(b) {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            let row = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in row.iter_mut().zip(&g.data()[i * n..(i + 1) * n]) {
                                *d += aip * gv;
                            }
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, x, g.clone());
                if self.requires_grad(bias) {
                    let n = self.value(bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.shape(bias).to_vec();
                    self.accumulate(grads, bias, Tensor::new(shape, db)?);
                }
            }
            Op::Conv2d { x, w, b } => {
                let [bs, ci, h, wd] = self.rank4("conv2d", x)?;
                let [co, _, k, _] = self.rank4("conv2d", w)?;
                let dims = ConvDims { bs, ci, co, h, w: wd, k };
                let (gx, gw) = conv2d_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    g.data(),
                    dims,
                    self.requires_grad(x),
                    self.requires_grad(w),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, x, Tensor::new(self.shape(x).to_vec(), gx)?);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, w, Tensor::new(self.shape(w).to_vec(), gw)?);
                }
                if self.requires_grad(b) {
                    let hw = h * wd;
                    let mut db = vec![0.0; co];
                    for (i, plane) in g.data().chunks(hw).enumerate() {
                        db[i % co] += plane.iter().sum::<f64>();
                    }
                    self.accumulate(grads, b, Tensor::new(self.shape(b).to_vec(), db)?);
                }
            }
            Op::Upsample(x, f) => {
                let [bs, c, h, w] = self.rank4("upsample", x)?;
                let (oh, ow) = (h * f, w * f);
                let mut dx = vec![0.0; bs * c * h * w];
                for p in 0..bs * c {
                    let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dp = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dp[(y / f) * w + xx / f] += gp[y * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(vec![bs, c, h, w], dx)?);
            }
            Op::AvgPool(x, f) => {
                let [bs, c, h, w] = self.rank4("avg_pool", x)?;
                let (oh, ow) = (h / f, w / f);
                let inv = 1.0 / (f * f) as f64;
                let mut dx = vec![0.0; bs * c * h * w];
                for p in 0..bs * c {
                    let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dp = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dp[y * w + xx] = gp[(y / f) * ow + xx / f] * inv;
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(vec![bs, c, h, w], dx)?);
            }
            Op::Relu(x) => {
                let dx = self.value(x).zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = out.zip_map(g, |s, gv| gv * s * (1.0 - s))?;
                self.accumulate(grads, x, dx);
            }
            Op::Softmax(x) => {
                let c = out.shape()[1];
                let mut dx = vec![0.0; out.len()];
                for ((srow, grow), drow) in out
                    .data()
                    .chunks(c)
                    .zip(g.data().chunks(c))
                    .zip(dx.chunks_mut(c))
                {
                    let inner: f64 = srow.iter().zip(grow).map(|(s, gv)| s * gv).sum();
                    for ((d, s), gv) in drow.iter_mut().zip(srow).zip(grow) {
                        *d = s * (gv - inner);
                    }
                }
                self.accumulate(grads, x, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::Ln { x, lo, hi } => {
                let dx = self
                    .value(x)
                    .zip_map(g, |v, gv| if v < lo || v > hi { 0.0 } else { gv / v })?;
                self.accumulate(grads, x, dx);
            }
            Op::Sqrt(x) => {
                let dx = out.zip_map(g, |s, gv| if s > 0.0 { gv * 0.5 / s } else { 0.0 })?;
                self.accumulate(grads, x, dx);
            }
            Op::Abs(x) => {
                let dx = self.value(x).zip_map(g, |v, gv| {
                    if v > 0.0 {
                        gv
                    } else if v < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(grads, x, dx);
            }
            Op::Gap(x) => {
                let [bs, c, h, w] = self.rank4("gap", x)?;
                let hw = h * w;
                let mut dx = vec![0.0; bs * c * hw];
                for (plane, gv) in dx.chunks_mut(hw).zip(g.data()) {
                    plane.fill(gv / hw as f64);
                }
                self.accumulate(grads, x, Tensor::new(vec![bs, c, h, w], dx)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |gv, bv| gv * bv)?);
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |gv, av| gv * av)?);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, x, g.map(|v| v * s)),
            Op::AddScalar(x) => self.accumulate(grads, x, g.clone()),
            Op::Reshape(x) => {
                let shape = self.shape(x).to_vec();
                self.accumulate(grads, x, g.clone().reshape(&shape)?);
            }
            Op::ConcatChannels(a, b) => {
                let [bs, ca, h, w] = self.rank4("concat_channels", a)?;
                let cb = self.shape(b)[1];
                let hw = h * w;
                let mut da = Vec::with_capacity(bs * ca * hw);
                let mut db = Vec::with_capacity(bs * cb * hw);
                for chunk in g.data().chunks((ca + cb) * hw) {
                    da.extend_from_slice(&chunk[..ca * hw]);
                    db.extend_from_slice(&chunk[ca * hw..]);
                }
                self.accumulate(grads, a, Tensor::new(vec![bs, ca, h, w], da)?);
                self.accumulate(grads, b, Tensor::new(vec![bs, cb, h, w], db)?);
            }
            Op::Mean(x) => {
                let n = self.value(x).len() as f64;
                let dx = Tensor::full(self.shape(x), g.item() / n);
                self.accumulate(grads, x, dx);
            }
            Op::Sum(x) => {
                let dx = Tensor::full(self.shape(x), g.item());
                self.accumulate(grads, x, dx);
            }
            Op::MeanPerSample(x) => {
                let t = self.value(x);
                let n = t.len() / t.shape()[0];
                let mut dx = vec![0.0; t.len()];
                for (chunk, gv) in dx.chunks_mut(n).zip(g.data()) {
                    chunk.fill(gv / n as f64);
                }
                self.accumulate(grads, x, Tensor::new(t.shape().to_vec(), dx)?);
            }
            Op::SumSqPerSample(x) => {
                let t = self.value(x);
                let n = t.len() / t.shape()[0];
                let mut dx = vec![0.0; t.len()];
                for ((d, v), gv) in dx.chunks_mut(n).zip(t.data().chunks(n)).zip(g.data()) {
                    for (di, vi) in d.iter_mut().zip(v) {
                        *di = 2.0 * vi * gv;
                    }
                }
                self.accumulate(grads, x, Tensor::new(t.shape().to_vec(), dx)?);
            }
            Op::Kld(p, q) => {
                let c = self.shape(p)[1];
                let (pd, qd) = (self.value(p).data(), self.value(q).data());
                if self.requires_grad(q) {
                    let mut dq = vec![0.0; pd.len()];
                    for (i, d) in dq.iter_mut().enumerate() {
                        let (pv, qv) = (pd[i], qd[i]);
                        if pv > 0.0 && qv >= PROB_FLOOR {
                            *d = -g.data()[i / c] * pv / qv;
                        }
                    }
                    self.accumulate(grads, q, Tensor::new(self.shape(q).to_vec(), dq)?);
                }
                if self.requires_grad(p) {
                    let mut dp = vec![0.0; pd.len()];
                    for (i, d) in dp.iter_mut().enumerate() {
                        let pv = pd[i];
                        if pv > 0.0 {
                            *d = g.data()[i / c] * (pv.ln() + 1.0 - qd[i].max(PROB_FLOOR).ln());
                        }
                    }
                    self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), dp)?);
                }
            }
        }
        Ok(())
    }
}

// ---- kernels ---------------------------------------------------------------

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    bs: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
}

/// Row/column overlap of an output plane with an input plane shifted by `d`.
#[inline]
fn valid_range(d: isize, len: usize) -> (usize, usize) {
    let lo = ((-d).max(0) as usize).min(len);
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], d: ConvDims) -> Vec<f64> {
    let ConvDims { bs, ci, co, h, w: wd, k } = d;
    let hw = h * wd;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; bs * co * hw];
    for n in 0..bs {
        for o in 0..co {
            let oplane = &mut out[(n * co + o) * hw..(n * co + o + 1) * hw];
            oplane.fill(b[o]);
            for c in 0..ci {
                let iplane = &x[(n * ci + c) * hw..(n * ci + c + 1) * hw];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(dy, h);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(dx, wd);
                        if x0 == x1 || y0 == y1 {
                            continue;
                        }
                        let wv = w[((o * ci + c) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let orow = &mut oplane[y * wd + x0..y * wd + x1];
                            let ix0 = (x0 as isize + dx) as usize;
                            let irow = &iplane[iy * wd + ix0..iy * wd + ix0 + (x1 - x0)];
                            for (ov, iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    d: ConvDims,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let ConvDims { bs, ci, co, h, w: wd, k } = d;
    let hw = h * wd;
    let pad = (k / 2) as isize;
    let mut gx = want_x.then(|| vec![0.0; bs * ci * hw]);
    let mut gw = want_w.then(|| vec![0.0; co * ci * k * k]);
    for n in 0..bs {
        for o in 0..co {
            let gplane = &g[(n * co + o) * hw..(n * co + o + 1) * hw];
            for c in 0..ci {
                let ioff = (n * ci + c) * hw;
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(dy, h);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(dx, wd);
                        if x0 == x1 || y0 == y1 {
                            continue;
                        }
                        let widx = ((o * ci + c) * k + ky) * k + kx;
                        let wv = w[widx];
                        let ix0 = (x0 as isize + dx) as usize;
                        let span = x1 - x0;
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let grow = &gplane[y * wd + x0..y * wd + x1];
                            let ibase = ioff + iy * wd + ix0;
                            if want_w {
                                let irow = &x[ibase..ibase + span];
                                acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(gx) = gx.as_mut() {
                                if wv != 0.0 {
                                    for (dst, gv) in gx[ibase..ibase + span].iter_mut().zip(grow) {
                                        *dst += wv * gv;
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

pub(crate) fn upsample_raw(src: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                d[y * ow + x] = s[(y / f) * w + x / f];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[3.7, 3.7]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn gap_of_small_map() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.gap(x).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn l1_gradient_is_sign() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[2.0, 5.0, 1.5]));
        let c = g.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let d = g.sub(x, c).unwrap();
        let a = g.abs(d).unwrap();
        let s = g.sum(a).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(4.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 4.0);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
    }

    #[test]
    fn overflow_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1e308));
        assert!(matches!(g.scale(a, 10.0), Err(Error::NumericOverflow { .. })));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[0.0, 1.0]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn kld_skips_zero_mass() {
        let mut g = Graph::new();
        let p = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let q = g.constant(t(&[1, 2], &[0.25, 0.75]));
        let k = g.kld(p, q).unwrap();
        assert!((g.value(k).item() - 4f64.ln()).abs() < 1e-15);
    }
}
