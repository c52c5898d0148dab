use super::{DiffError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div { num: NodeId, den: NodeId, eps: f64 },
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MeanAxis { input: NodeId, axis: usize },
    Concat(NodeId, NodeId),
    Conv1d { input: NodeId, kernel: NodeId, stride: usize },
    MaskedMeanPool { input: NodeId, counts: Vec<usize> },
    GradReverse { input: NodeId, lambda: f64 },
    Pick { input: NodeId, index: Vec<usize> },
    Reshape(NodeId),
}

impl Op {
    fn inputs(&self) -> [Option<NodeId>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            MatMul(a, b) | AddBias(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Concat(a, b) => {
                [Some(a), Some(b)]
            }
            Div { num, den, .. } => [Some(num), Some(den)],
            Conv1d { input, kernel, .. } => [Some(input), Some(kernel)],
            Scale(a, _) | AddScalar(a) | Relu(a) | Log(a) | Abs(a) | Softmax(a)
            | LogSoftmax(a) | Sum(a) | Mean(a) | Reshape(a) => [Some(a), None],
            MeanAxis { input, .. }
            | MaskedMeanPool { input, .. }
            | GradReverse { input, .. }
            | Pick { input, .. } => [Some(input), None],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation tape. Nodes are stored in creation order, which is
/// a topological order because an operation can only reference existing nodes.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`, or `None` when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`; zeros when unreachable from the loss.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn reached(&self, id: NodeId) -> bool {
        self.get(id).is_some()
    }
}

fn mismatch(op: &'static str, detail: String) -> DiffError {
    DiffError::ShapeMismatch { op, detail }
}

/// Output length of a valid (unpadded) strided convolution.
pub fn conv_output_len(input_len: usize, kernel: usize, stride: usize) -> usize {
    if input_len < kernel || stride == 0 {
        0
    } else {
        (input_len - kernel) / stride + 1
    }
}

fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

fn log_softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

/// (outer, axis, inner) extents for reducing `shape` along `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = op
            .inputs()
            .iter()
            .flatten()
            .any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, DiffError> {
        self.same_shape(op_name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(op, value))
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = va[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, &w) in row.iter_mut().zip(&vb[p * n..(p + 1) * n]) {
                    *o += x * w;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// Adds a bias vector along the last axis of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, DiffError> {
        let n = *self.shape(a).last().unwrap_or(&1);
        if self.shape(bias) != [n] {
            return Err(mismatch(
                "add_bias",
                format!("{:?} + {:?}", self.shape(a), self.shape(bias)),
            ));
        }
        let vb = self.value(bias).data().to_vec();
        let va = self.value(a);
        let data = va
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(&vb).map(|(&x, &b)| x + b))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::AddBias(a, bias), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, num: NodeId, den: NodeId) -> Result<NodeId, DiffError> {
        self.safe_div(num, den, 0.0)
    }

    /// Elementwise `num / den`, yielding 0 (with zero gradient) wherever
    /// `|den| < eps`.
    pub fn safe_div(&mut self, num: NodeId, den: NodeId, eps: f64) -> Result<NodeId, DiffError> {
        let op = Op::Div { num, den, eps };
        self.zip_with("div", num, den, op, move |x, y| {
            if y.abs() < eps {
                0.0
            } else {
                x / y
            }
        })
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|v| v * factor);
        self.push(Op::Scale(a, factor), value)
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> NodeId {
        let value = self.value(a).map(|v| v + offset);
        self.push(Op::AddScalar(a), value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::ln);
        self.push(Op::Log(a), value)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), value)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let cols = *va.shape().last().unwrap_or(&1);
        let value = Tensor::new(va.shape().to_vec(), softmax_rows(va.data(), cols))
            .expect("shape preserved");
        self.push(Op::Softmax(a), value)
    }

    /// Log-softmax over the last axis, computed with the max-shift.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let cols = *va.shape().last().unwrap_or(&1);
        let value = Tensor::new(va.shape().to_vec(), log_softmax_rows(va.data(), cols))
            .expect("shape preserved");
        self.push(Op::LogSoftmax(a), value)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let value = Tensor::scalar(va.data().iter().sum::<f64>() / va.len() as f64);
        self.push(Op::Mean(a), value)
    }

    /// Mean along `axis`; the axis is removed from the output shape.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(mismatch("mean_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let va = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &va[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for d in out.iter_mut() {
            *d /= len as f64;
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(Op::MeanAxis { input: a, axis }, value))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(mismatch("concat", format!("{sa:?} ∥ {sb:?}")));
        }
        let (na, nb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let rows = va.len().checked_div(na).unwrap_or(vb.len() / nb.max(1));
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for r in 0..rows {
            out.extend_from_slice(&va[r * na..(r + 1) * na]);
            out.extend_from_slice(&vb[r * nb..(r + 1) * nb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = na + nb;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Concat(a, b), value))
    }

    /// Channels-last strided 1-D convolution without padding:
    /// `input` is `B×T×C_in`, `kernel` is `K×C_in×C_out`, output `B×T'×C_out`
    /// with `T' = floor((T − K)/stride) + 1`.
    pub fn conv1d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
    ) -> Result<NodeId, DiffError> {
        let (sx, sw) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || stride == 0 {
            return Err(mismatch(
                "conv1d",
                format!("input {sx:?}, kernel {sw:?}, stride {stride}"),
            ));
        }
        let (b, t, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[2]);
        let t_out = conv_output_len(t, k, stride);
        if t_out == 0 {
            return Err(mismatch(
                "conv1d",
                format!("input length {t} shorter than kernel {k}"),
            ));
        }
        let (vx, vw) = (self.value(input).data(), self.value(kernel).data());
        let mut out = vec![0.0; b * t_out * cout];
        for bi in 0..b {
            for to in 0..t_out {
                let dst = &mut out[(bi * t_out + to) * cout..(bi * t_out + to + 1) * cout];
                for kk in 0..k {
                    let ti = to * stride + kk;
                    let src = &vx[(bi * t + ti) * cin..(bi * t + ti + 1) * cin];
                    for (ci, &x) in src.iter().enumerate() {
                        if x == 0.0 {
                            continue;
                        }
                        let w = &vw[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout];
                        for (d, &wv) in dst.iter_mut().zip(w) {
                            *d += x * wv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, t_out, cout], out)?;
        Ok(self.push(
            Op::Conv1d {
                input,
                kernel,
                stride,
            },
            value,
        ))
    }

    /// Mean over the first `counts[b]` frames of each `B×T×D` sequence.
    pub fn masked_mean_pool(
        &mut self,
        input: NodeId,
        counts: &[usize],
    ) -> Result<NodeId, DiffError> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || counts.len() != s[0] {
            return Err(mismatch(
                "masked_mean_pool",
                format!("input {s:?}, {} counts", counts.len()),
            ));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        if let Some(&bad) = counts.iter().find(|&&c| c == 0 || c > t) {
            return Err(DiffError::InvalidArgument(format!(
                "valid frame count {bad} outside 1..={t}"
            )));
        }
        let vx = self.value(input).data();
        let mut out = vec![0.0; b * d];
        for (bi, &c) in counts.iter().enumerate() {
            let dst = &mut out[bi * d..(bi + 1) * d];
            for ti in 0..c {
                for (o, &x) in dst.iter_mut().zip(&vx[(bi * t + ti) * d..(bi * t + ti + 1) * d]) {
                    *o += x;
                }
            }
            for o in dst.iter_mut() {
                *o /= c as f64;
            }
        }
        let value = Tensor::new(vec![b, d], out)?;
        Ok(self.push(
            Op::MaskedMeanPool {
                input,
                counts: counts.to_vec(),
            },
            value,
        ))
    }

    /// Identity on the forward pass; the backward pass multiplies the
    /// incoming gradient by `-lambda`.
    pub fn gradient_reversal(&mut self, input: NodeId, lambda: f64) -> NodeId {
        let value = self.value(input).clone();
        self.push(Op::GradReverse { input, lambda }, value)
    }

    /// Selects `input[i, index[i]]` from an `m×n` tensor.
    pub fn pick(&mut self, input: NodeId, index: &[usize]) -> Result<NodeId, DiffError> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || index.len() != s[0] {
            return Err(mismatch("pick", format!("{s:?} with {} indices", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s[1]) {
            return Err(DiffError::InvalidArgument(format!(
                "index {bad} out of range for {} columns",
                s[1]
            )));
        }
        let v = self.value(input).data();
        let data = index.iter().enumerate().map(|(r, &c)| v[r * s[1] + c]).collect();
        let value = Tensor::new(vec![s[0]], data)?;
        Ok(self.push(
            Op::Pick {
                input,
                index: index.to_vec(),
            },
            value,
        ))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId, DiffError> {
        let value = self.value(input).reshape(shape)?;
        Ok(self.push(Op::Reshape(input), value))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, DiffError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(DiffError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.op.inputs().iter().flatten().any(|inp| inp.0 >= i) {
                return Err(DiffError::CycleDetected { node: i });
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            let node = &self.nodes[id.0];
            if !node.requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
            f(slot);
        };

        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                acc(a, &mut |da| {
                    for i in 0..m {
                        for p in 0..k {
                            let w = &vb[p * n..(p + 1) * n];
                            let gi = &g[i * n..(i + 1) * n];
                            da[i * k + p] += gi.iter().zip(w).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(b, &mut |db| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = va[i * k + p];
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *d += x * gv;
                            }
                        }
                    }
                });
            }
            Op::AddBias(a, bias) => {
                acc(a, &mut |da| add_into(da, g));
                let n = self.shape(bias)[0];
                acc(bias, &mut |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| db.iter_mut().zip(g).for_each(|(d, &x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                acc(a, &mut |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(vb) {
                        *d += x * y;
                    }
                });
                acc(b, &mut |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(va) {
                        *d += x * y;
                    }
                });
            }
            Op::Div { num, den, eps } => {
                let (vn, vd) = (self.value(num).data(), self.value(den).data());
                acc(num, &mut |dn| {
                    for ((d, &gx), &y) in dn.iter_mut().zip(g).zip(vd) {
                        if y.abs() >= eps {
                            *d += gx / y;
                        }
                    }
                });
                acc(den, &mut |dd| {
                    for (((d, &gx), &x), &y) in dd.iter_mut().zip(g).zip(vn).zip(vd) {
                        if y.abs() >= eps {
                            *d -= gx * x / (y * y);
                        }
                    }
                });
            }
            Op::Scale(a, c) => acc(a, &mut |da| {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += c * x)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(a, &mut |da| add_into(da, g)),
            Op::Relu(a) => {
                let va = self.value(a).data();
                acc(a, &mut |da| {
                    for ((d, &x), &v) in da.iter_mut().zip(g).zip(va) {
                        if v > 0.0 {
                            *d += x;
                        }
                    }
                });
            }
            Op::Log(a) => {
                let va = self.value(a).data();
                acc(a, &mut |da| {
                    for ((d, &x), &v) in da.iter_mut().zip(g).zip(va) {
                        *d += x / v;
                    }
                });
            }
            Op::Abs(a) => {
                let va = self.value(a).data();
                acc(a, &mut |da| {
                    for ((d, &x), &v) in da.iter_mut().zip(g).zip(va) {
                        if v > 0.0 {
                            *d += x;
                        } else if v < 0.0 {
                            *d -= x;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let cols = *out.shape().last().unwrap_or(&1);
                let s = out.data();
                acc(a, &mut |da| {
                    for ((drow, grow), srow) in
                        da.chunks_mut(cols).zip(g.chunks(cols)).zip(s.chunks(cols))
                    {
                        let dot: f64 = grow.iter().zip(srow).map(|(x, y)| x * y).sum();
                        for ((d, &gx), &sv) in drow.iter_mut().zip(grow).zip(srow) {
                            *d += sv * (gx - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let cols = *out.shape().last().unwrap_or(&1);
                let ls = out.data();
                acc(a, &mut |da| {
                    for ((drow, grow), lrow) in
                        da.chunks_mut(cols).zip(g.chunks(cols)).zip(ls.chunks(cols))
                    {
                        let total: f64 = grow.iter().sum();
                        for ((d, &gx), &l) in drow.iter_mut().zip(grow).zip(lrow) {
                            *d += gx - l.exp() * total;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                acc(a, &mut |da| da.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MeanAxis { input, axis } => {
                let (outer, len, inner) = split_axis(self.shape(input), axis);
                acc(input, &mut |da| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for k in 0..len {
                            let dst = &mut da[(o * len + k) * inner..(o * len + k + 1) * inner];
                            for (d, &x) in dst.iter_mut().zip(src) {
                                *d += x / len as f64;
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let na = *self.shape(a).last().unwrap();
                let nb = *self.shape(b).last().unwrap();
                acc(a, &mut |da| {
                    for (drow, grow) in da.chunks_mut(na.max(1)).zip(g.chunks(na + nb)) {
                        add_into(drow, &grow[..na]);
                    }
                });
                acc(b, &mut |db| {
                    for (drow, grow) in db.chunks_mut(nb.max(1)).zip(g.chunks(na + nb)) {
                        add_into(drow, &grow[na..]);
                    }
                });
            }
            Op::Conv1d {
                input,
                kernel,
                stride,
            } => {
                let (sx, sw) = (self.shape(input), self.shape(kernel));
                let (b, t, cin) = (sx[0], sx[1], sx[2]);
                let (k, cout) = (sw[0], sw[2]);
                let t_out = out.shape()[1];
                let (vx, vw) = (self.value(input).data(), self.value(kernel).data());
                acc(input, &mut |dx| {
                    for bi in 0..b {
                        for to in 0..t_out {
                            let go = &g[(bi * t_out + to) * cout..(bi * t_out + to + 1) * cout];
                            for kk in 0..k {
                                let ti = to * stride + kk;
                                for ci in 0..cin {
                                    let w = &vw[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout];
                                    dx[(bi * t + ti) * cin + ci] +=
                                        go.iter().zip(w).map(|(x, y)| x * y).sum::<f64>();
                                }
                            }
                        }
                    }
                });
                acc(kernel, &mut |dw| {
                    for bi in 0..b {
                        for to in 0..t_out {
                            let go = &g[(bi * t_out + to) * cout..(bi * t_out + to + 1) * cout];
                            for kk in 0..k {
                                let ti = to * stride + kk;
                                for ci in 0..cin {
                                    let x = vx[(bi * t + ti) * cin + ci];
                                    if x == 0.0 {
                                        continue;
                                    }
                                    let dst =
                                        &mut dw[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout];
                                    for (d, &gv) in dst.iter_mut().zip(go) {
                                        *d += x * gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MaskedMeanPool { input, ref counts } => {
                let s = self.shape(input);
                let (t, d) = (s[1], s[2]);
                acc(input, &mut |dx| {
                    for (bi, &c) in counts.iter().enumerate() {
                        let go = &g[bi * d..(bi + 1) * d];
                        for ti in 0..c {
                            let dst = &mut dx[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                            for (o, &x) in dst.iter_mut().zip(go) {
                                *o += x / c as f64;
                            }
                        }
                    }
                });
            }
            Op::GradReverse { input, lambda } => acc(input, &mut |da| {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += -lambda * x)
            }),
            Op::Pick { input, ref index } => {
                let n = self.shape(input)[1];
                acc(input, &mut |da| {
                    for (r, (&c, &x)) in index.iter().zip(g).enumerate() {
                        da[r * n + c] += x;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
