use crate::autodiff::kernels::{self, ConvGeom, UpsampleMode};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        geom: ConvGeom,
    },
    BiasAdd {
        input: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Upsample {
        input: NodeId,
        factor: usize,
        mode: UpsampleMode,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    MulConst {
        input: NodeId,
        factor: Vec<Real>,
    },
    Scale {
        input: NodeId,
        factor: Real,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
    },
    Softmax {
        input: NodeId,
    },
    LogSoftmax {
        input: NodeId,
    },
    Log {
        input: NodeId,
    },
    NormalizeChannels {
        input: NodeId,
        norms: Vec<Real>,
        eps: Real,
    },
    Reshape {
        input: NodeId,
    },
    TopKMean {
        input: NodeId,
        selected: Vec<Vec<usize>>,
    },
    SpatialMean {
        input: NodeId,
    },
    SpatialL2Norm {
        input: NodeId,
    },
    ConcatCols {
        inputs: Vec<NodeId>,
    },
    SelectCols {
        input: NodeId,
        indices: Vec<usize>,
    },
    SelectRows {
        input: NodeId,
        indices: Vec<usize>,
    },
    MaskedRowMax {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Pick {
        input: NodeId,
        indices: Vec<usize>,
    },
    Sum {
        input: NodeId,
    },
    Mean {
        input: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded forward computation. Nodes are appended in execution order, so
/// the node vector is already topologically sorted and backward simply walks
/// it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Real>>>,
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A trainable leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[Real]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (out, geom) =
            kernels::conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
            rg,
        ))
    }

    /// Adds `bias[c]` to channel `c` of a `[B, C, ...]` tensor.
    pub fn bias_add(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let b = self.value(bias);
        if x.ndim() < 2 || b.shape() != [x.shape()[1]] {
            return Err(Error::shape(format!(
                "bias_add: bias {:?} does not match channels of {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let c = x.shape()[1];
        let inner: usize = x.shape()[2..].iter().product();
        let mut out = x.clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bv = b.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.rg(&[input, bias]);
        Ok(self.push(out, Op::BiasAdd { input, bias }, rg))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(|v| v.max(0.0));
        let rg = self.rg(&[input]);
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn maxpool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let (out, argmax) = kernels::maxpool2d_forward(self.value(input), window, stride)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    pub fn upsample(&mut self, input: NodeId, factor: usize, mode: UpsampleMode) -> Result<NodeId> {
        let out = kernels::upsample_forward(self.value(input), factor, mode)?;
        let rg = self.rg(&[input]);
        Ok(self.push(
            out,
            Op::Upsample {
                input,
                factor,
                mode,
            },
            rg,
        ))
    }

    fn zip(&mut self, name: &str, a: NodeId, b: NodeId, f: fn(Real, Real) -> Real) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(name, x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip("add", a, b, |p, q| p + q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip("sub", a, b, |p, q| p - q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip("mul", a, b, |p, q| p * q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    /// Elementwise product with a same-shape constant.
    pub fn mul_const(&mut self, input: NodeId, factor: &Tensor) -> Result<NodeId> {
        let x = self.value(input);
        same_shape("mul_const", x, factor)?;
        let data = x.data().iter().zip(factor.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(
            out,
            Op::MulConst {
                input,
                factor: factor.data().to_vec(),
            },
            rg,
        ))
    }

    pub fn scale(&mut self, input: NodeId, factor: Real) -> NodeId {
        let out = self.value(input).map(|v| v * factor);
        let rg = self.rg(&[input]);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    /// Fully connected layer without bias: `[B, N] x [M, N]^T -> [B, M]`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId) -> Result<NodeId> {
        let (b, n) = self.value(input).dims2()?;
        let (m, wn) = self.value(weight).dims2()?;
        if wn != n {
            return Err(Error::shape(format!(
                "linear: input has {n} features, weight expects {wn}"
            )));
        }
        let mut out = vec![0.0; b * m];
        kernels::gemm(
            b,
            n,
            m,
            1.0,
            self.value(input).data(),
            n,
            1,
            self.value(weight).data(),
            1,
            n,
            0.0,
            &mut out,
            m,
            1,
        );
        let rg = self.rg(&[input, weight]);
        Ok(self.push(Tensor::new(vec![b, m], out)?, Op::Linear { input, weight }, rg))
    }

    fn rowwise(&self, input: NodeId, f: impl Fn(&[Real], &mut [Real])) -> Result<Tensor> {
        let x = self.value(input);
        let (_, n) = x.dims2()?;
        let mut out = vec![0.0; x.len()];
        for (row, dst) in x.data().chunks(n).zip(out.chunks_mut(n)) {
            f(row, dst);
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    /// Row-wise softmax of a `[B, N]` tensor.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let out = self.rowwise(input, |row, dst| {
            let mx = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let mut z = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - mx).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        })?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Softmax { input }, rg))
    }

    /// Row-wise log-softmax of a `[B, N]` tensor.
    pub fn log_softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let out = self.rowwise(input, |row, dst| {
            let mx = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<Real>().ln();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = v - lse;
            }
        })?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::LogSoftmax { input }, rg))
    }

    pub fn log(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(|v| v.ln());
        let rg = self.rg(&[input]);
        self.push(out, Op::Log { input }, rg)
    }

    /// Divides every `[b, :, y, x]` channel vector by `max(norm, eps)`.
    pub fn normalize_channels(&mut self, input: NodeId, eps: Real) -> Result<NodeId> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4()?;
        let hw = h * w;
        let mut out = x.clone();
        let mut norms = vec![0.0; b * hw];
        {
            let od = out.data_mut();
            for bi in 0..b {
                let base = bi * c * hw;
                for p in 0..hw {
                    let mut ss = 0.0;
                    for ci in 0..c {
                        let v = od[base + ci * hw + p];
                        ss += v * v;
                    }
                    let n = ss.sqrt();
                    norms[bi * hw + p] = n;
                    let denom = n.max(eps);
                    for ci in 0..c {
                        od[base + ci * hw + p] /= denom;
                    }
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::NormalizeChannels { input, norms, eps }, rg))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Reshape { input }, rg))
    }

    /// Mean of the `ks[j]` largest entries of every `[b, j, :, :]` map,
    /// giving `[B, J]`. Ties go to the lowest flat index.
    pub fn topk_mean(&mut self, input: NodeId, ks: &[usize]) -> Result<NodeId> {
        let x = self.value(input);
        let (b, j, h, w) = x.dims4()?;
        let n = h * w;
        if ks.len() != j {
            return Err(Error::shape(format!("topk_mean: {} k values for {j} maps", ks.len())));
        }
        if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > n) {
            return Err(Error::invalid(format!("top-k count {bad} outside 1..={n}")));
        }
        let mut out = Vec::with_capacity(b * j);
        let mut selected = Vec::with_capacity(b * j);
        for (plane, map) in x.data().chunks(n).enumerate() {
            let k = ks[plane % j];
            let idx = kernels::topk_indices(map, k);
            out.push(idx.iter().map(|&i| map[i]).sum::<Real>() / k as Real);
            selected.push(idx);
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(vec![b, j], out)?, Op::TopKMean { input, selected }, rg))
    }

    /// Mean over the spatial extent: `[B, J, H, W] -> [B, J]`.
    pub fn spatial_mean(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (b, j, h, w) = x.dims4()?;
        let n = (h * w) as Real;
        let out = x.data().chunks(h * w).map(|m| m.iter().sum::<Real>() / n).collect();
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(vec![b, j], out)?, Op::SpatialMean { input }, rg))
    }

    /// Euclidean norm over the spatial extent: `[B, J, H, W] -> [B, J]`.
    pub fn spatial_l2_norm(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (b, j, h, w) = x.dims4()?;
        let out = x
            .data()
            .chunks(h * w)
            .map(|m| m.iter().map(|v| v * v).sum::<Real>().sqrt())
            .collect();
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(vec![b, j], out)?, Op::SpatialL2Norm { input }, rg))
    }

    /// Concatenates `[B, n_i]` tensors along columns.
    pub fn concat_cols(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat_cols: no inputs"))?;
        let (b, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let (rb, n) = self.value(id).dims2()?;
            if rb != b {
                return Err(Error::shape("concat_cols: row counts differ"));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(b * total);
        for r in 0..b {
            for (&id, &n) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(id).data()[r * n..(r + 1) * n]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(vec![b, total], out)?,
            Op::ConcatCols {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_cols(&mut self, input: NodeId, indices: &[usize]) -> Result<NodeId> {
        let x = self.value(input);
        let (b, n) = x.dims2()?;
        if indices.iter().any(|&i| i >= n) {
            return Err(Error::shape("select_cols: index out of range"));
        }
        let mut out = Vec::with_capacity(b * indices.len());
        for row in x.data().chunks(n) {
            out.extend(indices.iter().map(|&i| row[i]));
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::new(vec![b, indices.len()], out)?,
            Op::SelectCols {
                input,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_rows(&mut self, input: NodeId, indices: &[usize]) -> Result<NodeId> {
        let x = self.value(input);
        let (r, n) = x.dims2()?;
        if indices.iter().any(|&i| i >= r) {
            return Err(Error::shape("select_rows: index out of range"));
        }
        let mut out = Vec::with_capacity(n * indices.len());
        for &i in indices {
            out.extend_from_slice(&x.data()[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::new(vec![indices.len(), n], out)?,
            Op::SelectRows {
                input,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Per-row maximum over the columns where `mask` is set: `[B, N] -> [B]`.
    pub fn masked_row_max(&mut self, input: NodeId, mask: &[bool]) -> Result<NodeId> {
        let x = self.value(input);
        let (b, n) = x.dims2()?;
        if mask.len() != b * n {
            return Err(Error::shape("masked_row_max: mask size mismatch"));
        }
        let mut out = Vec::with_capacity(b);
        let mut argmax = Vec::with_capacity(b);
        for r in 0..b {
            let mut best: Option<usize> = None;
            for c in 0..n {
                let i = r * n + c;
                if mask[i] && best.is_none_or(|bi| x.data()[i] > x.data()[bi]) {
                    best = Some(i);
                }
            }
            let bi = best.ok_or_else(|| Error::invalid(format!("masked_row_max: row {r} has no eligible column")))?;
            out.push(x.data()[bi]);
            argmax.push(bi);
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(vec![b], out)?, Op::MaskedRowMax { input, argmax }, rg))
    }

    /// `out[r] = x[r, indices[r]]` for a `[B, N]` tensor.
    pub fn pick(&mut self, input: NodeId, indices: &[usize]) -> Result<NodeId> {
        let x = self.value(input);
        let (b, n) = x.dims2()?;
        if indices.len() != b || indices.iter().any(|&i| i >= n) {
            return Err(Error::shape("pick: indices do not match rows"));
        }
        let out = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| x.data()[r * n + c])
            .collect();
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::new(vec![b], out)?,
            Op::Pick {
                input,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(&[input]);
        self.push(out, Op::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let out = Tensor::scalar(x.sum() / x.len() as Real);
        let rg = self.rg(&[input]);
        self.push(out, Op::Mean { input }, rg)
    }

    /// Reverse-mode sweep from a scalar `root`. Gradients are available
    /// through [`Graph::grad`] afterwards; a second call starts fresh.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::shape(format!(
                "backward root must be a scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(gout);
                continue;
            }
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<Real>>], id: NodeId, f: impl FnOnce(&mut [Real])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        let g = slot.get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
        f(g);
    }

    fn backprop_node(&self, i: usize, gout: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let (gx, gk) = kernels::conv2d_backward(
                    geom,
                    self.value(*input),
                    self.value(*kernel),
                    gout,
                    self.requires_grad(*input),
                    self.requires_grad(*kernel),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *input, |g| add_into(g, &gx));
                }
                if let Some(gk) = gk {
                    self.accumulate(grads, *kernel, |g| add_into(g, &gk));
                }
            }
            Op::BiasAdd { input, bias } => {
                self.accumulate(grads, *input, |g| add_into(g, gout));
                let x = self.value(*input);
                let c = x.shape()[1];
                let inner: usize = x.shape()[2..].iter().product();
                self.accumulate(grads, *bias, |g| {
                    for (k, chunk) in gout.chunks(inner).enumerate() {
                        g[k % c] += chunk.iter().sum::<Real>();
                    }
                });
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                self.accumulate(grads, *input, |g| {
                    for ((gi, &go), &xi) in g.iter_mut().zip(gout).zip(x) {
                        if xi > 0.0 {
                            *gi += go;
                        }
                    }
                });
            }
            Op::MaxPool { input, argmax } => {
                self.accumulate(grads, *input, |g| {
                    for (&a, &go) in argmax.iter().zip(gout) {
                        g[a] += go;
                    }
                });
            }
            Op::Upsample {
                input,
                factor,
                mode,
            } => {
                let gx = kernels::upsample_backward(self.value(*input).shape(), *factor, *mode, gout);
                self.accumulate(grads, *input, |g| add_into(g, &gx));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |g| add_into(g, gout));
                self.accumulate(grads, *b, |g| add_into(g, gout));
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |g| add_into(g, gout));
                self.accumulate(grads, *b, |g| {
                    g.iter_mut().zip(gout).for_each(|(gi, go)| *gi -= go)
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |g| {
                    for ((gi, go), bi) in g.iter_mut().zip(gout).zip(bv) {
                        *gi += go * bi;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((gi, go), ai) in g.iter_mut().zip(gout).zip(av) {
                        *gi += go * ai;
                    }
                });
            }
            Op::MulConst { input, factor } => {
                self.accumulate(grads, *input, |g| {
                    for ((gi, go), f) in g.iter_mut().zip(gout).zip(factor) {
                        *gi += go * f;
                    }
                });
            }
            Op::Scale { input, factor } => {
                self.accumulate(grads, *input, |g| {
                    g.iter_mut().zip(gout).for_each(|(gi, go)| *gi += go * factor)
                });
            }
            Op::Linear { input, weight } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (b, n) = (x.shape()[0], x.shape()[1]);
                let m = w.shape()[0];
                // gx[b, n] += gy[b, m] * W[m, n]
                self.accumulate(grads, *input, |g| {
                    kernels::gemm(b, m, n, 1.0, gout, m, 1, w.data(), n, 1, 1.0, g, n, 1)
                });
                // gW[m, n] += gy^T[m, b] * x[b, n]
                self.accumulate(grads, *weight, |g| {
                    kernels::gemm(m, b, n, 1.0, gout, 1, m, x.data(), n, 1, 1.0, g, n, 1)
                });
            }
            Op::Softmax { input } => {
                let n = node.value.shape()[1];
                self.accumulate(grads, *input, |g| {
                    for ((gr, yr), gor) in g.chunks_mut(n).zip(y.chunks(n)).zip(gout.chunks(n)) {
                        let dot: Real = yr.iter().zip(gor).map(|(a, b)| a * b).sum();
                        for ((gi, yi), go) in gr.iter_mut().zip(yr).zip(gor) {
                            *gi += yi * (go - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { input } => {
                let n = node.value.shape()[1];
                self.accumulate(grads, *input, |g| {
                    for ((gr, yr), gor) in g.chunks_mut(n).zip(y.chunks(n)).zip(gout.chunks(n)) {
                        let total: Real = gor.iter().sum();
                        for ((gi, yi), go) in gr.iter_mut().zip(yr).zip(gor) {
                            *gi += go - yi.exp() * total;
                        }
                    }
                });
            }
            Op::Log { input } => {
                let x = self.value(*input).data();
                self.accumulate(grads, *input, |g| {
                    for ((gi, go), xi) in g.iter_mut().zip(gout).zip(x) {
                        *gi += go / xi;
                    }
                });
            }
            Op::NormalizeChannels { input, norms, eps } => {
                let (b, c, h, w) = (
                    node.value.shape()[0],
                    node.value.shape()[1],
                    node.value.shape()[2],
                    node.value.shape()[3],
                );
                let hw = h * w;
                self.accumulate(grads, *input, |g| {
                    for bi in 0..b {
                        let base = bi * c * hw;
                        for p in 0..hw {
                            let n = norms[bi * hw + p];
                            if n > *eps {
                                let mut dot = 0.0;
                                for ci in 0..c {
                                    let k = base + ci * hw + p;
                                    dot += y[k] * gout[k];
                                }
                                for ci in 0..c {
                                    let k = base + ci * hw + p;
                                    g[k] += (gout[k] - y[k] * dot) / n;
                                }
                            } else {
                                for ci in 0..c {
                                    let k = base + ci * hw + p;
                                    g[k] += gout[k] / eps;
                                }
                            }
                        }
                    }
                });
            }
            Op::Reshape { input } => {
                self.accumulate(grads, *input, |g| add_into(g, gout));
            }
            Op::TopKMean { input, selected } => {
                let x = self.value(*input);
                let n = x.shape()[2] * x.shape()[3];
                self.accumulate(grads, *input, |g| {
                    for (plane, (idx, go)) in selected.iter().zip(gout).enumerate() {
                        let share = go / idx.len() as Real;
                        for &k in idx {
                            g[plane * n + k] += share;
                        }
                    }
                });
            }
            Op::SpatialMean { input } => {
                let x = self.value(*input);
                let n = x.shape()[2] * x.shape()[3];
                self.accumulate(grads, *input, |g| {
                    for (chunk, go) in g.chunks_mut(n).zip(gout) {
                        let share = go / n as Real;
                        chunk.iter_mut().for_each(|v| *v += share);
                    }
                });
            }
            Op::SpatialL2Norm { input } => {
                let x = self.value(*input);
                let n = x.shape()[2] * x.shape()[3];
                self.accumulate(grads, *input, |g| {
                    for (((gc, xc), go), norm) in g
                        .chunks_mut(n)
                        .zip(x.data().chunks(n))
                        .zip(gout)
                        .zip(y)
                    {
                        // the norm is not differentiable at zero; use the zero subgradient
                        if *norm > 0.0 {
                            for (gi, xi) in gc.iter_mut().zip(xc) {
                                *gi += go * xi / norm;
                            }
                        }
                    }
                });
            }
            Op::ConcatCols { inputs } => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &id in inputs {
                    let n = self.value(id).shape()[1];
                    self.accumulate(grads, id, |g| {
                        for (gr, gor) in g.chunks_mut(n).zip(gout.chunks(total)) {
                            add_into(gr, &gor[offset..offset + n]);
                        }
                    });
                    offset += n;
                }
            }
            Op::SelectCols { input, indices } => {
                let n = self.value(*input).shape()[1];
                let k = indices.len();
                self.accumulate(grads, *input, |g| {
                    for (gr, gor) in g.chunks_mut(n).zip(gout.chunks(k)) {
                        for (&i, go) in indices.iter().zip(gor) {
                            gr[i] += go;
                        }
                    }
                });
            }
            Op::SelectRows { input, indices } => {
                let n = self.value(*input).shape()[1];
                self.accumulate(grads, *input, |g| {
                    for (&i, gor) in indices.iter().zip(gout.chunks(n)) {
                        add_into(&mut g[i * n..(i + 1) * n], gor);
                    }
                });
            }
            Op::MaskedRowMax { input, argmax } => {
                self.accumulate(grads, *input, |g| {
                    for (&a, go) in argmax.iter().zip(gout) {
                        g[a] += go;
                    }
                });
            }
            Op::Pick { input, indices } => {
                let n = self.value(*input).shape()[1];
                self.accumulate(grads, *input, |g| {
                    for (r, (&c, go)) in indices.iter().zip(gout).enumerate() {
                        g[r * n + c] += go;
                    }
                });
            }
            Op::Sum { input } => {
                let go = gout[0];
                self.accumulate(grads, *input, |g| g.iter_mut().for_each(|v| *v += go));
            }
            Op::Mean { input } => {
                let n = self.value(*input).len() as Real;
                let go = gout[0] / n;
                self.accumulate(grads, *input, |g| g.iter_mut().for_each(|v| *v += go));
            }
        }
    }
}

fn add_into(dst: &mut [Real], src: &[Real]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
