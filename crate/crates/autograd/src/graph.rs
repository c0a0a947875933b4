//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operator evaluates eagerly and appends a node to the graph, so node
//! ids are already in topological order. [`Graph::backward`] walks the nodes
//! once in reverse and only propagates into nodes that depend on one of the
//! requested leaves; everything else is skipped and receives no gradient.

use std::collections::{BTreeMap, HashMap};

use crate::element::gemm;
use crate::kernels::{self, ConvGeom};
use crate::spectral::{self, SpectralNormState};
use crate::{Element, Error, Result, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    MulScalarVar(Var, Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    LogSigmoid(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm(Var, Var),
    Transpose12(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Upsample(Var, usize),
    AvgPool(Var, usize),
    BatchStandardize { x: Var, invstd: Vec<T> },
    Standardize { x: Var, invstd: Vec<T> },
    Reshape(Var),
    Concat(Var, Var),
    GatherRows { x: Var, idx: Vec<usize> },
    GroupMean(Var, usize),
    SumAll(Var),
    SumRows(Var),
    MeanAll(Var),
    Softmax(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    SignSte(Var),
    StopGradient,
    SpectralNorm { w: Var, u: Vec<T>, v: Vec<T>, sigma: T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(..) => "square",
            Op::MulScalarVar(..) => "mul_scalar_var",
            Op::AddChannel(..) => "add_channel",
            Op::MulChannel(..) => "mul_channel",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::Linear { .. } => "linear",
            Op::Bmm(..) => "bmm",
            Op::Transpose12(..) => "transpose12",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample(..) => "upsample_nearest",
            Op::AvgPool(..) => "avg_pool",
            Op::BatchStandardize { .. } => "batch_standardize",
            Op::Standardize { .. } => "standardize",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::GroupMean(..) => "group_mean",
            Op::SumAll(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::MeanAll(..) => "mean",
            Op::Softmax(..) => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SignSte(..) => "sign_ste",
            Op::StopGradient => "stop_gradient",
            Op::SpectralNorm { .. } => "spectral_norm",
        }
    }

    /// Inputs gradients may flow into. `StopGradient` deliberately has none.
    fn grad_inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf | Op::StopGradient => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Bmm(a, b) | Op::Concat(a, b) => {
                vec![a, b]
            }
            Op::MulScalarVar(a, b) | Op::AddChannel(a, b) | Op::MulChannel(a, b) => vec![a, b],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Square(x)
            | Op::Relu(x)
            | Op::LeakyRelu(x, _)
            | Op::Tanh(x)
            | Op::LogSigmoid(x)
            | Op::Transpose12(x)
            | Op::Upsample(x, _)
            | Op::AvgPool(x, _)
            | Op::BatchStandardize { x, .. }
            | Op::Standardize { x, .. }
            | Op::Reshape(x)
            | Op::GatherRows { x, .. }
            | Op::GroupMean(x, _)
            | Op::SumAll(x)
            | Op::SumRows(x)
            | Op::MeanAll(x)
            | Op::Softmax(x)
            | Op::SignSte(x)
            | Op::SpectralNorm { w: x, .. } => vec![x],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    name: Option<String>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    /// `None` for leaves that were not requested.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    Some((shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op, name: None });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape { op, node: self.nodes.len(), detail }
    }

    /// Constant or input tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Named trainable leaf. Registering the same name twice returns the
    /// original node.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.nodes[v.0].name = Some(name.to_string());
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(
                op,
                format!("operands have shapes {:?} and {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(self.shape_err("mul_scalar_var", format!("scale has shape {:?}", self.shape(s))));
        }
        let c = self.value(s).item();
        Ok(self.unary(x, Op::MulScalarVar(x, s), |v| v * c))
    }

    fn channel_op(&mut self, x: Var, p: Var, add: bool) -> Result<Var> {
        let name = if add { "add_channel" } else { "mul_channel" };
        let Some((n, c, inner)) = channel_layout(self.shape(x)) else {
            return Err(self.shape_err(name, format!("input rank too small: {:?}", self.shape(x))));
        };
        if self.value(p).len() != c {
            return Err(self.shape_err(
                name,
                format!("{} channels but parameter has {} values", c, self.value(p).len()),
            ));
        }
        let (xv, pv) = (self.value(x), self.value(p).data());
        let mut out = xv.data().to_vec();
        for i in 0..n {
            for (ch, &pc) in pv.iter().enumerate() {
                let s = &mut out[(i * c + ch) * inner..(i * c + ch + 1) * inner];
                for o in s {
                    *o = if add { *o + pc } else { *o * pc };
                }
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let op = if add { Op::AddChannel(x, p) } else { Op::MulChannel(x, p) };
        Ok(self.push(value, op))
    }

    /// Adds `bias[c]` along dimension 1.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.channel_op(x, bias, true)
    }

    /// Multiplies by `scale[c]` along dimension 1.
    pub fn mul_channel(&mut self, x: Var, scale: Var) -> Result<Var> {
        self.channel_op(x, scale, false)
    }

    /// Subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    /// `log(sigmoid(x))`, stable for large `|x|`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::LogSigmoid(x), |v| v.min(T::zero()) - (-v.abs()).exp().ln_1p())
    }

    /// `x · wᵀ + b` for `x: [N, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(self.shape_err("linear", format!("input {xs:?} with weight {ws:?}")));
        }
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.value(b).len() != out {
                return Err(self.shape_err("linear", format!("bias {:?} for {out} outputs", self.shape(b))));
            }
        }
        let mut y = vec![T::zero(); n * out];
        gemm(n, inp, out, self.value(x).data(), false, self.value(w).data(), true, T::zero(), &mut y);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(out) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o = *o + bb;
                }
            }
        }
        let value = Tensor::new(&[n, out], y)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Batched matrix product `[B, M, K] × [B, K, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(self.shape_err("bmm", format!("operands {sa:?} and {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut y = vec![T::zero(); bs * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                false,
                T::zero(),
                &mut y[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(&[bs, m, n], y)?;
        Ok(self.push(value, Op::Bmm(a, b)))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(self.shape_err("transpose12", format!("expected rank 3, got {s:?}")));
        }
        let y = transpose_last2(self.value(x).data(), s[0], s[1], s[2]);
        let value = Tensor::new(&[s[0], s[2], s[1]], y)?;
        Ok(self.push(value, Op::Transpose12(x)))
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [O, C, KH, KW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(self.shape_err("conv2d", format!("input {xs:?}, kernel {ws:?}: both must be rank 4")));
        }
        if xs[1] != ws[1] {
            return Err(self.shape_err("conv2d", format!("input has {} channels, kernel expects {}", xs[1], ws[1])));
        }
        if stride == 0 {
            return Err(self.shape_err("conv2d", "stride must be at least 1".into()));
        }
        if ws[2] > xs[2] + 2 * pad || ws[3] > xs[3] + 2 * pad {
            return Err(self.shape_err(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", ws[2], ws[3], xs[2] + 2 * pad, xs[3] + 2 * pad),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != ws[0] {
                return Err(self.shape_err("conv2d", format!("bias {:?} for {} outputs", self.shape(b), ws[0])));
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            height: xs[2],
            width: xs[3],
            out_ch: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        let y = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[geom.batch, geom.out_ch, geom.out_h(), geom.out_w()], y)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }))
    }

    fn planes(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(self.shape_err(op, format!("expected [N, C, H, W], got {s:?}")));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.planes("upsample_nearest", x)?;
        if factor == 0 {
            return Err(self.shape_err("upsample_nearest", "factor must be at least 1".into()));
        }
        let y = kernels::upsample_nearest(self.value(x).data(), n * c, h, w, factor);
        let value = Tensor::new(&[n, c, h * factor, w * factor], y)?;
        Ok(self.push(value, Op::Upsample(x, factor)))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.planes("avg_pool", x)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(self.shape_err("avg_pool", format!("window {k} does not tile {h}x{w}")));
        }
        let y = kernels::avg_pool(self.value(x).data(), n * c, h, w, k);
        let value = Tensor::new(&[n, c, h / k, w / k], y)?;
        Ok(self.push(value, Op::AvgPool(x, k)))
    }

    fn channel_stats(&self, x: Var) -> Result<(usize, usize, usize, Vec<T>, Vec<T>)> {
        let Some((n, c, inner)) = channel_layout(self.shape(x)) else {
            return Err(self.shape_err("batch_standardize", format!("rank too small: {:?}", self.shape(x))));
        };
        let xv = self.value(x).data();
        let count = T::lit((n * inner) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for i in 0..n {
                acc = acc + xv[(i * c + ch) * inner..(i * c + ch + 1) * inner].iter().copied().sum();
            }
            let mu = acc / count;
            let mut sq = T::zero();
            for i in 0..n {
                for &v in &xv[(i * c + ch) * inner..(i * c + ch + 1) * inner] {
                    sq = sq + (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq / count;
        }
        Ok((n, c, inner, mean, var))
    }

    fn standardize_impl(&mut self, x: Var, mean: &[T], var: &[T], eps: T, batch: bool) -> Result<Var> {
        let Some((n, c, inner)) = channel_layout(self.shape(x)) else {
            return Err(self.shape_err("standardize", format!("rank too small: {:?}", self.shape(x))));
        };
        if mean.len() != c || var.len() != c {
            return Err(self.shape_err("standardize", format!("{c} channels, stats for {}", mean.len())));
        }
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                for o in &mut out[(i * c + ch) * inner..(i * c + ch + 1) * inner] {
                    *o = (*o - mean[ch]) * invstd[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let op = if batch { Op::BatchStandardize { x, invstd } } else { Op::Standardize { x, invstd } };
        Ok(self.push(value, op))
    }

    /// Per-channel standardization with statistics over every axis but 1.
    /// Returns the output and the batch mean and (biased) variance.
    pub fn batch_standardize(&mut self, x: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (_, _, _, mean, var) = self.channel_stats(x)?;
        let y = self.standardize_impl(x, &mean, &var, eps, true)?;
        Ok((y, mean, var))
    }

    /// Per-channel standardization with fixed statistics.
    pub fn standardize(&mut self, x: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        self.standardize_impl(x, mean, var, eps, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .map_err(|e| self.shape_err("reshape", e.to_string()))?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Concatenates two rank-2 tensors along dimension 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(self.shape_err("concat", format!("operands {sa:?} and {sb:?}")));
        }
        let (n, wa, wb) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (wa + wb));
        for i in 0..n {
            out.extend_from_slice(&av[i * wa..(i + 1) * wa]);
            out.extend_from_slice(&bv[i * wb..(i + 1) * wb]);
        }
        let value = Tensor::new(&[n, wa + wb], out)?;
        Ok(self.push(value, Op::Concat(a, b)))
    }

    /// Selects rows (dimension 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if idx.is_empty() {
            return Err(self.shape_err("gather_rows", "empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(self.shape_err("gather_rows", format!("row {bad} out of range for {s:?}")));
        }
        let w: usize = s[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&xv[i * w..(i + 1) * w]);
        }
        let mut shape = s.clone();
        shape[0] = idx.len();
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Averages consecutive groups of `group` rows: `[G·g, ...] -> [G, ...]`.
    ///
    /// Each column is summed in sorted order, so the result is bitwise
    /// independent of row order within a group.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if group == 0 || s[0] % group != 0 {
            return Err(self.shape_err("group_mean", format!("{} rows not divisible into groups of {group}", s[0])));
        }
        let w: usize = s[1..].iter().product();
        let groups = s[0] / group;
        let inv = T::one() / T::lit(group as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); groups * w];
        let mut column = Vec::with_capacity(group);
        for gi in 0..groups {
            for j in 0..w {
                column.clear();
                column.extend((0..group).map(|r| xv[(gi * group + r) * w + j]));
                column.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                out[gi * w + j] = column.iter().fold(T::zero(), |acc, &v| acc + v) * inv;
            }
        }
        let mut shape = s.clone();
        shape[0] = groups;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::GroupMean(x, group)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / T::lit(v.len() as f64));
        self.push(value, Op::MeanAll(x))
    }

    /// Sums everything but dimension 0: `[N, ...] -> [N]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.shape()[0];
        let data = (0..n).map(|i| v.row(i).iter().copied().sum()).collect();
        let value = Tensor::new(&[n], data).expect("row sums");
        self.push(value, Op::SumRows(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let last = *v.shape().last().expect("non-empty shape");
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(last) {
            softmax_in_place(row);
        }
        let value = Tensor::new(v.shape(), out).expect("softmax shape");
        self.push(value, Op::Softmax(x))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(self.shape_err("softmax_cross_entropy", format!("logits {s:?} for {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(self.shape_err("softmax_cross_entropy", format!("label {bad} out of range for {} classes", s[1])));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut nll = T::zero();
        for (row, &l) in probs.chunks_mut(s[1]).zip(labels) {
            softmax_in_place(row);
            nll = nll - row[l].ln();
        }
        let value = Tensor::scalar(nll / T::lit(labels.len() as f64));
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Forward: sign with `sign(0) = +1`. Backward: identity (straight-through).
    pub fn sign_ste(&mut self, x: Var) -> Var {
        self.unary(x, Op::SignSte(x), |v| if v >= T::zero() { T::one() } else { -T::one() })
    }

    /// Identity forward; blocks every gradient.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient)
    }

    /// Divides `w` by a power-iteration estimate of its top singular value.
    ///
    /// With `advance` the persistent `u` takes one power step first; otherwise
    /// the stored `u` is used as is. The singular vectors are treated as
    /// constants in the backward pass; `sigma` is not.
    pub fn spectral_norm(&mut self, w: Var, state: &mut SpectralNormState<T>, advance: bool) -> Result<Var> {
        let s = self.shape(w).to_vec();
        let rows = s[0];
        let cols = self.value(w).len() / rows;
        if state.u.len() != rows {
            return Err(self.shape_err("spectral_norm", format!("u has {} entries for {rows} rows", state.u.len())));
        }
        let wv = self.value(w).data();
        let (v, sigma) = if advance {
            spectral::power_step(wv, rows, cols, &mut state.u)
        } else {
            spectral::estimate(wv, rows, cols, &state.u)
        };
        let inv = T::one() / sigma;
        let value = self.value(w).map(|x| x * inv);
        Ok(self.push(value, Op::SpectralNorm { w, u: state.u.clone(), v, sigma }))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Only the leaves in `wrt` receive gradients; a requested leaf the loss
    /// does not depend on gets an all-zero gradient.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let end = loss.0 + 1;
        let mut needs = vec![false; end];
        for w in wrt {
            if w.0 < end {
                needs[w.0] = true;
            }
        }
        for i in 0..end {
            if !needs[i] {
                needs[i] = self.nodes[i].op.grad_inputs().iter().any(|v| needs[v.0]);
            }
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..end).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..end).rev() {
            if !needs[i] || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            if let Some(gy) = grads[i].take() {
                self.backprop(i, &gy, &needs, &mut grads)?;
            }
        }
        let mut out = HashMap::new();
        for &w in wrt {
            let g = if w.0 < end { grads[w.0].take() } else { None };
            let g = g
                .or_else(|| out.remove(&w))
                .unwrap_or_else(|| Tensor::zeros(self.shape(w)));
            out.insert(w, g);
        }
        Ok(Gradients { grads: out })
    }

    /// Backward with respect to every named parameter accepted by `filter`.
    pub fn backward_params(
        &self,
        loss: Var,
        filter: impl Fn(&str) -> bool,
    ) -> Result<BTreeMap<String, Tensor<T>>> {
        let chosen: Vec<(String, Var)> = self
            .params
            .iter()
            .filter(|(n, _)| filter(n))
            .map(|(n, &v)| (n.clone(), v))
            .collect();
        let wrt: Vec<Var> = chosen.iter().map(|(_, v)| *v).collect();
        let mut grads = self.backward(loss, &wrt)?;
        Ok(chosen
            .into_iter()
            .map(|(n, v)| (n, grads.take(v).expect("requested gradient")))
            .collect())
    }

    fn backprop(&self, i: usize, gy: &Tensor<T>, needs: &[bool], grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let need = |v: &Var| needs[v.0];
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &self.nodes[i].value;
        let g = gy.data();
        let mut acc = |v: Var, data: Vec<T>| {
            let t = Tensor::new(val(v).shape(), data).expect("gradient shape");
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let map1 = |f: &dyn Fn(usize, T) -> T| -> Vec<T> { g.iter().enumerate().map(|(k, &d)| f(k, d)).collect() };
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                if need(a) {
                    acc(*a, g.to_vec());
                }
                if need(b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    acc(*a, g.to_vec());
                }
                if need(b) {
                    acc(*b, g.iter().map(|&d| -d).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if need(a) {
                    acc(*a, map1(&|k, d| d * bv[k]));
                }
                if need(b) {
                    acc(*b, map1(&|k, d| d * av[k]));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc(*x, g.iter().map(|&d| d * c).collect());
            }
            Op::AddScalar(x) | Op::Reshape(x) | Op::SignSte(x) => acc(*x, g.to_vec()),
            Op::Square(x) => {
                let xv = val(*x).data();
                acc(*x, map1(&|k, d| d * (xv[k] + xv[k])));
            }
            Op::MulScalarVar(x, s) => {
                let xv = val(*x).data();
                let c = val(*s).item();
                if need(x) {
                    acc(*x, g.iter().map(|&d| d * c).collect());
                }
                if need(s) {
                    acc(*s, vec![g.iter().zip(xv).map(|(&d, &v)| d * v).sum()]);
                }
            }
            Op::AddChannel(x, p) | Op::MulChannel(x, p) => {
                let is_add = matches!(self.nodes[i].op, Op::AddChannel(..));
                let (n, c, inner) = channel_layout(val(*x).shape()).expect("validated");
                let (xv, pv) = (val(*x).data(), val(*p).data());
                if need(x) {
                    if is_add {
                        acc(*x, g.to_vec());
                    } else {
                        acc(*x, map1(&|k, d| d * pv[(k / inner) % c]));
                    }
                }
                if need(p) {
                    let mut dp = vec![T::zero(); c];
                    for bi in 0..n {
                        for (ch, slot) in dp.iter_mut().enumerate() {
                            let r = (bi * c + ch) * inner..(bi * c + ch + 1) * inner;
                            let s: T = if is_add {
                                g[r].iter().copied().sum()
                            } else {
                                g[r.clone()].iter().zip(&xv[r]).map(|(&d, &v)| d * v).sum()
                            };
                            *slot = *slot + s;
                        }
                    }
                    acc(*p, dp);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(*x, map1(&|k, d| if xv[k] > T::zero() { d } else { T::zero() }));
            }
            Op::LeakyRelu(x, slope) => {
                let (xv, s) = (val(*x).data(), *slope);
                acc(*x, map1(&|k, d| if xv[k] > T::zero() { d } else { d * s }));
            }
            Op::Tanh(x) => {
                let yv = y.data();
                acc(*x, map1(&|k, d| d * (T::one() - yv[k] * yv[k])));
            }
            Op::LogSigmoid(x) => {
                // d/dx log σ(x) = σ(-x)
                let xv = val(*x).data();
                acc(*x, map1(&|k, d| d * sigmoid(-xv[k])));
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (val(*x).shape(), val(*w).shape());
                let (n, inp, out) = (xs[0], xs[1], ws[0]);
                if need(x) {
                    let mut dx = vec![T::zero(); n * inp];
                    gemm(n, out, inp, g, false, val(*w).data(), false, T::zero(), &mut dx);
                    acc(*x, dx);
                }
                if need(w) {
                    let mut dw = vec![T::zero(); out * inp];
                    gemm(out, n, inp, g, true, val(*x).data(), false, T::zero(), &mut dw);
                    acc(*w, dw);
                }
                if let Some(b) = b.filter(|b| need(b)) {
                    let mut db = vec![T::zero(); out];
                    for row in g.chunks(out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    acc(b, db);
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (val(*a).data(), val(*b).data());
                if need(a) {
                    let mut da = vec![T::zero(); bs * m * k];
                    for j in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[j * m * n..(j + 1) * m * n],
                            false,
                            &bv[j * k * n..(j + 1) * k * n],
                            true,
                            T::zero(),
                            &mut da[j * m * k..(j + 1) * m * k],
                        );
                    }
                    acc(*a, da);
                }
                if need(b) {
                    let mut db = vec![T::zero(); bs * k * n];
                    for j in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &av[j * m * k..(j + 1) * m * k],
                            true,
                            &g[j * m * n..(j + 1) * m * n],
                            false,
                            T::zero(),
                            &mut db[j * k * n..(j + 1) * k * n],
                        );
                    }
                    acc(*b, db);
                }
            }
            Op::Transpose12(x) => {
                let s = val(*x).shape();
                acc(*x, transpose_last2(g, s[0], s[2], s[1]));
            }
            Op::Conv2d { x, w, b, geom } => {
                let grads_c = kernels::conv2d_backward(
                    geom,
                    val(*x).data(),
                    val(*w).data(),
                    g,
                    need(x),
                    need(w),
                    b.is_some_and(|b| need(&b)),
                );
                if let Some(dx) = grads_c.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = grads_c.dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, grads_c.db) {
                    acc(*b, db);
                }
            }
            Op::Upsample(x, s) => {
                let xs = val(*x).shape();
                acc(*x, kernels::upsample_nearest_backward(g, xs[0] * xs[1], xs[2], xs[3], *s));
            }
            Op::AvgPool(x, k) => {
                let xs = val(*x).shape();
                acc(*x, kernels::avg_pool_backward(g, xs[0] * xs[1], xs[2], xs[3], *k));
            }
            Op::BatchStandardize { x, invstd } => {
                let (n, c, inner) = channel_layout(val(*x).shape()).expect("validated");
                let xhat = y.data();
                let m = T::lit((n * inner) as f64);
                let mut dx = vec![T::zero(); g.len()];
                for ch in 0..c {
                    let (mut sg, mut sgx) = (T::zero(), T::zero());
                    for bi in 0..n {
                        let r = (bi * c + ch) * inner..(bi * c + ch + 1) * inner;
                        for (&d, &xh) in g[r.clone()].iter().zip(&xhat[r]) {
                            sg = sg + d;
                            sgx = sgx + d * xh;
                        }
                    }
                    let k = invstd[ch] / m;
                    for bi in 0..n {
                        for j in (bi * c + ch) * inner..(bi * c + ch + 1) * inner {
                            dx[j] = k * (m * g[j] - sg - xhat[j] * sgx);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Standardize { x, invstd } => {
                let (_, c, inner) = channel_layout(val(*x).shape()).expect("validated");
                acc(*x, map1(&|k, d| d * invstd[(k / inner) % c]));
            }
            Op::Concat(a, b) => {
                let (wa, wb) = (val(*a).shape()[1], val(*b).shape()[1]);
                let n = val(*a).shape()[0];
                if need(a) {
                    acc(*a, (0..n).flat_map(|r| g[r * (wa + wb)..r * (wa + wb) + wa].to_vec()).collect());
                }
                if need(b) {
                    acc(*b, (0..n).flat_map(|r| g[r * (wa + wb) + wa..(r + 1) * (wa + wb)].to_vec()).collect());
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = val(*x);
                let w = xv.len() / xv.shape()[0];
                let mut dx = vec![T::zero(); xv.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for (d, &v) in dx[src * w..(src + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                        *d = *d + v;
                    }
                }
                acc(*x, dx);
            }
            Op::GroupMean(x, group) => {
                let xv = val(*x);
                let w = xv.len() / xv.shape()[0];
                let inv = T::one() / T::lit(*group as f64);
                acc(*x, (0..xv.len()).map(|k| g[(k / w / group) * w + k % w] * inv).collect());
            }
            Op::SumAll(x) => {
                let d = g[0];
                acc(*x, vec![d; val(*x).len()]);
            }
            Op::MeanAll(x) => {
                let len = val(*x).len();
                let d = g[0] / T::lit(len as f64);
                acc(*x, vec![d; len]);
            }
            Op::SumRows(x) => {
                let xv = val(*x);
                let w = xv.len() / xv.shape()[0];
                acc(*x, (0..xv.len()).map(|k| g[k / w]).collect());
            }
            Op::Softmax(x) => {
                let last = *y.shape().last().expect("rank");
                let mut dx = vec![T::zero(); g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(last).zip(g.chunks(last)).zip(y.data().chunks(last)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gg), &yy) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yy * (gg - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = val(*logits).shape()[1];
                let scale = g[0] / T::lit(labels.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * k + l] = dx[r * k + l] - scale;
                }
                acc(*logits, dx);
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let wv = val(*w).data();
                let cols = v.len();
                let inv = T::one() / *sigma;
                let dot: T = g.iter().zip(wv).map(|(&a, &b)| a * b).sum();
                let k = dot * inv * inv;
                acc(*w, map1(&|idx, d| d * inv - k * u[idx / cols] * v[idx % cols]));
            }
        }
        Ok(())
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn transpose_last2<T: Element>(x: &[T], b: usize, m: usize, n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for bi in 0..b {
        for i in 0..m {
            for j in 0..n {
                y[bi * m * n + j * m + i] = x[bi * m * n + i * n + j];
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn doubling_and_relu() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert_eq!(g.value(y).data(), &[2.0, 4.0]);
        let z = g.leaf(t(&[2], &[-1.0, 3.0]));
        let r = g.relu(z);
        assert_eq!(g.value(r).data(), &[0.0, 3.0]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.square(x);
        let grads = g.backward(y, &[x]).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = g.square(x);
        assert!(matches!(g.backward(y, &[x]), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let other = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.square(x);
        let grads = g.backward(y, &[other]).unwrap();
        assert_eq!(grads.get(other).unwrap().data(), &[0.0; 3]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]));
        let b = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("node 2"), "{err}");
        let x = g.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let w = g.leaf(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(g.conv2d(x, w, None, 1, 1).is_err());
    }

    #[test]
    fn sign_ste_forward_and_backward() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[0.3, -0.2, 0.0]));
        let s = g.sign_ste(x);
        assert_eq!(g.value(s).data(), &[1.0, -1.0, 1.0]);
        let up = g.leaf(t(&[3], &[0.5, -2.0, 7.0]));
        let prod = g.mul(s, up).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss, &[x]).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.5, -2.0, 7.0]);
    }

    #[test]
    fn stop_gradient_blocks() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let s = g.stop_gradient(x);
        let y = g.mul(s, x).unwrap();
        let grads = g.backward(y, &[x]).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn softmax_cross_entropy_value() {
        let mut g = Graph::new();
        let l = g.leaf(t(&[1, 2], &[0.0, 0.0]));
        let ce = g.softmax_cross_entropy(l, &[1]).unwrap();
        assert!((g.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
