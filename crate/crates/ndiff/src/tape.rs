//! Dynamic reverse-mode tape.
//!
//! Every op appends a node holding its output value, so inputs always precede
//! the ops that consume them. [`Tape::backward`] walks the nodes in exact
//! reverse order and returns a fresh [`Gradients`]; calling it twice yields the
//! same gradients and never accumulates across calls.

use crate::error::{shape_err, NdiffError, Result};
use crate::kernels::{gemm, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations, binary ones first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Exp,
    Tanh,
    Relu,
    LeakyRelu(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Sin,
    Cos,
    Atan,
    Sigmoid,
    Square,
    Sqrt,
    /// `acos` of the input clamped to `[-1, 1]`; zero gradient where clamped.
    Acos,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Binary(Var, Var, Binary),
    Unary(Var, Unary),
    Scale(Var, f64),
    AddScalar(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    PermuteCols(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Mse(Var, Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    GlobalAvgPool(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `None` when the node did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Split `shape` around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Atan => x.atan(),
            Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Acos => x.clamp(-1.0, 1.0).acos(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Atan => 1.0 / (1.0 + x * x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Acos => {
                if x.abs() >= 1.0 - 1e-12 {
                    0.0
                } else {
                    -1.0 / (1.0 - x * x).sqrt()
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Tanh => "tanh",
            Unary::Relu => "relu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Atan => "atan",
            Unary::Sigmoid => "sigmoid",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Acos => "acos",
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input (constant or parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let t = Tensor::new(vec![m, n], out)?.check_finite("matmul")?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `a[m×n] + bias[n]`, bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(bias).numel() != n {
            return Err(shape_err(
                "add_row",
                format!("bias {:?} for [{m}x{n}]", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let t = Tensor::new(vec![m, n], out)?.check_finite("add_row")?;
        Ok(self.push(t, Op::AddRow(a, bias)))
    }

    fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let t = match op {
            Binary::Add => va.zip_map(vb, |x, y| x + y),
            Binary::Sub => va.zip_map(vb, |x, y| x - y),
            Binary::Mul => va.zip_map(vb, |x, y| x * y),
        }
        .check_finite(name)?;
        Ok(self.push(t, Op::Binary(a, b, op)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn unary(&mut self, a: Var, u: Unary) -> Result<Var> {
        let t = self.value(a).map(|x| u.apply(x)).check_finite(u.name())?;
        Ok(self.push(t, Op::Unary(a, u)))
    }

    /// Uniform entry point over the elementwise set; `b` is required for the
    /// binary variants and must be absent otherwise.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let binary = matches!(op, Elementwise::Add | Elementwise::Sub | Elementwise::Mul);
        match (binary, b) {
            (true, Some(b)) => match op {
                Elementwise::Add => self.add(a, b),
                Elementwise::Sub => self.sub(a, b),
                _ => self.mul(a, b),
            },
            (false, None) => {
                let u = match op {
                    Elementwise::Exp => Unary::Exp,
                    Elementwise::Tanh => Unary::Tanh,
                    Elementwise::Relu => Unary::Relu,
                    Elementwise::LeakyRelu(alpha) => Unary::LeakyRelu(alpha),
                    _ => unreachable!(),
                };
                self.unary(a, u)
            }
            (true, None) => Err(shape_err("elementwise", "binary op needs two operands")),
            (false, Some(_)) => Err(shape_err("elementwise", "unary op takes one operand")),
        }
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.unary(a, Unary::LeakyRelu(alpha))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Cos)
    }

    pub fn atan(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Atan)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt)
    }

    pub fn acos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Acos)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * factor).check_finite("scale")?;
        Ok(self.push(t, Op::Scale(a, factor)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x + c).check_finite("add_scalar")?;
        Ok(self.push(t, Op::AddScalar(a)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let len = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("[{start}..{}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let data = self.value(src).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let t = Tensor::new(new_shape, out)?;
        Ok(self.push(t, Op::Slice { src, axis, start }))
    }

    pub fn split(&mut self, src: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        let shape = self.shape(src);
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(shape_err("split", format!("sizes {sizes:?} for {shape:?} axis {axis}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(src, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Column gather on a rank-2 tensor: `out[:, j] = a[:, perm[j]]`.
    pub fn permute_cols(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if perm.len() != n || perm.iter().any(|&p| p >= n) {
            return Err(shape_err("permute_cols", format!("permutation of len {} for {n} cols", perm.len())));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for (j, &p) in perm.iter().enumerate() {
                out[r * n + j] = src[r * n + p];
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::PermuteCols(a, perm.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).sum()).check_finite("sum")?;
        Ok(self.push(t, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.numel() as f64).check_finite("mean")?;
        Ok(self.push(t, Op::Mean(a)))
    }

    /// Per-row sum of a rank-2 tensor, shape `[m, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let data: Vec<f64> = self.value(a).data().chunks(n).map(|r| r.iter().sum()).collect();
        let t = Tensor::new(vec![m, 1], data)?.check_finite("row_sum")?;
        Ok(self.push(t, Op::RowSum(a)))
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err("mse", format!("{:?} vs {:?}", self.shape(pred), self.shape(target))));
        }
        let (p, t) = (self.value(pred), self.value(target));
        let n = p.numel() as f64;
        let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let out = Tensor::scalar(s / n).check_finite("mse")?;
        Ok(self.push(out, Op::Mse(pred, target)))
    }

    fn conv_shapes(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Var,
    ) -> Result<([usize; 4], [usize; 4])> {
        let xs: [usize; 4] = self
            .shape(x)
            .try_into()
            .map_err(|_| shape_err(op, format!("input must be rank 4, got {:?}", self.shape(x))))?;
        let ws: [usize; 4] = self
            .shape(w)
            .try_into()
            .map_err(|_| shape_err(op, format!("weight must be rank 4, got {:?}", self.shape(w))))?;
        if ws[2] != ws[3] {
            return Err(shape_err(op, "kernel must be square"));
        }
        let out_ch = if op == "conv2d" { ws[0] } else { ws[1] };
        if self.value(b).numel() != out_ch {
            return Err(shape_err(op, format!("bias of {} for {out_ch} channels", self.value(b).numel())));
        }
        Ok((xs, ws))
    }

    /// 2-D convolution. `x: [B,C,H,W]`, `w: [O,C,k,k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let ([bn, c, h, wd], [o, wc, k, _]) = self.conv_shapes("conv2d", x, w, b)?;
        if wc != c {
            return Err(shape_err("conv2d", format!("weight expects {wc} channels, input has {c}")));
        }
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(shape_err("conv2d", "kernel larger than padded input"));
        }
        let g = ConvGeom { channels: c, height: h, width: wd, kernel: k, stride, pad };
        let (ho, wo) = (g.out_height(), g.out_width());
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        let mut out = vec![0.0; bn * o * ho * wo];
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let bias = self.value(b).data();
        for n in 0..bn {
            g.im2col(&xin[n * c * h * wd..(n + 1) * c * h * wd], &mut cols);
            let dst = &mut out[n * o * ho * wo..(n + 1) * o * ho * wo];
            gemm(o, g.col_rows(), ho * wo, wt, false, &cols, false, dst, false);
            for (oc, plane) in dst.chunks_mut(ho * wo).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[oc]);
            }
        }
        let t = Tensor::new(vec![bn, o, ho, wo], out)?.check_finite("conv2d")?;
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Transposed convolution (adjoint of [`conv2d`](Self::conv2d) in `x`).
    /// `x: [B,Ci,H,W]`, `w: [Ci,Co,k,k]`, `b: [Co]`; output spatial size is
    /// `(H-1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let ([bn, ci, h, wd], [wci, co, k, _]) = self.conv_shapes("conv_transpose2d", x, w, b)?;
        if wci != ci {
            return Err(shape_err("conv_transpose2d", format!("weight expects {wci} channels, input has {ci}")));
        }
        let ho = ((h - 1) * stride + k)
            .checked_sub(2 * pad)
            .filter(|&v| v > 0)
            .ok_or_else(|| shape_err("conv_transpose2d", "padding exceeds output"))?;
        let wo = ((wd - 1) * stride + k) - 2 * pad;
        let g = ConvGeom { channels: co, height: ho, width: wo, kernel: k, stride, pad };
        debug_assert_eq!((g.out_height(), g.out_width()), (h, wd));
        let mut cols = vec![0.0; g.col_rows() * h * wd];
        let mut out = vec![0.0; bn * co * ho * wo];
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let bias = self.value(b).data();
        for n in 0..bn {
            // cols[Co·k·k, H·W] = wᵀ · x_n
            gemm(g.col_rows(), ci, h * wd, wt, true, &xin[n * ci * h * wd..(n + 1) * ci * h * wd], false, &mut cols, false);
            let dst = &mut out[n * co * ho * wo..(n + 1) * co * ho * wo];
            g.col2im(&cols, dst);
            for (oc, plane) in dst.chunks_mut(ho * wo).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[oc]);
            }
        }
        let t = Tensor::new(vec![bn, co, ho, wo], out)?.check_finite("conv_transpose2d")?;
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, stride, pad }))
    }

    /// Mean over the spatial dims: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("expected rank 4, got {s:?}")));
        }
        let hw = s[2] * s[3];
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::new(vec![s[0], s[1]], data)?;
        Ok(self.push(t, Op::GlobalAvgPool(x)))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NdiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, vb.data(), true, &mut da, false);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, va.data(), true, g.data(), false, &mut db, false);
                acc(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                acc(grads, *b, Tensor::new(vb.shape().to_vec(), db).unwrap());
            }
            Op::AddRow(a, bias) => {
                let n = g.shape()[1];
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(grads, *a, g.clone());
                let bshape = self.shape(*bias).to_vec();
                acc(grads, *bias, Tensor::new(bshape, db).unwrap());
            }
            Op::Binary(a, b, op) => match op {
                Binary::Add => {
                    acc(grads, *a, g.clone());
                    acc(grads, *b, g.clone());
                }
                Binary::Sub => {
                    acc(grads, *a, g.clone());
                    acc(grads, *b, g.map(|v| -v));
                }
                Binary::Mul => {
                    acc(grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                    acc(grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
            },
            Op::Unary(a, u) => {
                let x = self.value(*a);
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(gv, (xv, yv))| gv * u.derivative(*xv, *yv))
                    .collect();
                acc(grads, *a, Tensor::new(x.shape().to_vec(), data).unwrap());
            }
            Op::Scale(a, f) => acc(grads, *a, g.map(|v| v * f)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let len = ps[*axis];
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    acc(grads, p, Tensor::new(ps, d).unwrap());
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let ss = self.shape(*src).to_vec();
                let (outer, n, inner) = axis_split(&ss, *axis);
                let len = g.shape()[*axis];
                let mut d = vec![0.0; ss.iter().product()];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(grads, *src, Tensor::new(ss, d).unwrap());
            }
            Op::PermuteCols(a, perm) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    for (j, &p) in perm.iter().enumerate() {
                        d[r * n + p] += g.data()[r * n + j];
                    }
                }
                acc(grads, *a, Tensor::new(vec![m, n], d).unwrap());
            }
            Op::Reshape(a) => {
                let s = self.shape(*a).to_vec();
                acc(grads, *a, g.clone().reshaped(&s).unwrap());
            }
            Op::Sum(a) => {
                let s = self.shape(*a).to_vec();
                acc(grads, *a, Tensor::full(&s, g.item()));
            }
            Op::Mean(a) => {
                let v = self.value(*a);
                acc(grads, *a, Tensor::full(v.shape(), g.item() / v.numel() as f64));
            }
            Op::RowSum(a) => {
                let s = self.shape(*a).to_vec();
                let n = s[1];
                let d = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
                acc(grads, *a, Tensor::new(s, d).unwrap());
            }
            Op::Mse(p, t) => {
                let (vp, vt) = (self.value(*p), self.value(*t));
                let scale = 2.0 * g.item() / vp.numel() as f64;
                let dp = vp.zip_map(vt, |a, b| scale * (a - b));
                acc(grads, *t, dp.map(|v| -v));
                acc(grads, *p, dp);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (bn, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let o = ws[0];
                let geom = ConvGeom { channels: c, height: h, width: wd, kernel: ws[2], stride: *stride, pad: *pad };
                let howo = geom.col_cols();
                let rows = geom.col_rows();
                let xin = self.value(*x).data();
                let wt = self.value(*w).data();
                let mut cols = vec![0.0; rows * howo];
                let mut dcols = vec![0.0; rows * howo];
                let mut dx = vec![0.0; xin.len()];
                let mut dw = vec![0.0; wt.len()];
                let mut db = vec![0.0; o];
                for n in 0..bn {
                    let gn = &g.data()[n * o * howo..(n + 1) * o * howo];
                    let xn = &xin[n * c * h * wd..(n + 1) * c * h * wd];
                    geom.im2col(xn, &mut cols);
                    gemm(o, howo, rows, gn, false, &cols, true, &mut dw, true);
                    for (oc, plane) in gn.chunks(howo).enumerate() {
                        db[oc] += plane.iter().sum::<f64>();
                    }
                    gemm(rows, o, howo, wt, true, gn, false, &mut dcols, false);
                    geom.col2im(&dcols, &mut dx[n * c * h * wd..(n + 1) * c * h * wd]);
                }
                acc(grads, *x, Tensor::new(xs, dx).unwrap());
                acc(grads, *w, Tensor::new(ws, dw).unwrap());
                acc(grads, *b, Tensor::new(self.shape(*b).to_vec(), db).unwrap());
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (bn, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let co = ws[1];
                let gs = g.shape();
                let (ho, wo) = (gs[2], gs[3]);
                let geom = ConvGeom { channels: co, height: ho, width: wo, kernel: ws[2], stride: *stride, pad: *pad };
                let rows = geom.col_rows();
                let hw = h * wd;
                let xin = self.value(*x).data();
                let wt = self.value(*w).data();
                let mut gcols = vec![0.0; rows * hw];
                let mut dx = vec![0.0; xin.len()];
                let mut dw = vec![0.0; wt.len()];
                let mut db = vec![0.0; co];
                for n in 0..bn {
                    let gn = &g.data()[n * co * ho * wo..(n + 1) * co * ho * wo];
                    geom.im2col(gn, &mut gcols);
                    // dx_n[Ci, HW] = w[Ci, rows] · gcols[rows, HW]
                    gemm(ci, rows, hw, wt, false, &gcols, false, &mut dx[n * ci * hw..(n + 1) * ci * hw], false);
                    // dw[Ci, rows] += x_n[Ci, HW] · gcolsᵀ
                    gemm(ci, hw, rows, &xin[n * ci * hw..(n + 1) * ci * hw], false, &gcols, true, &mut dw, true);
                    for (oc, plane) in gn.chunks(ho * wo).enumerate() {
                        db[oc] += plane.iter().sum::<f64>();
                    }
                }
                acc(grads, *x, Tensor::new(xs, dx).unwrap());
                acc(grads, *w, Tensor::new(ws, dw).unwrap());
                acc(grads, *b, Tensor::new(self.shape(*b).to_vec(), db).unwrap());
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x).to_vec();
                let hw = s[2] * s[3];
                let d = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw))
                    .collect();
                acc(grads, *x, Tensor::new(s, d).unwrap());
            }
        }
    }
}
