use std::collections::HashMap;

use super::kernels::{self, Window};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Conv2dOpts {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dOpts {
    /// Shape-preserving 3×3 settings for a given dilation.
    pub fn same(dilation: usize) -> Self {
        Conv2dOpts {
            stride: 1,
            padding: dilation,
            dilation,
        }
    }
}

/// Per-channel batch mean and biased variance.
pub type BatchStats<T> = (Vec<T>, Vec<T>);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    ScaleBy { x: Var, s: Var },
    MulChannel { x: Var, g: Var },
    AddBias { x: Var, b: Var, axis: usize },
    Sigmoid(Var),
    Relu(Var),
    Silu(Var),
    Softplus(Var),
    PowScalar(Var, T),
    Bmm { a: Var, b: Var, ta: bool, tb: bool, dims: [usize; 4] },
    Softmax { x: Var, axis: usize },
    Attention { q: Var, k: Var, v: Var, probs: Vec<T>, dims: [usize; 3] },
    LogSoftmax { x: Var, axis: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, win: Window },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Dropout { x: Var, mask: Vec<T> },
    Concat { xs: Vec<Var>, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    ChannelShift { x: Var, step: (usize, usize) },
    CycleFc { x: Var, w: Var, b: Option<Var>, step: (usize, usize) },
    UpsampleBilinear { x: Var, factor: usize },
    SumAll(Var),
    ChannelSum(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Attention { .. } => "attention",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::ScaleBy { .. } => "scale_by",
            Op::MulChannel { .. } => "mul_channel",
            Op::AddBias { .. } => "add_bias",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Silu(..) => "silu",
            Op::Softplus(..) => "softplus",
            Op::PowScalar(..) => "pow_scalar",
            Op::Bmm { .. } => "bmm",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::ChannelShift { .. } => "channel_shift",
            Op::CycleFc { .. } => "cycle_fc",
            Op::UpsampleBilinear { .. } => "upsample_bilinear",
            Op::SumAll(..) => "sum_all",
            Op::ChannelSum(..) => "channel_sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    map: HashMap<Var, Tensor<T>>,
}

impl<T: Element> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.map.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.map.remove(&v)
    }
}

/// Reverse-mode tape. Nodes are appended in execution order, so the vector
/// index is already a topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Debug mode: every op verifies its output is finite.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Gradients are reported for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.zip(a, b, |x, y| x / y);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.map(a, |x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.map(a, |x| x * c);
        self.push(v, Op::MulScalar(a, c), &[a])
    }

    /// `s·x` for a one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("scale_by", format!("scale shape {:?}", self.shape(s))));
        }
        let sv = self.data(s)[0];
        let v = self.map(x, |a| a * sv);
        self.push(v, Op::ScaleBy { x, s }, &[x, s])
    }

    /// `x[n,c,..]·g[n,c]`, broadcasting the gate over trailing axes.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Result<Var> {
        let xs = self.shape(x);
        let gs = self.shape(g);
        if xs.len() < 2 || gs != &xs[..2] {
            return Err(Error::dim("mul_channel", format!("{xs:?} by {gs:?}")));
        }
        let inner: usize = xs[2..].iter().product();
        let gd = self.data(g);
        let data = self
            .data(x)
            .chunks(inner)
            .zip(gd)
            .flat_map(|(row, &gv)| row.iter().map(move |&v| v * gv))
            .collect();
        let v = Tensor::new(self.shape(x), data)?;
        self.push(v, Op::MulChannel { x, g }, &[x, g])
    }

    /// Adds `b` (length `shape[axis]`) along `axis`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || self.value(b).len() != xs[axis] {
            return Err(Error::dim(
                "add_bias",
                format!("{xs:?} axis {axis} bias {:?}", self.shape(b)),
            ));
        }
        let (_, len, inner) = split_axis(&xs, axis);
        let bd = self.data(b);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[(i / inner) % len])
            .collect();
        let v = Tensor::new(&xs, data)?;
        self.push(v, Op::AddBias { x, b, axis }, &[x, b])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x.max(T::zero()));
        self.push(v, Op::Relu(a), &[a])
    }

    /// `x·sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    pub fn pow_scalar(&mut self, a: Var, p: T) -> Result<Var> {
        let v = self.map(a, |x| x.powf(p));
        self.push(v, Op::PowScalar(a, p), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -T::one())
    }

    /// Batched product of rank-3 tensors: `op(a[b])·op(b[b])`, where `ta`/`tb`
    /// transpose the stored trailing matrix.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::dim("bmm", format!("inner dims {k} vs {k2}")));
        }
        let batch = sa[0];
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                ta,
                &bd[i * k * n..(i + 1) * k * n],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let v = Tensor::new(&[batch, m, n], out)?;
        self.push(
            v,
            Op::Bmm {
                a,
                b,
                ta,
                tb,
                dims: [batch, m, k, n],
            },
            &[a, b],
        )
    }

    /// Fused `V·softmax(QᵀK)` over `N×C×L` inputs, softmax along the last
    /// axis of the `L×L` score map. Only the probabilities are kept for the
    /// backward pass.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 || self.shape(k) != shape || self.shape(v) != shape {
            return Err(Error::dim(
                "attention",
                format!("{shape:?}, {:?}, {:?}", self.shape(k), self.shape(v)),
            ));
        }
        let [n, c, l] = [shape[0], shape[1], shape[2]];
        let mut probs = vec![T::zero(); n * l * l];
        let mut out = vec![T::zero(); n * c * l];
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        for i in 0..n {
            let (qi, ki, vi) = (&qd[i * c * l..(i + 1) * c * l], &kd[i * c * l..(i + 1) * c * l], &vd[i * c * l..(i + 1) * c * l]);
            let p = &mut probs[i * l * l..(i + 1) * l * l];
            kernels::gemm(l, c, l, qi, true, ki, false, p, false);
            p.chunks_mut(l).for_each(softmax_row);
            kernels::gemm(c, l, l, vi, false, p, false, &mut out[i * c * l..(i + 1) * c * l], false);
        }
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::Attention { q, k, v, probs, dims: [n, c, l] }, &[q, k, v])
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        if sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let c = self.bmm(a3, b3, false, false)?;
        self.reshape(c, &[sa[0], sb[1]])
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::dim(op, format!("axis {axis} of {:?}", self.shape(x))));
        }
        Ok(())
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        if inner == 1 {
            out.copy_from_slice(src);
            out.chunks_mut(len).for_each(softmax_row);
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mx = T::neg_infinity();
                    for j in 0..len {
                        mx = mx.max(src[base + j * inner]);
                    }
                    let mut total = T::zero();
                    for j in 0..len {
                        let e = (src[base + j * inner] - mx).exp();
                        out[base + j * inner] = e;
                        total += e;
                    }
                    for j in 0..len {
                        out[base + j * inner] = out[base + j * inner] / total;
                    }
                }
            }
        }
        let v = Tensor::new(self.shape(x), out)?;
        self.push(v, Op::Softmax { x, axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    total += (src[base + j * inner] - mx).exp();
                }
                let lse = mx + total.ln();
                for j in 0..len {
                    out[base + j * inner] = src[base + j * inner] - lse;
                }
            }
        }
        let v = Tensor::new(self.shape(x), out)?;
        self.push(v, Op::LogSoftmax { x, axis }, &[x])
    }

    /// Cross-correlation with zero padding. `w` is `Cout×Cin×Kh×Kw`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOpts) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::dim("conv2d", format!("input {xs:?} weight {ws:?}")));
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(Error::dim("conv2d", "stride and dilation must be positive"));
        }
        if let Some(b) = b {
            if self.value(b).len() != ws[0] {
                return Err(Error::dim("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let win = Window {
            kh: ws[2],
            kw: ws[3],
            stride: opts.stride,
            pad: opts.padding,
            dilation: opts.dilation,
        };
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = match (win.out_dim(h, win.kh), win.out_dim(wd, win.kw)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::dim(
                    "conv2d",
                    format!("non-positive output for input {xs:?} kernel {ws:?} {opts:?}"),
                ))
            }
        };
        let cout = ws[0];
        let kk = cin * win.kh * win.kw;
        let p = ho * wo;
        let direct = is_pointwise(win);
        let mut col = if direct { Vec::new() } else { vec![T::zero(); kk * p] };
        let mut out = Vec::with_capacity(n * cout * p);
        match b {
            Some(b) => {
                let bd = self.data(b);
                for j in 0..n * cout {
                    out.resize(out.len() + p, bd[j % cout]);
                }
            }
            None => out.resize(n * cout * p, T::zero()),
        }
        let (xd, wdata) = (self.data(x), self.data(w));
        for i in 0..n {
            let xi = &xd[i * cin * h * wd..(i + 1) * cin * h * wd];
            let src: &[T] = if direct {
                xi
            } else {
                kernels::im2col(xi, cin, h, wd, win, ho, wo, &mut col);
                &col
            };
            kernels::gemm(
                cout,
                kk,
                p,
                wdata,
                false,
                src,
                false,
                &mut out[i * cout * p..(i + 1) * cout * p],
                b.is_some(),
            );
        }
        let v = Tensor::new(&[n, cout, ho, wo], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(v, Op::Conv2d { x, w, b, win }, &ins)
    }

    /// Transposed convolution without padding; `w` is `Cin×Cout×K×K` and the
    /// output side is `(H−1)·stride + K`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || stride == 0 {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("input {xs:?} weight {ws:?} stride {stride}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != ws[1] {
                return Err(Error::dim("conv_transpose2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        let ho = (h - 1) * stride + kh;
        let wo = (wd - 1) * stride + kw;
        let win = Window {
            kh,
            kw,
            stride,
            pad: 0,
            dilation: 1,
        };
        let rows = cout * kh * kw;
        let mut cols = vec![T::zero(); rows * h * wd];
        let mut out = vec![T::zero(); n * cout * ho * wo];
        let (xd, wdata) = (self.data(x), self.data(w));
        for i in 0..n {
            kernels::gemm(
                rows,
                cin,
                h * wd,
                wdata,
                true,
                &xd[i * cin * h * wd..(i + 1) * cin * h * wd],
                false,
                &mut cols,
                false,
            );
            kernels::col2im(
                &cols,
                cout,
                ho,
                wo,
                win,
                h,
                wd,
                &mut out[i * cout * ho * wo..(i + 1) * cout * ho * wo],
            );
        }
        if let Some(b) = b {
            let bd = self.data(b);
            for (j, plane) in out.chunks_mut(ho * wo).enumerate() {
                let bv = bd[j % cout];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let v = Tensor::new(&[n, cout, ho, wo], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(v, Op::ConvTranspose2d { x, w, b, stride }, &ins)
    }

    /// Max pooling; ties route to the first maximum in row-major order.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || window == 0 || stride == 0 || xs[2] < window || xs[3] < window {
            return Err(Error::dim("maxpool2d", format!("{xs:?} window {window}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let src = self.data(x);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::new(&[n, c, ho, wo], out)?;
        self.push(v, Op::MaxPool2d { x, argmax }, &[x])
    }

    /// Mean over the spatial axes: `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("global_avg_pool", format!("{xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let scale = T::one() / T::from_f64(hw as f64);
        let data = self
            .data(x)
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * scale)
            .collect();
        let v = Tensor::new(&xs[..2], data)?;
        self.push(v, Op::GlobalAvgPool(x), &[x])
    }

    /// Per-channel normalisation over `N×H×W`. With `batch_stats` the batch
    /// mean and biased variance are used and returned so the caller can fold
    /// them into running averages; otherwise `running` is used as-is.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[T], &[T]),
        batch_stats: bool,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4
            || self.value(gamma).len() != xs[1]
            || self.value(beta).len() != xs[1]
            || running.0.len() != xs[1]
            || running.1.len() != xs[1]
        {
            return Err(Error::dim("batchnorm2d", format!("input {xs:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let src = self.data(x);
        let count = T::from_f64((n * hw) as f64);
        let (mean, var) = if batch_stats {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for i in 0..n {
                    s += src[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum::<T>();
                }
                let mu = s / count;
                let mut q = T::zero();
                for i in 0..n {
                    for &v in &src[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                        q += (v - mu) * (v - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = q / count;
            }
            (mean, var)
        } else {
            (running.0.to_vec(), running.1.to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    xhat[j] = (src[j] - mean[ch]) * inv_std[ch];
                    out[j] = g[ch] * xhat[j] + b[ch];
                }
            }
        }
        let v = Tensor::new(&xs, out)?;
        let var_out = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        )?;
        Ok((var_out, batch_stats.then_some((mean, var))))
    }

    /// Inverted dropout with a caller-supplied keep mask (`true` = keep).
    pub fn dropout(&mut self, x: Var, keep: &[bool], p: T) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return Err(Error::dim("dropout", "mask length"));
        }
        let scale = T::one() / (T::one() - p);
        let mask: Vec<T> = keep
            .iter()
            .map(|&k| if k { scale } else { T::zero() })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let v = Tensor::new(self.shape(x), data)?;
        self.push(v, Op::Dropout { x, mask }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let v = Tensor::new(&shape, out)?;
        self.push(
            v,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x), &[x])
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("{perm:?} for {xs:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        permute_into(src, &xs, perm, &mut out, false);
        let v = Tensor::new(&out_shape, out)?;
        self.push(
            v,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    /// Per-channel spatial shift used by CycleFC: channel `c` samples
    /// `(i + δh(c), j + δw(c))`, zero outside the map.
    pub fn channel_shift(&mut self, x: Var, step: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || step.0 == 0 || step.1 == 0 {
            return Err(Error::dim("channel_shift", format!("{xs:?} step {step:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let src = self.data(x);
        let mut out = Vec::with_capacity(src.len());
        for (j, s) in src.chunks(h * w).enumerate().take(n * c) {
            let ch = j % c;
            kernels::shift_plane(s, &mut out, h, w, kernels::cycle_offset(ch, step.0), kernels::cycle_offset(ch, step.1));
        }
        let v = Tensor::new(&xs, out)?;
        self.push(v, Op::ChannelShift { x, step }, &[x])
    }

    /// `channel_shift` followed by a bias-carrying 1×1 convolution, done in
    /// one pass. `w` is `Cout×Cin×1×1`.
    pub fn cycle_fc(&mut self, x: Var, w: Var, b: Option<Var>, step: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != 1 || ws[3] != 1 || step.0 == 0 || step.1 == 0 {
            return Err(Error::dim("cycle_fc", format!("input {xs:?} weight {ws:?} step {step:?}")));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[0];
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::dim("cycle_fc", format!("bias {:?}", self.shape(b))));
            }
        }
        let p = h * wd;
        let mut out = Vec::with_capacity(n * cout * p);
        let mut col = Vec::new();
        {
            let (xd, wdata) = (self.data(x), self.data(w));
            let bias = b.map(|b| self.data(b));
            let spare = &mut out.spare_capacity_mut()[..n * cout * p];
            for (i, dst) in spare.chunks_mut(cout * p).enumerate() {
                let xi = &xd[i * cin * p..(i + 1) * cin * p];
                kernels::cycle_fc_image(xi, wdata, bias, (cin, cout, h, wd), step, dst, &mut col);
            }
        }
        // SAFETY: `cycle_fc_image` wrote all `cout·h·w` values of each image.
        unsafe { out.set_len(n * cout * p) };
        let v = Tensor::new(&[n, cout, h, wd], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(v, Op::CycleFc { x, w, b, step }, &ins)
    }

    /// Bilinear upsampling by an integer factor, half-pixel centres.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || factor == 0 {
            return Err(Error::dim("upsample_bilinear", format!("{xs:?} factor {factor}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h * factor, w * factor);
        let src = self.data(x);
        let rows: Vec<_> = (0..ho).map(|y| kernels::bilinear_taps(y, h, ho)).collect();
        let cols: Vec<_> = (0..wo).map(|x| kernels::bilinear_taps(x, w, wo)).collect();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for (y, &(y0, y1, ly)) in rows.iter().enumerate() {
                let ly = T::from_f64(ly);
                for (xx, &(x0, x1, lx)) in cols.iter().enumerate() {
                    let lx = T::from_f64(lx);
                    let top = s[y0 * w + x0] * (T::one() - lx) + s[y0 * w + x1] * lx;
                    let bot = s[y1 * w + x0] * (T::one() - lx) + s[y1 * w + x1] * lx;
                    d[y * wo + xx] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
        let v = Tensor::new(&[n, c, ho, wo], out)?;
        self.push(v, Op::UpsampleBilinear { x, factor }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: T = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = T::from_f64(self.value(x).len() as f64);
        let s = self.sum_all(x)?;
        self.mul_scalar(s, T::one() / n)
    }

    /// Sum over every axis except axis 1: `N×C×… → C`.
    pub fn channel_sum(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim("channel_sum", format!("{xs:?}")));
        }
        let (_, c, inner) = split_axis(&xs, 1);
        let mut out = vec![T::zero(); c];
        for (j, chunk) in self.data(x).chunks(inner).enumerate() {
            out[j % c] += chunk.iter().copied().sum::<T>();
        }
        let v = Tensor::new(&[c], out)?;
        self.push(v, Op::ChannelSum(x), &[x])
    }

    /// Reverse sweep from a one-element `loss`. Consumes the tape and returns
    /// the accumulated gradient of every leaf that requires one.
    pub fn backward(self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let out = node.value.data();
            match &node.op {
                Op::Leaf => {
                    leaves.insert(Var(i), Tensor::new(node.value.shape(), g)?);
                }
                Op::Add(a, b) => {
                    add_into(nodes, &mut grads, *a, |d| axpy(d, &g, T::one()));
                    add_into(nodes, &mut grads, *b, |d| axpy(d, &g, T::one()));
                }
                Op::Sub(a, b) => {
                    add_into(nodes, &mut grads, *a, |d| axpy(d, &g, T::one()));
                    add_into(nodes, &mut grads, *b, |d| axpy(d, &g, -T::one()));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    add_into(nodes, &mut grads, *a, |d| {
                        for ((d, &g), &y) in d.iter_mut().zip(&g).zip(bv) {
                            *d += g * y;
                        }
                    });
                    add_into(nodes, &mut grads, *b, |d| {
                        for ((d, &g), &x) in d.iter_mut().zip(&g).zip(av) {
                            *d += g * x;
                        }
                    });
                }
                Op::Div(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    add_into(nodes, &mut grads, *a, |d| {
                        for ((d, &g), &y) in d.iter_mut().zip(&g).zip(bv) {
                            *d += g / y;
                        }
                    });
                    add_into(nodes, &mut grads, *b, |d| {
                        for (((d, &g), &x), &y) in d.iter_mut().zip(&g).zip(av).zip(bv) {
                            *d -= g * x / (y * y);
                        }
                    });
                }
                Op::AddScalar(a) => add_into(nodes, &mut grads, *a, |d| axpy(d, &g, T::one())),
                Op::MulScalar(a, c) => add_into(nodes, &mut grads, *a, |d| axpy(d, &g, *c)),
                Op::ScaleBy { x, s } => {
                    let sv = nodes[s.0].value.data()[0];
                    let xv = nodes[x.0].value.data();
                    add_into(nodes, &mut grads, *x, |d| axpy(d, &g, sv));
                    add_into(nodes, &mut grads, *s, |d| {
                        d[0] += g.iter().zip(xv).map(|(&g, &x)| g * x).sum::<T>();
                    });
                }
                Op::MulChannel { x, g: gate } => {
                    let xv = nodes[x.0].value.data();
                    let gv = nodes[gate.0].value.data();
                    let inner = xv.len() / gv.len();
                    add_into(nodes, &mut grads, *x, |d| {
                        for (j, (dc, gc)) in d.chunks_mut(inner).zip(g.chunks(inner)).enumerate() {
                            for (d, &g) in dc.iter_mut().zip(gc) {
                                *d += g * gv[j];
                            }
                        }
                    });
                    add_into(nodes, &mut grads, *gate, |d| {
                        for (j, (xc, gc)) in xv.chunks(inner).zip(g.chunks(inner)).enumerate() {
                            d[j] += xc.iter().zip(gc).map(|(&x, &g)| x * g).sum::<T>();
                        }
                    });
                }
                Op::AddBias { x, b, axis } => {
                    add_into(nodes, &mut grads, *x, |d| axpy(d, &g, T::one()));
                    let (_, len, inner) = split_axis(node.value.shape(), *axis);
                    add_into(nodes, &mut grads, *b, |d| {
                        for (j, chunk) in g.chunks(inner).enumerate() {
                            d[j % len] += chunk.iter().copied().sum::<T>();
                        }
                    });
                }
                Op::Sigmoid(a) => add_into(nodes, &mut grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(&g).zip(out) {
                        *d += g * y * (T::one() - y);
                    }
                }),
                Op::Relu(a) => {
                    let xv = nodes[a.0].value.data();
                    add_into(nodes, &mut grads, *a, |d| {
                        for ((d, &g), &x) in d.iter_mut().zip(&g).zip(xv) {
                            if x > T::zero() {
                                *d += g;
                            }
                        }
                    })
                }
                Op::Silu(a) => {
                    let xv = nodes[a.0].value.data();
                    add_into(nodes, &mut grads, *a, |d| {
                        for ((d, &g), &x) in d.iter_mut().zip(&g).zip(xv) {
                            let s = sigmoid(x);
                            *d += g * s * (T::one() + x * (T::one() - s));
                        }
                    })
                }
                Op::Softplus(a) => {
                    let xv = nodes[a.0].value.data();
                    add_into(nodes, &mut grads, *a, |d| {
                        for ((d, &g), &x) in d.iter_mut().zip(&g).zip(xv) {
                            *d += g * sigmoid(x);
                        }
                    })
                }
                Op::PowScalar(a, p) => {
                    let xv = nodes[a.0].value.data();
                    let p = *p;
                    add_into(nodes, &mut grads, *a, |d| {
                        for ((d, &g), &x) in d.iter_mut().zip(&g).zip(xv) {
                            if p == T::zero() || (x == T::zero() && p > T::one()) {
                                continue;
                            }
                            *d += g * p * x.powf(p - T::one());
                        }
                    })
                }
                Op::Bmm { a, b, ta, tb, dims } => {
                    let [batch, m, k, n] = *dims;
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    let (ta, tb) = (*ta, *tb);
                    add_into(nodes, &mut grads, *a, |d| {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let bi = &bv[i * k * n..(i + 1) * k * n];
                            let di = &mut d[i * m * k..(i + 1) * m * k];
                            if ta {
                                kernels::gemm(k, n, m, bi, tb, gi, true, di, true);
                            } else {
                                kernels::gemm(m, n, k, gi, false, bi, !tb, di, true);
                            }
                        }
                    });
                    add_into(nodes, &mut grads, *b, |d| {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &av[i * m * k..(i + 1) * m * k];
                            let di = &mut d[i * k * n..(i + 1) * k * n];
                            if tb {
                                kernels::gemm(n, m, k, gi, true, ai, ta, di, true);
                            } else {
                                kernels::gemm(k, m, n, ai, !ta, gi, false, di, true);
                            }
                        }
                    });
                }
                Op::Attention { q, k, v, probs, dims } => {
                    let [n, c, l] = *dims;
                    let (qd, kd, vd) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
                    let cl = c * l;
                    add_into(nodes, &mut grads, *v, |d| {
                        for i in 0..n {
                            let p = &probs[i * l * l..(i + 1) * l * l];
                            kernels::gemm(c, l, l, &g[i * cl..(i + 1) * cl], false, p, true, &mut d[i * cl..(i + 1) * cl], true);
                        }
                    });
                    if !nodes[q.0].requires_grad && !nodes[k.0].requires_grad {
                        continue;
                    }
                    let (mut dp, mut ds) = (vec![T::zero(); l * l], vec![T::zero(); l * l]);
                    for i in 0..n {
                        let p = &probs[i * l * l..(i + 1) * l * l];
                        let gi = &g[i * cl..(i + 1) * cl];
                        // dP = Vᵀ·G, then the softmax Jacobian in place.
                        kernels::gemm(l, c, l, &vd[i * cl..(i + 1) * cl], true, gi, false, &mut dp, false);
                        ds.fill(T::zero());
                        for ((dr, gr), yr) in ds.chunks_mut(l).zip(dp.chunks(l)).zip(p.chunks(l)) {
                            softmax_row_backward(dr, gr, yr);
                        }
                        add_into(nodes, &mut grads, *q, |d| {
                            kernels::gemm(c, l, l, &kd[i * cl..(i + 1) * cl], false, &ds, true, &mut d[i * cl..(i + 1) * cl], true);
                        });
                        add_into(nodes, &mut grads, *k, |d| {
                            kernels::gemm(c, l, l, &qd[i * cl..(i + 1) * cl], false, &ds, false, &mut d[i * cl..(i + 1) * cl], true);
                        });
                    }
                }
                Op::Softmax { x, axis } => {
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    add_into(nodes, &mut grads, *x, |d| {
                        if inner == 1 {
                            for ((dr, gr), yr) in d.chunks_mut(len).zip(g.chunks(len)).zip(out.chunks(len)) {
                                softmax_row_backward(dr, gr, yr);
                            }
                            return;
                        }
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * len * inner + i;
                                let dot: T = (0..len)
                                    .map(|j| g[base + j * inner] * out[base + j * inner])
                                    .sum();
                                for j in 0..len {
                                    let idx = base + j * inner;
                                    d[idx] += out[idx] * (g[idx] - dot);
                                }
                            }
                        }
                    })
                }
                Op::LogSoftmax { x, axis } => {
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    add_into(nodes, &mut grads, *x, |d| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * len * inner + i;
                                let total: T = (0..len).map(|j| g[base + j * inner]).sum();
                                for j in 0..len {
                                    let idx = base + j * inner;
                                    d[idx] += g[idx] - out[idx].exp() * total;
                                }
                            }
                        }
                    })
                }
                Op::Conv2d { x, w, b, win } => {
                    conv2d_backward(nodes, &mut grads, &g, node.value.shape(), *x, *w, *b, *win);
                }
                Op::ConvTranspose2d { x, w, b, stride } => {
                    conv_t_backward(nodes, &mut grads, &g, node.value.shape(), *x, *w, *b, *stride);
                }
                Op::MaxPool2d { x, argmax } => add_into(nodes, &mut grads, *x, |d| {
                    for (&idx, &g) in argmax.iter().zip(&g) {
                        d[idx] += g;
                    }
                }),
                Op::GlobalAvgPool(x) => {
                    let xs = nodes[x.0].value.shape();
                    let hw = xs[2] * xs[3];
                    let scale = T::one() / T::from_f64(hw as f64);
                    add_into(nodes, &mut grads, *x, |d| {
                        for (dc, &g) in d.chunks_mut(hw).zip(&g) {
                            dc.iter_mut().for_each(|d| *d += g * scale);
                        }
                    })
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let xs = node.value.shape();
                    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let gm = nodes[gamma.0].value.data();
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gx = vec![T::zero(); c];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * hw;
                            for j in off..off + hw {
                                sum_g[ch] += g[j];
                                sum_gx[ch] += g[j] * xhat[j];
                            }
                        }
                    }
                    add_into(nodes, &mut grads, *gamma, |d| axpy(d, &sum_gx, T::one()));
                    add_into(nodes, &mut grads, *beta, |d| axpy(d, &sum_g, T::one()));
                    let m = T::from_f64((n * hw) as f64);
                    let batch_stats = *batch_stats;
                    add_into(nodes, &mut grads, *x, |d| {
                        for i in 0..n {
                            for ch in 0..c {
                                let off = (i * c + ch) * hw;
                                let k = gm[ch] * inv_std[ch];
                                for j in off..off + hw {
                                    if batch_stats {
                                        d[j] += k * (g[j] - sum_g[ch] / m - xhat[j] * sum_gx[ch] / m);
                                    } else {
                                        d[j] += k * g[j];
                                    }
                                }
                            }
                        }
                    })
                }
                Op::Dropout { x, mask } => add_into(nodes, &mut grads, *x, |d| {
                    for ((d, &g), &m) in d.iter_mut().zip(&g).zip(mask) {
                        *d += g * m;
                    }
                }),
                Op::Concat { xs, axis } => {
                    let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                    let mut offset = 0;
                    for v in xs {
                        let len = nodes[v.0].value.shape()[*axis];
                        add_into(nodes, &mut grads, *v, |d| {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                                axpy(&mut d[o * len * inner..(o + 1) * len * inner], src, T::one());
                            }
                        });
                        offset += len;
                    }
                }
                Op::Reshape(x) => add_into(nodes, &mut grads, *x, |d| axpy(d, &g, T::one())),
                Op::Permute { x, perm } => {
                    let xs = nodes[x.0].value.shape();
                    add_into(nodes, &mut grads, *x, |d| permute_into(&g, xs, perm, d, true))
                }
                Op::ChannelShift { x, step } => {
                    let xs = node.value.shape();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let hw = h * w;
                    add_into(nodes, &mut grads, *x, |d| {
                        for (j, (gp, dp)) in g.chunks(hw).zip(d.chunks_mut(hw)).enumerate().take(n * c) {
                            let ch = j % c;
                            let (dh, dw) = (kernels::cycle_offset(ch, step.0), kernels::cycle_offset(ch, step.1));
                            kernels::unshift_plane_add(gp, dp, h, w, dh, dw);
                        }
                    })
                }
                Op::CycleFc { x, w, b, step } => {
                    cycle_fc_backward(nodes, &mut grads, &g, node.value.shape()[1], *x, *w, *b, *step);
                }
                Op::UpsampleBilinear { x, factor } => {
                    let xs = nodes[x.0].value.shape();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (ho, wo) = (h * factor, w * factor);
                    let rows: Vec<_> = (0..ho).map(|y| kernels::bilinear_taps(y, h, ho)).collect();
                    let cols: Vec<_> = (0..wo).map(|x| kernels::bilinear_taps(x, w, wo)).collect();
                    add_into(nodes, &mut grads, *x, |d| {
                        for plane in 0..n * c {
                            let dp = &mut d[plane * h * w..(plane + 1) * h * w];
                            let gp = &g[plane * ho * wo..(plane + 1) * ho * wo];
                            for (y, &(y0, y1, ly)) in rows.iter().enumerate() {
                                let ly = T::from_f64(ly);
                                for (xx, &(x0, x1, lx)) in cols.iter().enumerate() {
                                    let lx = T::from_f64(lx);
                                    let gv = gp[y * wo + xx];
                                    let top = gv * (T::one() - ly);
                                    let bot = gv * ly;
                                    dp[y0 * w + x0] += top * (T::one() - lx);
                                    dp[y0 * w + x1] += top * lx;
                                    dp[y1 * w + x0] += bot * (T::one() - lx);
                                    dp[y1 * w + x1] += bot * lx;
                                }
                            }
                        }
                    })
                }
                Op::SumAll(x) => add_into(nodes, &mut grads, *x, |d| {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }),
                Op::ChannelSum(x) => {
                    let xs = nodes[x.0].value.shape();
                    let (_, c, inner) = split_axis(xs, 1);
                    add_into(nodes, &mut grads, *x, |d| {
                        for (j, chunk) in d.chunks_mut(inner).enumerate() {
                            let gv = g[j % c];
                            chunk.iter_mut().for_each(|d| *d += gv);
                        }
                    })
                }
            }
        }
        Ok(Grads { map: leaves })
    }
}

fn is_pointwise(win: Window) -> bool {
    win.kh == 1 && win.kw == 1 && win.stride == 1 && win.pad == 0
}

fn axpy<T: Element>(d: &mut [T], src: &[T], a: T) {
    for (d, &s) in d.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Hands `f` the gradient buffer of `v`, creating it zeroed on first use.
/// Inputs that do not require a gradient are skipped.
/// Stable in-place softmax of one contiguous row.
fn softmax_row<T: Element>(row: &mut [T]) {
    let mx = lane_max(row);
    for v in row.iter_mut() {
        *v -= mx;
    }
    T::exp_inplace(row);
    let inv = T::one() / lane_sum(row);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `d += y ⊙ (g − ⟨g, y⟩)` for one softmax row with output `y`.
fn softmax_row_backward<T: Element>(d: &mut [T], g: &[T], y: &[T]) {
    let dot = lane_dot(g, y);
    for ((dv, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
        *dv += yv * (gv - dot);
    }
}

fn add_into<T: Element>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
    f(buf);
}

/// Moves `src` (shape `shape`) into `dst` laid out as `perm` of it; with
/// `inverse` the roles flip and values are accumulated into `dst`.
fn permute_into<T: Element>(src: &[T], shape: &[usize], perm: &[usize], dst: &mut [T], inverse: bool) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut idx = vec![0usize; rank];
    for o in 0..src.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        if inverse {
            dst[off] += src[o];
        } else {
            dst[o] = src[off];
        }
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Element>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    out_shape: &[usize],
    x: Var,
    w: Var,
    b: Option<Var>,
    win: Window,
) {
    let xs = nodes[x.0].value.shape();
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, ho, wo) = (out_shape[1], out_shape[2], out_shape[3]);
    let p = ho * wo;
    let kk = cin * win.kh * win.kw;
    let xd = nodes[x.0].value.data();
    let wdata = nodes[w.0].value.data();
    let direct = is_pointwise(win);
    if let Some(b) = b {
        add_into(nodes, grads, b, |d| {
            for (j, plane) in g.chunks(p).enumerate() {
                d[j % cout] += plane.iter().copied().sum::<T>();
            }
        });
    }
    let mut col = if direct { Vec::new() } else { vec![T::zero(); kk * p] };
    if nodes[w.0].requires_grad {
        add_into(nodes, grads, w, |d| {
            for i in 0..n {
                let xi = &xd[i * cin * h * wd..(i + 1) * cin * h * wd];
                let src: &[T] = if direct {
                    xi
                } else {
                    kernels::im2col(xi, cin, h, wd, win, ho, wo, &mut col);
                    &col
                };
                kernels::gemm(cout, p, kk, &g[i * cout * p..(i + 1) * cout * p], false, src, true, d, true);
            }
        });
    }
    add_into(nodes, grads, x, |d| {
        for i in 0..n {
            let gi = &g[i * cout * p..(i + 1) * cout * p];
            let di = &mut d[i * cin * h * wd..(i + 1) * cin * h * wd];
            if direct {
                kernels::gemm(kk, cout, p, wdata, true, gi, false, di, true);
            } else {
                kernels::gemm(kk, cout, p, wdata, true, gi, false, &mut col, false);
                kernels::col2im(&col, cin, h, wd, win, ho, wo, di);
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn cycle_fc_backward<T: Element>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    cout: usize,
    x: Var,
    w: Var,
    b: Option<Var>,
    step: (usize, usize),
) {
    let xs = nodes[x.0].value.shape();
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let p = h * wd;
    let xd = nodes[x.0].value.data();
    let wdata = nodes[w.0].value.data();
    let offsets: Vec<_> = (0..cin)
        .map(|ch| (kernels::cycle_offset(ch, step.0), kernels::cycle_offset(ch, step.1)))
        .collect();
    if let Some(b) = b {
        add_into(nodes, grads, b, |d| {
            for (j, plane) in g.chunks(p).enumerate() {
                d[j % cout] += plane.iter().copied().sum::<T>();
            }
        });
    }
    add_into(nodes, grads, w, |d| {
        let mut shifted = Vec::with_capacity(cin * p);
        for i in 0..n {
            shifted.clear();
            for (ch, &(dh, dw)) in offsets.iter().enumerate() {
                let plane = &xd[(i * cin + ch) * p..(i * cin + ch + 1) * p];
                kernels::shift_plane(plane, &mut shifted, h, wd, dh, dw);
            }
            kernels::gemm(cout, p, cin, &g[i * cout * p..(i + 1) * cout * p], false, &shifted, true, d, true);
        }
    });
    add_into(nodes, grads, x, |d| {
        let mut col = vec![T::zero(); cin * p];
        for i in 0..n {
            kernels::gemm(cin, cout, p, wdata, true, &g[i * cout * p..(i + 1) * cout * p], false, &mut col, false);
            for (ch, &(dh, dw)) in offsets.iter().enumerate() {
                let di = &mut d[(i * cin + ch) * p..(i * cin + ch + 1) * p];
                kernels::unshift_plane_add(&col[ch * p..(ch + 1) * p], di, h, wd, dh, dw);
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn conv_t_backward<T: Element>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    out_shape: &[usize],
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
) {
    let xs = nodes[x.0].value.shape();
    let ws = nodes[w.0].value.shape();
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let win = Window {
        kh,
        kw,
        stride,
        pad: 0,
        dilation: 1,
    };
    let rows = cout * kh * kw;
    let xd = nodes[x.0].value.data();
    let wdata = nodes[w.0].value.data();
    if let Some(b) = b {
        add_into(nodes, grads, b, |d| {
            for (j, plane) in g.chunks(ho * wo).enumerate() {
                d[j % cout] += plane.iter().copied().sum::<T>();
            }
        });
    }
    // The forward scatter is col2im, so its adjoint gathers with im2col.
    let mut cols = vec![T::zero(); rows * h * wd];
    let gather = |i: usize, cols: &mut [T]| {
        let gi = &g[i * cout * ho * wo..(i + 1) * cout * ho * wo];
        kernels::im2col(gi, cout, ho, wo, win, h, wd, cols);
    };
    if nodes[w.0].requires_grad {
        add_into(nodes, grads, w, |d| {
            for i in 0..n {
                gather(i, &mut cols);
                let xi = &xd[i * cin * h * wd..(i + 1) * cin * h * wd];
                kernels::gemm(cin, h * wd, rows, xi, false, &cols, true, d, true);
            }
        });
    }
    add_into(nodes, grads, x, |d| {
        for i in 0..n {
            gather(i, &mut cols);
            let di = &mut d[i * cin * h * wd..(i + 1) * cin * h * wd];
            kernels::gemm(cin, rows, h * wd, wdata, false, &cols, false, di, true);
        }
    });
}

const LANES: usize = 8;

/// Reductions over eight interleaved accumulators, combined in a fixed
/// order, so they vectorise and stay deterministic.
fn lane_reduce<T: Element>(v: &[T], init: T, f: impl Fn(T, T) -> T) -> T {
    let mut acc = [init; LANES];
    let mut chunks = v.chunks_exact(LANES);
    for c in &mut chunks {
        for l in 0..LANES {
            acc[l] = f(acc[l], c[l]);
        }
    }
    for (l, &x) in chunks.remainder().iter().enumerate() {
        acc[l] = f(acc[l], x);
    }
    acc.iter().fold(init, |a, &b| f(a, b))
}

fn lane_max<T: Element>(v: &[T]) -> T {
    lane_reduce(v, T::neg_infinity(), |a, b| if b > a { b } else { a })
}

fn lane_sum<T: Element>(v: &[T]) -> T {
    lane_reduce(v, T::zero(), |a, b| a + b)
}

fn lane_dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    for (l, (&x, &y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        acc[l] += x * y;
    }
    acc.iter().fold(T::zero(), |s, &v| s + v)
}
