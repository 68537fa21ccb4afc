use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels::{self, ConvDims, ConvGeometry};
use crate::{AutogradError, Tensor};

type Result<T> = std::result::Result<T, AutogradError>;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: usize, w: usize, b: Option<usize>, geo: ConvGeometry },
    DeformConv2d { x: usize, offset: usize, w: usize, b: Option<usize>, geo: ConvGeometry },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    MulChannel { x: usize, s: usize },
    AddChannel { x: usize, s: usize },
    Concat(Vec<usize>),
    GlobalAvgPool(usize),
    Box3(usize),
    MaxPool2 { x: usize, argmax: Vec<usize> },
    Resize(usize),
    ChannelAffine { x: usize, scale: Vec<f64> },
    MeanAbsDiff(usize, usize),
    Mean(usize),
    Sum(usize),
    Reshape(usize),
    Transpose(usize),
    MatMul(usize, usize),
    Softmax(usize),
    Gather { x: usize, index: Vec<usize> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. Every operation on a [`Var`] appends a node; calling
/// [`Graph::backward`] walks the tape in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: &Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AutogradError {
    AutogradError::ShapeMismatch { op, detail: format!("{:?} vs {:?}", a, b) }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of nodes that participate in differentiation.
    pub fn differentiable_nodes(&self) -> usize {
        self.nodes.borrow().iter().filter(|n| n.requires_grad).count()
    }

    /// Reverse-mode sweep from a single-element output.
    pub fn backward(&self, output: &Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[output.id];
        if root.value.numel() != 1 {
            return Err(AutogradError::InvalidArgument(format!(
                "backward needs a single-element output, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(vec![1.0]);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn conv_dims(x: &Tensor, w: &Tensor, out: &Tensor, geo: ConvGeometry) -> (usize, usize, ConvDims) {
    let s = x.shape();
    let ws = w.shape();
    let os = out.shape();
    (
        s[0],
        ws[0],
        ConvDims { ci: s[1], h: s[2], w: s[3], kh: ws[2], kw: ws[3], ho: os[2], wo: os[3], geo },
    )
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let node = &nodes[id];
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &node.op {
        Op::Leaf => {}
        &Op::Conv2d { x, w, b, geo } => {
            let (n, co, d) = conv_dims(val(x), val(w), &node.value, geo);
            let mut dx = take_grad(grads, nodes, x);
            let mut dw = take_grad(grads, nodes, w);
            let mut db = b.and_then(|b| take_grad(grads, nodes, b));
            kernels::conv2d_backward(
                val(x).data(),
                n,
                val(w).data(),
                co,
                g,
                &d,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            put_grad(grads, x, dx);
            put_grad(grads, w, dw);
            if let Some(b) = b {
                put_grad(grads, b, db);
            }
        }
        &Op::DeformConv2d { x, offset, w, b, geo } => {
            let (n, co, d) = conv_dims(val(x), val(w), &node.value, geo);
            let mut dx = take_grad(grads, nodes, x);
            let mut doff = take_grad(grads, nodes, offset);
            let mut dw = take_grad(grads, nodes, w);
            let mut db = b.and_then(|b| take_grad(grads, nodes, b));
            kernels::deform_conv_backward(
                val(x).data(),
                val(offset).data(),
                n,
                val(w).data(),
                co,
                g,
                &d,
                dx.as_deref_mut(),
                doff.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            put_grad(grads, x, dx);
            put_grad(grads, offset, doff);
            put_grad(grads, w, dw);
            if let Some(b) = b {
                put_grad(grads, b, db);
            }
        }
        &Op::Add(a, b) => {
            if let Some(d) = accumulate(grads, nodes, a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = accumulate(grads, nodes, b) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        &Op::Sub(a, b) => {
            if let Some(d) = accumulate(grads, nodes, a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = accumulate(grads, nodes, b) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (val(a).data(), val(b).data());
            if let Some(d) = accumulate(grads, nodes, a) {
                d.iter_mut().zip(g.iter().zip(vb)).for_each(|(d, (g, v))| *d += g * v);
            }
            if let Some(d) = accumulate(grads, nodes, b) {
                d.iter_mut().zip(g.iter().zip(va)).for_each(|(d, (g, v))| *d += g * v);
            }
        }
        &Op::Div(a, b) => {
            let (va, vb) = (val(a).data(), val(b).data());
            if let Some(d) = accumulate(grads, nodes, a) {
                d.iter_mut().zip(g.iter().zip(vb)).for_each(|(d, (g, v))| *d += g / v);
            }
            if let Some(d) = accumulate(grads, nodes, b) {
                for i in 0..d.len() {
                    d[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                }
            }
        }
        &Op::Scale(a, c) => {
            if let Some(d) = accumulate(grads, nodes, a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c);
            }
        }
        &Op::AddScalar(a) | &Op::Reshape(a) => {
            if let Some(d) = accumulate(grads, nodes, a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        &Op::LeakyRelu(a, slope) => {
            let va = val(a).data();
            if let Some(d) = accumulate(grads, nodes, a) {
                d.iter_mut()
                    .zip(g.iter().zip(va))
                    .for_each(|(d, (g, v))| *d += if *v > 0.0 { *g } else { g * slope });
            }
        }
        &Op::Sigmoid(a) => {
            let out = node.value.data();
            if let Some(d) = accumulate(grads, nodes, a) {
                d.iter_mut()
                    .zip(g.iter().zip(out))
                    .for_each(|(d, (g, s))| *d += g * s * (1.0 - s));
            }
        }
        &Op::MulChannel { x, s } => {
            let (n, c, h, w) = val(x).dims4("mul_channel")?;
            let hw = h * w;
            let (vx, vs) = (val(x).data(), val(s).data());
            if let Some(d) = accumulate(grads, nodes, x) {
                for nc in 0..n * c {
                    let sv = vs[nc];
                    for i in nc * hw..(nc + 1) * hw {
                        d[i] += g[i] * sv;
                    }
                }
            }
            if let Some(d) = accumulate(grads, nodes, s) {
                for nc in 0..n * c {
                    d[nc] += (nc * hw..(nc + 1) * hw).map(|i| g[i] * vx[i]).sum::<f64>();
                }
            }
        }
        &Op::AddChannel { x, s } => {
            let (n, c, h, w) = val(x).dims4("add_channel")?;
            let hw = h * w;
            if let Some(d) = accumulate(grads, nodes, x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = accumulate(grads, nodes, s) {
                for nc in 0..n * c {
                    d[nc] += g[nc * hw..(nc + 1) * hw].iter().sum::<f64>();
                }
            }
        }
        Op::Concat(parts) => {
            let (n, ctot, h, w) = node.value.dims4("concat")?;
            let hw = h * w;
            let mut c0 = 0;
            for &p in parts {
                let c = val(p).shape()[1];
                if let Some(d) = accumulate(grads, nodes, p) {
                    for s in 0..n {
                        let src = &g[(s * ctot + c0) * hw..(s * ctot + c0 + c) * hw];
                        let dst = &mut d[s * c * hw..(s + 1) * c * hw];
                        dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                }
                c0 += c;
            }
        }
        &Op::GlobalAvgPool(a) => {
            let (n, c, h, w) = val(a).dims4("global_avg_pool")?;
            let hw = h * w;
            if let Some(d) = accumulate(grads, nodes, a) {
                for nc in 0..n * c {
                    let gv = g[nc] / hw as f64;
                    d[nc * hw..(nc + 1) * hw].iter_mut().for_each(|d| *d += gv);
                }
            }
        }
        &Op::Box3(a) => {
            let (n, c, h, w) = val(a).dims4("box3")?;
            if let Some(d) = accumulate(grads, nodes, a) {
                kernels::box3_backward(g, n * c, h, w, d);
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if let Some(d) = accumulate(grads, nodes, *x) {
                for (o, &i) in argmax.iter().enumerate() {
                    d[i] += g[o];
                }
            }
        }
        &Op::Resize(a) => {
            let (n, c, h, w) = val(a).dims4("resize")?;
            let (_, _, ho, wo) = node.value.dims4("resize")?;
            if let Some(d) = accumulate(grads, nodes, a) {
                kernels::resize_backward(g, n * c, h, w, ho, wo, d);
            }
        }
        Op::ChannelAffine { x, scale } => {
            let (n, c, h, w) = val(*x).dims4("channel_affine")?;
            let hw = h * w;
            if let Some(d) = accumulate(grads, nodes, *x) {
                for s in 0..n {
                    for (ch, sc) in scale.iter().enumerate().take(c) {
                        let base = (s * c + ch) * hw;
                        for i in base..base + hw {
                            d[i] += g[i] * sc;
                        }
                    }
                }
            }
        }
        &Op::MeanAbsDiff(a, b) => {
            let (va, vb) = (val(a).data(), val(b).data());
            let k = g[0] / va.len() as f64;
            if let Some(d) = accumulate(grads, nodes, a) {
                for i in 0..d.len() {
                    d[i] += k * sign(va[i] - vb[i]);
                }
            }
            if let Some(d) = accumulate(grads, nodes, b) {
                for i in 0..d.len() {
                    d[i] -= k * sign(va[i] - vb[i]);
                }
            }
        }
        &Op::Mean(a) => {
            let len = val(a).numel() as f64;
            if let Some(d) = accumulate(grads, nodes, a) {
                d.iter_mut().for_each(|d| *d += g[0] / len);
            }
        }
        &Op::Sum(a) => {
            if let Some(d) = accumulate(grads, nodes, a) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Transpose(a) => {
            let (b, m, n) = val(a).dims3("transpose")?;
            if let Some(d) = accumulate(grads, nodes, a) {
                for bi in 0..b {
                    for i in 0..m {
                        for j in 0..n {
                            d[bi * m * n + i * n + j] += g[bi * m * n + j * m + i];
                        }
                    }
                }
            }
        }
        &Op::MatMul(a, b) => {
            let (bs, m, k) = val(a).dims3("matmul")?;
            let n = val(b).shape()[2];
            let (va, vb) = (val(a).data(), val(b).data());
            if let Some(d) = accumulate(grads, nodes, a) {
                for bi in 0..bs {
                    // dA = G · Bᵀ
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..],
                        false,
                        &vb[bi * k * n..],
                        true,
                        1.0,
                        &mut d[bi * m * k..(bi + 1) * m * k],
                    );
                }
            }
            if let Some(d) = accumulate(grads, nodes, b) {
                for bi in 0..bs {
                    // dB = Aᵀ · G
                    kernels::gemm(
                        k,
                        m,
                        n,
                        &va[bi * m * k..],
                        true,
                        &g[bi * m * n..],
                        false,
                        1.0,
                        &mut d[bi * k * n..(bi + 1) * k * n],
                    );
                }
            }
        }
        &Op::Softmax(a) => {
            let out = node.value.data();
            let last = *node.value.shape().last().unwrap_or(&1);
            if let Some(d) = accumulate(grads, nodes, a) {
                for (row, (gr, yr)) in g.chunks(last).zip(out.chunks(last)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for j in 0..last {
                        d[row * last + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Gather { x, index } => {
            let (b, l, dim) = val(*x).dims3("gather")?;
            let lo = index.len() / b.max(1);
            if let Some(d) = accumulate(grads, nodes, *x) {
                for bi in 0..b {
                    for (o, &src) in index[bi * lo..(bi + 1) * lo].iter().enumerate() {
                        let from = &g[(bi * lo + o) * dim..(bi * lo + o + 1) * dim];
                        let to = &mut d[(bi * l + src) * dim..(bi * l + src + 1) * dim];
                        to.iter_mut().zip(from).for_each(|(t, f)| *t += f);
                    }
                }
            }
        }
    }
    Ok(())
}

fn take_grad(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.numel();
    Some(grads[id].take().unwrap_or_else(|| vec![0.0; len]))
}

fn put_grad(grads: &mut [Option<Vec<f64>>], id: usize, g: Option<Vec<f64>>) {
    if g.is_some() {
        grads[id] = g;
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    /// Copy of the value as a fresh constant leaf.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn same_shape(&self, other: &Var<'g>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(mismatch(op, a.shape(), b.shape()));
        }
        Ok((a, b))
    }

    fn zip_with(&self, other: &Var<'g>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = self.same_shape(other, op)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let a = self.value();
        Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| f(*v)).collect()).expect("same shape")
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let t = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, t, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let t = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, t, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let t = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, t, Op::Mul(self.id, other.id)))
    }

    pub fn div(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let t = self.zip_with(other, "div", |a, b| a / b)?;
        Ok(self.binary(other, t, Op::Div(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        let t = self.map(|v| v * c);
        self.unary(t, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        let t = self.map(|v| v + c);
        self.unary(t, Op::AddScalar(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g> {
        let t = self.map(|v| if v > 0.0 { v } else { v * slope });
        self.unary(t, Op::LeakyRelu(self.id, slope))
    }

    pub fn relu(&self) -> Var<'g> {
        self.leaky_relu(0.0)
    }

    pub fn sigmoid(&self) -> Var<'g> {
        let t = self.map(|v| 1.0 / (1.0 + (-v).exp()));
        self.unary(t, Op::Sigmoid(self.id))
    }

    pub fn conv2d(&self, weight: &Var<'g>, bias: Option<&Var<'g>>, stride: usize, padding: usize, dilation: usize) -> Result<Var<'g>> {
        let x = self.value();
        let w = weight.value();
        let (n, ci, h, wd) = x.dims4("conv2d")?;
        let (co, wci, kh, kw) = w.dims4("conv2d")?;
        if wci != ci {
            return Err(mismatch("conv2d", x.shape(), w.shape()));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(mismatch("conv2d bias", &b.shape(), &[co]));
            }
        }
        let geo = ConvGeometry { stride, padding, dilation };
        let (ho, wo) = match (geo.out_size(h, kh), geo.out_size(wd, kw)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(mismatch("conv2d output", x.shape(), w.shape())),
        };
        let d = ConvDims { ci, h, w: wd, kh, kw, ho, wo, geo };
        let bv = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(x.data(), n, w.data(), co, bv.as_deref().map(|b| b.data()), &d);
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        let t = Tensor::new(vec![n, co, ho, wo], out)?;
        Ok(self.graph.push(t, Op::Conv2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), geo }, rg))
    }

    /// Stride-1 deformable convolution; `offset` is `[N, 2·kh·kw, H', W']`
    /// holding (dy, dx) pairs per kernel tap.
    pub fn deform_conv2d(&self, offset: &Var<'g>, weight: &Var<'g>, bias: Option<&Var<'g>>, padding: usize) -> Result<Var<'g>> {
        let x = self.value();
        let w = weight.value();
        let off = offset.value();
        let (n, ci, h, wd) = x.dims4("deform_conv2d")?;
        let (co, wci, kh, kw) = w.dims4("deform_conv2d")?;
        if wci != ci {
            return Err(mismatch("deform_conv2d", x.shape(), w.shape()));
        }
        let geo = ConvGeometry { stride: 1, padding, dilation: 1 };
        let (ho, wo) = match (geo.out_size(h, kh), geo.out_size(wd, kw)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(mismatch("deform_conv2d output", x.shape(), w.shape())),
        };
        if off.shape() != [n, 2 * kh * kw, ho, wo] {
            return Err(mismatch("deform_conv2d offset", off.shape(), &[n, 2 * kh * kw, ho, wo]));
        }
        let d = ConvDims { ci, h, w: wd, kh, kw, ho, wo, geo };
        let bv = bias.map(|b| b.value());
        let out = kernels::deform_conv_forward(x.data(), off.data(), n, w.data(), co, bv.as_deref().map(|b| b.data()), &d);
        let rg = self.requires_grad()
            || offset.requires_grad()
            || weight.requires_grad()
            || bias.is_some_and(|b| b.requires_grad());
        let t = Tensor::new(vec![n, co, ho, wo], out)?;
        Ok(self.graph.push(
            t,
            Op::DeformConv2d { x: self.id, offset: offset.id, w: weight.id, b: bias.map(|b| b.id), geo },
            rg,
        ))
    }

    /// Multiplies every `[H, W]` plane by the matching entry of an `[N, C, 1, 1]` tensor.
    pub fn mul_channel(&self, s: &Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let sv = s.value();
        let (n, c, h, w) = x.dims4("mul_channel")?;
        if sv.shape() != [n, c, 1, 1] {
            return Err(mismatch("mul_channel", x.shape(), sv.shape()));
        }
        let hw = h * w;
        let mut out = x.data().to_vec();
        for nc in 0..n * c {
            out[nc * hw..(nc + 1) * hw].iter_mut().for_each(|v| *v *= sv.data()[nc]);
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.binary(s, t, Op::MulChannel { x: self.id, s: s.id }))
    }

    /// Adds the matching entry of an `[N, C, 1, 1]` tensor to every `[H, W]` plane.
    pub fn add_channel(&self, s: &Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let sv = s.value();
        let (n, c, h, w) = x.dims4("add_channel")?;
        if sv.shape() != [n, c, 1, 1] {
            return Err(mismatch("add_channel", x.shape(), sv.shape()));
        }
        let hw = h * w;
        let mut out = x.data().to_vec();
        for nc in 0..n * c {
            out[nc * hw..(nc + 1) * hw].iter_mut().for_each(|v| *v += sv.data()[nc]);
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.binary(s, t, Op::AddChannel { x: self.id, s: s.id }))
    }

    pub fn global_avg_pool(&self) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("global_avg_pool")?;
        let hw = h * w;
        let out = (0..n * c).map(|nc| x.data()[nc * hw..(nc + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        Ok(self.unary(Tensor::new(vec![n, c, 1, 1], out)?, Op::GlobalAvgPool(self.id)))
    }

    /// 3×3 local mean, zero padded, same spatial size.
    pub fn box3(&self) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("box3")?;
        let out = kernels::box3_forward(x.data(), n * c, h, w);
        Ok(self.unary(Tensor::new(x.shape().to_vec(), out)?, Op::Box3(self.id)))
    }

    pub fn max_pool2(&self) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("max_pool2")?;
        if h < 2 || w < 2 {
            return Err(AutogradError::InvalidArgument(format!("max_pool2 on {}x{}", h, w)));
        }
        let (out, argmax) = kernels::maxpool2_forward(x.data(), n * c, h, w);
        Ok(self.unary(Tensor::new(vec![n, c, h / 2, w / 2], out)?, Op::MaxPool2 { x: self.id, argmax }))
    }

    /// Corner-aligned bilinear resize of the spatial dimensions.
    pub fn resize(&self, height: usize, width: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("resize")?;
        if height == 0 || width == 0 {
            return Err(AutogradError::InvalidArgument("resize to an empty size".into()));
        }
        let out = kernels::resize_forward(x.data(), n * c, h, w, height, width);
        Ok(self.unary(Tensor::new(vec![n, c, height, width], out)?, Op::Resize(self.id)))
    }

    /// Per-channel `x·scale[c] + shift[c]` with fixed coefficients.
    pub fn channel_affine(&self, scale: &[f64], shift: &[f64]) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("channel_affine")?;
        if scale.len() != c || shift.len() != c {
            return Err(AutogradError::InvalidArgument(format!(
                "channel_affine expects {} coefficients, got {}/{}",
                c,
                scale.len(),
                shift.len()
            )));
        }
        let hw = h * w;
        let mut out = x.data().to_vec();
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                out[base..base + hw].iter_mut().for_each(|v| *v = *v * scale[ch] + shift[ch]);
            }
        }
        Ok(self.unary(Tensor::new(x.shape().to_vec(), out)?, Op::ChannelAffine { x: self.id, scale: scale.to_vec() }))
    }

    pub fn concat(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| AutogradError::InvalidArgument("concat of nothing".into()))?;
        let graph = first.graph;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = values[0].dims4("concat")?;
        let mut ctot = 0;
        for v in &values {
            let (vn, vc, vh, vw) = v.dims4("concat")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(mismatch("concat", values[0].shape(), v.shape()));
            }
            ctot += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for s in 0..n {
            for v in &values {
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(graph.push(Tensor::new(vec![n, ctot, h, w], out)?, Op::Concat(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Mean absolute difference, a shape-`[1]` result.
    pub fn mean_abs_diff(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.same_shape(other, "mean_abs_diff")?;
        let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        let t = Tensor::scalar(s / a.numel() as f64);
        Ok(self.binary(other, t, Op::MeanAbsDiff(self.id, other.id)))
    }

    pub fn mean(&self) -> Var<'g> {
        let a = self.value();
        let t = Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64);
        self.unary(t, Op::Mean(self.id))
    }

    pub fn sum(&self) -> Var<'g> {
        let a = self.value();
        let t = Tensor::scalar(a.data().iter().sum::<f64>());
        self.unary(t, Op::Sum(self.id))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'g>> {
        let t = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(t, Op::Reshape(self.id)))
    }

    /// Swaps the last two axes of a `[B, M, N]` tensor.
    pub fn transpose(&self) -> Result<Var<'g>> {
        let a = self.value();
        let (b, m, n) = a.dims3("transpose")?;
        let mut out = vec![0.0; a.numel()];
        for bi in 0..b {
            for i in 0..m {
                for j in 0..n {
                    out[bi * m * n + j * m + i] = a.data()[bi * m * n + i * n + j];
                }
            }
        }
        Ok(self.unary(Tensor::new(vec![b, n, m], out)?, Op::Transpose(self.id)))
    }

    /// Batched `[B, M, K] × [B, K, N]`.
    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let (bs, m, k) = a.dims3("matmul")?;
        let (bs2, k2, n) = b.dims3("matmul")?;
        if bs != bs2 || k != k2 {
            return Err(mismatch("matmul", a.shape(), b.shape()));
        }
        let mut out = vec![0.0; bs * m * n];
        for bi in 0..bs {
            kernels::gemm(m, k, n, &a.data()[bi * m * k..], false, &b.data()[bi * k * n..], false, 0.0, &mut out[bi * m * n..]);
        }
        Ok(self.binary(other, Tensor::new(vec![bs, m, n], out)?, Op::MatMul(self.id, other.id)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'g> {
        let a = self.value();
        let last = *a.shape().last().unwrap_or(&1);
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(last) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(a.shape().to_vec(), out).expect("same shape");
        self.unary(t, Op::Softmax(self.id))
    }

    /// Row gather on a `[B, L, D]` tensor: `index` holds `B·L'` row ids
    /// (batch-major), producing `[B, L', D]`.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let (b, l, d) = a.dims3("gather_rows")?;
        if b == 0 || index.len() % b != 0 || index.iter().any(|&i| i >= l) {
            return Err(AutogradError::InvalidArgument("gather_rows index out of range".into()));
        }
        let lo = index.len() / b;
        let mut out = Vec::with_capacity(b * lo * d);
        for bi in 0..b {
            for &src in &index[bi * lo..(bi + 1) * lo] {
                out.extend_from_slice(&a.data()[(bi * l + src) * d..(bi * l + src + 1) * d]);
            }
        }
        Ok(self.unary(Tensor::new(vec![b, lo, d], out)?, Op::Gather { x: self.id, index: index.to_vec() }))
    }
}
