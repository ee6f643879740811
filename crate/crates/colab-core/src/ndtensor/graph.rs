use std::collections::BTreeMap;

use super::params::GradMap;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(f64),
    MulScalar(f64),
    Relu,
    Sigmoid,
    Exp,
    Log,
    Clamp { lo: f64, hi: f64 },
    Matmul,
    Conv2d { stride: usize, pad: usize },
    BiasAdd,
    UpsampleNearest2,
    SoftmaxChannels,
    Sum,
    Mean,
    SumSpatial,
    ConcatChannels,
    SliceChannels { start: usize, end: usize },
    Reshape,
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor,
    name: Option<String>,
    needs_grad: bool,
}

/// Eager-forward tape. Ops append nodes; `backward` walks the tape in
/// reverse creation order, which is a valid topological order because every
/// parent precedes its consumers.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: BTreeMap<String, NodeId>,
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

fn want4(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape().len() != 4 {
        return Err(Error::shape(op, format!("expected rank 4, got {:?}", t.shape())));
    }
    Ok(())
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

    /// Constant input. Gradient tracking follows `value.requires_grad`
    /// (off by default), but only named nodes appear in backward's output.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let needs = value.requires_grad;
        self.push(Op::Leaf, vec![], value, None, needs)
    }

    /// Named parameter. Gradients for it are collected when `trainable`.
    pub fn param(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<NodeId> {
        if self.names.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        let id = self.push(Op::Leaf, vec![], value, Some(name.to_string()), trainable);
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    fn push(
        &mut self,
        op: Op,
        parents: Vec<NodeId>,
        value: Tensor,
        name: Option<String>,
        needs_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            op,
            parents,
            value,
            name,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor) -> NodeId {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(op, parents, value, None, needs)
    }

    fn binary_same_shape(&mut self, op: Op, opname: &'static str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                opname,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data: Vec<f64> = match op {
            Op::Add => ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect(),
            Op::Sub => ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect(),
            Op::Mul => ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
            Op::Div => ta.data().iter().zip(tb.data()).map(|(x, y)| x / y).collect(),
            _ => unreachable!(),
        };
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_op(op, vec![a, b], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Div, "div", a, b)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let t = &self.nodes[a.0].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + s).collect()).unwrap();
        self.push_op(Op::AddScalar(s), vec![a], value)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let t = &self.nodes[a.0].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect()).unwrap();
        self.push_op(Op::MulScalar(s), vec![a], value)
    }

    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let n = self.mul_scalar(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let t = &self.nodes[a.0].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect()).unwrap();
        self.push_op(op, vec![a], value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        // NaN must survive so diagnostics can trace it to its source
        self.unary(Op::Relu, a, |x| if x > 0.0 || x.is_nan() { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, a, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log, a, f64::ln)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(Op::Clamp { lo, hi }, a, |x| x.clamp(lo, hi))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data()[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * tb.data()[p * n + j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(Op::Matmul, vec![a, b], value))
    }

    /// 2D cross-correlation, NCHW input, OIHW kernel, zero padding, odd
    /// kernel extent. Output spatial size floors: (h + 2p - k) / s + 1.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        want4("conv2d", tx)?;
        want4("conv2d", tw)?;
        let (n, ci, h, wi) = dims4(tx);
        let (co, wci, kh, kw) = dims4(tw);
        if wci != ci {
            return Err(Error::shape(
                "conv2d",
                format!("input has {ci} channels, kernel expects {wci}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!("conv2d kernel extent must be odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        if h + 2 * pad < kh || wi + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wi} (pad {pad})"),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wi + 2 * pad - kw) / stride + 1;
        let value = conv2d_forward(tx, tw, stride, pad, n, ci, h, wi, co, kh, kw, ho, wo);
        Ok(self.push_op(Op::Conv2d { stride, pad }, vec![x, w], value))
    }

    /// Adds a per-channel bias `[C]` to an NCHW tensor.
    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        want4("bias_add", tx)?;
        let (n, c, h, w) = dims4(tx);
        if tb.shape() != [c] {
            return Err(Error::shape(
                "bias_add",
                format!("bias {:?} for {} channels", tb.shape(), c),
            ));
        }
        let mut out = tx.data().to_vec();
        for bn in 0..n {
            for ch in 0..c {
                let bv = tb.data()[ch];
                let base = (bn * c + ch) * h * w;
                for v in &mut out[base..base + h * w] {
                    *v += bv;
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push_op(Op::BiasAdd, vec![x, b], value))
    }

    /// Nearest-neighbor 2x spatial upsampling of an NCHW tensor.
    pub fn upsample_nearest2(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        want4("upsample_nearest2", tx)?;
        let (n, c, h, w) = dims4(tx);
        let mut out = vec![0.0; n * c * 4 * h * w];
        let (h2, w2) = (2 * h, 2 * w);
        for bn in 0..n {
            for ch in 0..c {
                let ibase = (bn * c + ch) * h * w;
                let obase = (bn * c + ch) * h2 * w2;
                for y in 0..h2 {
                    let irow = ibase + (y / 2) * w;
                    let orow = obase + y * w2;
                    for xcol in 0..w2 {
                        out[orow + xcol] = tx.data()[irow + xcol / 2];
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, h2, w2], out)?;
        Ok(self.push_op(Op::UpsampleNearest2, vec![x], value))
    }

    /// Softmax over the channel axis of an NCHW tensor, computed with
    /// max subtraction per spatial position.
    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        want4("softmax_channels", tx)?;
        let (n, c, h, w) = dims4(tx);
        let hw = h * w;
        let mut out = vec![0.0; tx.numel()];
        for bn in 0..n {
            for px in 0..hw {
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..c {
                    mx = mx.max(tx.data()[(bn * c + ch) * hw + px]);
                }
                let mut denom = 0.0;
                for ch in 0..c {
                    let e = (tx.data()[(bn * c + ch) * hw + px] - mx).exp();
                    out[(bn * c + ch) * hw + px] = e;
                    denom += e;
                }
                for ch in 0..c {
                    out[(bn * c + ch) * hw + px] /= denom;
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push_op(Op::SoftmaxChannels, vec![x], value))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        let value = Tensor::scalar(t.data().iter().sum());
        self.push_op(Op::Sum, vec![a], value)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push_op(Op::Mean, vec![a], value)
    }

    /// Reduces NCHW to [N, C] by summing over the spatial axes.
    pub fn sum_spatial(&mut self, a: NodeId) -> Result<NodeId> {
        let t = &self.nodes[a.0].value;
        want4("sum_spatial", t)?;
        let (n, c, h, w) = dims4(t);
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            out[i] = t.data()[i * h * w..(i + 1) * h * w].iter().sum();
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push_op(Op::SumSpatial, vec![a], value))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_channels needs at least one input"));
        }
        let first = &self.nodes[parts[0].0].value;
        want4("concat_channels", first)?;
        let (n, _, h, w) = dims4(first);
        let mut ctotal = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            want4("concat_channels", t)?;
            let (pn, pc, ph, pw) = dims4(t);
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs leading {:?}", t.shape(), first.shape()),
                ));
            }
            ctotal += pc;
        }
        let hw = h * w;
        let mut out = vec![0.0; n * ctotal * hw];
        for bn in 0..n {
            let mut coff = 0;
            for p in parts {
                let t = &self.nodes[p.0].value;
                let pc = t.shape()[1];
                let src = &t.data()[bn * pc * hw..(bn + 1) * pc * hw];
                let dst = (bn * ctotal + coff) * hw;
                out[dst..dst + pc * hw].copy_from_slice(src);
                coff += pc;
            }
        }
        let value = Tensor::new(vec![n, ctotal, h, w], out)?;
        Ok(self.push_op(Op::ConcatChannels, parts.to_vec(), value))
    }

    /// Repeats a single-channel NCHW tensor `t` times along channels.
    pub fn tile_channels(&mut self, a: NodeId, t: usize) -> Result<NodeId> {
        let parts = vec![a; t];
        self.concat_channels(&parts)
    }

    /// Takes channels start..end of an NCHW tensor.
    pub fn slice_channels(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = &self.nodes[a.0].value;
        want4("slice_channels", t)?;
        let (n, c, h, w) = dims4(t);
        if start >= end || end > c {
            return Err(Error::invalid(format!(
                "slice_channels range {start}..{end} out of {c} channels"
            )));
        }
        let hw = h * w;
        let cs = end - start;
        let mut out = vec![0.0; n * cs * hw];
        for bn in 0..n {
            let src = (bn * c + start) * hw;
            let dst = bn * cs * hw;
            out[dst..dst + cs * hw].copy_from_slice(&t.data()[src..src + cs * hw]);
        }
        let value = Tensor::new(vec![n, cs, h, w], out)?;
        Ok(self.push_op(Op::SliceChannels { start, end }, vec![a], value))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} to {:?}", t.shape(), shape),
            ));
        }
        let value = Tensor::new(shape, t.data().to_vec())?;
        Ok(self.push_op(Op::Reshape, vec![a], value))
    }

    /// Reverse-mode sweep from a scalar loss. Returns gradients for every
    /// named trainable parameter; parameters the loss does not reach get
    /// zeros. The graph is not mutated, so repeated calls give identical
    /// results.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        let lnode = &self.nodes[loss.0];
        if lnode.value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lnode.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lnode.value.shape().to_vec(), 1.0));
        let mut out = GradMap::new();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if let Some(name) = &node.name {
                    out.insert(name.clone(), g);
                }
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        for (name, id) in &self.names {
            if self.nodes[id.0].needs_grad && !out.contains_key(name) {
                out.insert(name.clone(), Tensor::zeros(self.nodes[id.0].value.shape().to_vec()));
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let pv = |k: usize| &self.nodes[node.parents[k].0].value;
        let needs = |k: usize| self.nodes[node.parents[k].0].needs_grad;
        let mut give = |k: usize, contrib: Tensor| {
            let slot = &mut grads[node.parents[k].0];
            match slot {
                None => *slot = Some(contrib),
                Some(acc) => {
                    for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                        *a += c;
                    }
                }
            }
        };

        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add => {
                if needs(0) {
                    give(0, g.clone());
                }
                if needs(1) {
                    give(1, g.clone());
                }
            }
            Op::Sub => {
                if needs(0) {
                    give(0, g.clone());
                }
                if needs(1) {
                    let d = g.data().iter().map(|v| -v).collect();
                    give(1, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
            }
            Op::Mul => {
                if needs(0) {
                    let d = g.data().iter().zip(pv(1).data()).map(|(gv, b)| gv * b).collect();
                    give(0, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
                if needs(1) {
                    let d = g.data().iter().zip(pv(0).data()).map(|(gv, a)| gv * a).collect();
                    give(1, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
            }
            Op::Div => {
                let (a, b) = (pv(0), pv(1));
                if needs(0) {
                    let d = g.data().iter().zip(b.data()).map(|(gv, bv)| gv / bv).collect();
                    give(0, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
                if needs(1) {
                    let d = g
                        .data()
                        .iter()
                        .zip(a.data().iter().zip(b.data()))
                        .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                        .collect();
                    give(1, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
            }
            Op::AddScalar(_) => {
                if needs(0) {
                    give(0, g.clone());
                }
            }
            Op::MulScalar(s) => {
                if needs(0) {
                    let d = g.data().iter().map(|gv| gv * s).collect();
                    give(0, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
            }
            Op::Relu => {
                if needs(0) {
                    let d = g
                        .data()
                        .iter()
                        .zip(pv(0).data())
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    give(0, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
            }
            Op::Sigmoid => {
                if needs(0) {
                    let d = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect();
                    give(0, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
            }
            Op::Exp => {
                if needs(0) {
                    let d = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, y)| gv * y)
                        .collect();
                    give(0, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
            }
            Op::Log => {
                if needs(0) {
                    let d = g.data().iter().zip(pv(0).data()).map(|(gv, x)| gv / x).collect();
                    give(0, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
            }
            Op::Clamp { lo, hi } => {
                if needs(0) {
                    let d = g
                        .data()
                        .iter()
                        .zip(pv(0).data())
                        .map(|(gv, x)| if *x > *lo && *x < *hi { *gv } else { 0.0 })
                        .collect();
                    give(0, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
            }
            Op::Matmul => {
                let (a, b) = (pv(0), pv(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if needs(0) {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g.data()[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += gv * b.data()[p * n + j];
                            }
                        }
                    }
                    give(0, Tensor::new(vec![m, k], ga).unwrap());
                }
                if needs(1) {
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = a.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g.data()[i * n + j];
                            }
                        }
                    }
                    give(1, Tensor::new(vec![k, n], gb).unwrap());
                }
            }
            Op::Conv2d { stride, pad } => {
                let (x, w) = (pv(0), pv(1));
                let (gx, gw) = conv2d_backward(x, w, g, *stride, *pad, needs(0), needs(1));
                if let Some(gx) = gx {
                    give(0, gx);
                }
                if let Some(gw) = gw {
                    give(1, gw);
                }
            }
            Op::BiasAdd => {
                if needs(0) {
                    give(0, g.clone());
                }
                if needs(1) {
                    let (n, c, h, w) = dims4(&node.value);
                    let mut gb = vec![0.0; c];
                    for bn in 0..n {
                        for ch in 0..c {
                            let base = (bn * c + ch) * h * w;
                            gb[ch] += g.data()[base..base + h * w].iter().sum::<f64>();
                        }
                    }
                    give(1, Tensor::new(vec![c], gb).unwrap());
                }
            }
            Op::UpsampleNearest2 => {
                if needs(0) {
                    let (n, c, h2, w2) = dims4(&node.value);
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut gx = vec![0.0; n * c * h * w];
                    for i in 0..n * c {
                        let ibase = i * h * w;
                        let obase = i * h2 * w2;
                        for y in 0..h2 {
                            let irow = ibase + (y / 2) * w;
                            let orow = obase + y * w2;
                            for xc in 0..w2 {
                                gx[irow + xc / 2] += g.data()[orow + xc];
                            }
                        }
                    }
                    give(0, Tensor::new(vec![n, c, h, w], gx).unwrap());
                }
            }
            Op::SoftmaxChannels => {
                if needs(0) {
                    let y = node.value.data();
                    let (n, c, h, w) = dims4(&node.value);
                    let hw = h * w;
                    let mut gx = vec![0.0; y.len()];
                    for bn in 0..n {
                        for px in 0..hw {
                            let mut dot = 0.0;
                            for ch in 0..c {
                                let i = (bn * c + ch) * hw + px;
                                dot += g.data()[i] * y[i];
                            }
                            for ch in 0..c {
                                let i = (bn * c + ch) * hw + px;
                                gx[i] = y[i] * (g.data()[i] - dot);
                            }
                        }
                    }
                    give(0, Tensor::new(node.value.shape().to_vec(), gx).unwrap());
                }
            }
            Op::Sum => {
                if needs(0) {
                    give(0, Tensor::full(pv(0).shape().to_vec(), g.item()));
                }
            }
            Op::Mean => {
                if needs(0) {
                    let p = pv(0);
                    give(0, Tensor::full(p.shape().to_vec(), g.item() / p.numel() as f64));
                }
            }
            Op::SumSpatial => {
                if needs(0) {
                    let p = pv(0);
                    let (n, c, h, w) = dims4(p);
                    let mut gx = vec![0.0; p.numel()];
                    for i in 0..n * c {
                        let gv = g.data()[i];
                        for v in &mut gx[i * h * w..(i + 1) * h * w] {
                            *v = gv;
                        }
                    }
                    give(0, Tensor::new(p.shape().to_vec(), gx).unwrap());
                }
            }
            Op::ConcatChannels => {
                let (n, ctotal, h, w) = dims4(&node.value);
                let hw = h * w;
                let mut coff = 0;
                for k in 0..node.parents.len() {
                    let pc = pv(k).shape()[1];
                    if needs(k) {
                        let mut gp = vec![0.0; n * pc * hw];
                        for bn in 0..n {
                            let src = (bn * ctotal + coff) * hw;
                            let dst = bn * pc * hw;
                            gp[dst..dst + pc * hw].copy_from_slice(&g.data()[src..src + pc * hw]);
                        }
                        give(k, Tensor::new(vec![n, pc, h, w], gp).unwrap());
                    }
                    coff += pc;
                }
            }
            Op::SliceChannels { start, .. } => {
                if needs(0) {
                    let p = pv(0);
                    let (n, c, h, w) = dims4(p);
                    let cs = node.value.shape()[1];
                    let hw = h * w;
                    let mut gp = vec![0.0; p.numel()];
                    for bn in 0..n {
                        let dst = (bn * c + start) * hw;
                        let src = bn * cs * hw;
                        gp[dst..dst + cs * hw].copy_from_slice(&g.data()[src..src + cs * hw]);
                    }
                    give(0, Tensor::new(p.shape().to_vec(), gp).unwrap());
                }
            }
            Op::Reshape => {
                if needs(0) {
                    give(0, Tensor::new(pv(0).shape().to_vec(), g.data().to_vec()).unwrap());
                }
            }
        }
    }

    /// Earliest node holding a non-finite value, described for diagnostics.
    /// Attaches a diagnostic label to a node so error reports can point at
    /// it. Unlike `param`, the node is not registered for gradient
    /// collection.
    pub fn name_node(&mut self, id: NodeId, name: &str) {
        self.nodes[id.0].name = Some(name.to_string());
    }

    /// Smallest |input| feeding any Relu node, or infinity if there are
    /// none. Finite-difference checks use this to reject configurations
    /// whose gradients sit on a kink.
    pub fn relu_input_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Relu = node.op {
                let parent = &self.nodes[node.parents[0].0];
                for v in parent.value.data() {
                    margin = margin.min(v.abs());
                }
            }
        }
        margin
    }

    pub fn first_nonfinite(&self) -> Option<String> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.value.data().iter().any(|v| !v.is_finite()) {
                let label = node.name.clone().unwrap_or_else(|| format!("node {i}"));
                return Some(format!("{label} ({:?}, shape {:?})", node.op, node.value.shape()));
            }
        }
        None
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    n: usize,
    ci: usize,
    h: usize,
    wi: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
) -> Tensor {
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; n * co * ho * wo];
    let ip = pad as isize;
    for bn in 0..n {
        for oc in 0..co {
            let obase = (bn * co + oc) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..ci {
                        let xbase = (bn * ci + ic) * h * wi;
                        let wbase = (oc * ci + ic) * kh * kw;
                        for ky in 0..kh {
                            let y = (oy * stride + ky) as isize - ip;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let xrow = xbase + y as usize * wi;
                            let wrow = wbase + ky * kw;
                            for kx in 0..kw {
                                let xc = (ox * stride + kx) as isize - ip;
                                if xc < 0 || xc >= wi as isize {
                                    continue;
                                }
                                acc += xd[xrow + xc as usize] * wd[wrow + kx];
                            }
                        }
                    }
                    out[obase + oy * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, ho, wo], out).unwrap()
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, ci, h, wi) = dims4(x);
    let (co, _, kh, kw) = dims4(w);
    let (_, _, ho, wo) = dims4(g);
    let ip = pad as isize;
    let mut gx = if need_x { vec![0.0; x.numel()] } else { vec![] };
    let mut gw = if need_w { vec![0.0; w.numel()] } else { vec![] };
    let xd = x.data();
    let wd = w.data();
    for bn in 0..n {
        for oc in 0..co {
            let gbase = (bn * co + oc) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = g.data()[gbase + oy * wo + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ic in 0..ci {
                        let xbase = (bn * ci + ic) * h * wi;
                        let wbase = (oc * ci + ic) * kh * kw;
                        for ky in 0..kh {
                            let y = (oy * stride + ky) as isize - ip;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let xrow = xbase + y as usize * wi;
                            let wrow = wbase + ky * kw;
                            for kx in 0..kw {
                                let xc = (ox * stride + kx) as isize - ip;
                                if xc < 0 || xc >= wi as isize {
                                    continue;
                                }
                                if need_w {
                                    gw[wrow + kx] += gv * xd[xrow + xc as usize];
                                }
                                if need_x {
                                    gx[xrow + xc as usize] += gv * wd[wrow + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        need_x.then(|| Tensor::new(x.shape().to_vec(), gx).unwrap()),
        need_w.then(|| Tensor::new(w.shape().to_vec(), gw).unwrap()),
    )
}
