use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, Conv2dSpec};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Operation record. Inputs are node indices; nodes are appended in execution
/// order, so the tape is already topologically sorted.
enum Op<S: Scalar> {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        spec: Conv2dSpec,
    },
    Relu(usize),
    /// `out[j] = in[index[j]]`; backs max pooling and nearest resizing.
    Gather {
        input: usize,
        index: Vec<usize>,
    },
    Cosine {
        features: usize,
        proto: usize,
        eps: S,
    },
    SquaredDistance {
        features: usize,
        proto: usize,
    },
    WeightedSpatialSum {
        features: usize,
        weights: Rc<[S]>,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Affine {
        input: usize,
        scale: S,
    },
    Sum(usize),
    Stack(Vec<usize>),
    Softmax {
        input: usize,
        axis: usize,
    },
    Nll {
        probs: usize,
        targets: Vec<Option<usize>>,
        floor: S,
    },
}

struct Node<S: Scalar> {
    value: Rc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records differentiable operations for one forward pass. A tape is built
/// per episode and dropped after `backward`.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> fmt::Debug for Tape<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Registers a leaf; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor<S>) -> Var<'_, S> {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&self, mut tensor: Tensor<S>) -> Var<'_, S> {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn param(&self, tensor: Tensor<S>) -> Var<'_, S> {
        self.leaf(tensor.with_grad())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack<'t>(&'t self, vars: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let shape = first.value().shape().to_vec();
        let mut data = Vec::with_capacity(shape.iter().product::<usize>() * vars.len());
        for v in vars {
            let val = v.value();
            if val.shape() != shape {
                return Err(Error::shape("stack", &shape, val.shape()));
            }
            data.extend_from_slice(val.data());
        }
        let mut out_shape = vec![vars.len()];
        out_shape.extend_from_slice(&shape);
        let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
        let rg = self.needs_grad(&ids);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Stack(ids), rg))
    }

    /// Sum of equally shaped tensors.
    pub fn add_n<'t>(&'t self, vars: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        let (first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_n of zero tensors".into()))?;
        rest.iter().try_fold(*first, |acc, v| acc.add(v))
    }

    /// Mean of equally shaped tensors.
    pub fn mean_of<'t>(&'t self, vars: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        let total = self.add_n(vars)?;
        if vars.len() == 1 {
            return Ok(total);
        }
        Ok(total.scale(S::one() / S::count(vars.len())))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let loss_val = &nodes[loss.id].value;
        if loss_val.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_val.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![S::one()]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn acc<'g, S: Scalar>(
    nodes: &[Node<S>],
    grads: &'g mut [Option<Vec<S>>],
    id: usize,
) -> Option<&'g mut Vec<S>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![S::zero(); len]))
}

fn backprop<S: Scalar>(nodes: &[Node<S>], node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let val = |id: usize| -> &Tensor<S> { &nodes[id].value };
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            spec,
        } => {
            let (x, k, b) = (val(*input), val(*kernel), val(*bias));
            let d = kernels::conv_dims(x.shape(), k.shape(), b.shape(), *spec)
                .expect("shapes validated in forward");
            let mut gi = acc(nodes, grads, *input).map(std::mem::take);
            let mut gk = acc(nodes, grads, *kernel).map(std::mem::take);
            let mut gb = acc(nodes, grads, *bias).map(std::mem::take);
            kernels::conv2d_backward(
                x.data(),
                k.data(),
                g,
                &d,
                *spec,
                gi.as_deref_mut(),
                gk.as_deref_mut(),
                gb.as_deref_mut(),
            );
            for (id, buf) in [(*input, gi), (*kernel, gk), (*bias, gb)] {
                if let Some(buf) = buf {
                    grads[id] = Some(buf);
                }
            }
        }
        Op::Relu(input) => {
            let x = val(*input);
            if let Some(gi) = acc(nodes, grads, *input) {
                for ((o, &xi), &gj) in gi.iter_mut().zip(x.data()).zip(g) {
                    if xi > S::zero() {
                        *o += gj;
                    }
                }
            }
        }
        Op::Gather { input, index } => {
            if let Some(gi) = acc(nodes, grads, *input) {
                for (&src, &gj) in index.iter().zip(g) {
                    gi[src] += gj;
                }
            }
        }
        Op::Cosine {
            features,
            proto,
            eps,
        } => {
            let (f, p) = (val(*features), val(*proto));
            let plane = g.len();
            let (dot, nf) = kernels::dot_and_norms(f.data(), p.data(), plane);
            let np = kernels::norm(p.data());
            // d cos / d f = p/den - dot*np*f/(nf*den^2), symmetric for p.
            // Below the eps clamp the denominator is constant.
            let mut coef_p = vec![S::zero(); plane];
            let mut coef_f_self = vec![S::zero(); plane];
            let mut coef_p_self = vec![S::zero(); plane];
            for i in 0..plane {
                let prod = nf[i] * np;
                if prod < *eps {
                    coef_p[i] = g[i] / *eps;
                    continue;
                }
                coef_p[i] = g[i] / prod;
                let common = g[i] * dot[i] / (prod * prod);
                coef_f_self[i] = common * np / nf[i];
                coef_p_self[i] = common * nf[i] / np;
            }
            if let Some(gf) = acc(nodes, grads, *features) {
                for (d, &pd) in p.data().iter().enumerate() {
                    let fd = &f.data()[d * plane..(d + 1) * plane];
                    let gd = &mut gf[d * plane..(d + 1) * plane];
                    for i in 0..plane {
                        gd[i] += coef_p[i] * pd - coef_f_self[i] * fd[i];
                    }
                }
            }
            if let Some(gp) = acc(nodes, grads, *proto) {
                for (d, &pd) in p.data().iter().enumerate() {
                    let fd = &f.data()[d * plane..(d + 1) * plane];
                    let mut s = S::zero();
                    for i in 0..plane {
                        s += coef_p[i] * fd[i] - coef_p_self[i] * pd;
                    }
                    gp[d] += s;
                }
            }
        }
        Op::SquaredDistance { features, proto } => {
            let (f, p) = (val(*features), val(*proto));
            let plane = g.len();
            let two = S::lit(2.0);
            let mut gp_acc = vec![S::zero(); p.numel()];
            let mut gf = acc(nodes, grads, *features);
            for (d, &pd) in p.data().iter().enumerate() {
                for i in 0..plane {
                    let diff = two * (f.data()[d * plane + i] - pd) * g[i];
                    if let Some(gf) = gf.as_deref_mut() {
                        gf[d * plane + i] += diff;
                    }
                    gp_acc[d] -= diff;
                }
            }
            if let Some(gp) = acc(nodes, grads, *proto) {
                for (o, v) in gp.iter_mut().zip(gp_acc) {
                    *o += v;
                }
            }
        }
        Op::WeightedSpatialSum { features, weights } => {
            if let Some(gf) = acc(nodes, grads, *features) {
                let plane = weights.len();
                for (d, &gd) in g.iter().enumerate() {
                    for (i, &w) in weights.iter().enumerate() {
                        if w != S::zero() {
                            gf[d * plane + i] += w * gd;
                        }
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for id in [*a, *b] {
                if let Some(gi) = acc(nodes, grads, id) {
                    for (o, &gj) in gi.iter_mut().zip(g) {
                        *o += gj;
                    }
                }
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((o, &y), &gj) in ga.iter_mut().zip(vb.data()).zip(g) {
                    *o += gj * y;
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for ((o, &x), &gj) in gb.iter_mut().zip(va.data()).zip(g) {
                    *o += gj * x;
                }
            }
        }
        Op::Affine { input, scale } => {
            if let Some(gi) = acc(nodes, grads, *input) {
                for (o, &gj) in gi.iter_mut().zip(g) {
                    *o += *scale * gj;
                }
            }
        }
        Op::Sum(input) => {
            if let Some(gi) = acc(nodes, grads, *input) {
                for o in gi.iter_mut() {
                    *o += g[0];
                }
            }
        }
        Op::Stack(ids) => {
            let chunk = g.len() / ids.len();
            for (k, &id) in ids.iter().enumerate() {
                if let Some(gi) = acc(nodes, grads, id) {
                    for (o, &gj) in gi.iter_mut().zip(&g[k * chunk..(k + 1) * chunk]) {
                        *o += gj;
                    }
                }
            }
        }
        Op::Softmax { input, axis } => {
            let y = &node.value;
            if let Some(gi) = acc(nodes, grads, *input) {
                let (outer, len, inner) = kernels::axis_split(y.shape(), *axis);
                let yd = y.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: S = (0..len).map(|k| g[at(k)] * yd[at(k)]).sum();
                        for k in 0..len {
                            gi[at(k)] += yd[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            }
        }
        Op::Nll {
            probs,
            targets,
            floor,
        } => {
            let p = val(*probs);
            if let Some(gp) = acc(nodes, grads, *probs) {
                let plane = targets.len();
                let n = S::count(plane);
                for (i, t) in targets.iter().enumerate() {
                    if let Some(j) = t {
                        let pj = p.data()[j * plane + i];
                        if pj > *floor {
                            gp[j * plane + i] -= g[0] / (n * pj);
                        }
                    }
                }
            }
        }
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(&[self.id])
    }

    fn same_tape(&self, other: &Var<'t, S>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    /// Cross-correlation of a `[C_in, H, W]` input with a `[C_out, C_in, kH, kW]` kernel.
    pub fn conv2d(&self, kernel: &Var<'t, S>, bias: &Var<'t, S>, spec: Conv2dSpec) -> Result<Self> {
        self.same_tape(kernel);
        self.same_tape(bias);
        let (x, k, b) = (self.value(), kernel.value(), bias.value());
        let d = kernels::conv_dims(x.shape(), k.shape(), b.shape(), spec)?;
        let out = kernels::conv2d_forward(x.data(), k.data(), b.data(), &d, spec);
        let t = Tensor::new([d.c_out, d.ho, d.wo], out)?;
        let rg = self.tape.needs_grad(&[self.id, kernel.id, bias.id]);
        Ok(self.tape.push(
            t,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                bias: bias.id,
                spec,
            },
            rg,
        ))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&self) -> Self {
        let x = self.value();
        let out = x.map(|v| if v > S::zero() { v } else { S::zero() });
        self.tape.push(out, Op::Relu(self.id), self.requires_grad())
    }

    /// Max pooling over `[C, H, W]`; gradient goes to the first maximal element
    /// of each window in row-major order.
    pub fn maxpool2d(&self, window: usize, stride: usize) -> Result<Self> {
        let x = self.value();
        let dims = x.chw()?;
        let (out, argmax, ho, wo) = kernels::maxpool2d_forward(x.data(), dims, window, stride)?;
        let t = Tensor::new([dims.0, ho, wo], out)?;
        Ok(self.tape.push(
            t,
            Op::Gather {
                input: self.id,
                index: argmax,
            },
            self.requires_grad(),
        ))
    }

    /// Nearest-neighbour resize of `[C, H, W]` to `[C, height, width]`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "resize target must be at least 1x1, got {height}x{width}"
            )));
        }
        let x = self.value();
        let dims = x.chw()?;
        let index = kernels::nearest_indices(dims, (height, width));
        let data = index.iter().map(|&i| x.data()[i]).collect();
        let t = Tensor::new([dims.0, height, width], data)?;
        Ok(self.tape.push(
            t,
            Op::Gather {
                input: self.id,
                index,
            },
            self.requires_grad(),
        ))
    }

    fn spatial_pair(&self, proto: &Var<'t, S>, op: &'static str) -> Result<(usize, usize, usize)> {
        self.same_tape(proto);
        let f = self.value();
        let p = proto.value();
        let (d, h, w) = f.chw()?;
        if p.shape() != [d] {
            return Err(Error::shape(op, f.shape(), p.shape()));
        }
        Ok((d, h, w))
    }

    /// Cosine similarity between every spatial feature vector of `[D, H, W]`
    /// and a `[D]` prototype, `<f, p> / max(|f| |p|, eps)`.
    pub fn cosine_similarity_map(&self, proto: &Var<'t, S>, eps: S) -> Result<Self> {
        let (_, h, w) = self.spatial_pair(proto, "cosine_similarity_map")?;
        let (f, p) = (self.value(), proto.value());
        let (dot, nf) = kernels::dot_and_norms(f.data(), p.data(), h * w);
        let np = kernels::norm(p.data());
        let data = dot
            .iter()
            .zip(&nf)
            .map(|(&d, &n)| d / (n * np).max(eps))
            .collect();
        let rg = self.tape.needs_grad(&[self.id, proto.id]);
        Ok(self.tape.push(
            Tensor::new([h, w], data)?,
            Op::Cosine {
                features: self.id,
                proto: proto.id,
                eps,
            },
            rg,
        ))
    }

    /// `|f(x, y) - p|^2` at every location of a `[D, H, W]` map.
    pub fn squared_distance_map(&self, proto: &Var<'t, S>) -> Result<Self> {
        let (_, h, w) = self.spatial_pair(proto, "squared_distance_map")?;
        let (f, p) = (self.value(), proto.value());
        let plane = h * w;
        let mut data = vec![S::zero(); plane];
        for (d, &pd) in p.data().iter().enumerate() {
            for (i, o) in data.iter_mut().enumerate() {
                let diff = f.data()[d * plane + i] - pd;
                *o += diff * diff;
            }
        }
        let rg = self.tape.needs_grad(&[self.id, proto.id]);
        Ok(self.tape.push(
            Tensor::new([h, w], data)?,
            Op::SquaredDistance {
                features: self.id,
                proto: proto.id,
            },
            rg,
        ))
    }

    /// `out[d] = sum_(x,y) weights(x,y) * f(d, x, y)` for `[D, H, W]` features.
    /// Locations with zero weight are never read.
    pub fn weighted_spatial_sum(&self, weights: &[S]) -> Result<Self> {
        let f = self.value();
        let (d, h, w) = f.chw()?;
        if weights.len() != h * w {
            return Err(Error::shape(
                "weighted_spatial_sum",
                f.shape(),
                &[weights.len()],
            ));
        }
        let plane = h * w;
        let mut out = vec![S::zero(); d];
        for (ch, o) in out.iter_mut().enumerate() {
            let fd = &f.data()[ch * plane..(ch + 1) * plane];
            for (i, &wt) in weights.iter().enumerate() {
                if wt != S::zero() {
                    *o += wt * fd[i];
                }
            }
        }
        Ok(self.tape.push(
            Tensor::new([d], out)?,
            Op::WeightedSpatialSum {
                features: self.id,
                weights: weights.into(),
            },
            self.requires_grad(),
        ))
    }

    fn binary(
        &self,
        other: &Var<'t, S>,
        op: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(&self, other: &Var<'t, S>) -> Result<Self> {
        let t = self.binary(other, "add", |x, y| x + y)?;
        let rg = self.tape.needs_grad(&[self.id, other.id]);
        Ok(self.tape.push(t, Op::Add(self.id, other.id), rg))
    }

    pub fn mul(&self, other: &Var<'t, S>) -> Result<Self> {
        let t = self.binary(other, "mul", |x, y| x * y)?;
        let rg = self.tape.needs_grad(&[self.id, other.id]);
        Ok(self.tape.push(t, Op::Mul(self.id, other.id), rg))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&self, scale: S, shift: S) -> Self {
        let out = self.value().map(|v| scale * v + shift);
        self.tape.push(
            out,
            Op::Affine {
                input: self.id,
                scale,
            },
            self.requires_grad(),
        )
    }

    pub fn scale(&self, factor: S) -> Self {
        self.affine(factor, S::zero())
    }

    pub fn sum(&self) -> Self {
        let total = self.value().data().iter().copied().sum();
        self.tape.push(
            Tensor::scalar(total),
            Op::Sum(self.id),
            self.requires_grad(),
        )
    }

    pub fn mean(&self) -> Self {
        let n = self.value().numel();
        self.sum().scale(S::one() / S::count(n))
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {:?}",
                x.shape()
            )));
        }
        let data = kernels::softmax_forward(x.data(), x.shape(), axis);
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.push(
            t,
            Op::Softmax {
                input: self.id,
                axis,
            },
            self.requires_grad(),
        ))
    }

    /// Mean negative log-likelihood of per-location targets for a
    /// `[J, H, W]` probability map: `-(1/N) sum log max(p[t(i), i], floor)`.
    /// A `None` target contributes the constant penalty `-log(floor)`.
    pub fn nll(&self, targets: &[Option<usize>], floor: S) -> Result<Self> {
        let p = self.value();
        let (j, h, w) = p.chw()?;
        let plane = h * w;
        if targets.len() != plane {
            return Err(Error::shape("nll", p.shape(), &[targets.len()]));
        }
        let mut total = S::zero();
        for (i, t) in targets.iter().enumerate() {
            let prob = match *t {
                Some(c) if c < j => p.data()[c * plane + i],
                Some(c) => {
                    return Err(Error::InvalidArgument(format!(
                        "nll target channel {c} out of range for {j} channels"
                    )))
                }
                None => S::zero(),
            };
            total -= prob.max(floor).ln();
        }
        let loss = total / S::count(plane);
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::Nll {
                probs: self.id,
                targets: targets.to_vec(),
                floor,
            },
            self.requires_grad(),
        ))
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to `var`; zeros when `var` did not influence the loss.
    pub fn wrt(&self, var: &Var<'_, S>) -> Tensor<S> {
        let shape = self.shapes[var.id].clone();
        match &self.grads[var.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Whether any gradient flowed into `var`.
    pub fn reached(&self, var: &Var<'_, S>) -> bool {
        self.grads[var.id].is_some()
    }
}
