//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! Nodes are appended in evaluation order, so the tape is already
//! topologically sorted and the backward pass is a single reverse sweep.

use crate::error::{Error, Result};
use crate::params::GradientStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Input,
    Param { name: String, trainable: bool },
    MatMul(NodeId, NodeId),
    /// Adds a per-channel bias along axis 1.
    AddBias(NodeId, NodeId),
    Conv2d { input: NodeId, weight: NodeId, pad: usize },
    Relu(NodeId),
    MaxPool2 { input: NodeId, argmax: Vec<usize> },
    Dropout { input: NodeId, mask: Vec<T> },
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Square(NodeId),
    Sum(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    scope: String,
}

/// Dropout masks sampled during one forward pass, in layer order.
///
/// Feeding them back into a second pass makes that pass see exactly the same
/// sub-network, so two losses on one batch differ only through the parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DropoutMasks<T: Scalar = f32> {
    pub(crate) masks: Vec<Vec<T>>,
}

impl<T: Scalar> DropoutMasks<T> {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn get(&self, layer: usize) -> Option<&[T]> {
        self.masks.get(layer).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    output: Option<NodeId>,
    backward_done: bool,
    scope: String,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            output: None,
            backward_done: false,
            scope: String::new(),
        }
    }

    /// Name attached to subsequently recorded nodes; used in error messages.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numeric {
                layer: self.scope_name(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scope: self.scope.clone(),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn scope_name(&self) -> String {
        if self.scope.is_empty() {
            "<graph>".to_string()
        } else {
            self.scope.clone()
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, Op::Input, false)
    }

    /// Records a named parameter leaf. Frozen parameters take part in the
    /// forward pass but never receive a gradient.
    pub fn param(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<NodeId> {
        self.push(
            value,
            Op::Param {
                name: name.to_string(),
                trainable,
            },
            trainable,
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                format!("matmul in `{}`", self.scope_name()),
                sa,
                sb,
            ));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = av[i * k + p];
                if x == T::zero() {
                    continue;
                }
                let brow = &bv[p * m..(p + 1) * m];
                for (o, &w) in row.iter_mut().zip(brow) {
                    *o = *o + x * w;
                }
            }
        }
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), rg)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let sb = self.value(bias).shape();
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::shape(
                format!("bias in `{}`", self.scope_name()),
                &sx[1..2.min(sx.len())],
                sb,
            ));
        }
        let c = sx[1];
        let inner: usize = sx[2..].iter().product();
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v + bv[(i / inner) % c];
        }
        let rg = self.needs(x) || self.needs(bias);
        self.push(Tensor::new(sx, out)?, Op::AddBias(x, bias), rg)
    }

    /// Stride-1 convolution with `pad` zeros on every border.
    /// Input `[n, c, h, w]`, weight `[o, c, kh, kw]`.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, pad: usize) -> Result<NodeId> {
        let si = self.value(input).shape().to_vec();
        let sw = self.value(weight).shape().to_vec();
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] {
            return Err(Error::shape(
                format!("conv2d in `{}`", self.scope_name()),
                &si,
                &sw,
            ));
        }
        let geo = ConvGeometry::new(&si, &sw, pad).ok_or_else(|| {
            Error::shape(format!("conv2d in `{}`", self.scope_name()), &si, &sw)
        })?;
        let out = geo.forward(self.value(input).data(), self.value(weight).data());
        let rg = self.needs(input) || self.needs(weight);
        self.push(
            Tensor::new(vec![geo.n, geo.o, geo.oh, geo.ow], out)?,
            Op::Conv2d {
                input,
                weight,
                pad,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.needs(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// 2×2 max pooling with stride 2 over `[n, c, h, w]`; odd trailing
    /// rows/columns are dropped.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape(
                format!("max_pool2 in `{}`", self.scope_name()),
                &[0, 0, 2, 2],
                &s,
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.needs(x);
        self.push(
            Tensor::new(vec![n, c, oh, ow], out)?,
            Op::MaxPool2 { input: x, argmax },
            rg,
        )
    }

    /// Multiplies by a precomputed mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<T>) -> Result<NodeId> {
        let v = self.value(x);
        if mask.len() != v.len() {
            return Err(Error::shape(
                format!("dropout mask in `{}`", self.scope_name()),
                &[v.len()],
                &[mask.len()],
            ));
        }
        let out: Vec<T> = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let shape = v.shape().to_vec();
        let rg = self.needs(x);
        self.push(Tensor::new(shape, out)?, Op::Dropout { input: x, mask }, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(x);
        self.push(out, Op::Reshape(x), rg)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                format!("elementwise op in `{}`", self.scope_name()),
                va.shape(),
                vb.shape(),
            ));
        }
        let out: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, out)?, op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.needs(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| v * v);
        let rg = self.needs(x);
        self.push(out, Op::Square(x), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = T::from_f64(self.value(x).sum_f64());
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits. Returns the node
    /// and the loss accumulated in 64-bit precision.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<(NodeId, f64)> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                format!("cross-entropy in `{}`", self.scope_name()),
                &[labels.len(), 0],
                &s,
            ));
        }
        let (n, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::config(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * classes);
        let mut total = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = &lv[i * classes..(i + 1) * classes];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let denom: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
            let log_denom = denom.ln();
            total += -(row[label].as_f64() - max - log_denom);
            probs.extend(
                row.iter()
                    .map(|v| T::from_f64(((v.as_f64() - max) - log_denom).exp())),
            );
        }
        let loss = total / n as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                layer: self.scope_name(),
            });
        }
        let rg = self.needs(logits);
        let id = self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )?;
        Ok((id, loss))
    }

    /// Masks sampled by every dropout node on this tape, in order.
    pub fn dropout_masks(&self) -> DropoutMasks<T> {
        DropoutMasks {
            masks: self
                .nodes
                .iter()
                .filter_map(|n| match &n.op {
                    Op::Dropout { mask, .. } => Some(mask.clone()),
                    _ => None,
                })
                .collect(),
        }
    }

    /// Smallest distance of any ReLU input from zero, or of any max-pool
    /// winner from its runner-up. Finite differences with a step below this
    /// margin never cross a kink.
    pub fn kink_margin(&self) -> Option<f64> {
        let mut margin: Option<f64> = None;
        let mut upd = |m: f64| margin = Some(margin.map_or(m, |cur: f64| cur.min(m)));
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        upd(v.as_f64().abs());
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let xv = self.value(*input).data();
                    let (h, w) = (self.value(*input).shape()[2], self.value(*input).shape()[3]);
                    for &best in argmax {
                        let local = best % (h * w);
                        let (y0, x0) = (local / w / 2 * 2, local % w / 2 * 2);
                        let plane = best - local;
                        let mut second = f64::NEG_INFINITY;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = plane + (y0 + dy) * w + x0 + dx;
                            if idx != best {
                                second = second.max(xv[idx].as_f64());
                            }
                        }
                        upd(xv[best].as_f64() - second);
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Backpropagates from the output recorded with [`Graph::set_output`].
    pub fn backward(&mut self) -> Result<GradientStore<T>> {
        let out = self
            .output
            .ok_or_else(|| Error::state("backward called before a loss was recorded"))?;
        self.backward_from(out)
    }

    /// Backpropagates from a scalar node. The tape may be swept only once.
    pub fn backward_from(&mut self, out: NodeId) -> Result<GradientStore<T>> {
        if self.backward_done {
            return Err(Error::state(
                "backward already ran on this graph; run a new forward pass",
            ));
        }
        if self.value(out).len() != 1 {
            return Err(Error::shape("backward root", &[1], self.value(out).shape()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), T::one()));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::Numeric {
                    layer: self.nodes[idx].scope.clone(),
                });
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut store = GradientStore::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param {
                name,
                trainable: true,
            } = &node.op
            {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                store.insert(name.clone(), g);
            }
        }
        Ok(store)
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); n * k];
                    for i in 0..n {
                        let grow = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bv.data()[p * m..(p + 1) * m];
                            da[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    accumulate(grads, *a, av.shape(), da)?;
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * m];
                    for i in 0..n {
                        let grow = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            let x = av.data()[i * k + p];
                            if x == T::zero() {
                                continue;
                            }
                            for (o, &gv) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o = *o + x * gv;
                            }
                        }
                    }
                    accumulate(grads, *b, bv.shape(), db)?;
                }
            }
            Op::AddBias(x, bias) => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.shape(), gd.to_vec())?;
                }
                if self.needs(*bias) {
                    let s = g.shape();
                    let c = s[1];
                    let inner: usize = s[2..].iter().product();
                    let mut db = vec![T::zero(); c];
                    for (i, &v) in gd.iter().enumerate() {
                        let ch = (i / inner) % c;
                        db[ch] = db[ch] + v;
                    }
                    accumulate(grads, *bias, &[c], db)?;
                }
            }
            Op::Conv2d { input, weight, pad } => {
                let (iv, wv) = (self.value(*input), self.value(*weight));
                let geo = ConvGeometry::new(iv.shape(), wv.shape(), *pad)
                    .expect("geometry validated in forward");
                if self.needs(*weight) {
                    let dw = geo.weight_grad(iv.data(), gd);
                    accumulate(grads, *weight, wv.shape(), dw)?;
                }
                if self.needs(*input) {
                    let di = geo.input_grad(wv.data(), gd);
                    accumulate(grads, *input, iv.shape(), di)?;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *x, xv.shape(), d)?;
            }
            Op::MaxPool2 { input, argmax } => {
                let iv = self.value(*input);
                let mut d = vec![T::zero(); iv.len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    d[src] = d[src] + gv;
                }
                accumulate(grads, *input, iv.shape(), d)?;
            }
            Op::Dropout { input, mask } => {
                let d = gd.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                accumulate(grads, *input, g.shape(), d)?;
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, self.value(*x).shape(), gd.to_vec())?;
            }
            Op::Add(a, b) => {
                for &t in [a, b] {
                    if self.needs(t) {
                        accumulate(grads, t, g.shape(), gd.to_vec())?;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, g.shape(), d)?;
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, g.shape(), d)?;
                }
            }
            Op::Scale(x, c) => {
                let d = gd.iter().map(|&v| v * *c).collect();
                accumulate(grads, *x, g.shape(), d)?;
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                let two = T::from_f64(2.0);
                let d = xv.data().iter().zip(gd).map(|(&v, &gv)| two * v * gv).collect();
                accumulate(grads, *x, g.shape(), d)?;
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, xv.shape(), vec![gd[0]; xv.len()])?;
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let shape = self.value(*logits).shape();
                let (n, classes) = (shape[0], shape[1]);
                let scale = gd[0] / T::from_f64(n as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * classes + l] = d[i * classes + l] - scale;
                }
                accumulate(grads, *logits, shape, d)?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    target: NodeId,
    shape: &[usize],
    delta: Vec<T>,
) -> Result<()> {
    match &mut grads[target.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(delta) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), delta)?),
    }
    Ok(())
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(si: &[usize], sw: &[usize], pad: usize) -> Option<Self> {
        let (h, w, kh, kw) = (si[2], si[3], sw[2], sw[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            n: si[0],
            c: si[1],
            h,
            w,
            o: sw[0],
            kh,
            kw,
            oh: h + 2 * pad - kh + 1,
            ow: w + 2 * pad - kw + 1,
            pad,
        })
    }

    /// Output columns `x` for which `x + k - pad` lies inside `[0, extent)`.
    fn valid(&self, k: usize, out_extent: usize, extent: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(k);
        let hi = (extent + self.pad).saturating_sub(k).min(out_extent);
        (lo, hi.max(lo))
    }

    fn forward<T: Scalar>(&self, input: &[T], weight: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.n * self.o * self.oh * self.ow];
        for b in 0..self.n {
            for o in 0..self.o {
                let obase = (b * self.o + o) * self.oh * self.ow;
                for c in 0..self.c {
                    let ibase = (b * self.c + c) * self.h * self.w;
                    for ky in 0..self.kh {
                        let (y0, y1) = self.valid(ky, self.oh, self.h);
                        for kx in 0..self.kw {
                            let wv = weight[((o * self.c + c) * self.kh + ky) * self.kw + kx];
                            let (x0, x1) = self.valid(kx, self.ow, self.w);
                            for y in y0..y1 {
                                let iy = y + ky - self.pad;
                                let orow = &mut out[obase + y * self.ow..obase + (y + 1) * self.ow];
                                let irow = &input[ibase + iy * self.w..ibase + (iy + 1) * self.w];
                                for x in x0..x1 {
                                    orow[x] = orow[x] + wv * irow[x + kx - self.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn weight_grad<T: Scalar>(&self, input: &[T], gout: &[T]) -> Vec<T> {
        let mut dw = vec![T::zero(); self.o * self.c * self.kh * self.kw];
        for b in 0..self.n {
            for o in 0..self.o {
                let obase = (b * self.o + o) * self.oh * self.ow;
                for c in 0..self.c {
                    let ibase = (b * self.c + c) * self.h * self.w;
                    for ky in 0..self.kh {
                        let (y0, y1) = self.valid(ky, self.oh, self.h);
                        for kx in 0..self.kw {
                            let (x0, x1) = self.valid(kx, self.ow, self.w);
                            let mut acc = T::zero();
                            for y in y0..y1 {
                                let iy = y + ky - self.pad;
                                for x in x0..x1 {
                                    acc = acc
                                        + gout[obase + y * self.ow + x]
                                            * input[ibase + iy * self.w + x + kx - self.pad];
                                }
                            }
                            let widx = ((o * self.c + c) * self.kh + ky) * self.kw + kx;
                            dw[widx] = dw[widx] + acc;
                        }
                    }
                }
            }
        }
        dw
    }

    fn input_grad<T: Scalar>(&self, weight: &[T], gout: &[T]) -> Vec<T> {
        let mut di = vec![T::zero(); self.n * self.c * self.h * self.w];
        for b in 0..self.n {
            for o in 0..self.o {
                let obase = (b * self.o + o) * self.oh * self.ow;
                for c in 0..self.c {
                    let ibase = (b * self.c + c) * self.h * self.w;
                    for ky in 0..self.kh {
                        let (y0, y1) = self.valid(ky, self.oh, self.h);
                        for kx in 0..self.kw {
                            let wv = weight[((o * self.c + c) * self.kh + ky) * self.kw + kx];
                            let (x0, x1) = self.valid(kx, self.ow, self.w);
                            for y in y0..y1 {
                                let iy = y + ky - self.pad;
                                for x in x0..x1 {
                                    let ii = ibase + iy * self.w + x + kx - self.pad;
                                    di[ii] = di[ii] + wv * gout[obase + y * self.ow + x];
                                }
                            }
                        }
                    }
                }
            }
        }
        di
    }
}
