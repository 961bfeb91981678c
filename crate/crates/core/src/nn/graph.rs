//! Reverse-mode automatic differentiation over a per-sample computation graph.
//!
//! A [`Graph`] is built while running a forward pass. Every operation appends
//! a node holding its value; [`Graph::backward`] then walks the nodes in
//! reverse creation order. All accumulation loops run in a fixed order, so a
//! forward/backward pass is bit-for-bit reproducible.

use super::{Gradients, ParamId, ParamSet, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    WeightedSum(Vec<(Var, f64)>),
    Linear { w: Var, x: Var, b: Option<Var> },
    Conv3x3 { x: Var, w: Var, b: Var },
    Conv1x1 { x: Var, w: Var, b: Var },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    AvgPool2(Var),
    GridPool { x: Var, gh: usize, gw: usize },
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Row { table: Var, idx: usize },
    LogSoftmax(Var),
    Softmax(Var),
    Pick { x: Var, idx: usize },
    Sum(Var),
    MaxOf { inputs: Vec<Var>, source: Vec<usize> },
    BnFixed { x: Var, inv_std: Vec<f64> },
    SoftMargin { x: Var, targets: Vec<f64> },
    BceProb { p: Var, targets: Vec<f64>, eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
pub struct Backward {
    node_grads: Vec<Option<Vec<f64>>>,
    pub params: Gradients,
}

impl Backward {
    /// Gradient of the loss with respect to any node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.node_grads[v.0].as_deref()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn grid_bounds(n: usize, bins: usize, i: usize) -> (usize, usize) {
    (i * n / bins, ((i + 1) * n / bins).max(i * n / bins + 1))
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::with_capacity(256),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Node for a trainable tensor; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Tensor::zeros(&[0]), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(t.shape(), data);
        self.push(out, op)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    /// `Σ wᵢ·xᵢ` over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let shape = self.shape(terms[0].0).to_vec();
        let mut out = vec![0.0; shape.iter().product()];
        for &(v, w) in terms {
            assert_eq!(self.shape(v), &shape[..]);
            for (o, x) in out.iter_mut().zip(self.data(v)) {
                *o += w * x;
            }
        }
        self.push(Tensor::new(&shape, out), Op::WeightedSum(terms.to_vec()))
    }

    /// `W·x + b` for `W: [m, n]`, `x: [n]`.
    pub fn linear(&mut self, w: Var, x: Var, b: Option<Var>) -> Var {
        let (tw, tx) = (self.value(w), self.value(x));
        let (m, n) = (tw.shape()[0], tw.shape()[1]);
        assert_eq!(tx.len(), n, "linear: input has {} elements, weight expects {n}", tx.len());
        let wd = tw.data();
        let xd = tx.data();
        let mut out: Vec<f64> = match b {
            Some(b) => {
                let tb = self.data(b);
                assert_eq!(tb.len(), m);
                tb.to_vec()
            }
            None => vec![0.0; m],
        };
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wd[i * n..(i + 1) * n];
            *o += row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>();
        }
        self.push(Tensor::vector(out), Op::Linear { w, x, b })
    }

    /// 3×3 convolution, stride 1, zero padding 1. `x: [C, H, W]`, `w: [O, C, 3, 3]`, `b: [O]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (c_in, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let c_out = tw.shape()[0];
        assert_eq!(tw.shape(), &[c_out, c_in, 3, 3], "conv weight shape");
        let (xs, ws) = (tx.data(), tw.data());
        let plane = h * wd;
        let mut out = vec![0.0; c_out * plane];
        for o in 0..c_out {
            let op = &mut out[o * plane..(o + 1) * plane];
            op.iter_mut().for_each(|v| *v = tb.data()[o]);
            for c in 0..c_in {
                let ip = &xs[c * plane..(c + 1) * plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = ws[((o * c_in + c) * 3 + ky) * 3 + kx];
                        let x_lo = 1usize.saturating_sub(kx);
                        let x_hi = (wd + 1 - kx).min(wd);
                        for y in 0..h {
                            let sy = y + ky;
                            if sy < 1 || sy > h {
                                continue;
                            }
                            let sy = sy - 1;
                            let orow = &mut op[y * wd + x_lo..y * wd + x_hi];
                            let irow = &ip[sy * wd + x_lo + kx - 1..sy * wd + x_hi + kx - 1];
                            for (a, b) in orow.iter_mut().zip(irow) {
                                *a += k * b;
                            }
                        }
                    }
                }
            }
        }
        self.push(Tensor::new(&[c_out, h, wd], out), Op::Conv3x3 { x, w, b })
    }

    /// Pointwise convolution. `x: [C, H, W]`, `w: [O, C]`, `b: [O]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (c_in, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let c_out = tw.shape()[0];
        assert_eq!(tw.shape(), &[c_out, c_in], "pointwise conv weight shape");
        let plane = h * wd;
        let (xs, ws) = (tx.data(), tw.data());
        let mut out = vec![0.0; c_out * plane];
        for o in 0..c_out {
            let op = &mut out[o * plane..(o + 1) * plane];
            op.iter_mut().for_each(|v| *v = tb.data()[o]);
            for c in 0..c_in {
                let k = ws[o * c_in + c];
                for (a, b) in op.iter_mut().zip(&xs[c * plane..(c + 1) * plane]) {
                    *a += k * b;
                }
            }
        }
        self.push(Tensor::new(&[c_out, h, wd], out), Op::Conv1x1 { x, w, b })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    /// 2×2 average pooling; spatial sizes must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 on odd size {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let d = t.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = ch * h * w;
                    let s = d[base + 2 * y * w + 2 * x]
                        + d[base + 2 * y * w + 2 * x + 1]
                        + d[base + (2 * y + 1) * w + 2 * x]
                        + d[base + (2 * y + 1) * w + 2 * x + 1];
                    out[(ch * oh + y) * ow + x] = 0.25 * s;
                }
            }
        }
        self.push(Tensor::new(&[c, oh, ow], out), Op::AvgPool2(a))
    }

    /// Adaptive average pooling of `[C, H, W]` onto a `gh × gw` grid, flattened to `[C·gh·gw]`.
    pub fn grid_pool(&mut self, a: Var, gh: usize, gw: usize) -> Var {
        let t = self.value(a);
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let d = t.data();
        let mut out = Vec::with_capacity(c * gh * gw);
        for ch in 0..c {
            for i in 0..gh {
                let (y0, y1) = grid_bounds(h, gh, i);
                for j in 0..gw {
                    let (x0, x1) = grid_bounds(w, gw, j);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            s += d[(ch * h + y) * w + x];
                        }
                    }
                    out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        self.push(Tensor::vector(out), Op::GridPool { x: a, gh, gw })
    }

    /// Mean over the spatial axes of `[C, H, W]`, giving `[C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (c, plane) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
        let out = t
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect::<Vec<_>>();
        debug_assert_eq!(out.len(), c);
        self.push(Tensor::vector(out), Op::GlobalAvgPool(a))
    }

    /// Concatenate flattened inputs.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        self.push(Tensor::vector(out), Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.data(a)[start..start + len].to_vec();
        self.push(Tensor::vector(out), Op::Slice { x: a, start })
    }

    /// Row `idx` of a `[V, D]` table (embedding lookup).
    pub fn row(&mut self, table: Var, idx: usize) -> Var {
        let t = self.value(table);
        let d = t.shape()[1];
        assert!(idx < t.shape()[0], "row {idx} out of range {}", t.shape()[0]);
        let out = t.data()[idx * d..(idx + 1) * d].to_vec();
        self.push(Tensor::vector(out), Op::Row { table, idx })
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let m = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + d.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let out = d.iter().map(|x| x - lse).collect();
        self.push(Tensor::vector(out), Op::LogSoftmax(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let m = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = d.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let out = e.into_iter().map(|x| x / s).collect();
        self.push(Tensor::vector(out), Op::Softmax(a))
    }

    pub fn pick(&mut self, a: Var, idx: usize) -> Var {
        let v = self.data(a)[idx];
        self.push(Tensor::scalar(v), Op::Pick { x: a, idx })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.data(a).iter().sum();
        self.push(Tensor::scalar(v), Op::Sum(a))
    }

    /// Elementwise maximum over same-shaped inputs; ties go to the earliest input.
    pub fn max_of(&mut self, inputs: &[Var]) -> Var {
        assert!(!inputs.is_empty(), "max_of needs at least one input");
        let shape = self.shape(inputs[0]).to_vec();
        let mut out = self.data(inputs[0]).to_vec();
        let mut source = vec![0usize; out.len()];
        for (k, &v) in inputs.iter().enumerate().skip(1) {
            assert_eq!(self.shape(v), &shape[..]);
            for (i, &x) in self.data(v).iter().enumerate() {
                if x > out[i] {
                    out[i] = x;
                    source[i] = k;
                }
            }
        }
        self.push(
            Tensor::new(&shape, out),
            Op::MaxOf {
                inputs: inputs.to_vec(),
                source,
            },
        )
    }

    /// `(x − mean) / sqrt(var)` with constant statistics.
    pub fn bn_fixed(&mut self, a: Var, mean: &[f64], var: &[f64]) -> Var {
        let d = self.data(a);
        assert_eq!(d.len(), mean.len());
        assert_eq!(d.len(), var.len());
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / v.sqrt()).collect();
        let out = d
            .iter()
            .zip(mean)
            .zip(var)
            .map(|((x, m), v)| (x - m) / v.sqrt())
            .collect();
        self.push(Tensor::vector(out), Op::BnFixed { x: a, inv_std })
    }

    /// Mean over classes of `−[y·ln σ(x) + (1−y)·ln σ(−x)]`.
    pub fn soft_margin(&mut self, logits: Var, targets: &[f64]) -> Var {
        let d = self.data(logits);
        assert_eq!(d.len(), targets.len());
        let n = d.len() as f64;
        let loss = d
            .iter()
            .zip(targets)
            .map(|(&x, &y)| y * softplus(-x) + (1.0 - y) * softplus(x))
            .sum::<f64>()
            / n;
        self.push(
            Tensor::scalar(loss),
            Op::SoftMargin {
                x: logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Mean binary cross-entropy on probabilities clamped to `[eps, 1−eps]`.
    pub fn bce_prob(&mut self, p: Var, targets: &[f64], eps: f64) -> Var {
        let d = self.data(p);
        assert_eq!(d.len(), targets.len());
        let n = d.len() as f64;
        let loss = d
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let p = p.clamp(eps, 1.0 - eps);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        self.push(
            Tensor::scalar(loss),
            Op::BceProb {
                p,
                targets: targets.to_vec(),
                eps,
            },
        )
    }

    /// Back-propagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Backward {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut params = Gradients::zeros_like(self.params);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Backward {
            node_grads: grads,
            params,
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], params: &mut Gradients) {
        let out = &self.nodes[i].value;
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let len = self.value(v).len();
                grads[v.0].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Param(id) => {
                params.add_slice(*id, self.params.get(*id).shape(), g);
            }
            Op::Add(a, b) => {
                acc!(*a).iter_mut().zip(g).for_each(|(x, g)| *x += g);
                acc!(*b).iter_mut().zip(g).for_each(|(x, g)| *x += g);
            }
            Op::Sub(a, b) => {
                acc!(*a).iter_mut().zip(g).for_each(|(x, g)| *x += g);
                acc!(*b).iter_mut().zip(g).for_each(|(x, g)| *x -= g);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc!(*a).iter_mut().zip(g).zip(db).for_each(|((x, g), y)| *x += g * y);
                acc!(*b).iter_mut().zip(g).zip(da).for_each(|((x, g), y)| *x += g * y);
            }
            Op::Scale(a, c) => {
                acc!(*a).iter_mut().zip(g).for_each(|(x, g)| *x += c * g);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc!(v).iter_mut().zip(g).for_each(|(x, g)| *x += w * g);
                }
            }
            Op::Linear { w, x, b } => {
                let tw = self.value(*w);
                let (m, n) = (tw.shape()[0], tw.shape()[1]);
                let (wd, xd) = (tw.data(), self.data(*x));
                {
                    let gx = acc!(*x);
                    for r in 0..m {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for (gx, wv) in gx.iter_mut().zip(&wd[r * n..(r + 1) * n]) {
                            *gx += gr * wv;
                        }
                    }
                }
                {
                    let gw = acc!(*w);
                    for r in 0..m {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for (gw, xv) in gw[r * n..(r + 1) * n].iter_mut().zip(xd) {
                            *gw += gr * xv;
                        }
                    }
                }
                if let Some(b) = b {
                    acc!(*b).iter_mut().zip(g).for_each(|(x, g)| *x += g);
                }
            }
            Op::Conv3x3 { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (c_in, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let c_out = tw.shape()[0];
                let plane = h * wd;
                let (xs, ws) = (tx.data(), tw.data());
                {
                    let gb = acc!(*b);
                    for o in 0..c_out {
                        gb[o] += g[o * plane..(o + 1) * plane].iter().sum::<f64>();
                    }
                }
                let mut gw = vec![0.0; ws.len()];
                let gx = acc!(*x);
                for o in 0..c_out {
                    let gp = &g[o * plane..(o + 1) * plane];
                    for c in 0..c_in {
                        let ip = &xs[c * plane..(c + 1) * plane];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let widx = ((o * c_in + c) * 3 + ky) * 3 + kx;
                                let k = ws[widx];
                                let x_lo = 1usize.saturating_sub(kx);
                                let x_hi = (wd + 1 - kx).min(wd);
                                let mut dk = 0.0;
                                for y in 0..h {
                                    let sy = y + ky;
                                    if sy < 1 || sy > h {
                                        continue;
                                    }
                                    let sy = sy - 1;
                                    let grow = &gp[y * wd + x_lo..y * wd + x_hi];
                                    let lo = sy * wd + x_lo + kx - 1;
                                    let hi = sy * wd + x_hi + kx - 1;
                                    let irow = &ip[lo..hi];
                                    dk += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                                    let gxrow = &mut gx[c * plane + lo..c * plane + hi];
                                    for (a, b) in gxrow.iter_mut().zip(grow) {
                                        *a += k * b;
                                    }
                                }
                                gw[widx] += dk;
                            }
                        }
                    }
                }
                acc!(*w).iter_mut().zip(&gw).for_each(|(a, b)| *a += b);
            }
            Op::Conv1x1 { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (c_in, plane) = (tx.shape()[0], tx.shape()[1] * tx.shape()[2]);
                let c_out = tw.shape()[0];
                let (xs, ws) = (tx.data(), tw.data());
                {
                    let gb = acc!(*b);
                    for o in 0..c_out {
                        gb[o] += g[o * plane..(o + 1) * plane].iter().sum::<f64>();
                    }
                }
                let mut gw = vec![0.0; ws.len()];
                let gx = acc!(*x);
                for o in 0..c_out {
                    let gp = &g[o * plane..(o + 1) * plane];
                    for c in 0..c_in {
                        let k = ws[o * c_in + c];
                        let ip = &xs[c * plane..(c + 1) * plane];
                        gw[o * c_in + c] += gp.iter().zip(ip).map(|(a, b)| a * b).sum::<f64>();
                        for (a, b) in gx[c * plane..(c + 1) * plane].iter_mut().zip(gp) {
                            *a += k * b;
                        }
                    }
                }
                acc!(*w).iter_mut().zip(&gw).for_each(|(a, b)| *a += b);
            }
            Op::Relu(a) => {
                let d = self.data(*a);
                acc!(*a)
                    .iter_mut()
                    .zip(g)
                    .zip(d)
                    .for_each(|((x, g), v)| *x += if *v > 0.0 { *g } else { 0.0 });
            }
            Op::Gelu(a) => {
                let d = self.data(*a);
                acc!(*a)
                    .iter_mut()
                    .zip(g)
                    .zip(d)
                    .for_each(|((x, g), v)| *x += g * gelu_grad(*v));
            }
            Op::Sigmoid(a) => {
                acc!(*a)
                    .iter_mut()
                    .zip(g)
                    .zip(out.data())
                    .for_each(|((x, g), y)| *x += g * y * (1.0 - y));
            }
            Op::Tanh(a) => {
                acc!(*a)
                    .iter_mut()
                    .zip(g)
                    .zip(out.data())
                    .for_each(|((x, g), y)| *x += g * (1.0 - y * y));
            }
            Op::AvgPool2(a) => {
                let s = self.shape(*a);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let ga = acc!(*a);
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let gv = 0.25 * g[(ch * oh + y) * ow + x];
                            let base = ch * h * w;
                            ga[base + 2 * y * w + 2 * x] += gv;
                            ga[base + 2 * y * w + 2 * x + 1] += gv;
                            ga[base + (2 * y + 1) * w + 2 * x] += gv;
                            ga[base + (2 * y + 1) * w + 2 * x + 1] += gv;
                        }
                    }
                }
            }
            Op::GridPool { x, gh, gw } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (gh, gw) = (*gh, *gw);
                let ga = acc!(*x);
                let mut k = 0;
                for ch in 0..c {
                    for i in 0..gh {
                        let (y0, y1) = grid_bounds(h, gh, i);
                        for j in 0..gw {
                            let (x0, x1) = grid_bounds(w, gw, j);
                            let gv = g[k] / ((y1 - y0) * (x1 - x0)) as f64;
                            k += 1;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    ga[(ch * h + y) * w + xx] += gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a);
                let plane = s[1] * s[2];
                let ga = acc!(*a);
                for (c, chunk) in ga.chunks_mut(plane).enumerate() {
                    let gv = g[c] / plane as f64;
                    chunk.iter_mut().for_each(|x| *x += gv);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc!(p).iter_mut().zip(&g[off..off + n]).for_each(|(x, g)| *x += g);
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let ga = acc!(*x);
                ga[*start..*start + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(x, g)| *x += g);
            }
            Op::Row { table, idx } => {
                let d = self.shape(*table)[1];
                let ga = acc!(*table);
                ga[idx * d..(idx + 1) * d]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(x, g)| *x += g);
            }
            Op::LogSoftmax(a) => {
                let gs: f64 = g.iter().sum();
                acc!(*a)
                    .iter_mut()
                    .zip(g)
                    .zip(out.data())
                    .for_each(|((x, g), y)| *x += g - y.exp() * gs);
            }
            Op::Softmax(a) => {
                let dot: f64 = g.iter().zip(out.data()).map(|(g, y)| g * y).sum();
                acc!(*a)
                    .iter_mut()
                    .zip(g)
                    .zip(out.data())
                    .for_each(|((x, g), y)| *x += y * (g - dot));
            }
            Op::Pick { x, idx } => {
                acc!(*x)[*idx] += g[0];
            }
            Op::Sum(a) => {
                acc!(*a).iter_mut().for_each(|x| *x += g[0]);
            }
            Op::MaxOf { inputs, source } => {
                for (e, &k) in source.iter().enumerate() {
                    acc!(inputs[k])[e] += g[e];
                }
            }
            Op::BnFixed { x, inv_std } => {
                acc!(*x)
                    .iter_mut()
                    .zip(g)
                    .zip(inv_std)
                    .for_each(|((x, g), s)| *x += g * s);
            }
            Op::SoftMargin { x, targets } => {
                let d = self.data(*x);
                let n = d.len() as f64;
                acc!(*x)
                    .iter_mut()
                    .zip(d)
                    .zip(targets)
                    .for_each(|((gx, &v), &y)| *gx += g[0] * (sigmoid(v) - y) / n);
            }
            Op::BceProb { p, targets, eps } => {
                let d = self.data(*p);
                let n = d.len() as f64;
                acc!(*p).iter_mut().zip(d).zip(targets).for_each(|((gp, &v), &y)| {
                    let v = v.clamp(*eps, 1.0 - eps);
                    *gp += g[0] * (-y / v + (1.0 - y) / (1.0 - v)) / n;
                });
            }
        }
    }
}
