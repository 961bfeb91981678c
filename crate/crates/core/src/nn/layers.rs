use rand::Rng;

use super::{Graph, ParamId, ParamSet, Tensor, Var};

/// Fully-connected layer `y = W·x + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let w = params.add(format!("{name}.w"), Tensor::uniform(&[output, input], bound, rng));
        let b = params.add(format!("{name}.b"), Tensor::zeros(&[output]));
        Linear { w, b, input, output }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(w, x, Some(b))
    }
}

/// 3×3 same-padding convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3x3 {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv3x3 {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        // He-uniform for the ReLU that follows.
        let bound = (6.0 / (c_in * 9) as f64).sqrt();
        let w = params.add(format!("{name}.w"), Tensor::uniform(&[c_out, c_in, 3, 3], bound, rng));
        let b = params.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Conv3x3 { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv3x3(x, w, b)
    }
}

/// Pointwise (1×1) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1x1 {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv1x1 {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / c_in as f64).sqrt();
        let w = params.add(format!("{name}.w"), Tensor::uniform(&[c_out, c_in], bound, rng));
        let b = params.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Conv1x1 { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv1x1(x, w, b)
    }
}

/// Gated recurrent cell with input, forget, cell and output gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmCell {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (input + 2 * hidden) as f64).sqrt();
        let w = params.add(
            format!("{name}.w"),
            Tensor::uniform(&[4 * hidden, input + hidden], bound, rng),
        );
        let mut bias = vec![0.0; 4 * hidden];
        // forget gate starts open
        bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = params.add(format!("{name}.b"), Tensor::vector(bias));
        LstmCell { w, b, input, hidden }
    }

    /// Zero `(h, c)` state.
    pub fn zero_state(&self, g: &mut Graph) -> (Var, Var) {
        let h = g.input(Tensor::zeros(&[self.hidden]));
        let c = g.input(Tensor::zeros(&[self.hidden]));
        (h, c)
    }

    pub fn step(&self, g: &mut Graph, x: Var, (h, c): (Var, Var)) -> (Var, Var) {
        let hs = self.hidden;
        let xh = g.concat(&[x, h]);
        let (w, b) = (g.param(self.w), g.param(self.b));
        let z = g.linear(w, xh, Some(b));
        let i = g.slice(z, 0, hs);
        let f = g.slice(z, hs, hs);
        let u = g.slice(z, 2 * hs, hs);
        let o = g.slice(z, 3 * hs, hs);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let u = g.tanh(u);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, u);
        let c_next = g.add(keep, write);
        let tc = g.tanh(c_next);
        let h_next = g.mul(o, tc);
        (h_next, c_next)
    }
}

/// Token embedding table `[vocab, dim]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        let table = params.add(format!("{name}.table"), Tensor::uniform(&[vocab, dim], 0.1, rng));
        Embedding { table, vocab, dim }
    }

    pub fn lookup(&self, g: &mut Graph, token: usize) -> Var {
        let t = g.param(self.table);
        g.row(t, token)
    }
}
