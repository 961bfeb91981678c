//! Minimal tensor, autodiff and optimisation toolkit shared by every model.

mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointHeader, TensorEntry, FORMAT_VERSION};
pub use gradcheck::max_gradient_error;
pub use graph::{sigmoid, softplus, Backward, Graph, Var};
pub use layers::{Conv1x1, Conv3x3, Embedding, LstmCell, Linear};
pub use params::{Adam, Gradients, ParamId, ParamSet};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn numeric_grad(params: &ParamSet, f: &dyn Fn(&ParamSet) -> f64) -> Vec<Vec<f64>> {
        let h = 1e-6;
        let mut out = Vec::new();
        for (id, _, t) in params.iter() {
            let mut g = Vec::with_capacity(t.len());
            for k in 0..t.len() {
                let mut p = params.clone();
                p.get_mut(id).data_mut()[k] += h;
                let up = f(&p);
                p.get_mut(id).data_mut()[k] -= 2.0 * h;
                let down = f(&p);
                g.push((up - down) / (2.0 * h));
            }
            out.push(g);
        }
        out
    }

    fn check(params: &ParamSet, f: &dyn Fn(&ParamSet) -> f64, analytic: &Gradients) {
        let num = numeric_grad(params, f);
        for (id, name, t) in params.iter() {
            let zeros = Tensor::zeros(t.shape());
            let a = analytic.get(id).unwrap_or(&zeros);
            for (k, (&x, &y)) in a.data().iter().zip(&num[id.index()]).enumerate() {
                let tol = 1e-5 * (1.0 + x.abs().max(y.abs()));
                assert!((x - y).abs() <= tol, "{name}[{k}]: analytic {x} vs numeric {y}");
            }
        }
    }

    #[test]
    fn elementwise_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        let a = p.add("a", Tensor::uniform(&[6], 1.5, &mut rng));
        let b = p.add("b", Tensor::uniform(&[6], 1.5, &mut rng));
        let f = |p: &ParamSet| -> (f64, Gradients) {
            let mut g = Graph::new(p);
            let (va, vb) = (g.param(a), g.param(b));
            let s = g.sigmoid(va);
            let t = g.tanh(vb);
            let m = g.mul(s, t);
            let r = g.relu(vb);
            let ge = g.gelu(va);
            let d = g.sub(m, r);
            let e = g.add(d, ge);
            let w = g.weighted_sum(&[(e, 0.7), (va, -0.3)]);
            let sm = g.softmax(w);
            let ls = g.log_softmax(e);
            let pk = g.pick(ls, 2);
            let bn = g.bn_fixed(sm, &[0.1; 6], &[0.5; 6]);
            let sum = g.sum(bn);
            let mx = g.max_of(&[va, vb]);
            let msum = g.sum(mx);
            let tot = g.weighted_sum(&[(sum, 1.0), (pk, 0.5), (msum, 0.25)]);
            let v = g.value(tot).item();
            (v, g.backward(tot).params)
        };
        let (_, grads) = f(&p);
        check(&p, &|q| f(q).0, &grads);
    }

    #[test]
    fn conv_pool_linear_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamSet::new();
        let conv = Conv3x3::new(&mut p, "conv", 2, 3, &mut rng);
        let point = Conv1x1::new(&mut p, "point", 3, 3, &mut rng);
        let lin = Linear::new(&mut p, "lin", 3 * 4 + 3, 2, &mut rng);
        let img = Tensor::uniform(&[2, 4, 4], 1.0, &mut rng);
        let f = |p: &ParamSet| -> (f64, Gradients) {
            let mut g = Graph::new(p);
            let x = g.input(img.clone());
            let c = conv.forward(&mut g, x);
            let c = point.forward(&mut g, c);
            let c = g.tanh(c);
            let pooled = g.avg_pool2(c);
            let grid = g.grid_pool(pooled, 2, 2);
            let gap = g.global_avg_pool(c);
            let feat = g.concat(&[grid, gap]);
            let y = lin.forward(&mut g, feat);
            let loss = g.soft_margin(y, &[1.0, 0.0]);
            (g.value(loss).item(), g.backward(loss).params)
        };
        let (_, grads) = f(&p);
        check(&p, &|q| f(q).0, &grads);
    }

    #[test]
    fn lstm_embedding_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        let emb = Embedding::new(&mut p, "emb", 5, 3, &mut rng);
        let cell = LstmCell::new(&mut p, "cell", 3, 4, &mut rng);
        let out = Linear::new(&mut p, "out", 4, 5, &mut rng);
        let f = |p: &ParamSet| -> (f64, Gradients) {
            let mut g = Graph::new(p);
            let mut st = cell.zero_state(&mut g);
            let mut terms = Vec::new();
            for (t, &tok) in [1usize, 3, 2, 4].iter().enumerate() {
                let x = emb.lookup(&mut g, tok);
                st = cell.step(&mut g, x, st);
                let logits = out.forward(&mut g, st.0);
                let lp = g.log_softmax(logits);
                let pk = g.pick(lp, (tok + t) % 5);
                terms.push((pk, -1.0));
            }
            let loss = g.weighted_sum(&terms);
            (g.value(loss).item(), g.backward(loss).params)
        };
        let (_, grads) = f(&p);
        check(&p, &|q| f(q).0, &grads);
    }

    #[test]
    fn bce_prob_gradcheck() {
        let mut p = ParamSet::new();
        let a = p.add("a", Tensor::vector(vec![0.3, -0.2, 1.1]));
        let f = |p: &ParamSet| -> (f64, Gradients) {
            let mut g = Graph::new(p);
            let va = g.param(a);
            let s = g.sigmoid(va);
            let l = g.bce_prob(s, &[1.0, 0.0, 1.0], 1e-7);
            (g.value(l).item(), g.backward(l).params)
        };
        let (_, grads) = f(&p);
        check(&p, &|q| f(q).0, &grads);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = ParamSet::new();
        let a = p.add("a", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(&p, 0.1);
        for _ in 0..200 {
            let grads = {
                let mut g = Graph::new(&p);
                let va = g.param(a);
                let sq = g.mul(va, va);
                let l = g.sum(sq);
                g.backward(l).params
            };
            opt.step(&mut p, &grads).unwrap();
        }
        assert!(p.get(a).data().iter().all(|v| v.abs() < 0.05));
    }
}
