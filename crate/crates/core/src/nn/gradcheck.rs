use super::{Gradients, ParamSet, Tensor};

/// Largest deviation between `analytic` and central differences of `loss`,
/// each measured as `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn max_gradient_error(params: &ParamSet, analytic: &Gradients, loss: &dyn Fn(&ParamSet) -> f64) -> f64 {
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (id, _, t) in params.iter() {
        let zeros = Tensor::zeros(t.shape());
        let a = analytic.get(id).unwrap_or(&zeros);
        for k in 0..t.len() {
            let orig = t.data()[k];
            probe.get_mut(id).data_mut()[k] = orig + h;
            let up = loss(&probe);
            probe.get_mut(id).data_mut()[k] = orig - h;
            let down = loss(&probe);
            probe.get_mut(id).data_mut()[k] = orig;
            let num = (up - down) / (2.0 * h);
            let ana = a.data()[k];
            let err = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}
