//! Central-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::{Bindings, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor: relative error below this gradient magnitude becomes
/// absolute error, so round-off on near-zero components does not dominate.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

fn eval_scalar<F>(f: &F, point: &Tensor, branches: &[bool]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::replaying(branches.to_vec());
    let x = g.constant(point.clone());
    let out = f(&mut g, x)?;
    if !g.replay_matched() {
        return Err(Error::Usage("function took a different number of branches at a perturbed point".into()));
    }
    g.value(out)
        .item()
        .ok_or_else(|| Error::Usage(format!("function output has shape {:?}, expected a scalar", g.shape(out))))
}

/// Largest componentwise relative error between the reverse-mode gradient of
/// `f` at `point` and central differences with step `eps`.
///
/// The perturbed evaluations keep every `relu` and `minimum` on the branch
/// it took at `point`, so the difference quotient is taken on the smooth
/// piece containing `point` even when `x ± eps` straddles a kink.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..point.numel()).collect();
    grad_check_at(&f, point, eps, &all)
}

/// As [`grad_check`], restricted to the listed components.
pub fn grad_check_at<F>(f: &F, point: &Tensor, eps: f64, components: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::recording();
    let x = g.leaf(point.clone());
    let out = f(&mut g, x)?;
    let branches = g.take_branches();
    if g.value(out).numel() != 1 {
        return Err(Error::Usage(format!(
            "function output has shape {:?}, expected a scalar",
            g.shape(out)
        )));
    }
    let grads = g.backward(out)?;
    let analytic = grads.get(x).unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut worst: f64 = 0.0;
    for &i in components {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval_scalar(f, &plus, &branches)? - eval_scalar(f, &minus, &branches)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Grad-checks a loss over every parameter in `store`, at up to
/// `per_param` evenly spaced components of each tensor. Returns the worst
/// error and the parameter it occurred in.
pub fn grad_check_store<F>(store: &ParameterStore, f: F, eps: f64, per_param: usize) -> Result<(f64, String)>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    let mut worst = (0.0, String::new());
    for name in store.names() {
        let point = store.get(name).expect("listed name").clone();
        let n = point.numel();
        let stride = n.div_ceil(per_param.max(1)).max(1);
        let components: Vec<usize> = (0..n).step_by(stride).collect();
        let wrapped = |g: &mut Graph, x: Var| {
            let mut p = store.bind(g, false);
            p.replace(name, x);
            f(g, &p)
        };
        let err = grad_check_at(&wrapped, &point, eps, &components)?;
        if err > worst.0 {
            worst = (err, name.to_string());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relu_then_min(g: &mut Graph, x: Var) -> Result<Var> {
        let r = g.relu(x);
        let c = g.constant(Tensor::new(vec![3], vec![0.5, 0.5, 0.5])?);
        let m = g.minimum(r, c)?;
        Ok(g.sum(m))
    }

    #[test]
    fn points_within_eps_of_a_kink_are_checked_on_their_piece() {
        // Components sit 5e-5 from the relu and minimum kinks. The true
        // gradient sums to 2; a plain central difference with eps 1e-4 reads
        // 0.75 + 0.25 + 0.75.
        let point = Tensor::new(vec![3], vec![5e-5, -5e-5, 0.5 - 5e-5]).unwrap();
        assert!(grad_check(relu_then_min, &point, 1e-4).unwrap() < 1e-9);

        let mut g = Graph::new();
        let plus = g.constant(Tensor::new(vec![3], vec![1.5e-4, 5e-5, 0.5 + 5e-5]).unwrap());
        let minus = g.constant(Tensor::new(vec![3], vec![-5e-5, -1.5e-4, 0.5 - 1.5e-4]).unwrap());
        let (a, b) = (relu_then_min(&mut g, plus).unwrap(), relu_then_min(&mut g, minus).unwrap());
        let plain = (g.value(a).data()[0] - g.value(b).data()[0]) / 2e-4;
        assert!((plain - 1.75).abs() < 1e-9, "{plain}");
    }

    #[test]
    fn replay_reproduces_the_recorded_value() {
        let point = Tensor::new(vec![3], vec![0.3, -0.2, 0.9]).unwrap();
        let mut g = Graph::recording();
        let x = g.constant(point.clone());
        let out = relu_then_min(&mut g, x).unwrap();
        let log = g.take_branches();
        assert_eq!(log, vec![true, false, true, true, true, false]);
        assert_eq!(eval_scalar(&relu_then_min, &point, &log).unwrap(), g.value(out).data()[0]);
        assert!(eval_scalar(&relu_then_min, &point, &log[..4]).is_err());
    }

    #[test]
    fn a_wrong_gradient_is_still_detected() {
        // Half of x·x enters as a detached constant, so the recorded gradient
        // is half the true slope.
        let point = Tensor::new(vec![2], vec![0.7, -1.3]).unwrap();
        let half_grad = |g: &mut Graph, x: Var| {
            let y = g.mul(x, x)?;
            let s = g.sum(y);
            let v = g.value(s).data()[0];
            let h = g.scale(s, 0.5);
            Ok(g.add_scalar(h, 0.5 * v))
        };
        assert!(grad_check(half_grad, &point, 1e-4).unwrap() > 0.4);
    }
}
