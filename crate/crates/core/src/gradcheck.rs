//! Central finite-difference oracle for the reverse-mode gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Max over coordinates of `|analytic - central| / max(1, |central|)` for a
/// scalar function of a single tensor.
pub fn grad_check<F>(f: F, theta: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let errs = grad_check_many(
        |g: &mut Graph, vars: &[Var]| f(g, vars[0]),
        std::slice::from_ref(theta),
        step,
    )?;
    Ok(errs[0])
}

/// Same check for a function of several tensors; one max error per tensor.
pub fn grad_check_many<F>(f: F, params: &[Tensor], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {step}")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut errors = Vec::with_capacity(params.len());
    for (p, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var);
        let mut worst: f64 = 0.0;
        for k in 0..params[p].len() {
            let orig = params[p].data()[k];
            work[p].data_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work[p].data_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work[p].data_mut()[k] = orig;
            let central = (plus - minus) / (2.0 * step);
            let err = (analytic.data()[k] - central).abs() / central.abs().max(1.0);
            worst = worst.max(err);
        }
        errors.push(worst);
    }
    Ok(errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm() {
        let theta = Tensor::vector(vec![1.0, -2.0]);
        let err = grad_check(
            |g, x| {
                let sq = g.square(x);
                let s = g.sum(sq);
                Ok(g.scale(s, 0.5))
            },
            &theta,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn flags_a_kink_inside_the_stencil() {
        // |x| at x = 1e-6: analytic slope 1, but the stencil straddles the kink.
        let theta = Tensor::vector(vec![1e-6]);
        let err = grad_check(
            |g, x| {
                let a = g.abs(x);
                Ok(g.sum(a))
            },
            &theta,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err > 0.5, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let theta = Tensor::vector(vec![1.0]);
        assert!(grad_check(|g, x| Ok(g.sum(x)), &theta, 0.0).is_err());
    }
}
