//! Conditional flow matching on a straight noise-to-data path.
//!
//! Training regresses a vector field onto the constant path velocity
//! `x1 - x0` at `x_t = (1 - t) x0 + t x1`; sampling integrates the learned
//! field from `t = 0` to `t = 1` with forward Euler.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_EULER_STEPS: usize = 50;

/// Tanh MLP `[x_t, t, cond] -> velocity` with two hidden layers.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorFieldNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

impl VectorFieldNet {
    pub fn random(feature_dim: usize, cond_dim: usize, hidden: usize, rng: &mut rng::Rng) -> Self {
        let input = feature_dim + 1 + cond_dim;
        Self {
            w1: Tensor::randn(&[input, hidden], 1.0 / (input as f64).sqrt(), rng),
            b1: Tensor::zeros(&[1, hidden]),
            w2: Tensor::randn(&[hidden, hidden], 1.0 / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[1, hidden]),
            w3: Tensor::randn(&[hidden, feature_dim], 1.0 / (hidden as f64).sqrt(), rng),
            b3: Tensor::zeros(&[1, feature_dim]),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w3.cols()
    }

    pub fn cond_dim(&self) -> usize {
        self.w1.rows() - self.feature_dim() - 1
    }

    pub fn params(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }
}

/// Something that maps `(x_t, t, cond)` rows to velocity rows inside a graph.
pub trait VelocityField {
    /// `x_t`: `B x F`, `t`: `B x 1`, `cond`: `B x C` or `None`. Returns `B x F`.
    fn forward(&self, g: &mut Graph, x_t: Var, t: Var, cond: Option<Var>) -> Result<Var>;
}

#[derive(Clone, Copy, Debug)]
pub struct VectorFieldVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

impl VectorFieldVars {
    pub fn bind(g: &mut Graph, net: &VectorFieldNet) -> Self {
        Self {
            w1: g.leaf(net.w1.clone()),
            b1: g.leaf(net.b1.clone()),
            w2: g.leaf(net.w2.clone()),
            b2: g.leaf(net.b2.clone()),
            w3: g.leaf(net.w3.clone()),
            b3: g.leaf(net.b3.clone()),
        }
    }

    pub fn vars(&self) -> [Var; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

impl VelocityField for VectorFieldVars {
    fn forward(&self, g: &mut Graph, x_t: Var, t: Var, cond: Option<Var>) -> Result<Var> {
        let mut parts = vec![x_t, t];
        parts.extend(cond);
        let input = g.concat_cols(&parts)?;
        let expected = g.value(self.w1).rows();
        let got = g.value(input).cols();
        if got != expected {
            return Err(Error::dim("vector field input", &[got], &[expected]));
        }
        let z1 = g.matmul(input, self.w1)?;
        let z1 = g.add_row_broadcast(z1, self.b1)?;
        let a1 = g.tanh(z1);
        let z2 = g.matmul(a1, self.w2)?;
        let z2 = g.add_row_broadcast(z2, self.b2)?;
        let a2 = g.tanh(z2);
        let out = g.matmul(a2, self.w3)?;
        g.add_row_broadcast(out, self.b3)
    }
}

/// Binds the weights as fresh leaves; for sampling and evaluation.
impl VelocityField for VectorFieldNet {
    fn forward(&self, g: &mut Graph, x_t: Var, t: Var, cond: Option<Var>) -> Result<Var> {
        VectorFieldVars::bind(g, self).forward(g, x_t, t, cond)
    }
}

/// Noise, data and times for one flow-matching batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    /// `B x F` noise.
    pub x0: Tensor,
    /// `B x F` targets.
    pub x1: Tensor,
    /// `B x 1` times in `[0, 1]`.
    pub t: Tensor,
}

impl FlowBatch {
    pub fn new(x0: Tensor, x1: Tensor, t: Tensor) -> Result<Self> {
        if x0.shape() != x1.shape() {
            return Err(Error::dim("FlowBatch", x0.shape(), x1.shape()));
        }
        let b = x0.rows();
        if t.dims2()? != (b, 1) {
            return Err(Error::dim("FlowBatch times", t.shape(), &[b, 1]));
        }
        if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Contract("flow times must lie in [0, 1]".into()));
        }
        Ok(Self { x0, x1, t })
    }

    /// Draws `x0 ~ N(0, I)` and `t ~ U[0, 1]` for the given targets.
    pub fn sample(x1: Tensor, rng: &mut rng::Rng) -> Result<Self> {
        let (b, f) = x1.dims2()?;
        let x0 = Tensor::randn(&[b, f], 1.0, rng);
        let t = Tensor::matrix(b, 1, (0..b).map(|_| rng.random::<f64>()).collect())?;
        Self::new(x0, x1, t)
    }

    pub fn interpolated(&self) -> Tensor {
        let f = self.x0.cols();
        let mut out = self.x0.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let t = self.t.data()[k / f];
            *v = (1.0 - t) * self.x0.data()[k] + t * self.x1.data()[k];
        }
        out
    }

    pub fn velocity_target(&self) -> Tensor {
        self.x1.zip_with(&self.x0, |a, b| a - b).expect("checked shapes")
    }
}

/// Mean over the batch of `|field(x_t, t, cond) - (x1 - x0)|^2`.
pub fn cfm_loss<F: VelocityField + ?Sized>(g: &mut Graph, field: &F, batch: &FlowBatch, cond: Option<Var>) -> Result<Var> {
    let b = batch.x0.rows();
    if let Some(c) = cond {
        if g.value(c).rows() != b {
            return Err(Error::dim("cfm cond", g.value(c).shape(), batch.x0.shape()));
        }
    }
    let x_t = g.leaf(batch.interpolated());
    let t = g.leaf(batch.t.clone());
    let target = g.leaf(batch.velocity_target());
    let pred = field.forward(g, x_t, t, cond)?;
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / b as f64))
}

/// Forward-Euler integration of `field` from `t = 0` to `t = 1`.
///
/// `x0` holds one state per row; `cond` has a matching row count. Each step
/// is `x <- x + field(x, k / steps, cond) / steps`.
pub fn euler_sample<F: VelocityField + ?Sized>(field: &F, x0: &Tensor, cond: Option<&Tensor>, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::config("steps", "must be >= 1"));
    }
    let (b, _) = x0.dims2()?;
    let h = 1.0 / steps as f64;
    let mut x = x0.reshape(&[b, x0.cols()])?;
    for k in 0..steps {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let tv = g.leaf(Tensor::full(&[b, 1], k as f64 * h));
        let cv = cond.map(|c| g.leaf(c.clone()));
        let v = field.forward(&mut g, xv, tv, cv)?;
        let vel = g.value(v);
        for (xi, vi) in x.data_mut().iter_mut().zip(vel.data()) {
            *xi += h * vi;
        }
        if !x.is_finite() {
            return Err(Error::Divergence {
                step: k,
                detail: "non-finite sampler state".into(),
            });
        }
    }
    x.reshape(x0.shape())
}

/// Draws `n` standard normal starting points with `dim` features.
pub fn noise(n: usize, dim: usize, rng: &mut rng::Rng) -> Tensor {
    let data = (0..n * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(n, dim, data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_many, DEFAULT_STEP, DEFAULT_TOLERANCE};
    use crate::optim::Adam;

    /// Returns a fixed tensor regardless of input.
    struct Constant(Tensor);

    impl VelocityField for Constant {
        fn forward(&self, g: &mut Graph, x_t: Var, _t: Var, _c: Option<Var>) -> Result<Var> {
            let rows = g.value(x_t).rows();
            if self.0.rows() == rows {
                Ok(g.leaf(self.0.clone()))
            } else {
                let r = g.leaf(self.0.clone());
                g.repeat_rows(r, rows)
            }
        }
    }

    fn toy_batch(seed: u64, b: usize, f: usize) -> FlowBatch {
        let mut r = rng::stream(seed, "toy");
        let x1 = Tensor::randn(&[b, f], 1.0, &mut r);
        FlowBatch::sample(x1, &mut r).unwrap()
    }

    fn loss_of<F: VelocityField>(field: &F, batch: &FlowBatch) -> f64 {
        let mut g = Graph::new();
        let l = cfm_loss(&mut g, field, batch, None).unwrap();
        g.scalar(l)
    }

    #[test]
    fn perfect_and_zero_fields() {
        let batch = toy_batch(1, 6, 3);
        assert_eq!(loss_of(&Constant(batch.velocity_target()), &batch), 0.0);
        let zero = loss_of(&Constant(Tensor::zeros(&[6, 3])), &batch);
        let expected: f64 = batch.velocity_target().data().iter().map(|v| v * v).sum::<f64>() / 6.0;
        assert!((zero - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_loop_oracle() {
        let batch = toy_batch(2, 5, 3);
        let mut r = rng::stream(2, "net");
        let net = VectorFieldNet::random(3, 2, 8, &mut r);
        let cond = Tensor::randn(&[5, 2], 1.0, &mut r);
        let mut g = Graph::new();
        let vars = VectorFieldVars::bind(&mut g, &net);
        let c = g.leaf(cond.clone());
        let l = cfm_loss(&mut g, &vars, &batch, Some(c)).unwrap();
        let got = g.scalar(l);

        let affine = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            (0..w.cols()).map(|j| b.data()[j] + (0..x.len()).map(|i| x[i] * w.get(i, j)).sum::<f64>()).collect()
        };
        let mut total = 0.0;
        for i in 0..5 {
            let t = batch.t.data()[i];
            let mut input: Vec<f64> = (0..3).map(|j| (1.0 - t) * batch.x0.get(i, j) + t * batch.x1.get(i, j)).collect();
            input.push(t);
            input.extend_from_slice(cond.row(i));
            let h1: Vec<f64> = affine(&input, &net.w1, &net.b1).into_iter().map(f64::tanh).collect();
            let h2: Vec<f64> = affine(&h1, &net.w2, &net.b2).into_iter().map(f64::tanh).collect();
            let out = affine(&h2, &net.w3, &net.b3);
            for (j, o) in out.iter().enumerate() {
                let d = o - (batch.x1.get(i, j) - batch.x0.get(i, j));
                total += d * d;
            }
        }
        assert!((got - total / 5.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_through_net_and_cond() {
        for seed in [1u64, 2, 3] {
            let batch = toy_batch(seed, 4, 3);
            let mut r = rng::stream(seed, "gradcheck");
            let net = VectorFieldNet::random(3, 2, 6, &mut r);
            let mut params: Vec<Tensor> = net.params().into_iter().cloned().collect();
            // non-zero biases so their gradient path is exercised
            for p in params.iter_mut().skip(1).step_by(2) {
                *p = Tensor::randn(p.shape(), 0.3, &mut r);
            }
            params.push(Tensor::randn(&[4, 2], 1.0, &mut r));
            let errs = grad_check_many(
                |g, v| {
                    let vars = VectorFieldVars { w1: v[0], b1: v[1], w2: v[2], b2: v[3], w3: v[4], b3: v[5] };
                    cfm_loss(g, &vars, &batch, Some(v[6]))
                },
                &params,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(errs.iter().all(|&x| x < DEFAULT_TOLERANCE), "{errs:?}");
        }
    }

    #[test]
    fn euler_with_zero_field_returns_start_exactly() {
        let x0 = Tensor::vector(vec![0.3, -1.7, 2.5]);
        let out = euler_sample(&Constant(Tensor::zeros(&[1, 3])), &x0, None, 50).unwrap();
        assert_eq!(out, x0);
    }

    #[test]
    fn euler_is_exact_for_constant_fields() {
        let x0 = Tensor::vector(vec![0.25, -1.0]);
        let v = Tensor::row_vector(vec![0.5, 2.0]);
        for steps in [1, 10, 100] {
            let out = euler_sample(&Constant(v.clone()), &x0, None, steps).unwrap();
            // exact up to rounding in the repeated h * v additions
            assert!((out.data()[0] - 0.75).abs() < 1e-12 && (out.data()[1] - 1.0).abs() < 1e-12, "steps={steps}");
        }
        assert!(euler_sample(&Constant(v), &x0, None, 0).is_err());
    }

    #[test]
    fn euler_reports_divergence() {
        let x0 = Tensor::vector(vec![0.0]);
        let err = euler_sample(&Constant(Tensor::row_vector(vec![f64::INFINITY])), &x0, None, 3).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }));
    }

    #[test]
    fn converges_to_a_point_mass() {
        let target = [1.0, -0.5];
        let mut r = rng::stream(3, "pointmass");
        let mut net = VectorFieldNet::random(2, 0, 32, &mut r);
        let mut opt = Adam::new(3e-3);
        let x1 = Tensor::matrix(128, 2, target.iter().copied().cycle().take(256).collect()).unwrap();
        for step in 0..6000 {
            if step == 4500 {
                opt.lr = 6e-4;
            }
            let batch = FlowBatch::sample(x1.clone(), &mut r).unwrap();
            let mut g = Graph::new();
            let vars = VectorFieldVars::bind(&mut g, &net);
            let l = cfm_loss(&mut g, &vars, &batch, None).unwrap();
            let grads = g.backward(l).unwrap();
            let gs: Vec<Tensor> = vars.vars().iter().map(|&v| grads.get(v)).collect();
            opt.step(&mut net.params_mut(), &gs).unwrap();
        }
        let starts = noise(20, 2, &mut r);
        let out = euler_sample(&net, &starts, None, DEFAULT_EULER_STEPS).unwrap();
        for i in 0..20 {
            let d = ((out.get(i, 0) - target[0]).powi(2) + (out.get(i, 1) - target[1]).powi(2)).sqrt();
            assert!(d < 0.05, "sample {i} lands {d} away");
        }
    }
}
