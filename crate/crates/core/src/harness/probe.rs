use crate::autodiff::softmax_rows;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// Full-batch optimisation steps per probe fit.
pub const PROBE_STEPS: usize = 200;
const PROBE_LR: f64 = 0.1;
const PROBE_L2: f64 = 1e-4;

/// Multinomial logistic regression on standardised features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    weights: Tensor,
    bias: Tensor,
}

fn log_softmax_rows(z: &Tensor) -> Tensor {
    let c = z.cols();
    let mut out = z.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

impl LinearProbe {
    /// Fits from zero weights, so the result depends only on the data.
    pub fn fit(x: &Tensor, labels: &[usize], num_classes: usize) -> Result<Self> {
        let (n, d) = x.dims2()?;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if labels.len() != n {
            return Err(Error::dim("probe labels", &[n], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Contract(format!("label {bad} >= {num_classes} classes")));
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v / n as f64;
            }
        }
        let mut inv_std = vec![0.0; d];
        for (j, s) in inv_std.iter_mut().enumerate() {
            let var = (0..n).map(|r| (x.get(r, j) - mean[j]).powi(2)).sum::<f64>() / n as f64;
            *s = if var.sqrt() > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
        }
        let mut probe = Self {
            mean,
            inv_std,
            weights: Tensor::zeros(&[d, num_classes]),
            bias: Tensor::zeros(&[1, num_classes]),
        };
        let xs = probe.standardize(x)?;
        let mut onehot = Tensor::zeros(&[n, num_classes]);
        for (r, &l) in labels.iter().enumerate() {
            onehot.data_mut()[r * num_classes + l] = 1.0;
        }
        let mut opt = Adam::new(PROBE_LR);
        let xt = xs.transpose()?;
        for _ in 0..PROBE_STEPS {
            let z = probe.logits_standardized(&xs)?;
            let resid = softmax_rows(&z, None)?.zip_with(&onehot, |p, y| (p - y) / n as f64)?;
            let gw = xt.matmul(&resid)?.zip_with(&probe.weights, |g, w| g + PROBE_L2 * w)?;
            let gb = resid.mean_rows()?.scale(n as f64);
            opt.step(&mut [&mut probe.weights, &mut probe.bias], &[gw, gb])?;
        }
        Ok(probe)
    }

    fn standardize(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if d != self.mean.len() {
            return Err(Error::dim("probe input", &[n, d], &[n, self.mean.len()]));
        }
        let mut out = x.reshape(&[n, d])?;
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        Ok(out)
    }

    /// Mean log-likelihood of `labels`.
    pub fn log_likelihood(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let z = self.logits(x)?;
        let lp = log_softmax_rows(&z);
        let c = z.cols();
        Ok(labels.iter().enumerate().map(|(r, &l)| lp.data()[r * c + l]).sum::<f64>() / labels.len() as f64)
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.logits_standardized(&self.standardize(x)?)
    }

    fn logits_standardized(&self, xs: &Tensor) -> Result<Tensor> {
        let z = xs.matmul(&self.weights)?;
        let c = z.cols();
        let mut z = z;
        for row in z.data_mut().chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(z)
    }

    /// Arg-max class per row; ties go to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        let c = z.cols();
        Ok(z.data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        if pred.len() != labels.len() {
            return Err(Error::dim("probe labels", &[pred.len()], &[labels.len()]));
        }
        if pred.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}
