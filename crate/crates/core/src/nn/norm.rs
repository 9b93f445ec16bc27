//! Batch normalization over the channel axis.

use ndarray::{Array1, Axis};

use super::Tensor4;

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor4,
    inv_std: Array1<f64>,
}

/// Per-channel batch norm. `forward_t` normalizes with batch statistics and
/// updates the running estimates; `forward` uses the running estimates.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub grad_gamma: Array1<f64>,
    pub grad_beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&self, x: &Tensor4) -> Tensor4 {
        let (b, c, h, w) = x.dim();
        let mut y = Tensor4::zeros((b, c, h, w));
        for ci in 0..c {
            let inv = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            let (m, g, bt) = (self.running_mean[ci], self.gamma[ci], self.beta[ci]);
            let xs = x.index_axis(Axis(1), ci);
            let mut ys = y.index_axis_mut(Axis(1), ci);
            ys.assign(&xs.mapv(|v| (v - m) * inv * g + bt));
        }
        y
    }

    pub fn forward_t(&mut self, x: &Tensor4) -> Tensor4 {
        let (b, c, h, w) = x.dim();
        let n = (b * h * w) as f64;
        let mut y = Tensor4::zeros((b, c, h, w));
        let mut xhat = Tensor4::zeros((b, c, h, w));
        let mut inv_std = Array1::zeros(c);
        for ci in 0..c {
            let xs = x.index_axis(Axis(1), ci);
            let mean = xs.sum() / n;
            let var = xs.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std[ci] = inv;
            let (g, bt) = (self.gamma[ci], self.beta[ci]);
            let xh = xs.mapv(|v| (v - mean) * inv);
            y.index_axis_mut(Axis(1), ci).assign(&xh.mapv(|v| v * g + bt));
            xhat.index_axis_mut(Axis(1), ci).assign(&xh);
            self.running_mean[ci] = (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
            self.running_var[ci] = (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var;
        }
        self.cache = Some(BnCache { xhat, inv_std });
        y
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Tensor4 {
        let BnCache { xhat, inv_std } = self.cache.take().expect("bn backward without forward_t");
        let (b, c, h, w) = dy.dim();
        let n = (b * h * w) as f64;
        let mut dx = Tensor4::zeros((b, c, h, w));
        for ci in 0..c {
            let dys = dy.index_axis(Axis(1), ci);
            let xhs = xhat.index_axis(Axis(1), ci);
            let sum_dy = dys.sum();
            let sum_dy_xhat = dys
                .iter()
                .zip(xhs.iter())
                .fold(0.0, |acc, (&d, &xh)| acc + d * xh);
            self.grad_beta[ci] += sum_dy;
            self.grad_gamma[ci] += sum_dy_xhat;
            let g = self.gamma[ci];
            let inv = inv_std[ci];
            let mut dxs = dx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut dxs).and(&dys).and(&xhs).for_each(|o, &d, &xh| {
                *o = g * inv * (d - sum_dy / n - xh * sum_dy_xhat / n);
            });
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.fill(0.0);
        self.grad_beta.fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_forward_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::new(3);
        let x = Array4::from_shape_fn((4, 3, 5, 5), |_| rng.gen_range(-2.0..5.0));
        let y = bn.forward_t(&x);
        for ci in 0..3 {
            let ys = y.index_axis(Axis(1), ci);
            let n = ys.len() as f64;
            let mean = ys.sum() / n;
            let var = ys.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / n;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bn = BatchNorm2d::new(2);
        bn.gamma.assign(&ndarray::arr1(&[1.3, 0.7]));
        bn.beta.assign(&ndarray::arr1(&[0.1, -0.2]));
        let x = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let cw = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.gen_range(-1.0..1.0));

        let _ = bn.forward_t(&x);
        let dx = bn.backward(&cw);

        let loss = |bn: &mut BatchNorm2d, x: &Tensor4| {
            let rm = bn.running_mean.clone();
            let rv = bn.running_var.clone();
            let y = bn.forward_t(x);
            bn.cache = None;
            bn.running_mean = rm;
            bn.running_var = rv;
            (y * &cw).sum()
        };
        let eps = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 1, 2, 2], [0, 1, 1, 0]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let up = loss(&mut bn, &xp);
            xp[idx] -= 2.0 * eps;
            let down = loss(&mut bn, &xp);
            let fd = (up - down) / (2.0 * eps);
            assert!((dx[idx] - fd).abs() < 1e-6, "{fd} vs {}", dx[idx]);
        }
    }
}
