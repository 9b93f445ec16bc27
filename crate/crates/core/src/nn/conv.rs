//! Same-padding stride-1 convolution via im2col + GEMM.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::Tensor4;

/// 2-D convolution, stride 1, zero padding `kernel/2` (spatial size is
/// preserved). Weights are stored flattened as `[c_out, c_in*k*k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
    pub grad_weight: Array2<f64>,
    pub grad_bias: Option<Array1<f64>>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    cache_input: Option<Tensor4>,
}

impl Conv2d {
    /// He-normal initialization (fan-in `c_in*k*k`), zero bias.
    pub fn new(c_in: usize, c_out: usize, kernel: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let fan_in = c_in * kernel * kernel;
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let weight = Array2::from_shape_fn((c_out, fan_in), |_| dist.sample(rng));
        Conv2d {
            weight,
            bias: bias.then(|| Array1::zeros(c_out)),
            grad_weight: Array2::zeros((c_out, fan_in)),
            grad_bias: bias.then(|| Array1::zeros(c_out)),
            c_in,
            c_out,
            kernel,
            cache_input: None,
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn forward_one(&self, x: ArrayView3<f64>) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let col = im2col(x, self.kernel, self.pad());
        let mut y_mat = self.weight.dot(&col);
        if let Some(bias) = &self.bias {
            for (mut row, b) in y_mat.axis_iter_mut(Axis(0)).zip(bias.iter()) {
                row.mapv_inplace(|v| v + b);
            }
        }
        y_mat.into_shape_with_order((self.c_out, h, w)).unwrap()
    }

    pub fn forward(&self, x: &Tensor4) -> Tensor4 {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.c_in, "conv input channels");
        let outs: Vec<Array3<f64>> = (0..b)
            .into_par_iter()
            .map(|bi| self.forward_one(x.index_axis(Axis(0), bi)))
            .collect();
        let mut y = Tensor4::zeros((b, self.c_out, h, w));
        for (bi, o) in outs.into_iter().enumerate() {
            y.index_axis_mut(Axis(0), bi).assign(&o);
        }
        y
    }

    pub fn forward_t(&mut self, x: &Tensor4) -> Tensor4 {
        let y = self.forward(x);
        self.cache_input = Some(x.clone());
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    /// The im2col of the cached input is recomputed rather than cached;
    /// activations are much smaller than their unfolded form.
    pub fn backward(&mut self, dy: &Tensor4) -> Tensor4 {
        let x = self
            .cache_input
            .take()
            .expect("conv backward without forward_t");
        let (b, _, h, w) = x.dim();
        let pad = self.pad();
        let k = self.kernel;

        struct PerImage {
            dx: Array3<f64>,
            dw: Array2<f64>,
            db: Option<Array1<f64>>,
        }

        let parts: Vec<PerImage> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let xi = x.index_axis(Axis(0), bi);
                let dyi = dy.index_axis(Axis(0), bi);
                let dy_mat = dyi
                    .to_owned()
                    .into_shape_with_order((self.c_out, h * w))
                    .unwrap();
                let col = im2col(xi, k, pad);
                let dw = dy_mat.dot(&col.t());
                let db = self.bias.as_ref().map(|_| dy_mat.sum_axis(Axis(1)));
                let dcol = self.weight.t().dot(&dy_mat);
                let dx = col2im(&dcol, self.c_in, h, w, k, pad);
                PerImage { dx, dw, db }
            })
            .collect();

        let mut dx = Tensor4::zeros(x.raw_dim());
        for (bi, part) in parts.into_iter().enumerate() {
            dx.index_axis_mut(Axis(0), bi).assign(&part.dx);
            self.grad_weight += &part.dw;
            if let (Some(gb), Some(db)) = (self.grad_bias.as_mut(), part.db) {
                *gb += &db;
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        if let Some(gb) = self.grad_bias.as_mut() {
            gb.fill(0.0);
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }
}

/// Unfolds `[C, H, W]` into `[C*K*K, H*W]` patch columns (zero padding).
pub(crate) fn im2col(x: ArrayView3<f64>, k: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut col = Array2::zeros((c * k * k, h * w));
    {
        let col_slice = col.as_slice_mut().unwrap();
        for ci in 0..c {
            let plane = x.slice(s![ci, .., ..]);
            let plane = plane.to_slice().unwrap_or(&[]);
            let plane_owned;
            let plane: &[f64] = if plane.is_empty() {
                plane_owned = x.slice(s![ci, .., ..]).to_owned();
                plane_owned.as_slice().unwrap()
            } else {
                plane
            };
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let base = row * (h * w);
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let ox0 = pad.saturating_sub(kx);
                        let ox1 = (w + pad).saturating_sub(kx).min(w);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let ix0 = ox0 + kx - pad;
                        let src = &plane[iy as usize * w + ix0..iy as usize * w + ix0 + (ox1 - ox0)];
                        let dst = &mut col_slice[base + oy * w + ox0..base + oy * w + ox1];
                        dst.copy_from_slice(src);
                    }
                }
            }
        }
    }
    col
}

/// Folds patch-column gradients back onto the input plane (scatter-add).
pub(crate) fn col2im(dcol: &Array2<f64>, c: usize, h: usize, w: usize, k: usize, pad: usize) -> Array3<f64> {
    let mut dx = Array3::zeros((c, h, w));
    let dcol_slice = dcol.as_slice().expect("dcol standard layout");
    let dx_slice = dx.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let base = row * (h * w);
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let ox0 = pad.saturating_sub(kx);
                    let ox1 = (w + pad).saturating_sub(kx).min(w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let ix0 = ox0 + kx - pad;
                    let src = &dcol_slice[base + oy * w + ox0..base + oy * w + ox1];
                    let dst0 = ci * h * w + iy as usize * w + ix0;
                    for (i, v) in src.iter().enumerate() {
                        dx_slice[dst0 + i] += v;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct O(HWCK^2) convolution used as the oracle.
    fn conv_naive(x: &Tensor4, conv: &Conv2d) -> Tensor4 {
        let (b, c_in, h, w) = x.dim();
        let k = conv.kernel;
        let pad = k / 2;
        let mut y = Array4::zeros((b, conv.c_out, h, w));
        for bi in 0..b {
            for co in 0..conv.c_out {
                for oy in 0..h {
                    for ox in 0..w {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |bias| bias[co]);
                        for ci in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as isize + ky as isize - pad as isize;
                                    let ix = ox as isize + kx as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[[bi, ci, iy as usize, ix as usize]]
                                        * conv.weight[[co, (ci * k + ky) * k + kx]];
                                }
                            }
                        }
                        y[[bi, co, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, c_in, c_out) in [(1, 3, 2), (3, 2, 4), (7, 2, 1)] {
            let conv = Conv2d::new(c_in, c_out, k, true, &mut rng);
            let x = Array4::from_shape_fn((2, c_in, 5, 6), |_| {
                rng.gen_range(-1.0..1.0)
            });
            let got = conv.forward(&x);
            let want = conv_naive(&x, &conv);
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_larger_than_padded_input() {
        // A 7x7 kernel over a 2x2 map: most taps fall outside even with
        // padding 3.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let conv = Conv2d::new(2, 1, 7, true, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 2, 2), |_| rng.gen_range(-1.0..1.0));
        let got = conv.forward(&x);
        let want = conv_naive(&x, &conv);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::new(2, 3, 3, true, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 4, 4), |_| rng.gen_range(-1.0..1.0));
        // Loss = sum of outputs weighted by fixed random coefficients.
        let cw = Array4::from_shape_fn((1, 3, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let y = conv.forward_t(&x);
        let _ = y;
        let dx = conv.backward(&cw);

        let loss = |conv: &Conv2d, x: &Tensor4| (conv.forward(x) * &cw).sum();
        let eps = 1e-6;

        // dL/dx.
        let mut xp = x.clone();
        for idx in [[0, 0, 0, 0], [0, 1, 2, 3], [0, 0, 3, 1]] {
            let orig = xp[idx];
            xp[idx] = orig + eps;
            let up = loss(&conv, &xp);
            xp[idx] = orig - eps;
            let down = loss(&conv, &xp);
            xp[idx] = orig;
            let fd = (up - down) / (2.0 * eps);
            assert!((dx[idx] - fd).abs() < 1e-6, "dx {fd} vs {}", dx[idx]);
        }

        // dL/dw.
        for widx in [[0usize, 0usize], [2, 17], [1, 9]] {
            let orig = conv.weight[widx];
            conv.weight[widx] = orig + eps;
            let up = loss(&conv, &x);
            conv.weight[widx] = orig - eps;
            let down = loss(&conv, &x);
            conv.weight[widx] = orig;
            let fd = (up - down) / (2.0 * eps);
            let got = conv.grad_weight[widx];
            assert!((got - fd).abs() < 1e-6, "dw {fd} vs {got}");
        }
    }
}
