//! Convolutional block attention: channel attention (which feature channels
//! matter) followed by spatial attention (which pixels matter).
//!
//! Channel attention pools each channel over all spatial positions (average
//! and maximum), pushes both vectors through a shared two-layer MLP with a
//! reduction bottleneck, sums the branches and squashes with a sigmoid.
//! Spatial attention stacks the channel-wise mean and maximum maps, runs a
//! 7x7 convolution, and squashes. Both weight maps multiply the input with
//! broadcasting.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::conv::Conv2d;
use super::{sigmoid, Tensor4};

#[derive(Debug, Clone)]
struct CaCache {
    input: Tensor4,
    avg: Array2<f64>,
    /// Flat spatial index of the per-channel maximum.
    argmax: Array2<usize>,
    /// Pre-ReLU hidden activations of the two branches.
    hidden_avg: Array2<f64>,
    hidden_max: Array2<f64>,
    map: Array2<f64>,
}

/// Per-channel attention gate.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    /// `[C/r, C]` reduction map, shared across both pooling branches.
    pub w0: Array2<f64>,
    /// `[C, C/r]` expansion map.
    pub w1: Array2<f64>,
    pub grad_w0: Array2<f64>,
    pub grad_w1: Array2<f64>,
    cache: Option<CaCache>,
}

impl ChannelAttention {
    pub fn new(channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        assert!(
            channels % reduction == 0,
            "channel count {channels} not divisible by reduction {reduction}"
        );
        let hidden = channels / reduction;
        let d0 = Normal::new(0.0, (2.0 / channels as f64).sqrt()).unwrap();
        let d1 = Normal::new(0.0, (2.0 / hidden as f64).sqrt()).unwrap();
        ChannelAttention {
            w0: Array2::from_shape_fn((hidden, channels), |_| d0.sample(rng)),
            w1: Array2::from_shape_fn((channels, hidden), |_| d1.sample(rng)),
            grad_w0: Array2::zeros((hidden, channels)),
            grad_w1: Array2::zeros((channels, hidden)),
            cache: None,
        }
    }

    fn pools(x: &Tensor4) -> (Array2<f64>, Array2<f64>, Array2<usize>) {
        let (b, c, h, w) = x.dim();
        let n = (h * w) as f64;
        let mut avg = Array2::zeros((b, c));
        let mut max = Array2::zeros((b, c));
        let mut arg = Array2::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                let plane = x.index_axis(Axis(0), bi);
                let plane = plane.index_axis(Axis(0), ci);
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                let mut sum = 0.0;
                for (i, &v) in plane.iter().enumerate() {
                    sum += v;
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                avg[[bi, ci]] = sum / n;
                max[[bi, ci]] = best;
                arg[[bi, ci]] = best_i;
            }
        }
        (avg, max, arg)
    }

    /// The compact `[B, C]` channel weight map in (0, 1).
    pub fn attention_map(&self, x: &Tensor4) -> Array2<f64> {
        let (avg, max, _) = Self::pools(x);
        self.map_from_pools(&avg, &max).0
    }

    fn map_from_pools(
        &self,
        avg: &Array2<f64>,
        max: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        // Branch through the shared MLP; hidden pre-activations are returned
        // for the backward pass.
        let hidden_avg = avg.dot(&self.w0.t());
        let hidden_max = max.dot(&self.w0.t());
        let out_avg = hidden_avg.mapv(|v| v.max(0.0)).dot(&self.w1.t());
        let out_max = hidden_max.mapv(|v| v.max(0.0)).dot(&self.w1.t());
        let map = (out_avg + out_max).mapv(sigmoid);
        (map, hidden_avg, hidden_max)
    }

    fn apply(x: &Tensor4, map: &Array2<f64>) -> Tensor4 {
        let mut y = x.clone();
        let (b, c, _, _) = x.dim();
        for bi in 0..b {
            for ci in 0..c {
                let m = map[[bi, ci]];
                y.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| v * m);
            }
        }
        y
    }

    pub fn forward(&self, x: &Tensor4) -> Tensor4 {
        Self::apply(x, &self.attention_map(x))
    }

    pub fn forward_t(&mut self, x: &Tensor4) -> Tensor4 {
        let (avg, max, argmax) = Self::pools(x);
        let (map, hidden_avg, hidden_max) = self.map_from_pools(&avg, &max);
        let y = Self::apply(x, &map);
        self.cache = Some(CaCache {
            input: x.clone(),
            avg,
            argmax,
            hidden_avg,
            hidden_max,
            map,
        });
        y
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Tensor4 {
        let cache = self.cache.take().expect("channel attention backward without forward_t");
        let (b, c, h, w) = cache.input.dim();
        let n = (h * w) as f64;

        // Split the product rule: gradient through the straight multiply and
        // gradient into the gate.
        let mut dx = Self::apply(dy, &cache.map);
        let mut dmap = Array2::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                let dys = dy.index_axis(Axis(0), bi);
                let dys = dys.index_axis(Axis(0), ci);
                let xs = cache.input.index_axis(Axis(0), bi);
                let xs = xs.index_axis(Axis(0), ci);
                dmap[[bi, ci]] = dys.iter().zip(xs.iter()).map(|(&d, &v)| d * v).sum();
            }
        }
        let dpre = &dmap * &cache.map.mapv(|m| m * (1.0 - m));

        // Shared-MLP backward for one pooling branch; returns the gradient
        // w.r.t. the pooled vector.
        let mut branch = |hidden_pre: &Array2<f64>, pooled: &Array2<f64>| -> Array2<f64> {
            let hr = hidden_pre.mapv(|v| v.max(0.0));
            self.grad_w1 += &dpre.t().dot(&hr);
            let mut dh = dpre.dot(&self.w1);
            dh.zip_mut_with(hidden_pre, |d, &p| {
                if p <= 0.0 {
                    *d = 0.0;
                }
            });
            self.grad_w0 += &dh.t().dot(pooled);
            dh.dot(&self.w0)
        };

        let davg = branch(&cache.hidden_avg, &cache.avg);
        let max_pooled = {
            let mut m = Array2::zeros((b, c));
            for bi in 0..b {
                for ci in 0..c {
                    let idx = cache.argmax[[bi, ci]];
                    let xs = cache.input.index_axis(Axis(0), bi);
                    let xs = xs.index_axis(Axis(0), ci);
                    m[[bi, ci]] = xs.as_slice().map_or_else(
                        || *xs.iter().nth(idx).unwrap(),
                        |s| s[idx],
                    );
                }
            }
            m
        };
        let dmax = branch(&cache.hidden_max, &max_pooled);

        for bi in 0..b {
            for ci in 0..c {
                let da = davg[[bi, ci]] / n;
                let mut plane = dx.index_axis_mut(Axis(0), bi);
                let mut plane = plane.index_axis_mut(Axis(0), ci);
                plane.mapv_inplace(|v| v + da);
                let idx = cache.argmax[[bi, ci]];
                let (iy, ix) = (idx / w, idx % w);
                plane[[iy, ix]] += dmax[[bi, ci]];
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.grad_w0.fill(0.0);
        self.grad_w1.fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        self.w0.len() + self.w1.len()
    }
}

#[derive(Debug, Clone)]
struct SaCache {
    input: Tensor4,
    argmax_channel: Array3<usize>,
    map: Array3<f64>,
}

/// Per-pixel attention weights from a 7x7 convolution over the stacked
/// channel-mean and channel-max maps.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv2d,
    cache: Option<SaCache>,
}

impl SpatialAttention {
    pub fn new(rng: &mut impl Rng) -> Self {
        SpatialAttention {
            conv: Conv2d::new(2, 1, 7, true, rng),
            cache: None,
        }
    }

    fn descriptor(x: &Tensor4) -> (Tensor4, Array3<usize>) {
        let (b, c, h, w) = x.dim();
        let mut t = Tensor4::zeros((b, 2, h, w));
        let mut arg = Array3::zeros((b, h, w));
        for bi in 0..b {
            for iy in 0..h {
                for ix in 0..w {
                    let mut sum = 0.0;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_c = 0;
                    for ci in 0..c {
                        let v = x[[bi, ci, iy, ix]];
                        sum += v;
                        if v > best {
                            best = v;
                            best_c = ci;
                        }
                    }
                    t[[bi, 0, iy, ix]] = sum / c as f64;
                    t[[bi, 1, iy, ix]] = best;
                    arg[[bi, iy, ix]] = best_c;
                }
            }
        }
        (t, arg)
    }

    /// The compact `[B, H, W]` spatial weight map in (0, 1).
    pub fn attention_map(&self, x: &Tensor4) -> Array3<f64> {
        let (t, _) = Self::descriptor(x);
        let z = self.conv.forward(&t);
        z.index_axis(Axis(1), 0).mapv(sigmoid)
    }

    fn apply(x: &Tensor4, map: &Array3<f64>) -> Tensor4 {
        let (b, c, h, w) = x.dim();
        let mut y = x.clone();
        for bi in 0..b {
            for ci in 0..c {
                for iy in 0..h {
                    for ix in 0..w {
                        y[[bi, ci, iy, ix]] *= map[[bi, iy, ix]];
                    }
                }
            }
        }
        y
    }

    pub fn forward(&self, x: &Tensor4) -> Tensor4 {
        Self::apply(x, &self.attention_map(x))
    }

    pub fn forward_t(&mut self, x: &Tensor4) -> Tensor4 {
        let (t, argmax_channel) = Self::descriptor(x);
        let z = self.conv.forward_t(&t);
        let map = z.index_axis(Axis(1), 0).mapv(sigmoid);
        let y = Self::apply(x, &map);
        self.cache = Some(SaCache {
            input: x.clone(),
            argmax_channel,
            map,
        });
        y
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Tensor4 {
        let cache = self.cache.take().expect("spatial attention backward without forward_t");
        let (b, c, h, w) = cache.input.dim();

        let mut dx = Self::apply(dy, &cache.map);
        let mut dz = Tensor4::zeros((b, 1, h, w));
        for bi in 0..b {
            for iy in 0..h {
                for ix in 0..w {
                    let mut dmap = 0.0;
                    for ci in 0..c {
                        dmap += dy[[bi, ci, iy, ix]] * cache.input[[bi, ci, iy, ix]];
                    }
                    let m = cache.map[[bi, iy, ix]];
                    dz[[bi, 0, iy, ix]] = dmap * m * (1.0 - m);
                }
            }
        }
        let dt = self.conv.backward(&dz);
        for bi in 0..b {
            for iy in 0..h {
                for ix in 0..w {
                    let dmean = dt[[bi, 0, iy, ix]] / c as f64;
                    for ci in 0..c {
                        dx[[bi, ci, iy, ix]] += dmean;
                    }
                    dx[[bi, cache.argmax_channel[[bi, iy, ix]], iy, ix]] += dt[[bi, 1, iy, ix]];
                }
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.conv.zero_grad();
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }
}

/// Channel attention followed by spatial attention, shape preserving.
#[derive(Debug, Clone)]
pub struct Cbam {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl Cbam {
    pub fn new(channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        Cbam {
            channel: ChannelAttention::new(channels, reduction, rng),
            spatial: SpatialAttention::new(rng),
        }
    }

    pub fn forward(&self, x: &Tensor4) -> Tensor4 {
        self.spatial.forward(&self.channel.forward(x))
    }

    pub fn forward_t(&mut self, x: &Tensor4) -> Tensor4 {
        let fp = self.channel.forward_t(x);
        self.spatial.forward_t(&fp)
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Tensor4 {
        let dfp = self.spatial.backward(dy);
        self.channel.backward(&dfp)
    }

    pub fn zero_grad(&mut self) {
        self.channel.zero_grad();
        self.spatial.zero_grad();
    }

    pub fn param_count(&self) -> usize {
        self.channel.param_count() + self.spatial.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_makes_branches_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _ca = ChannelAttention::new(8, 4, &mut rng);
        let x = Array4::from_elem((1, 8, 4, 4), 0.37);
        let (avg, max, _) = ChannelAttention::pools(&x);
        for (a, m) in avg.iter().zip(max.iter()) {
            assert!((a - m).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_mlp_gives_half_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ca = ChannelAttention::new(8, 4, &mut rng);
        ca.w0.fill(0.0);
        ca.w1.fill(0.0);
        let x = Array4::from_shape_fn((2, 8, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let map = ca.attention_map(&x);
        assert!(map.iter().all(|&m| (m - 0.5).abs() < 1e-12));
    }

    #[test]
    fn channel_map_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ca = ChannelAttention::new(16, 4, &mut rng);
        let x = Array4::from_shape_fn((1, 16, 8, 8), |_| rng.gen_range(-2.0..2.0));
        let map = ca.attention_map(&x);
        assert_eq!(map.dim(), (1, 16));
        assert!(map.iter().all(|&m| m > 0.0 && m < 1.0));
    }

    #[test]
    fn zero_spatial_conv_gives_half_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut sa = SpatialAttention::new(&mut rng);
        sa.conv.weight.fill(0.0);
        if let Some(b) = sa.conv.bias.as_mut() {
            b.fill(0.0);
        }
        let x = Array4::from_elem((1, 4, 5, 5), 1.0);
        let map = sa.attention_map(&x);
        assert!(map.iter().all(|&m| (m - 0.5).abs() < 1e-12));
    }

    #[test]
    fn single_channel_collapses_mean_and_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array4::from_shape_fn((1, 1, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let (t, _) = SpatialAttention::descriptor(&x);
        let mean = t.index_axis(Axis(1), 0);
        let max = t.index_axis(Axis(1), 1);
        assert_eq!(mean, max);
        assert_eq!(mean, x.index_axis(Axis(1), 0));
    }

    #[test]
    fn spatial_map_is_single_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let sa = SpatialAttention::new(&mut rng);
        let x = Array4::from_shape_fn((1, 8, 16, 16), |_| rng.gen_range(-1.0..1.0));
        let map = sa.attention_map(&x);
        assert_eq!(map.dim(), (1, 16, 16));
        assert!(map.iter().all(|&m| m > 0.0 && m < 1.0));
    }

    #[test]
    fn cbam_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cbam = Cbam::new(10, 2, &mut rng);
        let x = Array4::from_shape_fn((2, 10, 4, 6), |_| rng.gen_range(-1.0..1.0));
        let y = cbam.forward_t(&x);
        assert_eq!(y.dim(), x.dim());
    }

    #[test]
    fn zero_weights_quarter_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut cbam = Cbam::new(8, 4, &mut rng);
        cbam.channel.w0.fill(0.0);
        cbam.channel.w1.fill(0.0);
        cbam.spatial.conv.weight.fill(0.0);
        if let Some(b) = cbam.spatial.conv.bias.as_mut() {
            b.fill(0.0);
        }
        let x = Array4::from_shape_fn((1, 8, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let y = cbam.forward(&x);
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - 0.25 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn saturating_weights_approach_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut cbam = Cbam::new(8, 4, &mut rng);
        cbam.channel.w0.fill(10.0);
        cbam.channel.w1.fill(10.0);
        cbam.spatial.conv.weight.fill(0.0);
        if let Some(b) = cbam.spatial.conv.bias.as_mut() {
            b.fill(40.0);
        }
        // Strictly positive input keeps both pooled vectors positive, so the
        // saturated MLP drives every gate to ~1.
        let x = Array4::from_shape_fn((1, 8, 4, 4), |_| rng.gen_range(0.5..1.5));
        let y = cbam.forward(&x);
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut cbam = Cbam::new(4, 2, &mut rng);
        let x = Array4::from_shape_fn((1, 4, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let cw = Array4::from_shape_fn((1, 4, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let _ = cbam.forward_t(&x);
        let dx = cbam.backward(&cw);

        let loss = |cbam: &Cbam, x: &Tensor4| (cbam.forward(x) * &cw).sum();
        let eps = 1e-6;
        for idx in [[0, 0, 0, 0], [0, 3, 2, 1], [0, 1, 3, 3]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let up = loss(&cbam, &xp);
            xp[idx] -= 2.0 * eps;
            let down = loss(&cbam, &xp);
            let fd = (up - down) / (2.0 * eps);
            assert!(
                (dx[idx] - fd).abs() < 1e-6,
                "fd {fd} vs analytic {}",
                dx[idx]
            );
        }

        // Weight gradients.
        let w_fd = {
            let mut c = cbam.channel.w0.clone();
            let orig = c[[0, 1]];
            c[[0, 1]] = orig + eps;
            let mut cb = Cbam {
                channel: ChannelAttention {
                    w0: c.clone(),
                    ..cbam.channel.clone()
                },
                spatial: cbam.spatial.clone(),
            };
            let up = loss(&cb, &x);
            c[[0, 1]] = orig - eps;
            cb.channel.w0 = c;
            let down = loss(&cb, &x);
            (up - down) / (2.0 * eps)
        };
        assert!((cbam.channel.grad_w0[[0, 1]] - w_fd).abs() < 1e-6);
    }
}
