//! 2x2 max pooling and 2x nearest-neighbor upsampling.

use ndarray::Array4;

use super::Tensor4;

/// 2x2 max pool, stride 2. Input spatial dims must be even.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    /// Flat offset (0..4) of the winning element per output cell.
    argmax: Option<Array4<u8>>,
}

fn pool_run(x: &Tensor4) -> (Tensor4, Array4<u8>) {
    let (b, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pool needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor4::zeros((b, c, oh, ow));
    let mut arg = Array4::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_k = 0u8;
                    for k in 0..4u8 {
                        let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                        let v = x[[bi, ci, 2 * oy + dy, 2 * ox + dx]];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    y[[bi, ci, oy, ox]] = best;
                    arg[[bi, ci, oy, ox]] = best_k;
                }
            }
        }
    }
    (y, arg)
}

impl MaxPool2 {
    pub fn forward(&self, x: &Tensor4) -> Tensor4 {
        pool_run(x).0
    }

    pub fn forward_t(&mut self, x: &Tensor4) -> Tensor4 {
        let (y, arg) = pool_run(x);
        self.argmax = Some(arg);
        y
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Tensor4 {
        let arg = self.argmax.take().expect("pool backward without forward_t");
        let (b, c, oh, ow) = dy.dim();
        let mut dx = Tensor4::zeros((b, c, oh * 2, ow * 2));
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let k = arg[[bi, ci, oy, ox]];
                        let (ddy, ddx) = ((k / 2) as usize, (k % 2) as usize);
                        dx[[bi, ci, 2 * oy + ddy, 2 * ox + ddx]] += dy[[bi, ci, oy, ox]];
                    }
                }
            }
        }
        dx
    }
}

/// Parameter-free 2x nearest-neighbor upsample.
#[derive(Debug, Clone, Default)]
pub struct Upsample2;

impl Upsample2 {
    pub fn forward(&self, x: &Tensor4) -> Tensor4 {
        let (b, c, h, w) = x.dim();
        let mut y = Tensor4::zeros((b, c, h * 2, w * 2));
        for bi in 0..b {
            for ci in 0..c {
                for iy in 0..h {
                    for ix in 0..w {
                        let v = x[[bi, ci, iy, ix]];
                        y[[bi, ci, 2 * iy, 2 * ix]] = v;
                        y[[bi, ci, 2 * iy, 2 * ix + 1]] = v;
                        y[[bi, ci, 2 * iy + 1, 2 * ix]] = v;
                        y[[bi, ci, 2 * iy + 1, 2 * ix + 1]] = v;
                    }
                }
            }
        }
        y
    }

    /// Gradient of nearest upsampling: each input cell collects its 2x2 block.
    pub fn backward(&self, dy: &Tensor4) -> Tensor4 {
        let (b, c, h2, w2) = dy.dim();
        let (h, w) = (h2 / 2, w2 / 2);
        let mut dx = Tensor4::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                for iy in 0..h {
                    for ix in 0..w {
                        dx[[bi, ci, iy, ix]] = dy[[bi, ci, 2 * iy, 2 * ix]]
                            + dy[[bi, ci, 2 * iy, 2 * ix + 1]]
                            + dy[[bi, ci, 2 * iy + 1, 2 * ix]]
                            + dy[[bi, ci, 2 * iy + 1, 2 * ix + 1]];
                    }
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pool_picks_max_and_routes_gradient() {
        let x = array![[[[1.0, 2.0], [3.0, 4.0]]]];
        let mut pool = MaxPool2::default();
        let y = pool.forward_t(&x);
        assert_eq!(y[[0, 0, 0, 0]], 4.0);
        let dy = array![[[[5.0]]]];
        let dx = pool.backward(&dy);
        assert_eq!(dx[[0, 0, 1, 1]], 5.0);
        assert_eq!(dx.sum(), 5.0);
    }

    #[test]
    fn upsample_round_trip_gradient() {
        let x = array![[[[1.0, 2.0], [3.0, 4.0]]]];
        let up = Upsample2;
        let y = up.forward(&x);
        assert_eq!(y.dim(), (1, 1, 4, 4));
        assert_eq!(y[[0, 0, 3, 3]], 4.0);
        let dx = up.backward(&y);
        assert_eq!(dx, array![[[[4.0, 8.0], [12.0, 16.0]]]]);
    }
}
