//! Minimal f64 CNN building blocks with explicit forward/backward passes.
//!
//! Every layer offers `forward` (pure, inference semantics) and `forward_t`
//! (training semantics, caches what `backward` needs). `backward` consumes
//! the cache and accumulates parameter gradients in place; callers zero them
//! between steps. Tensors are `[batch, channels, height, width]`.

mod attention;
mod conv;
mod norm;
mod pool;

pub use attention::{Cbam, ChannelAttention, SpatialAttention};
pub use conv::Conv2d;
pub use norm::BatchNorm2d;
pub use pool::{MaxPool2, Upsample2};

use ndarray::Array4;

/// `[B, C, H, W]` activation tensor.
pub type Tensor4 = Array4<f64>;

/// Numerically safe logistic; the clamp keeps outputs strictly inside (0, 1)
/// at f64 precision.
pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z.clamp(-36.0, 36.0)).exp())
}

/// Rectifier with the mask the backward pass reuses.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Array4<bool>>,
}

impl Relu {
    pub fn forward(&self, x: &Tensor4) -> Tensor4 {
        x.mapv(|v| v.max(0.0))
    }

    pub fn forward_t(&mut self, x: &Tensor4) -> Tensor4 {
        self.mask = Some(x.mapv(|v| v > 0.0));
        self.forward(x)
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Tensor4 {
        let mask = self.mask.take().expect("relu backward without forward_t");
        let mut dx = dy.clone();
        dx.zip_mut_with(&mask, |d, &m| {
            if !m {
                *d = 0.0;
            }
        });
        dx
    }
}
