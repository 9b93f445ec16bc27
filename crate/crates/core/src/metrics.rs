//! Segmentation quality (dataset-level mIoU from an accumulated confusion
//! matrix) and the per-pixel cross-entropy training loss.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Tensor4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("prediction and truth shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("no pixels accumulated")]
    Empty,
    #[error("logits have {got} channels, expected {expected}")]
    ClassMismatch { expected: usize, got: usize },
}

/// Confusion-matrix accumulator. Rows are ground truth, columns predictions.
/// Accumulation is associative, so batches may arrive in any order and
/// partial evaluations merge by matrix addition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationEval {
    pub num_classes: usize,
    /// Flattened row-major `num_classes x num_classes` counts.
    pub confusion: Vec<u64>,
}

impl SegmentationEval {
    pub fn new(num_classes: usize) -> Self {
        SegmentationEval {
            num_classes,
            confusion: vec![0; num_classes * num_classes],
        }
    }

    pub fn total_pixels(&self) -> u64 {
        self.confusion.iter().sum()
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.confusion[truth * self.num_classes + predicted]
    }

    /// Accumulates one prediction/truth label map pair.
    pub fn update(
        &mut self,
        predicted: &Array2<usize>,
        truth: &Array2<usize>,
    ) -> Result<(), MetricsError> {
        if predicted.dim() != truth.dim() {
            return Err(MetricsError::ShapeMismatch(
                predicted.shape().to_vec(),
                truth.shape().to_vec(),
            ));
        }
        let n = self.num_classes;
        for (&p, &t) in predicted.iter().zip(truth.iter()) {
            if p >= n {
                return Err(MetricsError::LabelOutOfRange {
                    label: p,
                    num_classes: n,
                });
            }
            if t >= n {
                return Err(MetricsError::LabelOutOfRange {
                    label: t,
                    num_classes: n,
                });
            }
            self.confusion[t * n + p] += 1;
        }
        Ok(())
    }

    /// Merges another accumulator (parallel evaluation support).
    pub fn merge(&mut self, other: &SegmentationEval) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.confusion.iter_mut().zip(other.confusion.iter()) {
            *a += b;
        }
    }

    /// Per-class intersection-over-union. Classes absent from both the
    /// prediction and the truth (zero union) yield `None` and are excluded
    /// from the mean.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let n = self.num_classes;
        (0..n)
            .map(|i| {
                let tp = self.count(i, i);
                let row: u64 = (0..n).map(|j| self.count(i, j)).sum();
                let col: u64 = (0..n).map(|j| self.count(j, i)).sum();
                let union = row + col - tp;
                if union == 0 {
                    None
                } else {
                    Some(tp as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over classes with nonzero union, in [0, 1].
    pub fn miou(&self) -> Result<f64, MetricsError> {
        if self.total_pixels() == 0 {
            return Err(MetricsError::Empty);
        }
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        // total_pixels > 0 guarantees at least one class has nonzero union.
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// Mean cross-entropy in nats per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub pixel_count: usize,
}

const LOG_FLOOR: f64 = 1e-12;

/// Softmax cross-entropy over the class axis of `[B, N, H, W]` logits against
/// `[B, H, W]` integer labels, averaged over all pixels of the batch.
///
/// Returns the loss and the gradient w.r.t. the logits,
/// `(softmax - onehot) / (B*H*W)`, optionally weighted per class.
pub fn cross_entropy_loss(
    logits: &Tensor4,
    truth: &Array3<usize>,
    class_weights: Option<&[f64]>,
) -> Result<(LossValue, Tensor4), MetricsError> {
    let (b, n, h, w) = logits.dim();
    if truth.dim() != (b, h, w) {
        return Err(MetricsError::ShapeMismatch(
            logits.shape().to_vec(),
            truth.shape().to_vec(),
        ));
    }
    if let Some(cw) = class_weights {
        if cw.len() != n {
            return Err(MetricsError::ClassMismatch {
                expected: n,
                got: cw.len(),
            });
        }
    }
    let pixels = b * h * w;
    let norm = 1.0 / pixels as f64;
    let mut grad = Tensor4::zeros((b, n, h, w));
    let mut loss = 0.0;
    let mut probs = vec![0.0f64; n];
    for bi in 0..b {
        for iy in 0..h {
            for ix in 0..w {
                let t = truth[[bi, iy, ix]];
                if t >= n {
                    return Err(MetricsError::LabelOutOfRange {
                        label: t,
                        num_classes: n,
                    });
                }
                let mut max = f64::NEG_INFINITY;
                for ci in 0..n {
                    max = max.max(logits[[bi, ci, iy, ix]]);
                }
                let mut denom = 0.0;
                for ci in 0..n {
                    let e = (logits[[bi, ci, iy, ix]] - max).exp();
                    probs[ci] = e;
                    denom += e;
                }
                let weight = class_weights.map_or(1.0, |cw| cw[t]);
                for ci in 0..n {
                    probs[ci] /= denom;
                    grad[[bi, ci, iy, ix]] =
                        weight * norm * (probs[ci] - if ci == t { 1.0 } else { 0.0 });
                }
                loss -= weight * probs[t].max(LOG_FLOOR).ln();
            }
        }
    }
    Ok((
        LossValue {
            value: loss * norm,
            pixel_count: pixels,
        },
        grad,
    ))
}

/// Hard per-pixel class decisions from logits: argmax over the class axis.
pub fn argmax_labels(logits: &Tensor4) -> Array3<usize> {
    let (b, n, h, w) = logits.dim();
    let mut out = Array3::zeros((b, h, w));
    for bi in 0..b {
        for iy in 0..h {
            for ix in 0..w {
                let mut best = f64::NEG_INFINITY;
                let mut best_c = 0;
                for ci in 0..n {
                    let v = logits[[bi, ci, iy, ix]];
                    if v > best {
                        best = v;
                        best_c = ci;
                    }
                }
                out[[bi, iy, ix]] = best_c;
            }
        }
    }
    out
}

/// JSON-serializable evaluation summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub num_classes: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub total_pixels: u64,
}

impl EvalSummary {
    pub fn from_eval(eval: &SegmentationEval) -> Result<Self, MetricsError> {
        Ok(EvalSummary {
            num_classes: eval.num_classes,
            per_class_iou: eval.per_class_iou(),
            miou: eval.miou()?,
            total_pixels: eval.total_pixels(),
        })
    }
}
