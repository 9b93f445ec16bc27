//! End-to-end training of the codec through the simulated channel, and
//! per-SNR evaluation of a trained codec.
//!
//! Every stochastic choice (batch order, per-batch SNR draw, channel noise)
//! runs on its own substream derived from the training seed, so `(seed,
//! configs)` determine the history and final parameters bit-exactly on one
//! machine.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{transmit_features, ChannelConfig};
use crate::codec::{CodecError, CodecState, FeatureTensor, TransmittedFeatures};
use crate::data::{derive_seed, BatchIterator, DataError, DatasetSplit};
use crate::metrics::{argmax_labels, cross_entropy_loss, MetricsError, SegmentationEval};

/// Optimizer selector (the reference procedure uses RMSprop).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    Rmsprop,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// RMSprop moving-average decay.
    pub rms_decay: f64,
    /// RMSprop denominator epsilon.
    pub rms_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Training SNR is drawn uniformly from this range per batch.
    pub snr_low_db: f64,
    pub snr_high_db: f64,
    /// Draw one SNR per image instead of per batch.
    pub snr_per_image: bool,
    pub seed: u64,
    /// Checkpoint cadence in epochs when a checkpoint directory is given.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            optimizer: Optimizer::Rmsprop,
            rms_decay: 0.99,
            rms_epsilon: 1e-8,
            batch_size: 4,
            epochs: 60,
            snr_low_db: 1.0,
            snr_high_db: 20.0,
            snr_per_image: false,
            seed: 0,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0) {
            return Err("train.learning_rate: must be positive".into());
        }
        if self.snr_low_db > self.snr_high_db {
            return Err("train.snr_low_db: must not exceed snr_high_db".into());
        }
        if self.batch_size == 0 {
            return Err("train.batch_size: must be positive".into());
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return Err("train.rms_decay: must be in [0, 1)".into());
        }
        Ok(())
    }
}

/// One epoch of history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: Option<f64>,
    pub wall_time_s: f64,
}

/// Full training history plus run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub final_checkpoint: Option<PathBuf>,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    pub seed: u64,
    pub init_seed: u64,
    pub channel_seed: u64,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptySplit,
    #[error("SNR list is empty")]
    EmptySnrList,
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// RMSprop: `v = d*v + (1-d)*g^2; w -= lr * g / (sqrt(v) + eps)`.
struct Rmsprop {
    caches: Vec<Vec<f64>>,
    lr: f64,
    decay: f64,
    eps: f64,
}

impl Rmsprop {
    fn new(state: &mut CodecState, tc: &TrainConfig) -> Self {
        let mut caches = Vec::new();
        state.visit_params_mut(&mut |v, _| caches.push(vec![0.0; v.len()]));
        Rmsprop {
            caches,
            lr: tc.learning_rate,
            decay: tc.rms_decay,
            eps: tc.rms_epsilon,
        }
    }

    fn step(&mut self, state: &mut CodecState) {
        let mut i = 0;
        let (lr, decay, eps) = (self.lr, self.decay, self.eps);
        let caches = &mut self.caches;
        state.visit_params_mut(&mut |values, grads| {
            let cache = &mut caches[i];
            i += 1;
            for ((w, g), c) in values.iter_mut().zip(grads.iter()).zip(cache.iter_mut()) {
                *c = decay * *c + (1.0 - decay) * g * g;
                *w -= lr * g / (c.sqrt() + eps);
            }
        });
    }
}

/// Applies the channel gradient (`h` per element) to whatever actually
/// crossed it: always the bottleneck, the skips only in skips-over-channel
/// mode.
fn scale_grads(grads: &mut crate::codec::FeatureGrads, cfg: &ChannelConfig) {
    let g = cfg.grad_gain();
    if g == 1.0 {
        return;
    }
    grads.bottleneck.mapv_inplace(|v| v * g);
    if cfg.transmit_skips {
        for s in grads.skips.iter_mut() {
            s.mapv_inplace(|v| v * g);
        }
    }
}

fn one_training_step(
    state: &mut CodecState,
    images: &crate::nn::Tensor4,
    masks: &ndarray::Array3<usize>,
    cfg: &ChannelConfig,
    per_image: bool,
    noise_rng: &mut ChaCha8Rng,
    snrs: &[f64],
) -> Result<f64, TrainError> {
    let tx = state.encode_t(&FeatureTensor::image(images.clone()))?;
    let received = if per_image {
        transmit_per_image(&tx, cfg, snrs, noise_rng)
    } else {
        transmit_features(&tx, &cfg.at_snr(snrs[0]), noise_rng)
    };
    let logits = state.decode_t(&received)?;
    let (loss, dlogits) = cross_entropy_loss(&logits.data, masks, None)?;

    state.zero_grads();
    let mut grads = state.backward_decoder(&dlogits);
    scale_grads(&mut grads, cfg);
    state.backward_encoder(&grads);
    Ok(loss.value)
}

fn transmit_per_image(
    tx: &TransmittedFeatures,
    cfg: &ChannelConfig,
    snrs: &[f64],
    rng: &mut ChaCha8Rng,
) -> TransmittedFeatures {
    let b = tx.bottleneck.data.dim().0;
    let mut bott = tx.bottleneck.data.clone();
    let mut skips: Vec<_> = tx.skips.iter().map(|s| s.data.clone()).collect();
    for bi in 0..b {
        let cfg_i = cfg.at_snr(snrs[bi]);
        let one = TransmittedFeatures {
            bottleneck: FeatureTensor::feature(
                tx.bottleneck
                    .data
                    .index_axis(Axis(0), bi)
                    .to_owned()
                    .insert_axis(Axis(0)),
            ),
            skips: tx
                .skips
                .iter()
                .map(|s| {
                    FeatureTensor::feature(
                        s.data.index_axis(Axis(0), bi).to_owned().insert_axis(Axis(0)),
                    )
                })
                .collect(),
        };
        let sent = transmit_features(&one, &cfg_i, rng);
        bott.index_axis_mut(Axis(0), bi)
            .assign(&sent.bottleneck.data.index_axis(Axis(0), 0));
        for (dst, src) in skips.iter_mut().zip(sent.skips.iter()) {
            dst.index_axis_mut(Axis(0), bi)
                .assign(&src.data.index_axis(Axis(0), 0));
        }
    }
    TransmittedFeatures {
        bottleneck: FeatureTensor::feature(bott),
        skips: skips.into_iter().map(FeatureTensor::feature).collect(),
    }
}

/// Trains `state` in place through the channel described by `channel_cfg`
/// (its `snr_db` is overridden by per-batch draws from the configured range).
///
/// Returns the history; `checkpoint_dir`, when given, receives periodic and
/// final checkpoints.
pub fn train(
    state: &mut CodecState,
    split: &DatasetSplit,
    channel_cfg: &ChannelConfig,
    tc: &TrainConfig,
    val_split: Option<&DatasetSplit>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainHistory, TrainError> {
    if split.is_empty() && tc.epochs > 0 {
        return Err(TrainError::EmptySplit);
    }
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(tc.epochs),
        final_checkpoint: None,
        optimizer: tc.optimizer,
        learning_rate: tc.learning_rate,
        rms_decay: tc.rms_decay,
        rms_epsilon: tc.rms_epsilon,
        seed: tc.seed,
        init_seed: state.init_seed,
        channel_seed: channel_cfg.rng_seed,
    };
    if tc.epochs == 0 {
        return Ok(history);
    }

    let mut optimizer = Rmsprop::new(state, tc);
    let batches = BatchIterator::new(split, tc.batch_size, derive_seed(tc.seed, 0x5u64))?;
    let mut snr_rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, 0x51));
    let mut noise_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, 0x52 ^ channel_cfg.rng_seed));

    for epoch in 0..tc.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (bi, (images, masks)) in batches.epoch(epoch).enumerate() {
            let b = images.dim().0;
            let snrs: Vec<f64> = if tc.snr_per_image {
                (0..b).map(|_| draw_snr(&mut snr_rng, tc)).collect()
            } else {
                vec![draw_snr(&mut snr_rng, tc)]
            };
            let loss = one_training_step(
                state,
                &images,
                &masks,
                channel_cfg,
                tc.snr_per_image,
                &mut noise_rng,
                &snrs,
            )?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: bi });
            }
            optimizer.step(state);
            loss_sum += loss;
            n_batches += 1;
        }

        let val_miou = match val_split {
            Some(vs) if !vs.is_empty() => {
                let points = evaluate(
                    state,
                    vs,
                    &[tc.snr_high_db],
                    1,
                    channel_cfg,
                    derive_seed(tc.seed, 0x53 + epoch as u64),
                )?;
                Some(points[0].miou)
            }
            _ => None,
        };

        if let Some(dir) = checkpoint_dir {
            if tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0 {
                let path = dir.join(format!("epoch-{:04}.ckpt", epoch + 1));
                state.save_checkpoint(&path)?;
            }
        }

        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches.max(1) as f64,
            val_miou,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }

    if let Some(dir) = checkpoint_dir {
        let path = dir.join("final.ckpt");
        state.save_checkpoint(&path)?;
        history.final_checkpoint = Some(path);
    }
    Ok(history)
}

fn draw_snr(rng: &mut ChaCha8Rng, tc: &TrainConfig) -> f64 {
    if tc.snr_low_db == tc.snr_high_db {
        tc.snr_low_db
    } else {
        rng.gen_range(tc.snr_low_db..tc.snr_high_db)
    }
}

/// mIoU (with across-trial standard error) at one SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrPoint {
    pub snr_db: f64,
    pub miou: f64,
    pub stderr: f64,
    pub per_trial: Vec<f64>,
}

/// Evaluates a trained codec at each SNR: `trials` fresh-noise passes over
/// the whole split are pooled into one dataset-level confusion matrix, and
/// the across-trial spread of per-trial mIoUs gives the standard error.
/// Duplicate SNR entries collapse. Images go through one at a time so power
/// normalization is per image.
pub fn evaluate(
    state: &CodecState,
    split: &DatasetSplit,
    snrs_db: &[f64],
    trials: usize,
    channel_cfg: &ChannelConfig,
    seed: u64,
) -> Result<Vec<SnrPoint>, TrainError> {
    if snrs_db.is_empty() {
        return Err(TrainError::EmptySnrList);
    }
    let mut snrs: Vec<f64> = snrs_db.to_vec();
    snrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    snrs.dedup();

    let n_classes = state.config.num_classes;
    let mut out = Vec::with_capacity(snrs.len());
    for (si, &snr) in snrs.iter().enumerate() {
        let cfg = channel_cfg.at_snr(snr);
        let mut pooled = SegmentationEval::new(n_classes);
        let mut per_trial = Vec::with_capacity(trials);
        for trial in 0..trials.max(1) {
            let mut eval = SegmentationEval::new(n_classes);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                (si as u64) << 32 | trial as u64,
            ));
            for sample in &split.samples {
                let image = FeatureTensor::image(
                    sample.image.clone().insert_axis(Axis(0)),
                );
                let tx = state.encode(&image)?;
                let received = transmit_features(&tx, &cfg, &mut rng);
                let logits = state.decode(&received)?;
                let pred = argmax_labels(&logits.data);
                eval.update(&pred.index_axis(Axis(0), 0).to_owned(), &sample.mask)?;
            }
            per_trial.push(eval.miou()?);
            pooled.merge(&eval);
        }
        let miou = pooled.miou()?;
        let stderr = if per_trial.len() > 1 {
            let mean = per_trial.iter().sum::<f64>() / per_trial.len() as f64;
            let var = per_trial.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>()
                / (per_trial.len() - 1) as f64;
            (var / per_trial.len() as f64).sqrt()
        } else {
            0.0
        };
        out.push(SnrPoint {
            snr_db: snr,
            miou,
            stderr,
            per_trial,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NetworkConfig;
    use crate::data::{synthetic_shapes, Split};

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            input_height: 16,
            input_width: 16,
            input_channels: 3,
            num_down: 2,
            num_up: 2,
            base_channels: 4,
            channel_growth: 2.0,
            num_classes: 2,
            cbam_enabled: true,
            cbam_reduction: 2,
            kernel_main: 3,
        }
    }

    fn tiny_train_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_unchanged_state() {
        let cfg = tiny_config();
        let mut state = CodecState::new(&cfg, 1);
        let before: Vec<f64> = {
            let mut v = Vec::new();
            state.visit_tensors(&mut |e| v.extend_from_slice(e.data));
            v
        };
        let split = synthetic_shapes(4, 16, 1, Split::Train).unwrap();
        let history = train(
            &mut state,
            &split,
            &ChannelConfig::default(),
            &tiny_train_config(0),
            None,
            None,
        )
        .unwrap();
        assert!(history.epochs.is_empty());
        let mut after = Vec::new();
        state.visit_tensors(&mut |e| after.extend_from_slice(e.data));
        assert_eq!(before, after);
    }

    #[test]
    fn one_step_reduces_loss_on_same_batch() {
        let cfg = tiny_config();
        let mut state = CodecState::new(&cfg, 2);
        let split = synthetic_shapes(4, 16, 5, Split::Train).unwrap();
        let it = BatchIterator::new(&split, 4, 9).unwrap();
        let (images, masks) = it.epoch(0).next().unwrap();
        let channel = ChannelConfig::default();
        let tc = tiny_train_config(1);

        let loss_at = |state: &mut CodecState| {
            let tx = state.encode_t(&FeatureTensor::image(images.clone())).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1234);
            let received = transmit_features(&tx, &channel.at_snr(12.0), &mut rng);
            let logits = state.decode_t(&received).unwrap();
            let (loss, dl) = cross_entropy_loss(&logits.data, &masks, None).unwrap();
            (loss.value, dl)
        };

        let mut optimizer = Rmsprop::new(&mut state, &tc);
        let (before, dlogits) = loss_at(&mut state);
        state.zero_grads();
        let mut grads = state.backward_decoder(&dlogits);
        scale_grads(&mut grads, &channel);
        state.backward_encoder(&grads);
        optimizer.step(&mut state);
        let (after, _) = loss_at(&mut state);
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config();
        let split = synthetic_shapes(8, 16, 5, Split::Train).unwrap();
        let channel = ChannelConfig::default();
        let tc = tiny_train_config(2);
        let run = || {
            let mut state = CodecState::new(&cfg, 11);
            let history = train(&mut state, &split, &channel, &tc, None, None).unwrap();
            let mut params = Vec::new();
            state.visit_tensors(&mut |e| params.extend_from_slice(e.data));
            (history, params)
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(p1, p2);
        let l1: Vec<f64> = h1.epochs.iter().map(|e| e.train_loss).collect();
        let l2: Vec<f64> = h2.epochs.iter().map(|e| e.train_loss).collect();
        assert_eq!(l1, l2);
    }

    #[test]
    fn evaluate_contract_on_untrained_net() {
        let cfg = tiny_config();
        let state = CodecState::new(&cfg, 4);
        let split = synthetic_shapes(3, 16, 6, Split::Test).unwrap();
        let points = evaluate(&state, &split, &[10.0, 10.0, 4.0], 2, &ChannelConfig::ideal(), 1)
            .unwrap();
        // Duplicates collapse; entries are sorted.
        assert_eq!(points.len(), 2);
        assert_eq!(points[0].snr_db, 4.0);
        for p in &points {
            assert!((0.0..=1.0).contains(&p.miou));
        }
    }

    #[test]
    fn evaluate_empty_snr_list_is_error() {
        let cfg = tiny_config();
        let state = CodecState::new(&cfg, 4);
        let split = synthetic_shapes(2, 16, 6, Split::Test).unwrap();
        assert!(matches!(
            evaluate(&state, &split, &[], 1, &ChannelConfig::ideal(), 1),
            Err(TrainError::EmptySnrList)
        ));
    }
}
