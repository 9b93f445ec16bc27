//! Statistical training properties on the synthetic corpus: loss trends
//! down across depths, and noise can only hurt a trained model.

use semcom::channel::ChannelConfig;
use semcom::codec::CodecState;
use semcom::config::NetworkConfig;
use semcom::data::{synthetic_shapes, Split};
use semcom::trainer::{evaluate, train, TrainConfig};

fn cfg_at_depth(depth: usize) -> NetworkConfig {
    NetworkConfig {
        input_height: 32,
        input_width: 32,
        input_channels: 3,
        num_down: depth,
        num_up: depth,
        base_channels: 4,
        channel_growth: 2.0,
        num_classes: 2,
        cbam_enabled: true,
        cbam_reduction: 2,
        kernel_main: 3,
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

#[test]
fn median_loss_drops_for_each_depth() {
    let split = synthetic_shapes(32, 32, 77, Split::Train).unwrap();
    let channel = ChannelConfig::default();
    for depth in [2usize, 3, 4] {
        let network = cfg_at_depth(depth);
        let tc = TrainConfig {
            batch_size: 8,
            epochs: 8,
            seed: 21,
            ..TrainConfig::default()
        };
        let mut state = CodecState::new(&network, 13);
        let history = train(&mut state, &split, &channel, &tc, None, None).unwrap();
        let losses: Vec<f64> = history.epochs.iter().map(|e| e.train_loss).collect();
        let q = losses.len() / 4;
        let mut first = losses[..q.max(1)].to_vec();
        let mut last = losses[losses.len() - q.max(1)..].to_vec();
        assert!(
            median(&mut last) < median(&mut first),
            "depth {depth}: {losses:?}"
        );
    }
}

#[test]
fn high_snr_never_scores_below_low_snr_after_training() {
    let train_split = synthetic_shapes(96, 32, 55, Split::Train).unwrap();
    let test_split = synthetic_shapes(24, 32, 56, Split::Test).unwrap();
    let channel = ChannelConfig::default();
    let network = cfg_at_depth(2);
    for seed in [1u64, 2, 3] {
        let tc = TrainConfig {
            batch_size: 8,
            epochs: 6,
            seed,
            ..TrainConfig::default()
        };
        let mut state = CodecState::new(&network, seed ^ 0xbeef);
        train(&mut state, &train_split, &channel, &tc, None, None).unwrap();
        let points = evaluate(&state, &test_split, &[1.0, 20.0], 4, &channel, seed).unwrap();
        assert!(
            points[1].miou >= points[0].miou,
            "seed {seed}: 20 dB {:.4} < 1 dB {:.4}",
            points[1].miou,
            points[0].miou
        );
    }
}
