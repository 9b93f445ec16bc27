//! Cost-model equivalence against the graph-walk oracle, plus the structural
//! laws the analytic model must satisfy.

mod support;

use semcom::codec::CodecState;
use semcom::config::NetworkConfig;
use semcom::costmodel::{
    cost_report, depth_sweep_entries, enumerate_layers, CostMode, LayerKind, ObjectiveWeights,
    SweepEntry, SweepResult,
};

fn config(depth: usize, input: usize, base: usize, cbam: bool) -> NetworkConfig {
    NetworkConfig {
        input_height: input,
        input_width: input,
        input_channels: 3,
        num_down: depth,
        num_up: depth,
        base_channels: base,
        channel_growth: 2.0,
        num_classes: 2,
        cbam_enabled: cbam,
        cbam_reduction: 4,
        kernel_main: 3,
    }
}

#[test]
fn totals_match_graph_walk_for_all_depths() {
    for depth in 0..=4usize {
        for cbam in [false, true] {
            let cfg = config(depth, 64, 8, cbam);
            let report = cost_report(&cfg, CostMode::Standard).unwrap();
            let state = CodecState::new(&cfg, 17);
            assert_eq!(
                report.flops,
                support::oracle_flops(&state),
                "flops d={depth} cbam={cbam}"
            );
            assert_eq!(
                report.params,
                support::oracle_params(&state),
                "params d={depth} cbam={cbam}"
            );
        }
    }
}

#[test]
fn per_layer_sums_equal_totals() {
    for mode in [CostMode::Standard, CostMode::PaperVerbatim] {
        let report = cost_report(&config(3, 64, 8, true), mode).unwrap();
        let flops: u64 = report.per_layer.iter().map(|l| l.flops).sum();
        let params: u64 = report.per_layer.iter().map(|l| l.params()).sum();
        assert_eq!(flops, report.flops);
        assert_eq!(params, report.params);
        assert!(report.flops > 0 && report.params > 0);
    }
}

#[test]
fn costs_strictly_increase_with_depth() {
    for cbam in [false, true] {
        let mut prev = (0u64, 0u64);
        for depth in 0..=4usize {
            let report = cost_report(&config(depth, 64, 8, cbam), CostMode::Standard).unwrap();
            assert!(
                report.flops > prev.0 && report.params > prev.1,
                "depth {depth} cbam {cbam}: {:?} vs {prev:?}",
                (report.flops, report.params)
            );
            prev = (report.flops, report.params);
        }
    }
}

#[test]
fn doubling_resolution_quadruples_conv_flops_only() {
    let small = cost_report(&config(3, 64, 8, true), CostMode::Standard).unwrap();
    let large = cost_report(&config(3, 128, 8, true), CostMode::Standard).unwrap();
    assert_eq!(small.params, large.params);
    let conv_flops = |r: &semcom::costmodel::CostReport| -> u64 {
        r.per_layer
            .iter()
            .filter(|l| l.layer.kind.is_conv_sequence())
            .map(|l| l.flops)
            .sum()
    };
    assert_eq!(4 * conv_flops(&small), conv_flops(&large));
}

#[test]
fn verbatim_equals_standard_on_single_layer_network() {
    // Depth zero leaves only the classifier head, which has index 1.
    let cfg = NetworkConfig {
        num_down: 0,
        num_up: 0,
        cbam_enabled: false,
        ..config(0, 64, 8, false)
    };
    let std_report = cost_report(&cfg, CostMode::Standard).unwrap();
    let verb_report = cost_report(&cfg, CostMode::PaperVerbatim).unwrap();
    assert_eq!(std_report.flops, verb_report.flops);
    // Weight counts agree too; only the head bias separates the modes.
    assert_eq!(
        std_report.per_layer[0].weight_params,
        verb_report.per_layer[0].weight_params
    );
}

#[test]
fn enum_geometry_of_cbam_follows_pool() {
    let cfg = config(2, 64, 8, true);
    let layers = enumerate_layers(&cfg).unwrap();
    let mlp = layers
        .iter()
        .find(|l| l.kind == LayerKind::AttentionMlp)
        .unwrap();
    // First stage pools 64 -> 32 before attention runs.
    assert_eq!((mlp.width, mlp.height), (32, 32));
    let sconv = layers
        .iter()
        .find(|l| l.kind == LayerKind::AttentionConv)
        .unwrap();
    assert_eq!((sconv.c_in, sconv.c_out, sconv.kernel), (2, 1, 7));
}

#[test]
fn weight_scaling_never_changes_sweep_argmax() {
    let entries = vec![
        SweepEntry {
            label: "d=2".into(),
            depth: 2,
            miou_percent: 88.0,
            flops: 150e9,
            params: 5e6,
        },
        SweepEntry {
            label: "d=3".into(),
            depth: 3,
            miou_percent: 93.0,
            flops: 228e9,
            params: 15e6,
        },
        SweepEntry {
            label: "d=4".into(),
            depth: 4,
            miou_percent: 94.0,
            flops: 262e9,
            params: 34e6,
        },
    ];
    let caps = (300e9, 40e6);
    let base = ObjectiveWeights {
        lambda: 1.0,
        mu: 0.1,
        nu: 0.2,
    };
    let pick = |w: &ObjectiveWeights| {
        match depth_sweep_entries(&entries, w, caps.0, caps.1).unwrap() {
            SweepResult::Selected { best, rows } => rows[best].entry.depth,
            SweepResult::Infeasible { .. } => panic!("feasible by construction"),
        }
    };
    let reference = pick(&base);
    for scale in [1e-6, 0.25, 3.0, 1e4, 1e9] {
        let scaled = ObjectiveWeights {
            lambda: base.lambda * scale,
            mu: base.mu * scale,
            nu: base.nu * scale,
        };
        assert_eq!(pick(&scaled), reference, "scale {scale}");
    }
}
