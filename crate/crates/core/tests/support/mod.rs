//! Shared test support: the independent graph-walk cost oracle.
//!
//! The oracle never touches the analytic layer enumeration. Parameters are
//! counted by summing the lengths of the real trainable tensors; MAC counts
//! are derived from the geometry each layer actually sees during a shape
//! probe through the materialized network.

use semcom::codec::{CodecState, ProbeKind};

/// Multiply-accumulate count of the materialized graph under the
/// `W*H*Cin*Cout*(K^2+1)` convention for convolutions and
/// `2*C*(C/r)` per pooling branch for the attention MLP.
pub fn oracle_flops(state: &CodecState) -> u64 {
    state
        .probe_shapes()
        .iter()
        .map(|p| match p.kind {
            ProbeKind::StageConv | ProbeKind::SpatialConv => {
                (p.in_h * p.in_w * p.c_in * p.c_out * (p.kernel * p.kernel + 1)) as u64
            }
            // Two pooling branches, two linear maps each.
            ProbeKind::ChannelMlp => (4 * p.c_in * p.c_out) as u64,
        })
        .sum()
}

/// Trainable parameter count from the real tensors.
pub fn oracle_params(state: &CodecState) -> u64 {
    let mut n = 0u64;
    state.visit_tensors(&mut |e| {
        if e.trainable {
            n += e.data.len() as u64;
        }
    });
    n
}
