//! Analytic cost model of the codec: per-layer FLOPs and parameter counts,
//! the scalarized objective `Q = lambda*mIoU - mu*G - nu*M`, and constrained
//! depth selection.
//!
//! Two counting modes exist. `Standard` counts each convolution as
//! `W*H*Cin*Cout*(K^2+1)` multiply-accumulates and each weight once.
//! `PaperVerbatim` additionally multiplies every conv/deconv term by its
//! 1-based position in the conv sequence, and drops batch-norm/bias
//! parameters. The positional factor makes identical layers cost differently
//! by position, so `Standard` is the default for all reported numbers;
//! `PaperVerbatim` is retained for fidelity checks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, NetworkConfig};

/// What a [`LayerSpec`] describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    /// Encoder-path convolution.
    Conv,
    /// Decoder-path convolution.
    Deconv,
    /// 2x2 max pool.
    Pool,
    /// 2x nearest-neighbor upsample.
    Upsample,
    /// CBAM channel-attention MLP (two shared linear maps, two pooling
    /// branches). `c_out` is the reduced width `C/r`.
    AttentionMlp,
    /// CBAM spatial-attention 7x7 convolution over the stacked mean/max maps.
    AttentionConv,
}

impl LayerKind {
    /// Whether the layer participates in the indexed conv/deconv sequence.
    pub fn is_conv_sequence(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Deconv)
    }
}

/// One stage of the codec with its geometry.
///
/// `width`/`height` are the spatial size of the layer's input feature map.
/// `index_l` is the 1-based position in the conv/deconv sequence; layers
/// outside that sequence carry the index of the nearest preceding member
/// (1 if none), and only conv/deconv entries are required to be unique.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub index_l: usize,
    pub width: usize,
    pub height: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub has_bias: bool,
    pub has_bn: bool,
}

impl LayerSpec {
    fn check(&self) -> Result<(), CostError> {
        let fields = [
            ("index_l", self.index_l),
            ("width", self.width),
            ("height", self.height),
            ("c_in", self.c_in),
            ("c_out", self.c_out),
            ("kernel", self.kernel),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(CostError::BadLayer {
                    message: format!("{name} must be positive"),
                });
            }
        }
        if matches!(
            self.kind,
            LayerKind::Conv | LayerKind::Deconv | LayerKind::AttentionConv
        ) && self.kernel % 2 == 0
        {
            return Err(CostError::BadLayer {
                message: format!("kernel {} must be odd for {:?}", self.kernel, self.kind),
            });
        }
        Ok(())
    }
}

/// Counting mode, see module docs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMode {
    #[default]
    Standard,
    PaperVerbatim,
}

/// Cost of a single layer, with the parameter count broken out by origin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: LayerSpec,
    pub flops: u64,
    pub weight_params: u64,
    pub bias_params: u64,
    pub bn_params: u64,
}

impl LayerCost {
    pub fn params(&self) -> u64 {
        self.weight_params + self.bias_params + self.bn_params
    }
}

/// Analytic FLOPs and parameter count with a per-layer breakdown.
///
/// Field order is stable for JSON emission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub mode: CostMode,
    /// Total multiply-accumulate count (raw, not scaled).
    pub flops: u64,
    /// Total parameter count (raw, not scaled).
    pub params: u64,
    pub per_layer: Vec<LayerCost>,
}

impl CostReport {
    /// FLOPs in units of 10^9, the scale `Q` consumes.
    pub fn flops_1e9(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    /// Parameter count in units of 10^6, the scale `Q` consumes.
    pub fn params_1e6(&self) -> f64 {
        self.params as f64 / 1e6
    }
}

/// Weights of the scalarized objective. `lambda` multiplies mIoU in percent,
/// `mu` FLOPs in 10^9, `nu` parameters in 10^6.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
}

impl ObjectiveWeights {
    fn validate(&self) -> Result<(), CostError> {
        if self.lambda < 0.0 || self.mu < 0.0 || self.nu < 0.0 {
            return Err(CostError::NegativeWeights);
        }
        Ok(())
    }
}

/// Errors from the cost model.
#[derive(Debug, Error)]
pub enum CostError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("layer spec invalid: {message}")]
    BadLayer { message: String },
    #[error("objective weights must be nonnegative")]
    NegativeWeights,
    #[error("mIoU {0} outside [0, 100]")]
    MiouRange(f64),
    #[error("depth sweep got no candidates")]
    NoCandidates,
}

/// Materializes the ordered layer sequence of the UNet variant described by
/// `config`.
///
/// Per downsampling stage: two convolutions (kernel `kernel_main`, stride 1),
/// a 2x2 pool, then the CBAM pair when enabled. Upsampling stages mirror
/// them: a 2x upsample, concatenation with the skip tensor (which doubles the
/// input channels of the stage's first convolution), two convolutions of
/// which the second halves the width so the next concatenation doubles again.
/// A final 1x1 convolution maps to `num_classes` logits.
pub fn enumerate_layers(config: &NetworkConfig) -> Result<Vec<LayerSpec>, CostError> {
    config.validate()?;
    let mut layers = Vec::new();
    let mut index = 0usize;
    let d = config.num_down;
    let (h0, w0) = (config.input_height, config.input_width);

    let mut c_prev = config.input_channels;
    for stage in 0..d {
        let (h, w) = (h0 >> stage, w0 >> stage);
        let width = config.stage_width(stage);
        for c_in in [c_prev, width] {
            index += 1;
            layers.push(LayerSpec {
                kind: LayerKind::Conv,
                index_l: index,
                width: w,
                height: h,
                c_in,
                c_out: width,
                kernel: config.kernel_main,
                has_bias: false,
                has_bn: true,
            });
        }
        layers.push(LayerSpec {
            kind: LayerKind::Pool,
            index_l: index,
            width: w,
            height: h,
            c_in: width,
            c_out: width,
            kernel: 2,
            has_bias: false,
            has_bn: false,
        });
        if config.cbam_enabled {
            let (ph, pw) = (h / 2, w / 2);
            layers.push(LayerSpec {
                kind: LayerKind::AttentionMlp,
                index_l: index,
                width: pw,
                height: ph,
                c_in: width,
                c_out: width / config.cbam_reduction,
                kernel: 1,
                has_bias: false,
                has_bn: false,
            });
            layers.push(LayerSpec {
                kind: LayerKind::AttentionConv,
                index_l: index,
                width: pw,
                height: ph,
                c_in: 2,
                c_out: 1,
                kernel: 7,
                has_bias: true,
                has_bn: false,
            });
        }
        c_prev = width;
    }

    // Decoder: deepest level first. The tensor arriving at level `i` always
    // has the level's stage width, so concatenation with the skip doubles it.
    for level in (0..d).rev() {
        let width = config.stage_width(level);
        let out_width = if level == 0 {
            config.stage_width(0)
        } else {
            config.stage_width(level - 1)
        };
        let (h_in, w_in) = (h0 >> (level + 1), w0 >> (level + 1));
        let (h, w) = (h0 >> level, w0 >> level);
        layers.push(LayerSpec {
            kind: LayerKind::Upsample,
            index_l: index.max(1),
            width: w_in,
            height: h_in,
            c_in: width,
            c_out: width,
            kernel: 2,
            has_bias: false,
            has_bn: false,
        });
        for (c_in, c_out) in [(2 * width, width), (width, out_width)] {
            index += 1;
            layers.push(LayerSpec {
                kind: LayerKind::Deconv,
                index_l: index,
                width: w,
                height: h,
                c_in,
                c_out,
                kernel: config.kernel_main,
                has_bias: false,
                has_bn: true,
            });
        }
    }

    // Classifier head.
    index += 1;
    layers.push(LayerSpec {
        kind: LayerKind::Conv,
        index_l: index,
        width: w0,
        height: h0,
        c_in: if d == 0 {
            config.input_channels
        } else {
            config.stage_width(0)
        },
        c_out: config.num_classes,
        kernel: 1,
        has_bias: true,
        has_bn: false,
    });

    Ok(layers)
}

/// FLOPs of one layer under `mode`.
pub fn layer_flops(layer: &LayerSpec, mode: CostMode) -> Result<u64, CostError> {
    layer.check()?;
    let spatial = (layer.width * layer.height) as u64;
    let (c_in, c_out, k) = (layer.c_in as u64, layer.c_out as u64, layer.kernel as u64);
    Ok(match layer.kind {
        LayerKind::Conv | LayerKind::Deconv => {
            let base = spatial * c_in * c_out * (k * k + 1);
            match mode {
                CostMode::Standard => base,
                CostMode::PaperVerbatim => base * layer.index_l as u64,
            }
        }
        // Same MAC form as a convolution; not part of the indexed sequence.
        LayerKind::AttentionConv => spatial * c_in * c_out * (k * k + 1),
        // Two pooling branches through the shared two-layer MLP; 2*C*(C/r)
        // MACs each.
        LayerKind::AttentionMlp => 4 * c_in * c_out,
        // Comparisons/copies only.
        LayerKind::Pool | LayerKind::Upsample => 0,
    })
}

/// Parameter count of one layer under `mode`, broken out by origin.
pub fn layer_params(layer: &LayerSpec, mode: CostMode) -> Result<(u64, u64, u64), CostError> {
    layer.check()?;
    let (c_in, c_out, k) = (layer.c_in as u64, layer.c_out as u64, layer.kernel as u64);
    Ok(match layer.kind {
        LayerKind::Conv | LayerKind::Deconv => {
            let weights = c_in * c_out * k * k;
            match mode {
                CostMode::Standard => {
                    let bias = if layer.has_bias { c_out } else { 0 };
                    let bn = if layer.has_bn { 2 * c_out } else { 0 };
                    (weights, bias, bn)
                }
                CostMode::PaperVerbatim => (weights * layer.index_l as u64, 0, 0),
            }
        }
        LayerKind::AttentionConv => {
            let weights = c_in * c_out * k * k;
            let bias = if layer.has_bias && mode == CostMode::Standard {
                c_out
            } else {
                0
            };
            (weights, bias, 0)
        }
        LayerKind::AttentionMlp => (2 * c_in * c_out, 0, 0),
        LayerKind::Pool | LayerKind::Upsample => (0, 0, 0),
    })
}

/// Builds the full cost report for an explicit layer list.
pub fn cost_of_layers(layers: &[LayerSpec], mode: CostMode) -> Result<CostReport, CostError> {
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut flops = 0u64;
    let mut params = 0u64;
    for layer in layers {
        let f = layer_flops(layer, mode)?;
        let (w, b, bn) = layer_params(layer, mode)?;
        flops += f;
        params += w + b + bn;
        per_layer.push(LayerCost {
            layer: layer.clone(),
            flops: f,
            weight_params: w,
            bias_params: b,
            bn_params: bn,
        });
    }
    Ok(CostReport {
        mode,
        flops,
        params,
        per_layer,
    })
}

/// Cost report (FLOPs and parameters) of the codec described by `config`.
pub fn cost_report(config: &NetworkConfig, mode: CostMode) -> Result<CostReport, CostError> {
    cost_of_layers(&enumerate_layers(config)?, mode)
}

/// FLOPs of the codec described by `config`.
pub fn flops(config: &NetworkConfig, mode: CostMode) -> Result<CostReport, CostError> {
    cost_report(config, mode)
}

/// Parameter count of the codec described by `config`.
pub fn model_size(config: &NetworkConfig, mode: CostMode) -> Result<CostReport, CostError> {
    cost_report(config, mode)
}

/// The scalarized objective on raw unit-scaled values: mIoU in percent,
/// FLOPs in 10^9, parameters in 10^6.
pub fn objective_q_scaled(
    miou_percent: f64,
    flops_1e9: f64,
    params_1e6: f64,
    w: &ObjectiveWeights,
) -> Result<f64, CostError> {
    w.validate()?;
    if !(0.0..=100.0).contains(&miou_percent) {
        return Err(CostError::MiouRange(miou_percent));
    }
    Ok(w.lambda * miou_percent - w.mu * flops_1e9 - w.nu * params_1e6)
}

/// The scalarized objective from a cost report.
pub fn objective_q(
    miou_percent: f64,
    report: &CostReport,
    w: &ObjectiveWeights,
) -> Result<f64, CostError> {
    objective_q_scaled(miou_percent, report.flops_1e9(), report.params_1e6(), w)
}

/// One depth-sweep candidate with measured accuracy and raw analytic costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub label: String,
    pub depth: usize,
    pub miou_percent: f64,
    /// Raw FLOPs count (not scaled by 10^9).
    pub flops: f64,
    /// Raw parameter count (not scaled by 10^6).
    pub params: f64,
}

/// A sweep-table row: candidate, its objective value, feasibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub entry: SweepEntry,
    pub q: f64,
    pub feasible: bool,
}

/// Sweep outcome: either the feasible argmax or an explicit infeasible
/// marker. The full table is returned either way, for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SweepResult {
    Selected {
        /// Index into `rows` of the winning candidate.
        best: usize,
        rows: Vec<SweepRow>,
    },
    Infeasible {
        rows: Vec<SweepRow>,
    },
}

impl SweepResult {
    pub fn rows(&self) -> &[SweepRow] {
        match self {
            SweepResult::Selected { rows, .. } | SweepResult::Infeasible { rows } => rows,
        }
    }

    pub fn best(&self) -> Option<&SweepRow> {
        match self {
            SweepResult::Selected { best, rows } => rows.get(*best),
            SweepResult::Infeasible { .. } => None,
        }
    }
}

/// Constrained selection over explicit cost values. Candidates violating
/// `flops <= g_cap` or `params <= m_cap` are excluded from selection (but
/// kept in the table). Ties break toward smaller `params`, then smaller
/// `flops`.
pub fn depth_sweep_entries(
    entries: &[SweepEntry],
    w: &ObjectiveWeights,
    g_cap: f64,
    m_cap: f64,
) -> Result<SweepResult, CostError> {
    if entries.is_empty() {
        return Err(CostError::NoCandidates);
    }
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        let q = objective_q_scaled(e.miou_percent, e.flops / 1e9, e.params / 1e6, w)?;
        let feasible = e.flops <= g_cap && e.params <= m_cap;
        rows.push(SweepRow {
            entry: e.clone(),
            q,
            feasible,
        });
    }
    let mut best: Option<usize> = None;
    for (i, row) in rows.iter().enumerate() {
        if !row.feasible {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(j) => {
                let a = &rows[j];
                let better = row.q > a.q
                    || (row.q == a.q
                        && (row.entry.params < a.entry.params
                            || (row.entry.params == a.entry.params
                                && row.entry.flops < a.entry.flops)));
                if better {
                    Some(i)
                } else {
                    Some(j)
                }
            }
        };
    }
    Ok(match best {
        Some(best) => SweepResult::Selected { best, rows },
        None => SweepResult::Infeasible { rows },
    })
}

/// Constrained depth selection over configs with measured mIoUs. Costs come
/// from the analytic model under `mode`; caps come from the baseline codec's
/// report.
pub fn depth_sweep(
    candidates: &[(NetworkConfig, f64)],
    w: &ObjectiveWeights,
    g_cap: f64,
    m_cap: f64,
    mode: CostMode,
) -> Result<SweepResult, CostError> {
    let mut entries = Vec::with_capacity(candidates.len());
    for (config, miou) in candidates {
        let report = cost_report(config, mode)?;
        entries.push(SweepEntry {
            label: format!("d={}", config.num_down),
            depth: config.num_down,
            miou_percent: *miou,
            flops: report.flops as f64,
            params: report.params as f64,
        });
    }
    depth_sweep_entries(&entries, w, g_cap, m_cap)
}
