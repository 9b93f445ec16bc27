//! Configuration types: the codec architecture description and the
//! declarative experiment document (TOML, with `include` support).
//!
//! Defaults for every section live here, on the `Default` impls, so a config
//! file only has to name what it overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::ChannelConfig;
use crate::costmodel::ObjectiveWeights;
use crate::trainer::TrainConfig;

/// Errors raised while loading or validating configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    /// One or more keys hold values that violate the documented invariants.
    /// Each entry names the offending key and the constraint it broke.
    #[error("invalid config: {}", .issues.join("; "))]
    Invalid {
        /// Human-readable `key: constraint` descriptions.
        issues: Vec<String>,
    },
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("include cycle detected at {path}")]
    IncludeCycle { path: PathBuf },
}

/// Full architectural description of one codec variant.
///
/// `num_down` counts downsampling stages (two convolutions then a 2x2 max
/// pool each); the decoder mirrors them. Channel widths follow
/// `base_channels * channel_growth^stage`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    /// Number of downsampling stages in the encoder.
    pub num_down: usize,
    /// Number of upsampling stages in the decoder; must equal `num_down`.
    pub num_up: usize,
    pub base_channels: usize,
    /// Channel multiplier applied per stage (2.0 for classic UNet widths).
    pub channel_growth: f64,
    pub num_classes: usize,
    pub cbam_enabled: bool,
    /// Reduction ratio of the CBAM channel-attention MLP.
    pub cbam_reduction: usize,
    /// Kernel side length of the stage convolutions (odd).
    pub kernel_main: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_height: 256,
            input_width: 256,
            input_channels: 3,
            num_down: 3,
            num_up: 3,
            base_channels: 64,
            channel_growth: 2.0,
            num_classes: 2,
            cbam_enabled: true,
            cbam_reduction: 16,
            kernel_main: 3,
        }
    }
}

impl NetworkConfig {
    /// Output channel width of downsampling stage `stage` (0-based).
    pub fn stage_width(&self, stage: usize) -> usize {
        let w = self.base_channels as f64 * self.channel_growth.powi(stage as i32);
        w.round().max(1.0) as usize
    }

    /// Channel width of the bottleneck tensor (after the last pool), or of
    /// the raw input when `num_down == 0`.
    pub fn bottleneck_width(&self) -> usize {
        if self.num_down == 0 {
            self.input_channels
        } else {
            self.stage_width(self.num_down - 1)
        }
    }

    /// Spatial size of the bottleneck tensor.
    pub fn bottleneck_hw(&self) -> (usize, usize) {
        let f = 1 << self.num_down;
        (self.input_height / f, self.input_width / f)
    }

    /// Checks every structural invariant, collecting all violations.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        for (key, v) in [
            ("network.input_height", self.input_height),
            ("network.input_width", self.input_width),
            ("network.input_channels", self.input_channels),
            ("network.base_channels", self.base_channels),
            ("network.cbam_reduction", self.cbam_reduction),
            ("network.kernel_main", self.kernel_main),
        ] {
            if v == 0 {
                issues.push(format!("{key}: must be positive"));
            }
        }
        if self.num_up != self.num_down {
            issues.push(format!(
                "network.num_up: must equal num_down ({} != {})",
                self.num_up, self.num_down
            ));
        }
        let f = 1usize << self.num_down.min(63);
        if self.input_height % f != 0 || self.input_width % f != 0 {
            issues.push(format!(
                "network.input_height/input_width: {}x{} not divisible by 2^num_down = {f}",
                self.input_height, self.input_width
            ));
        }
        if self.num_classes < 2 {
            issues.push("network.num_classes: must be at least 2".into());
        }
        if self.kernel_main % 2 == 0 {
            issues.push("network.kernel_main: must be odd".into());
        }
        if !(self.channel_growth > 0.0) {
            issues.push("network.channel_growth: must be positive".into());
        }
        if self.base_channels > 0 && self.cbam_reduction > 0 {
            if self.base_channels % self.cbam_reduction != 0 {
                issues.push(format!(
                    "network.cbam_reduction: {} does not divide base_channels {}",
                    self.cbam_reduction, self.base_channels
                ));
            } else if self.cbam_enabled {
                // Every attended stage width must stay divisible.
                for s in 0..self.num_down {
                    if self.stage_width(s) % self.cbam_reduction != 0 {
                        issues.push(format!(
                            "network.cbam_reduction: {} does not divide stage {} width {}",
                            self.cbam_reduction,
                            s,
                            self.stage_width(s)
                        ));
                    }
                }
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid { issues })
        }
    }

    /// Convenience used by depth sweeps: same config at a different depth.
    pub fn with_depth(&self, num_down: usize) -> NetworkConfig {
        NetworkConfig {
            num_down,
            num_up: num_down,
            ..self.clone()
        }
    }

    /// Same config with CBAM toggled.
    pub fn with_cbam(&self, enabled: bool) -> NetworkConfig {
        NetworkConfig {
            cbam_enabled: enabled,
            ..self.clone()
        }
    }
}

/// Which corpus an experiment draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    Portrait,
}

/// Dataset section of the experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Synthetic corpus sizes.
    pub train_count: usize,
    pub test_count: usize,
    /// Square image side for the synthetic corpus.
    pub image_size: usize,
    pub seed: u64,
    /// Portrait dataset root (images + mattes, or a manifest.tsv).
    pub root: Option<PathBuf>,
    pub target_height: usize,
    pub target_width: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            train_count: 512,
            test_count: 64,
            image_size: 64,
            seed: 7,
            root: None,
            target_height: 256,
            target_width: 256,
        }
    }
}

/// Per-SNR evaluation section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub snrs_db: Vec<f64>,
    /// Fresh-noise trials per image; the standard error is taken across them.
    pub trials: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            snrs_db: vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0],
            trials: 4,
            seed: 1013,
        }
    }
}

/// Classical-baseline section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassicalConfig {
    pub enabled: bool,
    /// QAM constellation order: 4, 16 or 64.
    pub qam_order: usize,
    /// Path to a parity-check matrix file, or `None` for the bundled
    /// rate-1/2 n=648 code.
    pub parity_check: Option<PathBuf>,
    pub max_bp_iters: usize,
    pub seed: u64,
}

impl Default for ClassicalConfig {
    fn default() -> Self {
        ClassicalConfig {
            enabled: false,
            qam_order: 16,
            parity_check: None,
            max_bp_iters: 50,
            seed: 4021,
        }
    }
}

/// Objective section: scalarization weights plus the SNR at which the sweep
/// measures mIoU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub report_snr_db: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda: 1.0,
            mu: 0.1,
            nu: 0.2,
            report_snr_db: 20.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            lambda: self.lambda,
            mu: self.mu,
            nu: self.nu,
        }
    }
}

/// The whole experiment document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Optional human-readable experiment name (used in reports).
    pub name: Option<String>,
    pub network: NetworkConfig,
    pub channel: ChannelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub classical: ClassicalConfig,
    pub objective: ObjectiveConfig,
}

impl ExperimentConfig {
    /// Validates every section, aggregating all issues.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        if let Err(ConfigError::Invalid { issues: mut i }) = self.network.validate() {
            issues.append(&mut i);
        }
        if let Err(e) = self.channel.validate() {
            issues.push(e);
        }
        if let Err(e) = self.train.validate() {
            issues.push(e);
        }
        if self.eval.trials == 0 {
            issues.push("eval.trials: must be positive".into());
        }
        if !matches!(self.classical.qam_order, 4 | 16 | 64) {
            issues.push(format!(
                "classical.qam_order: {} not one of 4, 16, 64",
                self.classical.qam_order
            ));
        }
        if self.objective.lambda < 0.0 || self.objective.mu < 0.0 || self.objective.nu < 0.0 {
            issues.push("objective: weights must be nonnegative".into());
        }
        if self.data.source == DataSource::Synthetic {
            if self.data.train_count == 0 || self.data.image_size == 0 {
                issues.push("data: synthetic corpus needs positive train_count and image_size".into());
            }
        } else if self.data.root.is_none() {
            issues.push("data.root: required for source = \"portrait\"".into());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid { issues })
        }
    }

    /// Stable content hash of the resolved document, used to address result
    /// directories.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        // TOML serialization of a struct has a stable key order.
        let text = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        let mut out = String::with_capacity(16);
        for b in &digest[..8] {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

/// Loads an experiment document, resolving `include = [...]` entries
/// (depth-first; later keys override included ones).
pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let mut seen = BTreeSet::new();
    let value = load_toml_with_includes(path, &mut seen)?;
    let text = toml::to_string(&value).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_toml_with_includes(
    path: &Path,
    seen: &mut BTreeSet<PathBuf>,
) -> Result<toml::Table, ConfigError> {
    let canonical = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
    if !seen.insert(canonical.clone()) {
        return Err(ConfigError::IncludeCycle { path: canonical });
    }
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;

    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(toml::Value::String(s)) => vec![s],
        Some(toml::Value::Array(a)) => a
            .into_iter()
            .filter_map(|v| v.as_str().map(str::to_owned))
            .collect(),
        Some(other) => {
            return Err(ConfigError::Parse {
                path: path.to_path_buf(),
                message: format!("include: expected string or array, got {}", other.type_str()),
            })
        }
    };

    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut merged = toml::Table::new();
    for inc in includes {
        let inc_path = base_dir.join(inc);
        let inc_table = load_toml_with_includes(&inc_path, seen)?;
        merge_tables(&mut merged, inc_table);
    }
    merge_tables(&mut merged, table);
    seen.remove(&canonical);
    Ok(merged)
}

/// Deep merge: `overlay` wins; tables merge recursively.
fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(bt)), toml::Value::Table(ot)) => merge_tables(bt, ot),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_network_is_valid() {
        NetworkConfig::default().validate().unwrap();
    }

    #[test]
    fn divisibility_violation_is_rejected() {
        let cfg = NetworkConfig {
            input_height: 100,
            input_width: 100,
            num_down: 3,
            num_up: 3,
            ..NetworkConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        let ConfigError::Invalid { issues } = err else {
            panic!("expected Invalid")
        };
        assert!(issues.iter().any(|i| i.contains("divisible")));
    }

    #[test]
    fn reduction_must_divide_widths() {
        let cfg = NetworkConfig {
            base_channels: 12,
            cbam_reduction: 8,
            ..NetworkConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_widths_follow_growth() {
        let cfg = NetworkConfig {
            base_channels: 64,
            channel_growth: 2.0,
            ..NetworkConfig::default()
        };
        assert_eq!(cfg.stage_width(0), 64);
        assert_eq!(cfg.stage_width(1), 128);
        assert_eq!(cfg.stage_width(2), 256);
    }

    #[test]
    fn include_merge_overrides() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("base.toml"),
            "[network]\nnum_down = 4\nnum_up = 4\nbase_channels = 16\ncbam_reduction = 4\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("exp.toml"),
            "include = [\"base.toml\"]\n[network]\nnum_down = 2\nnum_up = 2\n",
        )
        .unwrap();
        let cfg = load_experiment_config(&dir.path().join("exp.toml")).unwrap();
        assert_eq!(cfg.network.num_down, 2);
        assert_eq!(cfg.network.base_channels, 16);
    }

    #[test]
    fn unknown_keys_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("exp.toml"), "[network]\nnum_downn = 3\n").unwrap();
        let err = load_experiment_config(&dir.path().join("exp.toml")).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }));
    }
}
