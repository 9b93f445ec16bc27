//! Config-driven experiment orchestration: run the declared pipeline
//! (train, per-SNR evaluation, cost model, optional classical baseline) and
//! persist a self-contained record.
//!
//! Records live in one directory per experiment, addressed by the config
//! hash. A lock file guarantees a single writer; `record.json` is written
//! atomically (temp file + rename). Every number in the record is
//! recomputable from the embedded config snapshot.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::ChannelConfig;
use crate::classical::{baseline_miou, BaselinePoint, ClassicalError, LdpcCode, QamConstellation};
use crate::codec::CodecState;
use crate::config::{ConfigError, DataSource, ExperimentConfig};
use crate::costmodel::{cost_report, CostError, CostMode, CostReport};
use crate::data::{
    derive_seed, load_portrait_dataset, synthetic_shapes, DataError, DatasetSplit, Split,
};
use crate::trainer::{evaluate, train, SnrPoint, TrainError, TrainHistory};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("record directory {0} is locked by another process")]
    Locked(PathBuf),
    #[error("record already exists at {0}")]
    Exists(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Classical(#[from] ClassicalError),
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("serialization: {0}")]
    Serde(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything one experiment produced. Self-contained: re-running from the
/// embedded config snapshot reproduces the metrics bit-exactly on one
/// machine.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub name: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub code_version: String,
    pub wall_time_s: f64,
    pub cost_standard: CostReport,
    pub cost_verbatim_flops: u64,
    pub cost_verbatim_params: u64,
    /// Learned-codec mIoU per SNR.
    pub semantic_curve: Vec<SnrPoint>,
    /// Classical-chain mIoU per SNR, when the baseline was enabled.
    pub classical_curve: Option<Vec<BaselinePoint>>,
    pub history: TrainHistory,
    pub checkpoint: Option<PathBuf>,
    /// Clean-trained receiver checkpoint used by the classical baseline.
    pub clean_checkpoint: Option<PathBuf>,
}

impl ExperimentRecord {
    pub fn load(path: &Path) -> Result<ExperimentRecord, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Serde(e.to_string()))
    }

    /// mIoU in percent at the SNR closest to `snr_db`, if any.
    pub fn miou_percent_at(&self, snr_db: f64) -> Option<f64> {
        self.semantic_curve
            .iter()
            .min_by(|a, b| {
                (a.snr_db - snr_db)
                    .abs()
                    .partial_cmp(&(b.snr_db - snr_db).abs())
                    .unwrap()
            })
            .map(|p| p.miou * 100.0)
    }
}

/// Loads the configured corpus.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(DatasetSplit, DatasetSplit), ExperimentError> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let train = synthetic_shapes(
                cfg.data.train_count,
                cfg.data.image_size,
                derive_seed(cfg.data.seed, 0x7261),
                Split::Train,
            )?;
            let test = synthetic_shapes(
                cfg.data.test_count,
                cfg.data.image_size,
                derive_seed(cfg.data.seed, 0x7465),
                Split::Test,
            )?;
            Ok((train, test))
        }
        DataSource::Portrait => {
            let root = cfg.data.root.as_ref().expect("validated");
            let size = (cfg.data.target_height, cfg.data.target_width);
            Ok((
                load_portrait_dataset(root, Split::Train, size)?,
                load_portrait_dataset(root, Split::Test, size)?,
            ))
        }
    }
}

/// Trains the codec declared by `cfg` and returns it with its history.
/// `channel_override` substitutes the training channel (the clean receiver
/// for the classical baseline trains over an ideal link).
pub fn train_model(
    cfg: &ExperimentConfig,
    train_split: &DatasetSplit,
    channel_override: Option<&ChannelConfig>,
    init_stream: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<(CodecState, TrainHistory), ExperimentError> {
    let mut state = CodecState::new(
        &cfg.network,
        derive_seed(cfg.train.seed, 0x696e69 ^ init_stream),
    );
    let channel = channel_override.unwrap_or(&cfg.channel);
    let history = train(&mut state, train_split, channel, &cfg.train, None, checkpoint_dir)?;
    Ok((state, history))
}

/// Executes the full declared pipeline and writes the record under
/// `out_dir/<config-hash>/`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<(ExperimentRecord, PathBuf), ExperimentError> {
    cfg.validate()?;
    let started = Instant::now();
    let hash = cfg.content_hash();
    let record_dir = out_dir.join(&hash);
    if record_dir.join("record.json").exists() {
        return Err(ExperimentError::Exists(record_dir));
    }
    std::fs::create_dir_all(&record_dir).map_err(io_err(&record_dir))?;

    // Single-writer lock on the record directory.
    let lock_path = record_dir.join("lock");
    match std::fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&lock_path)
    {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
            return Err(ExperimentError::Locked(record_dir));
        }
        Err(e) => return Err(io_err(&lock_path)(e)),
    }
    let result = run_locked(cfg, &record_dir, &hash, started);
    let _ = std::fs::remove_file(&lock_path);
    result.map(|record| (record, record_dir))
}

fn run_locked(
    cfg: &ExperimentConfig,
    record_dir: &Path,
    hash: &str,
    started: Instant,
) -> Result<ExperimentRecord, ExperimentError> {
    let (train_split, test_split) = load_data(cfg)?;

    let (state, history) = train_model(cfg, &train_split, None, 0, Some(record_dir))?;
    let semantic_curve = evaluate(
        &state,
        &test_split,
        &cfg.eval.snrs_db,
        cfg.eval.trials,
        &cfg.channel,
        cfg.eval.seed,
    )?;

    let classical_curve = if cfg.classical.enabled {
        let code = match &cfg.classical.parity_check {
            Some(path) => LdpcCode::from_file(path)?,
            None => LdpcCode::builtin_n648_r12(),
        };
        let constellation = QamConstellation::new(cfg.classical.qam_order)?;
        // The classical receiver segments clean reconstructions, so its model
        // trains over an ideal link.
        let (clean_state, _) =
            train_model(cfg, &train_split, Some(&ChannelConfig::ideal()), 1, None)?;
        let clean_path = record_dir.join("clean.ckpt");
        clean_state.save_checkpoint(&clean_path)?;
        Some((
            baseline_miou(
                &test_split,
                &cfg.eval.snrs_db,
                &clean_state,
                &code,
                &constellation,
                cfg.classical.max_bp_iters,
                cfg.classical.seed,
            )?,
            clean_path,
        ))
    } else {
        None
    };
    let (classical_curve, clean_checkpoint) = match classical_curve {
        Some((curve, path)) => (Some(curve), Some(path)),
        None => (None, None),
    };

    let cost_standard = cost_report(&cfg.network, CostMode::Standard)?;
    let cost_verbatim = cost_report(&cfg.network, CostMode::PaperVerbatim)?;

    let record = ExperimentRecord {
        name: cfg
            .name
            .clone()
            .unwrap_or_else(|| format!("experiment-{hash}")),
        config: cfg.clone(),
        config_hash: hash.to_string(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_s: started.elapsed().as_secs_f64(),
        cost_standard,
        cost_verbatim_flops: cost_verbatim.flops,
        cost_verbatim_params: cost_verbatim.params,
        semantic_curve,
        classical_curve,
        history: history.clone(),
        checkpoint: history.final_checkpoint.clone(),
        clean_checkpoint,
    };

    write_history_jsonl(&history, &record_dir.join("history.jsonl"))?;
    write_curves_csv(&record, record_dir)?;
    write_json_atomic(&record, &record_dir.join("record.json"))?;
    Ok(record)
}

/// One JSON object per epoch, newline delimited.
pub fn write_history_jsonl(history: &TrainHistory, path: &Path) -> Result<(), ExperimentError> {
    let mut text = String::new();
    for epoch in &history.epochs {
        let line =
            serde_json::to_string(epoch).map_err(|e| ExperimentError::Serde(e.to_string()))?;
        text.push_str(&line);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_curves_csv(record: &ExperimentRecord, dir: &Path) -> Result<(), ExperimentError> {
    let mut csv = String::from("snr_db,miou,stderr\n");
    for p in &record.semantic_curve {
        csv.push_str(&format!("{},{},{}\n", p.snr_db, p.miou, p.stderr));
    }
    let path = dir.join("semantic_curve.csv");
    std::fs::write(&path, csv).map_err(io_err(&path))?;

    if let Some(classical) = &record.classical_curve {
        let mut csv = String::from("snr_db,miou,failed_images,total_images,mean_message_ber\n");
        for p in classical {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                p.snr_db, p.miou, p.failed_images, p.total_images, p.mean_message_ber
            ));
        }
        let path = dir.join("classical_curve.csv");
        std::fs::write(&path, csv).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Serializes to a temp file in the target directory, then renames over the
/// destination.
pub fn write_json_atomic<T: Serialize>(value: &T, path: &Path) -> Result<(), ExperimentError> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| ExperimentError::Serde(e.to_string()))?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NetworkConfig;
    use crate::trainer::TrainConfig;

    fn tiny_experiment() -> ExperimentConfig {
        ExperimentConfig {
            name: Some("tiny".into()),
            network: NetworkConfig {
                input_height: 16,
                input_width: 16,
                num_down: 1,
                num_up: 1,
                base_channels: 4,
                cbam_reduction: 2,
                ..NetworkConfig::default()
            },
            train: TrainConfig {
                epochs: 0,
                batch_size: 4,
                ..TrainConfig::default()
            },
            data: crate::config::DataConfig {
                train_count: 4,
                test_count: 2,
                image_size: 16,
                ..crate::config::DataConfig::default()
            },
            eval: crate::config::EvalConfig {
                snrs_db: vec![10.0],
                trials: 1,
                seed: 3,
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn zero_epoch_run_produces_untrained_record() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_experiment();
        let (record, record_dir) = run_experiment(&cfg, dir.path()).unwrap();
        assert!(record.history.epochs.is_empty());
        assert_eq!(record.semantic_curve.len(), 1);
        assert!(record_dir.join("record.json").is_file());
        assert!(record_dir.join("semantic_curve.csv").is_file());
        assert!(!record_dir.join("lock").exists());

        let loaded = ExperimentRecord::load(&record_dir.join("record.json")).unwrap();
        assert_eq!(loaded.config_hash, record.config_hash);
    }

    #[test]
    fn identical_config_reruns_identically() {
        let cfg = tiny_experiment();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let (a, _) = run_experiment(&cfg, dir_a.path()).unwrap();
        let (b, _) = run_experiment(&cfg, dir_b.path()).unwrap();
        assert_eq!(a.semantic_curve[0].miou, b.semantic_curve[0].miou);
        assert_eq!(a.config_hash, b.config_hash);
    }

    #[test]
    fn existing_record_is_not_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_experiment();
        run_experiment(&cfg, dir.path()).unwrap();
        assert!(matches!(
            run_experiment(&cfg, dir.path()),
            Err(ExperimentError::Exists(_))
        ));
    }

    #[test]
    fn lock_blocks_concurrent_writer() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_experiment();
        let record_dir = dir.path().join(cfg.content_hash());
        std::fs::create_dir_all(&record_dir).unwrap();
        std::fs::write(record_dir.join("lock"), b"").unwrap();
        assert!(matches!(
            run_experiment(&cfg, dir.path()),
            Err(ExperimentError::Locked(_))
        ));
    }
}
