//! Command-line experiment driver.
//!
//! Verbs mirror the benchmark workflow: `run` executes a declared experiment,
//! `sweep-depth` trains several depths and selects one by the scalarized
//! objective, `eval-snr`/`baseline` evaluate existing checkpoints, `cost`
//! prints the analytic cost report, and `table2`/`fig5`/`fig6` render result
//! artifacts from stored records.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use semcom::classical::{baseline_miou, LdpcCode, QamConstellation};
use semcom::codec::CodecState;
use semcom::config::{load_experiment_config, ConfigError, ExperimentConfig};
use semcom::costmodel::{
    cost_report, depth_sweep_entries, CostMode as CoreCostMode, ObjectiveWeights, SweepEntry,
};
use semcom::data::derive_seed;
use semcom::experiment::{load_data, run_experiment, train_model, ExperimentRecord};
use semcom::report::{emit_fig5, emit_fig6, emit_table2};
use semcom::trainer::evaluate;

#[derive(Parser)]
#[command(name = "semcom", version, about = "Semantic-communication benchmark driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CostModeArg {
    Standard,
    PaperVerbatim,
}

impl From<CostModeArg> for CoreCostMode {
    fn from(m: CostModeArg) -> Self {
        match m {
            CostModeArg::Standard => CoreCostMode::Standard,
            CostModeArg::PaperVerbatim => CoreCostMode::PaperVerbatim,
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment document (TOML, `include = [...]` supported).
    #[arg(long)]
    config: PathBuf,
    /// Override the training seed from the document.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = load_experiment_config(&self.config).map_err(config_error)?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }
}

fn config_error(err: ConfigError) -> anyhow::Error {
    if let ConfigError::Invalid { issues } = &err {
        let body = serde_json::json!({ "error": "invalid config", "issues": issues });
        anyhow::anyhow!("{body}")
    } else {
        anyhow::Error::new(err)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full declared pipeline and persist a record.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Results root; the record lands in `<out>/<config-hash>/`.
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Train one codec per depth, score each with the objective, pick the
    /// feasible argmax under the baseline's cost caps.
    SweepDepth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Depths to evaluate.
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        depths: Vec<usize>,
        /// Depth of the cap-defining baseline codec (no attention).
        #[arg(long, default_value_t = 4)]
        cap_depth: usize,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint over a list of SNRs.
    EvalSnr {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// SNRs in dB (defaults to the config's eval list).
        #[arg(long, value_delimiter = ',')]
        snrs: Option<Vec<f64>>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Classical-chain mIoU curve using a clean-trained checkpoint as the
    /// receiver-side segmenter.
    Baseline {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        snrs: Option<Vec<f64>>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Print the analytic cost report as JSON.
    Cost {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value = "standard")]
        mode: CostModeArg,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the cost/accuracy comparison table from records.
    Table2 {
        /// record.json paths.
        #[arg(long, required = true, num_args = 1..)]
        records: Vec<PathBuf>,
        /// SNR at which mIoU is read off each record.
        #[arg(long, default_value_t = 20.0)]
        snr: f64,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Render the objective-vs-depth figure from records.
    Fig5 {
        #[arg(long, required = true, num_args = 1..)]
        records: Vec<PathBuf>,
        /// Objective weights `lambda,mu,nu`.
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.1,0.2")]
        weights: Vec<f64>,
        /// Cost caps `flops,params` (raw counts); defaults to the largest
        /// depth's costs among the records.
        #[arg(long, value_delimiter = ',')]
        caps: Option<Vec<f64>>,
        #[arg(long, default_value_t = 20.0)]
        snr: f64,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Render the mIoU-vs-SNR figure from records.
    Fig6 {
        #[arg(long, required = true, num_args = 1..)]
        records: Vec<PathBuf>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(err) = dispatch() {
        eprintln!("{err:#}");
        std::process::exit(2);
    }
}

fn load_records(paths: &[PathBuf]) -> Result<Vec<ExperimentRecord>> {
    paths
        .iter()
        .map(|p| {
            ExperimentRecord::load(p).with_context(|| format!("loading record {}", p.display()))
        })
        .collect()
}

fn write_out(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn dispatch() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, out } => {
            let cfg = config.load()?;
            let (record, dir) = run_experiment(&cfg, &out)?;
            println!("record: {}", dir.join("record.json").display());
            for p in &record.semantic_curve {
                println!("  snr {:6.2} dB  mIoU {:.4} +- {:.4}", p.snr_db, p.miou, p.stderr);
            }
            if let Some(classical) = &record.classical_curve {
                for p in classical {
                    println!(
                        "  classical snr {:6.2} dB  mIoU {:.4} ({} of {} images failed)",
                        p.snr_db, p.miou, p.failed_images, p.total_images
                    );
                }
            }
            Ok(())
        }
        Command::SweepDepth {
            config,
            depths,
            cap_depth,
            out,
        } => {
            let cfg = config.load()?;
            if depths.is_empty() {
                bail!("no depths given");
            }
            let caps_report =
                cost_report(&cfg.network.with_depth(cap_depth).with_cbam(false), CoreCostMode::Standard)?;
            let (train_split, test_split) = load_data(&cfg)?;
            let weights = cfg.objective.weights();
            let mut entries = Vec::new();
            std::fs::create_dir_all(&out)?;
            for &depth in &depths {
                let mut dcfg = cfg.clone();
                dcfg.network = cfg.network.with_depth(depth);
                dcfg.network.validate().map_err(config_error)?;
                let (state, _) = train_model(&dcfg, &train_split, None, depth as u64, None)?;
                let points = evaluate(
                    &state,
                    &test_split,
                    &[cfg.objective.report_snr_db],
                    cfg.eval.trials,
                    &dcfg.channel,
                    derive_seed(cfg.eval.seed, depth as u64),
                )?;
                let report = cost_report(&dcfg.network, CoreCostMode::Standard)?;
                let ckpt = out.join(format!("depth-{depth}.ckpt"));
                state.save_checkpoint(&ckpt)?;
                println!(
                    "d={depth}: mIoU {:.4} at {} dB, flops {:.3}e9, params {:.3}e6",
                    points[0].miou,
                    cfg.objective.report_snr_db,
                    report.flops_1e9(),
                    report.params_1e6()
                );
                entries.push(SweepEntry {
                    label: format!("d={depth}"),
                    depth,
                    miou_percent: points[0].miou * 100.0,
                    flops: report.flops as f64,
                    params: report.params as f64,
                });
            }
            let sweep = depth_sweep_entries(
                &entries,
                &weights,
                caps_report.flops as f64,
                caps_report.params as f64,
            )?;
            match sweep.best() {
                Some(row) => println!("selected depth {} (Q = {:.4})", row.entry.depth, row.q),
                None => println!("no feasible depth under the caps"),
            }
            let fig = emit_fig5(&sweep, &weights);
            write_out(&out.join("fig5.csv"), &fig.csv)?;
            write_out(&out.join("fig5.svg"), &fig.svg)?;
            let sweep_json = serde_json::to_string_pretty(&sweep)?;
            write_out(&out.join("sweep.json"), &sweep_json)?;
            Ok(())
        }
        Command::EvalSnr {
            config,
            checkpoint,
            snrs,
            out,
        } => {
            let cfg = config.load()?;
            let state = CodecState::load_checkpoint(&checkpoint)?;
            let snrs = snrs.unwrap_or_else(|| cfg.eval.snrs_db.clone());
            let (_, test_split) = load_data(&cfg)?;
            let points = evaluate(
                &state,
                &test_split,
                &snrs,
                cfg.eval.trials,
                &cfg.channel,
                cfg.eval.seed,
            )?;
            let mut csv = String::from("snr_db,miou,stderr\n");
            for p in &points {
                println!("snr {:6.2} dB  mIoU {:.4} +- {:.4}", p.snr_db, p.miou, p.stderr);
                csv.push_str(&format!("{},{},{}\n", p.snr_db, p.miou, p.stderr));
            }
            write_out(&out.join("eval_snr.csv"), &csv)?;
            Ok(())
        }
        Command::Baseline {
            config,
            checkpoint,
            snrs,
            out,
        } => {
            let cfg = config.load()?;
            let state = CodecState::load_checkpoint(&checkpoint)?;
            let snrs = snrs.unwrap_or_else(|| cfg.eval.snrs_db.clone());
            let (_, test_split) = load_data(&cfg)?;
            let code = match &cfg.classical.parity_check {
                Some(path) => LdpcCode::from_file(path)?,
                None => LdpcCode::builtin_n648_r12(),
            };
            let constellation = QamConstellation::new(cfg.classical.qam_order)?;
            let points = baseline_miou(
                &test_split,
                &snrs,
                &state,
                &code,
                &constellation,
                cfg.classical.max_bp_iters,
                cfg.classical.seed,
            )?;
            let mut csv = String::from("snr_db,miou,failed_images,total_images,mean_message_ber\n");
            for p in &points {
                println!(
                    "snr {:6.2} dB  mIoU {:.4}  failed {}/{}",
                    p.snr_db, p.miou, p.failed_images, p.total_images
                );
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    p.snr_db, p.miou, p.failed_images, p.total_images, p.mean_message_ber
                ));
            }
            write_out(&out.join("baseline.csv"), &csv)?;
            Ok(())
        }
        Command::Cost { config, mode, out } => {
            let cfg = config.load()?;
            let report = cost_report(&cfg.network, mode.into())?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => write_out(&path, &json)?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Table2 { records, snr, out } => {
            let records = load_records(&records)?;
            let table = emit_table2(&records, snr);
            print!("{}", table.text);
            write_out(&out.join("table2.csv"), &table.csv)?;
            write_out(&out.join("table2.txt"), &table.text)?;
            Ok(())
        }
        Command::Fig5 {
            records,
            weights,
            caps,
            snr,
            out,
        } => {
            if weights.len() != 3 {
                bail!("--weights needs exactly three values");
            }
            let records = load_records(&records)?;
            let w = ObjectiveWeights {
                lambda: weights[0],
                mu: weights[1],
                nu: weights[2],
            };
            let mut entries = Vec::new();
            for r in &records {
                let Some(miou) = r.miou_percent_at(snr) else {
                    bail!("record {} has no evaluation points", r.name);
                };
                entries.push(SweepEntry {
                    label: format!("d={}", r.config.network.num_down),
                    depth: r.config.network.num_down,
                    miou_percent: miou,
                    flops: r.cost_standard.flops as f64,
                    params: r.cost_standard.params as f64,
                });
            }
            entries.sort_by_key(|e| e.depth);
            let (g_cap, m_cap) = match caps {
                Some(c) if c.len() == 2 => (c[0], c[1]),
                Some(_) => bail!("--caps needs exactly two values"),
                None => {
                    let widest = entries.last().expect("records nonempty");
                    (widest.flops, widest.params)
                }
            };
            let sweep = depth_sweep_entries(&entries, &w, g_cap, m_cap)?;
            let fig = emit_fig5(&sweep, &w);
            write_out(&out.join("fig5.csv"), &fig.csv)?;
            write_out(&out.join("fig5.svg"), &fig.svg)?;
            Ok(())
        }
        Command::Fig6 { records, out } => {
            let records = load_records(&records)?;
            let fig = emit_fig6(&records)?;
            write_out(&out.join("fig6.csv"), &fig.csv)?;
            write_out(&out.join("fig6.svg"), &fig.svg)?;
            Ok(())
        }
    }
}
