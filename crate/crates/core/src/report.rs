//! Emission of the result tables and figures. Every figure is backed by a
//! CSV carrying identical numbers; the SVG is only a view of the CSV.

use serde::Serialize;
use thiserror::Error;

use crate::costmodel::{CostMode, ObjectiveWeights, SweepResult};
use crate::experiment::ExperimentRecord;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no records supplied")]
    Empty,
    #[error("record {0} lacks the data this figure needs")]
    MissingData(String),
}

/// A rendered figure: CSV source of truth plus the SVG view.
#[derive(Debug, Clone)]
pub struct FigureOutput {
    pub csv: String,
    pub svg: String,
}

/// One comparison-table row.
#[derive(Debug, Clone, Serialize)]
pub struct TableRow {
    pub label: String,
    pub depth: usize,
    pub cbam: bool,
    pub flops_1e9: f64,
    pub size_1e6: f64,
    pub miou_percent: Option<f64>,
    pub cost_mode: CostMode,
}

/// The cost/accuracy comparison table.
#[derive(Debug, Clone)]
pub struct ComparisonTable {
    pub rows: Vec<TableRow>,
    pub notices: Vec<String>,
    pub text: String,
    pub csv: String,
}

fn find_record<'a>(
    records: &'a [ExperimentRecord],
    depth: usize,
    cbam: bool,
) -> Option<&'a ExperimentRecord> {
    records
        .iter()
        .find(|r| r.config.network.num_down == depth && r.config.network.cbam_enabled == cbam)
}

/// Builds the three-row comparison (plain codec at depth 4, attention codec
/// at depth 4, reduced-depth codec at depth 3 with attention) from whatever
/// records are available; missing rows are omitted with a notice. Costs are
/// taken from each record's standard-mode report, mIoU from the evaluation
/// point closest to `report_snr_db`.
pub fn emit_table2(records: &[ExperimentRecord], report_snr_db: f64) -> ComparisonTable {
    let wanted = [
        ("UNet(d=4)", 4usize, false),
        ("CBAM-UNet(d=4)", 4, true),
        ("Reduced(d=3,CBAM)", 3, true),
    ];
    let mut rows = Vec::new();
    let mut notices = Vec::new();
    for (label, depth, cbam) in wanted {
        match find_record(records, depth, cbam) {
            Some(r) => rows.push(TableRow {
                label: label.to_string(),
                depth,
                cbam,
                flops_1e9: r.cost_standard.flops_1e9(),
                size_1e6: r.cost_standard.params_1e6(),
                miou_percent: r.miou_percent_at(report_snr_db),
                cost_mode: r.cost_standard.mode,
            }),
            None => notices.push(format!("row {label} omitted: no matching record")),
        }
    }

    let mut csv = String::from("label,depth,cbam,flops_1e9,size_1e6,miou_percent,cost_mode\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{},{:?}\n",
            r.label,
            r.depth,
            r.cbam,
            r.flops_1e9,
            r.size_1e6,
            r.miou_percent.map_or(String::new(), |m| format!("{m:.4}")),
            r.cost_mode,
        ));
    }

    let mut text = String::new();
    text.push_str(&format!(
        "{:<20} {:>12} {:>12} {:>9} {:>16}\n",
        "Method", "FLOPs(1e9)", "Size(1e6)", "mIoU(%)", "cost mode"
    ));
    for r in &rows {
        text.push_str(&format!(
            "{:<20} {:>12.2} {:>12.2} {:>9} {:>16}\n",
            r.label,
            r.flops_1e9,
            r.size_1e6,
            r.miou_percent.map_or("-".into(), |m| format!("{m:.2}")),
            format!("{:?}", r.cost_mode),
        ));
    }
    if let (Some(unet), Some(reduced)) = (
        rows.iter().find(|r| r.depth == 4 && !r.cbam),
        rows.iter().find(|r| r.depth == 3 && r.cbam),
    ) {
        text.push_str(&format!(
            "\nreduced/baseline FLOPs: {:.1}%  size: {:.1}%\n",
            100.0 * reduced.flops_1e9 / unet.flops_1e9,
            100.0 * reduced.size_1e6 / unet.size_1e6,
        ));
        csv.push_str(&format!(
            "ratio,,,{:.6},{:.6},,\n",
            reduced.flops_1e9 / unet.flops_1e9,
            reduced.size_1e6 / unet.size_1e6,
        ));
    }
    for n in &notices {
        text.push_str(&format!("note: {n}\n"));
    }
    ComparisonTable {
        rows,
        notices,
        text,
        csv,
    }
}

/// Renders the objective-vs-depth sweep: one marker per candidate, the
/// feasible argmax highlighted, infeasible candidates greyed out.
pub fn emit_fig5(sweep: &SweepResult, weights: &ObjectiveWeights) -> FigureOutput {
    let mut csv = String::from("label,depth,miou_percent,flops,params,q,feasible,selected\n");
    let best_idx = match sweep {
        SweepResult::Selected { best, .. } => Some(*best),
        SweepResult::Infeasible { .. } => None,
    };
    for (i, row) in sweep.rows().iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.entry.label,
            row.entry.depth,
            row.entry.miou_percent,
            row.entry.flops,
            row.entry.params,
            row.q,
            row.feasible,
            Some(i) == best_idx,
        ));
    }

    let points: Vec<(f64, f64)> = sweep
        .rows()
        .iter()
        .map(|r| (r.entry.depth as f64, r.q))
        .collect();
    let mut chart = svg::LineChart::new(
        &format!(
            "Objective Q vs depth (lambda={}, mu={}, nu={})",
            weights.lambda, weights.mu, weights.nu
        ),
        "downsampling stages",
        "Q",
    );
    chart.add_series(svg::Series {
        label: "Q".into(),
        color: "#1f77b4".into(),
        points: points.clone(),
        band: None,
    });
    for (i, row) in sweep.rows().iter().enumerate() {
        let color = if Some(i) == best_idx {
            "#d62728"
        } else if row.feasible {
            "#1f77b4"
        } else {
            "#bbbbbb"
        };
        let label = if Some(i) == best_idx {
            Some("peak".to_string())
        } else if !row.feasible {
            Some("infeasible".to_string())
        } else {
            None
        };
        chart.add_marker(row.entry.depth as f64, row.q, color, label);
    }
    FigureOutput {
        csv,
        svg: chart.render(),
    }
}

/// Renders mIoU-vs-SNR curves for the learned codec and (when present) the
/// classical baseline, with standard-error bands for the former. A drop of
/// at least 30 mIoU points between adjacent classical points is annotated as
/// the cliff.
pub fn emit_fig6(records: &[ExperimentRecord]) -> Result<FigureOutput, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut csv = String::from("scheme,record,snr_db,miou_percent,stderr_percent\n");
    let mut chart = svg::LineChart::new("mIoU vs SNR", "SNR (dB)", "mIoU (%)");
    let palette = ["#1f77b4", "#2ca02c", "#9467bd", "#8c564b"];
    let mut any_curve = false;

    for (ri, record) in records.iter().enumerate() {
        if !record.semantic_curve.is_empty() {
            any_curve = true;
            let pts: Vec<(f64, f64)> = record
                .semantic_curve
                .iter()
                .map(|p| (p.snr_db, p.miou * 100.0))
                .collect();
            let band: Vec<(f64, f64, f64)> = record
                .semantic_curve
                .iter()
                .map(|p| {
                    (
                        p.snr_db,
                        (p.miou - p.stderr) * 100.0,
                        (p.miou + p.stderr) * 100.0,
                    )
                })
                .collect();
            for p in &record.semantic_curve {
                csv.push_str(&format!(
                    "semantic,{},{},{},{}\n",
                    record.name,
                    p.snr_db,
                    p.miou * 100.0,
                    p.stderr * 100.0
                ));
            }
            chart.add_series(svg::Series {
                label: format!("semantic {}", record.name),
                color: palette[ri % palette.len()].into(),
                points: pts,
                band: Some(band),
            });
        }
        if let Some(classical) = &record.classical_curve {
            any_curve = true;
            let pts: Vec<(f64, f64)> = classical
                .iter()
                .map(|p| (p.snr_db, p.miou * 100.0))
                .collect();
            for p in classical {
                csv.push_str(&format!(
                    "classical,{},{},{},\n",
                    record.name,
                    p.snr_db,
                    p.miou * 100.0
                ));
            }
            chart.add_series(svg::Series {
                label: format!("classical {}", record.name),
                color: "#ff7f0e".into(),
                points: pts.clone(),
                band: None,
            });
            for w in pts.windows(2) {
                let drop = w[1].1 - w[0].1;
                if drop.abs() >= 30.0 {
                    let (x, y) = if drop < 0.0 { w[0] } else { w[1] };
                    chart.add_marker(x, y, "#ff7f0e", Some("cliff".into()));
                }
            }
        }
    }
    if !any_curve {
        return Err(ReportError::MissingData(records[0].name.clone()));
    }
    Ok(FigureOutput {
        csv,
        svg: chart.render(),
    })
}

/// Minimal static SVG line charts; enough for the two result figures.
mod svg {
    pub struct Series {
        pub label: String,
        pub color: String,
        pub points: Vec<(f64, f64)>,
        /// Optional (x, lo, hi) shaded band.
        pub band: Option<Vec<(f64, f64, f64)>>,
    }

    struct Marker {
        x: f64,
        y: f64,
        color: String,
        label: Option<String>,
    }

    pub struct LineChart {
        title: String,
        x_label: String,
        y_label: String,
        series: Vec<Series>,
        markers: Vec<Marker>,
    }

    const W: f64 = 640.0;
    const H: f64 = 440.0;
    const MARGIN_L: f64 = 70.0;
    const MARGIN_R: f64 = 20.0;
    const MARGIN_T: f64 = 40.0;
    const MARGIN_B: f64 = 55.0;

    impl LineChart {
        pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
            LineChart {
                title: title.into(),
                x_label: x_label.into(),
                y_label: y_label.into(),
                series: Vec::new(),
                markers: Vec::new(),
            }
        }

        pub fn add_series(&mut self, s: Series) {
            self.series.push(s);
        }

        pub fn add_marker(&mut self, x: f64, y: f64, color: &str, label: Option<String>) {
            self.markers.push(Marker {
                x,
                y,
                color: color.into(),
                label,
            });
        }

        fn bounds(&self) -> (f64, f64, f64, f64) {
            let mut xs: Vec<f64> = Vec::new();
            let mut ys: Vec<f64> = Vec::new();
            for s in &self.series {
                for &(x, y) in &s.points {
                    xs.push(x);
                    ys.push(y);
                }
                if let Some(band) = &s.band {
                    for &(x, lo, hi) in band {
                        xs.push(x);
                        ys.push(lo);
                        ys.push(hi);
                    }
                }
            }
            for m in &self.markers {
                xs.push(m.x);
                ys.push(m.y);
            }
            let (mut x0, mut x1) = (
                xs.iter().cloned().fold(f64::INFINITY, f64::min),
                xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            );
            let (mut y0, mut y1) = (
                ys.iter().cloned().fold(f64::INFINITY, f64::min),
                ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            );
            if !x0.is_finite() {
                (x0, x1) = (0.0, 1.0);
            }
            if !y0.is_finite() {
                (y0, y1) = (0.0, 1.0);
            }
            if x0 == x1 {
                x0 -= 0.5;
                x1 += 0.5;
            }
            if y0 == y1 {
                y0 -= 0.5;
                y1 += 0.5;
            }
            let pad = (y1 - y0) * 0.06;
            (x0, x1, y0 - pad, y1 + pad)
        }

        pub fn render(&self) -> String {
            let (x0, x1, y0, y1) = self.bounds();
            let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (W - MARGIN_L - MARGIN_R);
            let sy = |y: f64| H - MARGIN_B - (y - y0) / (y1 - y0) * (H - MARGIN_T - MARGIN_B);

            let mut out = String::new();
            out.push_str(&format!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
            ));
            out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
            out.push_str(&format!(
                "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>\n",
                W / 2.0,
                xml_escape(&self.title)
            ));

            // Axes with 5 ticks each.
            out.push_str(&format!(
                "<line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
                H - MARGIN_B,
                W - MARGIN_R,
                H - MARGIN_B
            ));
            out.push_str(&format!(
                "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>\n",
                H - MARGIN_B
            ));
            for i in 0..=5 {
                let fx = x0 + (x1 - x0) * i as f64 / 5.0;
                let fy = y0 + (y1 - y0) * i as f64 / 5.0;
                out.push_str(&format!(
                    "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n<text x=\"{0}\" y=\"{3}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{4}</text>\n",
                    sx(fx),
                    H - MARGIN_B,
                    H - MARGIN_B + 5.0,
                    H - MARGIN_B + 18.0,
                    tick(fx)
                ));
                out.push_str(&format!(
                    "<line x1=\"{1}\" y1=\"{0}\" x2=\"{2}\" y2=\"{0}\" stroke=\"black\"/>\n<text x=\"{3}\" y=\"{4}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{5}</text>\n",
                    sy(fy),
                    MARGIN_L - 5.0,
                    MARGIN_L,
                    MARGIN_L - 8.0,
                    sy(fy) + 4.0,
                    tick(fy)
                ));
            }
            out.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
                (MARGIN_L + W - MARGIN_R) / 2.0,
                H - 12.0,
                xml_escape(&self.x_label)
            ));
            out.push_str(&format!(
                "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 18 {})\">{}</text>\n",
                (MARGIN_T + H - MARGIN_B) / 2.0,
                (MARGIN_T + H - MARGIN_B) / 2.0,
                xml_escape(&self.y_label)
            ));

            for s in &self.series {
                if let Some(band) = &s.band {
                    if band.len() > 1 {
                        let mut d = String::new();
                        for (i, &(x, lo, _)) in band.iter().enumerate() {
                            d.push_str(if i == 0 { "M" } else { "L" });
                            d.push_str(&format!("{:.2},{:.2} ", sx(x), sy(lo)));
                        }
                        for &(x, _, hi) in band.iter().rev() {
                            d.push_str(&format!("L{:.2},{:.2} ", sx(x), sy(hi)));
                        }
                        d.push('Z');
                        out.push_str(&format!(
                            "<path d=\"{d}\" fill=\"{}\" opacity=\"0.18\" stroke=\"none\"/>\n",
                            s.color
                        ));
                    }
                }
                let pts: Vec<String> = s
                    .points
                    .iter()
                    .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                    .collect();
                out.push_str(&format!(
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>\n",
                    pts.join(" "),
                    s.color
                ));
                for &(x, y) in &s.points {
                    out.push_str(&format!(
                        "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\"/>\n",
                        sx(x),
                        sy(y),
                        s.color
                    ));
                }
            }
            for m in &self.markers {
                out.push_str(&format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"6\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>\n",
                    sx(m.x),
                    sy(m.y),
                    m.color
                ));
                if let Some(label) = &m.label {
                    out.push_str(&format!(
                        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{}\">{}</text>\n",
                        sx(m.x) + 8.0,
                        sy(m.y) - 8.0,
                        m.color,
                        xml_escape(label)
                    ));
                }
            }

            // Legend.
            for (i, s) in self.series.iter().enumerate() {
                let y = MARGIN_T + 14.0 * i as f64;
                out.push_str(&format!(
                    "<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"{3}\" stroke-width=\"2\"/>\n<text x=\"{4}\" y=\"{5}\" font-family=\"sans-serif\" font-size=\"11\">{6}</text>\n",
                    MARGIN_L + 8.0,
                    y,
                    MARGIN_L + 28.0,
                    s.color,
                    MARGIN_L + 34.0,
                    y + 4.0,
                    xml_escape(&s.label)
                ));
            }
            out.push_str("</svg>\n");
            out
        }
    }

    fn tick(v: f64) -> String {
        if v.abs() >= 1000.0 {
            format!("{v:.0}")
        } else if (v - v.round()).abs() < 1e-9 {
            format!("{:.0}", v.round())
        } else {
            format!("{v:.2}")
        }
    }

    fn xml_escape(s: &str) -> String {
        s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{depth_sweep_entries, SweepEntry};

    fn sweep() -> SweepResult {
        let entries = vec![
            SweepEntry {
                label: "d=2".into(),
                depth: 2,
                miou_percent: 85.0,
                flops: 200.0e9,
                params: 8.0e6,
            },
            SweepEntry {
                label: "d=3".into(),
                depth: 3,
                miou_percent: 93.77,
                flops: 228.38e9,
                params: 15.69e6,
            },
            SweepEntry {
                label: "d=4".into(),
                depth: 4,
                miou_percent: 94.2,
                flops: 262.22e9,
                params: 34.57e6,
            },
        ];
        let w = ObjectiveWeights {
            lambda: 1.0,
            mu: 0.1,
            nu: 0.2,
        };
        depth_sweep_entries(&entries, &w, 262.12e9, 34.53e6).unwrap()
    }

    #[test]
    fn fig5_marks_selected_depth() {
        let s = sweep();
        let w = ObjectiveWeights {
            lambda: 1.0,
            mu: 0.1,
            nu: 0.2,
        };
        let fig = emit_fig5(&s, &w);
        assert!(fig.csv.lines().count() == 4);
        assert!(fig.csv.contains("d=3"));
        // The d=3 row is both feasible and selected; d=4 is infeasible.
        assert!(fig.csv.lines().any(|l| l.starts_with("d=3") && l.ends_with("true,true")));
        assert!(fig.svg.contains("peak"));
        assert!(fig.svg.contains("infeasible"));
    }

    #[test]
    fn fig5_single_candidate_renders_single_point() {
        let w = ObjectiveWeights {
            lambda: 1.0,
            mu: 0.1,
            nu: 0.2,
        };
        let entries = vec![SweepEntry {
            label: "d=3".into(),
            depth: 3,
            miou_percent: 93.0,
            flops: 228.0e9,
            params: 15.0e6,
        }];
        let sweep = depth_sweep_entries(&entries, &w, 1e12, 1e9).unwrap();
        let fig = emit_fig5(&sweep, &w);
        assert_eq!(fig.csv.lines().count(), 2);
        assert!(fig.svg.contains("<circle"));
    }

    #[test]
    fn fig6_requires_records() {
        assert!(matches!(emit_fig6(&[]), Err(ReportError::Empty)));
    }

    #[test]
    fn fig6_annotates_classical_cliff() {
        use crate::classical::BaselinePoint;
        use crate::config::ExperimentConfig;
        use crate::costmodel::cost_report;
        use crate::trainer::{SnrPoint, TrainHistory};

        let cfg = ExperimentConfig::default();
        let cost = cost_report(&cfg.network, crate::costmodel::CostMode::Standard).unwrap();
        let semantic: Vec<SnrPoint> = (0..6)
            .map(|i| SnrPoint {
                snr_db: 2.0 * i as f64,
                miou: 0.9 + 0.01 * i as f64,
                stderr: 0.005,
                per_trial: vec![],
            })
            .collect();
        let classical: Vec<BaselinePoint> = (0..6)
            .map(|i| BaselinePoint {
                snr_db: 2.0 * i as f64,
                miou: if i < 3 { 0.4 } else { 0.95 },
                failed_images: if i < 3 { 8 } else { 0 },
                total_images: 8,
                mean_message_ber: 0.0,
            })
            .collect();
        let record = ExperimentRecord {
            name: "synthetic-record".into(),
            config: cfg,
            config_hash: "deadbeef".into(),
            code_version: "test".into(),
            wall_time_s: 0.0,
            cost_verbatim_flops: cost.flops,
            cost_verbatim_params: cost.params,
            cost_standard: cost,
            semantic_curve: semantic,
            classical_curve: Some(classical),
            history: TrainHistory {
                epochs: vec![],
                final_checkpoint: None,
                optimizer: Default::default(),
                learning_rate: 1e-3,
                rms_decay: 0.99,
                rms_epsilon: 1e-8,
                seed: 0,
                init_seed: 0,
                channel_seed: 0,
            },
            checkpoint: None,
            clean_checkpoint: None,
        };
        let fig = emit_fig6(&[record]).unwrap();
        assert!(fig.svg.contains("cliff"));
        assert!(fig.csv.contains("classical"));
        assert!(fig.csv.contains("semantic"));
    }

    #[test]
    fn table_header_format_is_stable() {
        let table = emit_table2(&[], 20.0);
        assert!(table.rows.is_empty());
        assert_eq!(table.notices.len(), 3);
        assert!(table.csv.starts_with("label,depth,cbam,flops_1e9,size_1e6,miou_percent,cost_mode\n"));
        assert!(table.text.starts_with("Method"));
    }
}
