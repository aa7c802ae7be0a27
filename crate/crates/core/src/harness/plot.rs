//! Plot emission: cumulative-discovery curves and SR-vs-budget summaries as
//! delimited text plus simple SVG line charts.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::harness::record::RunRecord;
use crate::harness::suite::SuiteResults;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// One labelled line.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Minimal SVG line chart: axes, ticks, legend in series order.
pub fn svg_line_chart(series: &[Series], title: &str, x_label: &str, y_label: &str) -> String {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 40.0, 50.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let mut x_max = f64::MIN;
    let mut x_min = f64::MAX;
    let mut y_max = f64::MIN;
    let mut y_min: f64 = 0.0;
    for s in series {
        for &(x, y) in &s.points {
            x_max = x_max.max(x);
            x_min = x_min.min(x);
            y_max = y_max.max(y);
            y_min = y_min.min(y);
        }
    }
    if series.iter().all(|s| s.points.is_empty()) {
        x_min = 0.0;
        x_max = 1.0;
        y_max = 1.0;
    }
    if (x_max - x_min).abs() < 1e-12 {
        x_max = x_min + 1.0;
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_max = y_min + 1.0;
    }
    let sx = |x: f64| ml + (x - x_min) / (x_max - x_min) * pw;
    let sy = |y: f64| mt + ph - (y - y_min) / (y_max - y_min) * ph;
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{title}</text>\n",
        w / 2.0
    );
    // axes
    let _ = write!(
        svg,
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + ph,
        ml + pw,
        mt + ph,
        mt + ph
    );
    for k in 0..=4 {
        let fx = x_min + (x_max - x_min) * k as f64 / 4.0;
        let fy = y_min + (y_max - y_min) * k as f64 / 4.0;
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{:.1}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\">{:.2}</text>\n",
            sx(fx),
            mt + ph + 18.0,
            fx,
            ml - 6.0,
            sy(fy) + 4.0,
            fy
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\">{x_label}</text>\n\
         <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 16 {:.1})\">{y_label}</text>\n",
        ml + pw / 2.0,
        h - 12.0,
        mt + ph / 2.0,
        mt + ph / 2.0
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !s.points.is_empty() {
            let mut path = String::new();
            for (k, &(x, y)) in s.points.iter().enumerate() {
                let _ = write!(
                    path,
                    "{}{:.2},{:.2} ",
                    if k == 0 { "M" } else { "L" },
                    sx(x),
                    sy(y)
                );
            }
            let _ = write!(
                svg,
                "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
                path.trim_end()
            );
        }
        // legend entry, series order = config order
        let ly = mt + 14.0 * i as f64 + 6.0;
        let _ = write!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"3\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">{}</text>\n",
            ml + pw - 120.0,
            ml + pw - 100.0,
            ml + pw - 94.0,
            ly + 4.0,
            s.label
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes the exact cumulative-success sequence of one run.
pub fn run_curve_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("step,outcome,cumulative\n");
    for r in records {
        let _ = writeln!(out, "{},{},{}", r.step, r.outcome, r.cumulative);
    }
    out
}

/// Emits discovery curves and SR-vs-budget tables plus SVG charts.
pub fn emit_plots(results: &SuiteResults, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    // discovery curves per budget
    let mut budgets: Vec<usize> = results.cells.iter().map(|c| c.budget).collect();
    budgets.sort_unstable();
    budgets.dedup();
    for &budget in &budgets {
        let mut series = Vec::new();
        let mut csv = String::from("method,step,mean_cumulative\n");
        for cell in results.cells.iter().filter(|c| c.budget == budget) {
            let curve = cell.mean_curve();
            for (step, v) in curve.iter().enumerate() {
                let _ = writeln!(csv, "{},{},{}", cell.method.name(), step, v);
            }
            series.push(Series {
                label: cell.method.name().to_string(),
                points: curve
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (i as f64, v))
                    .collect(),
            });
        }
        std::fs::write(out_dir.join(format!("discovery_b{budget}.csv")), csv)?;
        let svg = svg_line_chart(
            &series,
            &format!("Cumulative discovery, B = {budget}"),
            "step",
            "mean cumulative success",
        );
        std::fs::write(out_dir.join(format!("discovery_b{budget}.svg")), svg)?;
    }
    // SR vs budget
    let mut methods = Vec::new();
    for cell in &results.cells {
        if !methods.contains(&cell.method) {
            methods.push(cell.method);
        }
    }
    let mut csv = String::from("method,budget,mean_sr,sd_sr\n");
    let mut series = Vec::new();
    for &m in &methods {
        let mut points = Vec::new();
        for &b in &budgets {
            if let Some(cell) = results.cell(m, b) {
                if !cell.episodes.is_empty() {
                    let _ = writeln!(csv, "{},{},{},{}", m.name(), b, cell.mean_sr(), cell.sd_sr());
                    points.push((b as f64, cell.mean_sr()));
                }
            }
        }
        series.push(Series {
            label: m.name().to_string(),
            points,
        });
    }
    std::fs::write(out_dir.join("sr_vs_budget.csv"), csv)?;
    std::fs::write(
        out_dir.join("sr_vs_budget.svg"),
        svg_line_chart(&series, "Success rate vs budget", "budget", "mean SR"),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Method;
    use crate::harness::suite::{CellResult, EpisodeSummary};

    #[test]
    fn run_curve_csv_replays_records_exactly() {
        let records: Vec<RunRecord> = (0..5)
            .map(|i| RunRecord {
                step: i,
                query: i,
                outcome: 0.25,
                alpha: None,
                scores: None,
                cumulative: 0.25 * (i + 1) as f64,
                h_updated: false,
                wall_ms: 1.0,
            })
            .collect();
        let csv = run_curve_csv(&records);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 6);
        for (i, r) in records.iter().enumerate() {
            let cols: Vec<&str> = lines[i + 1].split(',').collect();
            assert_eq!(cols[0].parse::<usize>().unwrap(), r.step);
            assert_eq!(cols[2].parse::<f64>().unwrap(), r.cumulative);
        }
    }

    #[test]
    fn empty_results_emit_header_only_files() {
        let dir = tempfile::tempdir().unwrap();
        let results = SuiteResults { cells: Vec::new() };
        emit_plots(&results, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("sr_vs_budget.csv")).unwrap();
        assert_eq!(csv, "method,budget,mean_sr,sd_sr\n");
    }

    #[test]
    fn two_methods_emit_two_series_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |method: Method, sr: f64| CellResult {
            method,
            budget: 10,
            episodes: vec![EpisodeSummary {
                seed: 0,
                sr,
                outcomes: vec![sr; 10],
            }],
            incomplete: Vec::new(),
        };
        let results = SuiteResults {
            cells: vec![mk(Method::Ga, 0.5), mk(Method::Rs, 0.2)],
        };
        emit_plots(&results, dir.path()).unwrap();
        let svg = std::fs::read_to_string(dir.path().join("discovery_b10.svg")).unwrap();
        let ga_pos = svg.find(">ga<").unwrap();
        let rs_pos = svg.find(">rs<").unwrap();
        assert!(ga_pos < rs_pos, "legend order must follow config order");
    }
}
