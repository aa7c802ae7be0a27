//! Result tables: mean ± sd per (method, budget) cell.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::harness::suite::SuiteResults;

/// `0.5620 ± 0.0073` formatting used throughout reports.
pub fn format_mean_sd(mean: f64, sd: f64) -> String {
    format!("{mean:.4} \u{b1} {sd:.4}")
}

/// CSV table, one row per cell, in configuration order.
pub fn results_csv(results: &SuiteResults) -> String {
    let mut out = String::from("method,budget,mean_sr,sd_sr,seeds,incomplete\n");
    for cell in &results.cells {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{},{}",
            cell.method.name(),
            cell.budget,
            cell.mean_sr(),
            cell.sd_sr(),
            cell.episodes.len(),
            cell.incomplete.len()
        );
    }
    out
}

/// Human-readable table with `mean ± sd` cells.
pub fn results_table(results: &SuiteResults) -> String {
    let mut budgets: Vec<usize> = results.cells.iter().map(|c| c.budget).collect();
    budgets.sort_unstable();
    budgets.dedup();
    let mut methods: Vec<_> = Vec::new();
    for cell in &results.cells {
        if !methods.contains(&cell.method) {
            methods.push(cell.method);
        }
    }
    let mut out = String::new();
    let _ = write!(out, "{:<16}", "method");
    for b in &budgets {
        let _ = write!(out, "{:<20}", format!("B={b}"));
    }
    out.push('\n');
    for m in methods {
        let _ = write!(out, "{:<16}", m.name());
        for &b in &budgets {
            let text = match results.cell(m, b) {
                Some(cell) if !cell.episodes.is_empty() => {
                    let mut s = format_mean_sd(cell.mean_sr(), cell.sd_sr());
                    if !cell.incomplete.is_empty() {
                        s.push('*');
                    }
                    s
                }
                Some(_) => "incomplete".to_string(),
                None => "-".to_string(),
            };
            let _ = write!(out, "{text:<20}");
        }
        out.push('\n');
    }
    out
}

pub fn write_report(results: &SuiteResults, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("results.csv"), results_csv(results))?;
    std::fs::write(dir.join("results.txt"), results_table(results))?;
    Ok(())
}
