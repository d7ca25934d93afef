//! The `report` subcommand: aligned text table plus a two-panel SVG chart.

use anyhow::{anyhow, Context, Result};
use std::path::Path;

use crate::svg::{render_chart, Panel};
use semfit::simulation::{read_aggregate_csv, AggregateRow};

pub fn run(aggregate_path: &Path, out_path: &Path, panel: &str, df: usize) -> Result<u8> {
    let panel: Panel = panel.parse().map_err(|e: String| anyhow!(e))?;
    let file = std::fs::File::open(aggregate_path)
        .with_context(|| format!("cannot read {}", aggregate_path.display()))?;
    let rows = read_aggregate_csv(file)
        .with_context(|| format!("invalid aggregate CSV {}", aggregate_path.display()))?;

    print_table(&rows);

    let chart = render_chart(&rows, panel, df);
    std::fs::write(out_path, chart)
        .with_context(|| format!("cannot write {}", out_path.display()))?;
    println!("\nWrote chart to {}", out_path.display());
    Ok(0)
}

fn print_table(rows: &[AggregateRow]) {
    let header = [
        "scenario",
        "N",
        "est",
        "variant",
        "mean_T",
        "rej.05",
        "nfi",
        "cfi",
        "tli",
        "rmsea",
        "nonconv",
        "count",
    ];
    let table: Vec<[String; 12]> = rows
        .iter()
        .map(|r| {
            let opt = |v: Option<f64>, digits: usize| {
                v.map_or("-".to_string(), |x| format!("{x:.digits$}"))
            };
            [
                r.scenario.to_string(),
                r.n_obs.to_string(),
                r.estimator.to_string(),
                r.model_variant.to_string(),
                opt(r.mean_t, 2),
                opt(r.rejection_rate_05, 3),
                opt(r.mean_nfi, 4),
                opt(r.mean_cfi, 4),
                opt(r.mean_tli, 4),
                opt(r.mean_rmsea, 4),
                format!("{:.3}", r.nonconvergence_rate),
                r.converged_count.to_string(),
            ]
        })
        .collect();

    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &table {
        for (w, cell) in widths.iter_mut().zip(row.iter()) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    println!(
        "{}",
        line(&header.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    );
    for row in &table {
        println!("{}", line(row));
    }
}
