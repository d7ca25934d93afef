//! Self-contained SVG line charts for aggregate simulation results: sample
//! size on a log x-axis, one polyline per series, dashed reference lines at
//! the interpretive anchors (df for the chi-square panel, 0.95 and 0.06
//! for the index panel).

use semfit::simulation::{AggregateRow, ModelVariant};
use std::collections::BTreeMap;
use std::fmt::Write;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Panel {
    Chisq,
    Indices,
    Both,
}

impl std::str::FromStr for Panel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "chisq" => Ok(Panel::Chisq),
            "indices" => Ok(Panel::Indices),
            "both" => Ok(Panel::Both),
            other => Err(format!(
                "unknown panel '{other}' (expected chisq, indices, or both)"
            )),
        }
    }
}

const PANEL_WIDTH: f64 = 460.0;
const PANEL_HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 62.0;
const MARGIN_RIGHT: f64 = 18.0;
const MARGIN_TOP: f64 = 64.0;
const MARGIN_BOTTOM: f64 = 46.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#e377c2",
];

struct Series {
    label: String,
    dashed: bool,
    points: Vec<(usize, f64)>, // (N, value)
}

struct Reference {
    value: f64,
    label: String,
}

struct PanelSpec {
    id: &'static str,
    title: &'static str,
    series: Vec<Series>,
    references: Vec<Reference>,
    y_floor_zero: bool,
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render the requested panels. Returns a complete standalone SVG document.
pub fn render_chart(rows: &[AggregateRow], panel: Panel, df_reference: usize) -> String {
    let mut panels = Vec::new();
    if panel != Panel::Indices {
        panels.push(chisq_panel(rows, df_reference));
    }
    if panel != Panel::Chisq {
        panels.push(indices_panel(rows));
    }

    let sizes: Vec<usize> = {
        let mut s: Vec<usize> = rows.iter().map(|r| r.n_obs).collect();
        s.sort_unstable();
        s.dedup();
        s
    };

    let width = PANEL_WIDTH * panels.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL_HEIGHT}" viewBox="0 0 {width} {PANEL_HEIGHT}">"#
    );
    let _ = writeln!(
        out,
        r#"<rect x="0" y="0" width="{width}" height="{PANEL_HEIGHT}" fill="white"/>"#
    );
    for (i, spec) in panels.iter().enumerate() {
        render_panel(&mut out, spec, &sizes, i as f64 * PANEL_WIDTH);
    }
    out.push_str("</svg>\n");
    out
}

fn chisq_panel(rows: &[AggregateRow], df_reference: usize) -> PanelSpec {
    let mut series: BTreeMap<_, Series> = BTreeMap::new();
    for row in rows {
        if let Some(t) = row.mean_t {
            series
                .entry((row.estimator, row.model_variant))
                .or_insert_with(|| Series {
                    label: format!("{} {}", row.estimator, row.model_variant),
                    dashed: row.model_variant == ModelVariant::LmModified,
                    points: Vec::new(),
                })
                .points
                .push((row.n_obs, t));
        }
    }
    PanelSpec {
        id: "panel-chisq",
        title: "Mean chi-square statistic",
        series: series.into_values().collect(),
        references: vec![Reference {
            value: df_reference as f64,
            label: format!("df = {df_reference}"),
        }],
        y_floor_zero: true,
    }
}

fn indices_panel(rows: &[AggregateRow]) -> PanelSpec {
    let mut series: BTreeMap<_, Series> = BTreeMap::new();
    let index_fields: [(&str, fn(&AggregateRow) -> Option<f64>); 4] = [
        ("NFI", |r| r.mean_nfi),
        ("CFI", |r| r.mean_cfi),
        ("TLI", |r| r.mean_tli),
        ("RMSEA", |r| r.mean_rmsea),
    ];
    for row in rows {
        for (order, (name, getter)) in index_fields.iter().enumerate() {
            if let Some(v) = getter(row) {
                series
                    .entry((order, row.estimator, row.model_variant))
                    .or_insert_with(|| Series {
                        label: format!("{name} {} {}", row.estimator, row.model_variant),
                        dashed: row.model_variant == ModelVariant::LmModified,
                        points: Vec::new(),
                    })
                    .points
                    .push((row.n_obs, v));
            }
        }
    }
    PanelSpec {
        id: "panel-indices",
        title: "Mean fit indices",
        series: series.into_values().collect(),
        references: vec![
            Reference {
                value: 0.95,
                label: "0.95 (CFI/TLI)".into(),
            },
            Reference {
                value: 0.06,
                label: "0.06 (RMSEA)".into(),
            },
        ],
        y_floor_zero: false,
    }
}

fn render_panel(out: &mut String, spec: &PanelSpec, sizes: &[usize], x_offset: f64) {
    let plot_left = x_offset + MARGIN_LEFT;
    let plot_right = x_offset + PANEL_WIDTH - MARGIN_RIGHT;
    let plot_top = MARGIN_TOP;
    let plot_bottom = PANEL_HEIGHT - MARGIN_BOTTOM;

    // Log-scale x positions; a single sample size sits mid-panel.
    let log_min = (*sizes.first().unwrap_or(&1) as f64).ln();
    let log_max = (*sizes.last().unwrap_or(&1) as f64).ln();
    let x_pos = |n: usize| -> f64 {
        if log_max <= log_min {
            0.5 * (plot_left + plot_right)
        } else {
            plot_left + (plot_right - plot_left) * ((n as f64).ln() - log_min) / (log_max - log_min)
        }
    };

    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for s in &spec.series {
        for &(_, v) in &s.points {
            y_min = y_min.min(v);
            y_max = y_max.max(v);
        }
    }
    for r in &spec.references {
        y_min = y_min.min(r.value);
        y_max = y_max.max(r.value);
    }
    if !y_min.is_finite() {
        y_min = 0.0;
        y_max = 1.0;
    }
    if spec.y_floor_zero {
        y_min = y_min.min(0.0);
    }
    let pad = 0.06 * (y_max - y_min).max(1e-9);
    y_min -= pad;
    y_max += pad;
    let y_pos =
        |v: f64| -> f64 { plot_bottom - (plot_bottom - plot_top) * (v - y_min) / (y_max - y_min) };

    let _ = writeln!(out, r#"<g id="{}">"#, spec.id);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" font-weight="bold">{}</text>"#,
        fmt(plot_left),
        xml_escape(spec.title)
    );

    // Axes.
    let _ = writeln!(
        out,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-width="1"/>"#,
        fmt(plot_left),
        fmt(plot_top),
        fmt(plot_left),
        fmt(plot_bottom)
    );
    let _ = writeln!(
        out,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-width="1"/>"#,
        fmt(plot_left),
        fmt(plot_bottom),
        fmt(plot_right),
        fmt(plot_bottom)
    );

    // X ticks at each sample size.
    for &n in sizes {
        let x = x_pos(n);
        let _ = writeln!(
            out,
            r#"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black" stroke-width="1"/>"#,
            fmt(x),
            fmt(plot_bottom),
            fmt(plot_bottom + 4.0)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{n}</text>"#,
            fmt(x),
            fmt(plot_bottom + 16.0)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">N (log scale)</text>"#,
        fmt(0.5 * (plot_left + plot_right)),
        fmt(plot_bottom + 32.0)
    );

    // Y ticks: five evenly spaced values.
    for k in 0..=4 {
        let v = y_min + (y_max - y_min) * k as f64 / 4.0;
        let y = y_pos(v);
        let _ = writeln!(
            out,
            r#"<line x1="{0}" y1="{2}" x2="{1}" y2="{2}" stroke="black" stroke-width="1"/>"#,
            fmt(plot_left - 4.0),
            fmt(plot_left),
            fmt(y)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"#,
            fmt(plot_left - 7.0),
            fmt(y + 3.5),
            fmt(v)
        );
    }

    // Reference lines.
    for r in &spec.references {
        let y = y_pos(r.value);
        let _ = writeln!(
            out,
            r##"<line x1="{}" y1="{2}" x2="{1}" y2="{2}" stroke="#888888" stroke-width="1" stroke-dasharray="3,3"/>"##,
            fmt(plot_left),
            fmt(plot_right),
            fmt(y)
        );
        let _ = writeln!(
            out,
            r##"<text x="{}" y="{}" font-family="sans-serif" font-size="9" fill="#555555" text-anchor="end">{}</text>"##,
            fmt(plot_right),
            fmt(y - 3.0),
            xml_escape(&r.label)
        );
    }

    // Series: polyline (when more than one point), point markers, legend.
    for (i, s) in spec.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if s.dashed {
            r#" stroke-dasharray="6,4""#
        } else {
            ""
        };
        let mut points = s.points.clone();
        points.sort_unstable_by_key(|&(n, _)| n);
        if points.len() > 1 {
            let coords: Vec<String> = points
                .iter()
                .map(|&(n, v)| format!("{},{}", fmt(x_pos(n)), fmt(y_pos(v))))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
                coords.join(" ")
            );
        }
        for &(n, v) in &points {
            let _ = writeln!(
                out,
                r#"<circle cx="{}" cy="{}" r="2.5" fill="{color}"/>"#,
                fmt(x_pos(n)),
                fmt(y_pos(v))
            );
        }
        let legend_y = 34.0 + 11.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{0}" y1="{2}" x2="{1}" y2="{2}" stroke="{color}" stroke-width="1.5"{dash}/>"#,
            fmt(plot_left + 4.0),
            fmt(plot_left + 22.0),
            fmt(legend_y - 3.0)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="9">{}</text>"#,
            fmt(plot_left + 26.0),
            fmt(legend_y),
            xml_escape(&s.label)
        );
    }

    out.push_str("</g>\n");
}
