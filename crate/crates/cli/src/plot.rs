//! Self-contained SVG bar charts for the gain-density and sensitivity CSVs.

use std::fmt::Write;
use std::io::Read;

use perfix_core::{Error, Result};
use serde::Deserialize;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;
const COLOURS: [&str; 2] = ["#4c72b0", "#dd8452"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    GainDensity,
    Sensitivity,
}

impl PlotKind {
    pub fn file_stem(self) -> &'static str {
        match self {
            PlotKind::GainDensity => "gain_density",
            PlotKind::Sensitivity => "sensitivity",
        }
    }
}

#[derive(Deserialize)]
struct GainRow {
    bin_lower: f64,
    bin_upper: f64,
    count: usize,
}

#[derive(Deserialize)]
struct SensitivityRow {
    layer_type: String,
    standalone_mean: f64,
    #[allow(dead_code)]
    standalone_std: f64,
    combined_mean: Option<f64>,
    #[allow(dead_code)]
    combined_std: Option<f64>,
    #[allow(dead_code)]
    overall: Option<f64>,
}

struct Group {
    label: String,
    values: Vec<Option<f64>>,
}

fn parse<T: for<'de> Deserialize<'de>, R: Read>(r: R) -> Result<Vec<T>> {
    let rows = csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Format(format!("bad CSV: {e}")))?;
    if rows.is_empty() {
        return Err(Error::Format("CSV has no rows".into()));
    }
    Ok(rows)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn render<R: Read>(kind: PlotKind, csv: R) -> Result<String> {
    match kind {
        PlotKind::GainDensity => {
            let rows: Vec<GainRow> = parse(csv)?;
            let groups = rows
                .iter()
                .map(|r| Group {
                    label: format!("{:+.2}", (r.bin_lower + r.bin_upper) / 2.0),
                    values: vec![Some(r.count as f64)],
                })
                .collect::<Vec<_>>();
            Ok(bar_chart(
                "Accuracy gain over baseline",
                "gain",
                "clients",
                &groups,
                &[],
            ))
        }
        PlotKind::Sensitivity => {
            let rows: Vec<SensitivityRow> = parse(csv)?;
            let groups = rows
                .iter()
                .map(|r| Group {
                    label: r.layer_type.clone(),
                    values: vec![Some(r.standalone_mean), r.combined_mean],
                })
                .collect::<Vec<_>>();
            Ok(bar_chart(
                "Layer sensitivity",
                "local layer type",
                "mean accuracy",
                &groups,
                &["stand-alone", "combined"],
            ))
        }
    }
}

fn bar_chart(title: &str, x_label: &str, y_label: &str, groups: &[Group], legend: &[&str]) -> String {
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let y_max = groups
        .iter()
        .flat_map(|g| g.values.iter().flatten())
        .fold(0.0f64, |m, &v| m.max(v));
    let y_max = if y_max > 0.0 { y_max * 1.1 } else { 1.0 };
    let series = groups.iter().map(|g| g.values.len()).max().unwrap_or(1);
    let slot = plot_w / groups.len() as f64;
    let bar_w = slot * 0.8 / series as f64;
    let y_of = |v: f64| TOP + plot_h * (1.0 - v / y_max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    // axes
    let (x0, y0) = (LEFT, TOP + plot_h);
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#,
        LEFT + plot_w
    );
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{TOP}" x2="{x0}" y2="{y0}" stroke="black"/>"#);
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/>"#,
            x0 - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            y + 4.0,
            format_tick(v)
        );
    }
    for (i, g) in groups.iter().enumerate() {
        let left = LEFT + slot * i as f64 + slot * 0.1;
        for (j, v) in g.values.iter().enumerate() {
            let Some(v) = v else { continue };
            let y = y_of(*v);
            let _ = writeln!(
                s,
                r#"<rect class="bar" x="{:.2}" y="{y:.2}" width="{bar_w:.2}" height="{:.2}" fill="{}"><title>{}: {}</title></rect>"#,
                left + bar_w * j as f64,
                y0 - y,
                COLOURS[j % COLOURS.len()],
                escape(&g.label),
                v
            );
        }
        let cx = LEFT + slot * (i as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{}" text-anchor="end" transform="rotate(-35 {cx:.2} {})">{}</text>"#,
            y0 + 14.0,
            y0 + 14.0,
            escape(&g.label)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 6.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(y_label)
    );
    let legend: Vec<&str> = if legend.is_empty() {
        vec![y_label]
    } else {
        legend.to_vec()
    };
    let _ = writeln!(s, r#"<g class="legend">"#);
    for (j, name) in legend.iter().enumerate() {
        let y = TOP + 14.0 * j as f64;
        let x = WIDTH - RIGHT - 110.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 9.0,
            COLOURS[j % COLOURS.len()],
            x + 14.0,
            y,
            escape(name)
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64) -> String {
    if v >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}
