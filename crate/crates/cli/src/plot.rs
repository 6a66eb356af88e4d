//! Accuracy-vs-strength line chart as a standalone SVG.

use std::fmt::Write;

use occludox::data::ReportRow;

use crate::error::{CliError, CliResult};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const COLOURS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// One polyline per defense (in order of first appearance). Strengths are
/// placed at evenly spaced ticks in increasing order, so iteration ladders
/// such as 0, 10, 100, 1000 stay readable.
pub fn render_svg(rows: &[ReportRow]) -> CliResult<String> {
    if rows.is_empty() {
        return Err(CliError::Config("report has no data rows to plot".into()));
    }
    let mut values: Vec<f64> = rows.iter().map(|r| r.value).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut defenses: Vec<&str> = Vec::new();
    for r in rows {
        if !defenses.contains(&r.defense.as_str()) {
            defenses.push(&r.defense);
        }
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x_at = |v: f64| {
        let i = values.iter().position(|&u| u == v).expect("value collected above");
        if values.len() == 1 {
            LEFT + plot_w / 2.0
        } else {
            LEFT + plot_w * i as f64 / (values.len() - 1) as f64
        }
    };
    let y_at = |acc: f64| TOP + plot_h * (1.0 - acc);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (x0, y0, x1) = (LEFT, TOP + plot_h, LEFT + plot_w);
    let _ = writeln!(
        s,
        r#"<path d="M{x0:.2} {TOP:.2} V{y0:.2} H{x1:.2}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let acc = k as f64 / 4.0;
        let y = y_at(acc);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{acc:.2}</text>"#,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for &v in &values {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v}</text>"#,
            x_at(v),
            y0 + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{} ({})</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 15.0,
        escape(&rows[0].param),
        escape(&rows[0].attack)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">accuracy</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    for (i, d) in defenses.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let mut pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.defense == *d)
            .map(|r| (r.value, r.accuracy))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let coords: Vec<String> = pts
            .iter()
            .map(|&(v, a)| format!("{:.2},{:.2}", x_at(v), y_at(a)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            coords.join(" ")
        );
        let ly = TOP + 16.0 * i as f64 + 8.0;
        let lx = x1 + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{colour}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(d)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
