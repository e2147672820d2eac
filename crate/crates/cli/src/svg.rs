//! Minimal SVG charts for evaluation reports.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 360.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 72.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(title: &str, ymax: f64, body: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let plot_h = H - TOP - BOTTOM;
    for i in 0..=4 {
        let v = ymax * i as f64 / 4.0;
        let y = TOP + plot_h * (1.0 - i as f64 / 4.0);
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, W - RIGHT);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.0}</text>"#, LEFT - 6.0, y + 4.0);
    }
    s.push_str(body);
    s.push_str("</svg>\n");
    s
}

pub fn bar_chart(title: &str, labels: &[String], values: &[f64], ymax: f64) -> String {
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let n = values.len().max(1) as f64;
    let slot = plot_w / n;
    let mut body = String::new();
    for (i, (label, v)) in labels.iter().zip(values).enumerate() {
        let h = plot_h * (v / ymax).clamp(0.0, 1.0);
        let x = LEFT + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            body,
            r##"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="#4a7"/>"##,
            TOP + plot_h - h,
            slot * 0.7
        );
        let cx = x + slot * 0.35;
        let ly = TOP + plot_h + 12.0;
        let _ = writeln!(
            body,
            r#"<text x="{cx:.1}" y="{ly:.1}" text-anchor="end" transform="rotate(-45 {cx:.1} {ly:.1})">{}</text>"#,
            escape(label)
        );
    }
    frame(title, ymax, &body)
}

pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64)], ymax: f64) -> String {
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let xmax = points.iter().map(|p| p.0).fold(0.0, f64::max).max(1e-9);
    let coords: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.1},{:.1}", LEFT + plot_w * x / xmax, TOP + plot_h * (1.0 - (y / ymax).clamp(0.0, 1.0))))
        .collect();
    let mut body = String::new();
    let _ = writeln!(body, r##"<polyline points="{}" fill="none" stroke="#2a6" stroke-width="2"/>"##, coords.join(" "));
    let _ = writeln!(body, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, LEFT + plot_w / 2.0, H - 20.0, escape(xlabel));
    let _ = writeln!(body, r#"<text x="{LEFT}" y="{:.1}">{}</text>"#, TOP - 6.0, escape(ylabel));
    for i in 0..=4 {
        let x = xmax * i as f64 / 4.0;
        let _ = writeln!(
            body,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x:.2}</text>"#,
            LEFT + plot_w * i as f64 / 4.0,
            TOP + plot_h + 14.0
        );
    }
    frame(title, ymax, &body)
}
