//! SVG rendering of per-frame anomaly-score curves with shaded
//! ground-truth segments, one stacked panel per video.

use std::fmt::Write;

pub struct Curve {
    pub id: String,
    pub scores: Vec<f64>,
    /// Frame ground truth; frames above 0.5 are shaded.
    pub gt: Vec<f64>,
}

const WIDTH: f64 = 800.0;
const PANEL: f64 = 160.0;
const MARGIN: f64 = 40.0;
const TITLE: f64 = 18.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Maximal runs of frames with `gt > 0.5`, as half-open `[start, end)`.
pub fn positive_runs(gt: &[f64]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &g) in gt.iter().enumerate() {
        match (g > 0.5, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, gt.len()));
    }
    runs
}

pub fn render(curves: &[Curve]) -> String {
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = PANEL - TITLE - 20.0;
    let height = curves.len() as f64 * PANEL + MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, c) in curves.iter().enumerate() {
        let top = MARGIN / 2.0 + k as f64 * PANEL;
        let y0 = top + TITLE;
        let n = c.scores.len().max(1) as f64;
        // frame i occupies [i, i+1) on the x axis
        let x = |i: f64| MARGIN + plot_w * i / n;
        let y = |v: f64| y0 + plot_h * (1.0 - v.clamp(0.0, 1.0));
        let _ = writeln!(s, r#"<g class="video" data-id="{}">"#, escape(&c.id));
        let _ = writeln!(
            s,
            r#"<text x="{MARGIN}" y="{:.2}" font-family="sans-serif" font-size="12">{}</text>"#,
            top + 12.0,
            escape(&c.id)
        );
        for (a, b) in positive_runs(&c.gt) {
            let _ = writeln!(
                s,
                r##"<rect class="gt" x="{:.2}" y="{y0:.2}" width="{:.2}" height="{plot_h:.2}" fill="#f4a6a6" fill-opacity="0.5"/>"##,
                x(a as f64),
                x(b as f64) - x(a as f64)
            );
        }
        let _ = writeln!(
            s,
            r#"<rect class="frame" x="{MARGIN}" y="{y0:.2}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="black" stroke-width="0.5"/>"#
        );
        let points: Vec<String> =
            c.scores.iter().enumerate().map(|(i, &v)| format!("{:.2},{:.2}", x(i as f64 + 0.5), y(v))).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="score" points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#,
            points.join(" ")
        );
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}
