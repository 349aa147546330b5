//! Just enough SVG to draw bar and scatter charts.

use std::fmt::Write;

pub const WIDTH: f64 = 720.0;
pub const HEIGHT: f64 = 440.0;
pub const MARGIN_LEFT: f64 = 60.0;
pub const MARGIN_RIGHT: f64 = 170.0;
pub const MARGIN_TOP: f64 = 40.0;
pub const MARGIN_BOTTOM: f64 = 50.0;

pub struct Svg {
    body: String,
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Svg {
    pub fn new() -> Self {
        Self { body: String::new() }
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#
        );
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, dashed: bool) {
        let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}" stroke-width="1.5"{dash}/>"#
        );
    }

    pub fn polyline(&mut self, points: &[(f64, f64)], stroke: &str) {
        let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
    }

    pub fn circle(&mut self, cx: f64, cy: f64, r: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{r:.2}" fill="{fill}" stroke="black" stroke-width="0.5"/>"#
        );
    }

    /// `anchor` is `start`, `middle` or `end`.
    pub fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, text: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="{size}" text-anchor="{anchor}" font-family="sans-serif">{}</text>"#,
            escape(text)
        );
    }

    pub fn vertical_text(&mut self, x: f64, y: f64, size: f64, text: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="{size}" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 {x:.2} {y:.2})">{}</text>"#,
            escape(text)
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body
        )
    }
}

/// Maps a value range onto a pixel range.
#[derive(Debug, Clone, Copy)]
pub struct Scale {
    pub lo: f64,
    pub hi: f64,
    pub from: f64,
    pub to: f64,
}

impl Scale {
    pub fn at(&self, v: f64) -> f64 {
        let span = self.hi - self.lo;
        let t = if span > 0.0 { (v - self.lo) / span } else { 0.5 };
        self.from + t * (self.to - self.from)
    }
}

/// Plot area, axes, ticks every 0.1 of the range and labels.
pub fn axes(svg: &mut Svg, x: Option<Scale>, y: Scale, x_label: &str, y_label: &str, title: &str) {
    let left = MARGIN_LEFT;
    let right = WIDTH - MARGIN_RIGHT;
    let top = MARGIN_TOP;
    let bottom = HEIGHT - MARGIN_BOTTOM;
    svg.line(left, bottom, right, bottom, "black", false);
    svg.line(left, top, left, bottom, "black", false);
    for i in 0..=10 {
        let v = y.lo + (y.hi - y.lo) * i as f64 / 10.0;
        let py = y.at(v);
        svg.line(left - 4.0, py, left, py, "black", false);
        svg.text(left - 6.0, py + 4.0, 10.0, "end", &format!("{v:.2}"));
    }
    if let Some(x) = x {
        for i in 0..=10 {
            let v = x.lo + (x.hi - x.lo) * i as f64 / 10.0;
            let px = x.at(v);
            svg.line(px, bottom, px, bottom + 4.0, "black", false);
            svg.text(px, bottom + 16.0, 10.0, "middle", &format!("{v:.2}"));
        }
    }
    svg.text((left + right) / 2.0, HEIGHT - 10.0, 12.0, "middle", x_label);
    svg.vertical_text(16.0, (top + bottom) / 2.0, 12.0, y_label);
    svg.text((left + right) / 2.0, 24.0, 14.0, "middle", title);
}

/// Legend entries down the right margin.
pub fn legend(svg: &mut Svg, entries: &[(String, String)]) {
    let x = WIDTH - MARGIN_RIGHT + 14.0;
    for (i, (label, color)) in entries.iter().enumerate() {
        let y = MARGIN_TOP + 10.0 + 18.0 * i as f64;
        svg.rect(x, y - 9.0, 10.0, 10.0, color);
        svg.text(x + 16.0, y, 11.0, "start", label);
    }
}
