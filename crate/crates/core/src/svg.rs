//! Minimal static SVG writer for histograms, curves and overlays.

use std::fmt::Write;

pub(crate) fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Accumulates elements; [`Svg::finish`] closes the document.
pub struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        Svg {
            body: String::new(),
            width,
            height,
        }
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, style: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" {}/>"#,
            x, y, w, h, style
        );
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, style: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" {}/>"#,
            x1, y1, x2, y2, style
        );
    }

    pub fn polyline(&mut self, points: &[(f64, f64)], style: &str) {
        let pts: Vec<String> = points.iter().map(|(x, y)| format!("{:.2},{:.2}", x, y)).collect();
        let _ = writeln!(self.body, r#"<polyline points="{}" fill="none" {}/>"#, pts.join(" "), style);
    }

    pub fn circle(&mut self, cx: f64, cy: f64, r: f64, style: &str) {
        let _ = writeln!(self.body, r#"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" {}/>"#, cx, cy, r, style);
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="{:.2}" font-size="{:.1}" font-family="sans-serif">{}</text>"#,
            x,
            y,
            size,
            escape(s)
        );
    }

    /// Opens a group carrying a `class` attribute, for counting elements.
    pub fn group(&mut self, class: &str) {
        let _ = writeln!(self.body, r#"<g class="{}">"#, escape(class));
    }

    pub fn end_group(&mut self) {
        self.body.push_str("</g>\n");
    }

    pub fn raw(&mut self, s: &str) {
        self.body.push_str(s);
    }

    pub fn finish(self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

/// Chart frame mapping data ranges onto a plotting box with axes.
pub(crate) struct Frame {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
    pub xr: (f64, f64),
    pub yr: (f64, f64),
}

impl Frame {
    pub fn px(&self, x: f64) -> f64 {
        self.x0 + (x - self.xr.0) / (self.xr.1 - self.xr.0).max(1e-12) * self.w
    }

    pub fn py(&self, y: f64) -> f64 {
        self.y0 + self.h - (y - self.yr.0) / (self.yr.1 - self.yr.0).max(1e-12) * self.h
    }

    pub fn axes(&self, svg: &mut Svg, xlabel: &str, ylabel: &str) {
        let axis = r#"stroke="black" stroke-width="1""#;
        svg.line(self.x0, self.y0 + self.h, self.x0 + self.w, self.y0 + self.h, axis);
        svg.line(self.x0, self.y0, self.x0, self.y0 + self.h, axis);
        svg.text(self.x0 + self.w / 2.0 - 20.0, self.y0 + self.h + 32.0, 12.0, xlabel);
        svg.text(4.0, self.y0 - 8.0, 12.0, ylabel);
        for i in 0..=4 {
            let v = self.yr.0 + (self.yr.1 - self.yr.0) * i as f64 / 4.0;
            let y = self.py(v);
            svg.line(self.x0 - 4.0, y, self.x0, y, axis);
            svg.text(self.x0 - 36.0, y + 4.0, 10.0, &format!("{:.2}", v));
        }
    }
}
