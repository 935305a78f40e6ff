//! Minimal standalone SVG charts for the analysis tables.

use std::fmt::Write;

use super::{DnrRecallTable, EnrollmentRow, LengthRow};

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: &[f64], y0: f64, y1: f64) -> Self {
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (x0, x1) = if xs.is_empty() {
            (0.0, 1.0)
        } else if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        };
        Self { x0, x1, y0, y1 }
    }

    fn x(&self, v: f64) -> f64 {
        PAD + (v - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn y(&self, v: f64) -> f64 {
        H - PAD - (v - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn open(title: &str, xlabel: &str, ylabel: &str, f: &Frame) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = write!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let (l, r, t, b) = (PAD, W - PAD, PAD, H - PAD);
    let _ = write!(
        s,
        r#"<path d="M{l} {t}V{b}H{r}" fill="none" stroke="black"/><text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(xlabel)
    );
    let _ = write!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    for k in 0..=4 {
        let v = f.y0 + (f.y1 - f.y0) * k as f64 / 4.0;
        let _ = write!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            l - 4.0,
            f.y(v) + 4.0
        );
    }
    for (v, label) in [(f.x0, f.x0), (f.x1, f.x1)] {
        let _ = write!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{label:.3}</text>"#,
            f.x(v),
            b + 14.0
        );
    }
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn polyline(f: &Frame, pts: &[(f64, f64)], color: &str) -> String {
    let mut s = String::new();
    let d: Vec<String> = pts
        .iter()
        .map(|&(x, y)| format!("{:.1},{:.1}", f.x(x), f.y(y)))
        .collect();
    let _ = write!(
        s,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
        d.join(" ")
    );
    for &(x, y) in pts {
        let _ = write!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
            f.x(x),
            f.y(y)
        );
    }
    s
}

/// Mean recall per DNR bin with its bootstrap band, plus person counts as bars.
pub fn dnr_recall_svg(table: &DnrRecallTable) -> String {
    let xs: Vec<f64> = table
        .bins
        .iter()
        .map(|b| 0.5 * (b.dnr_low + b.dnr_high))
        .collect();
    let f = Frame::new(&xs, 0.0, 1.0);
    let mut s = open(
        &format!("Recall by drift-to-noise (Spearman {:.3})", table.spearman),
        "DNR (bin centre)",
        "recall",
        &f,
    );
    let max_n = table
        .bins
        .iter()
        .map(|b| b.persons)
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    for (x, b) in xs.iter().zip(&table.bins) {
        let top = f.y(0.3 * b.persons as f64 / max_n);
        let _ = write!(
            s,
            r##"<rect x="{:.1}" y="{top:.1}" width="10" height="{:.1}" fill="#ccc"><title>{} persons</title></rect>"##,
            f.x(*x) - 5.0,
            f.y(0.0) - top,
            b.persons
        );
    }
    if !table.bins.is_empty() {
        let upper: Vec<String> = xs
            .iter()
            .zip(&table.bins)
            .map(|(x, b)| format!("{:.1},{:.1}", f.x(*x), f.y(b.ci_high)))
            .collect();
        let lower: Vec<String> = xs
            .iter()
            .zip(&table.bins)
            .rev()
            .map(|(x, b)| format!("{:.1},{:.1}", f.x(*x), f.y(b.ci_low)))
            .collect();
        let _ = write!(
            s,
            r##"<polygon points="{} {}" fill="#1f77b4" fill-opacity="0.2"/>"##,
            upper.join(" "),
            lower.join(" ")
        );
    }
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(&table.bins)
        .map(|(x, b)| (*x, b.mean_recall))
        .collect();
    s += &polyline(&f, &pts, "#1f77b4");
    s + "</svg>\n"
}

pub fn length_svg(rows: &[LengthRow]) -> String {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.length as f64, r.accuracy)).collect();
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let f = Frame::new(&xs, 0.0, 1.0);
    let mut s = open("Accuracy by clip length", "frames", "accuracy", &f);
    s += &polyline(&f, &pts, "#d62728");
    s + "</svg>\n"
}

pub fn enrollment_svg(rows: &[EnrollmentRow]) -> String {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.train_utterances as f64, r.mean_accuracy))
        .collect();
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let f = Frame::new(&xs, 0.0, 1.0);
    let mut s = open(
        "Accuracy by training utterances",
        "training utterances",
        "mean accuracy",
        &f,
    );
    s += &polyline(&f, &pts, "#2ca02c");
    s + "</svg>\n"
}
