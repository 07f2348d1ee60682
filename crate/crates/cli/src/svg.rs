//! Minimal SVG emitters for the ROC curve and breakdown heatmaps.

use stereoface::error::Result;
use stereoface::eval::{BreakdownMatrix, RocReport};
use std::fmt::Write as _;
use std::path::Path;

const W: f64 = 640.0;
const H: f64 = 440.0;
const MARGIN: f64 = 60.0;

/// ROC curve with a log10 FPR axis.
pub fn write_roc_svg(report: &RocReport, path: &Path) -> Result<()> {
    let min_fpr = report
        .rows
        .iter()
        .map(|r| r.fpr)
        .filter(|&f| f > 0.0)
        .fold(1.0f64, f64::min)
        .max(1e-9);
    let x_of = |fpr: f64| {
        let f = fpr.max(min_fpr);
        let t = (f.log10() - min_fpr.log10()) / (0.0 - min_fpr.log10());
        MARGIN + t * (W - 2.0 * MARGIN)
    };
    let y_of = |fnr: f64| H - MARGIN - fnr * (H - 2.0 * MARGIN);

    let mut points = String::new();
    for r in report.rows.iter().filter(|r| r.fpr > 0.0) {
        let _ = write!(points, "{:.2},{:.2} ", x_of(r.fpr), y_of(r.fnr));
    }

    let mut s = String::new();
    let _ = write!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">verification ROC ({} genuine / {} impostor pairs)</text>
<line x1="{MARGIN}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle" font-size="12">FPR (log10)</text>
<text x="16" y="{}" font-size="12" transform="rotate(-90 16 {})">FNR</text>
<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{points}"/>
"##,
        W / 2.0,
        report.genuine_count,
        report.impostor_count,
        H - MARGIN,
        W - MARGIN,
        H - MARGIN,
        H - MARGIN,
        W / 2.0,
        H - 20.0,
        H / 2.0,
        H / 2.0,
    );
    // Axis ticks each decade.
    let decades = (-min_fpr.log10()).ceil() as i64;
    for d in 0..=decades {
        let fpr = 10f64.powi(-d as i32);
        if fpr < min_fpr {
            break;
        }
        let x = x_of(fpr);
        let _ = write!(
            s,
            r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#999"/>
<text x="{x:.2}" y="{}" text-anchor="middle" font-size="10">1e-{d}</text>
"##,
            H - MARGIN,
            H - MARGIN + 5.0,
            H - MARGIN + 18.0,
        );
    }
    for frac in [0.0f64, 0.25, 0.5, 0.75, 1.0] {
        let y = y_of(frac);
        let _ = write!(
            s,
            r#"<text x="{}" y="{y:.2}" text-anchor="end" font-size="10">{frac}</text>
"#,
            MARGIN - 6.0
        );
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s)?;
    Ok(())
}

fn heat_color(v: f64) -> String {
    // Blue (low) to red (high).
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * v) as u8;
    let b = (255.0 * (1.0 - v)) as u8;
    let g = (96.0 * (1.0 - (2.0 * v - 1.0).abs())) as u8;
    format!("rgb({r},{g},{b})")
}

/// FNR heatmap over attribute-bin pairs; empty cells are gray.
pub fn write_breakdown_svg(m: &BreakdownMatrix, path: &Path) -> Result<()> {
    let n = m.labels.len();
    let cell = ((W - 2.0 * MARGIN) / n as f64).min((H - 2.0 * MARGIN) / n as f64);
    let max_fnr = m
        .fnr
        .iter()
        .flatten()
        .cloned()
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">FNR by {:?} bins (max {:.3})</text>
"#,
        W / 2.0,
        m.axis,
        max_fnr,
    );
    for a in 0..n {
        for b in 0..n {
            let x = MARGIN + b as f64 * cell;
            let y = MARGIN + a as f64 * cell;
            let fill = match m.fnr[a * n + b] {
                Some(f) => heat_color(f / max_fnr),
                None => "rgb(220,220,220)".to_string(),
            };
            let _ = write!(
                s,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{cell:.2}" height="{cell:.2}" fill="{fill}" stroke="white"/>
"#
            );
        }
    }
    for (i, label) in m.labels.iter().enumerate() {
        let x = MARGIN + (i as f64 + 0.5) * cell;
        let _ = write!(
            s,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle" font-size="8">{label}</text>
"#,
            MARGIN + n as f64 * cell + 12.0
        );
        let y = MARGIN + (i as f64 + 0.5) * cell;
        let _ = write!(
            s,
            r#"<text x="{}" y="{y:.2}" text-anchor="end" font-size="8">{label}</text>
"#,
            MARGIN - 4.0
        );
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s)?;
    Ok(())
}
