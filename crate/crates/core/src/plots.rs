//! Deterministic SVG rendering of report curves, frame strips and
//! deformation grids.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fields::{DeformationField, GridImage};
use crate::metrics::{FrameSummary, Stat};
use crate::real::Real;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// One curve: `(frame, mean, std)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(usize, f64, f64)>,
}

impl Series {
    /// Extracts one metric from a summary; frames without it are skipped.
    pub fn from_summary(label: &str, summary: &[FrameSummary], metric: impl Fn(&FrameSummary) -> Option<Stat>) -> Self {
        Series {
            label: label.to_string(),
            points: summary
                .iter()
                .filter_map(|f| metric(f).map(|s| (f.frame, s.mean, s.std)))
                .collect(),
        }
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Tick label with up to four significant digits.
fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let mag = v.abs().log10().floor();
    if !(-3.0..4.0).contains(&mag) {
        return format!("{v:.2e}");
    }
    let decimals = (3.0 - mag).max(0.0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Line plot of per-frame means with shaded ±std bands and one x tick per
/// frame.
pub fn line_plot(title: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let mut frames: Vec<usize> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    frames.sort_unstable();
    frames.dedup();
    if frames.is_empty() {
        return Err(Error::contract(format!("plot `{title}` has no data points")));
    }
    let all = series.iter().flat_map(|s| &s.points);
    if all.clone().any(|p| !p.1.is_finite() || !p.2.is_finite()) {
        return Err(Error::NonFinite(format!("plot `{title}` has a non-finite point")));
    }
    let lo = all.clone().map(|p| p.1 - p.2).fold(f64::INFINITY, f64::min).min(0.0);
    let mut hi = all.map(|p| p.1 + p.2).fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let (x0, x1) = (frames[0] as f64, *frames.last().unwrap() as f64);
    let pw = WIDTH - MARGIN_L - MARGIN_R;
    let ph = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |f: f64| if x1 > x0 { MARGIN_L + (f - x0) / (x1 - x0) * pw } else { MARGIN_L + pw / 2.0 };
    let sy = |v: f64| MARGIN_T + (hi - v) / (hi - lo) * ph;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#, MARGIN_L + pw / 2.0, esc(title)).unwrap();
    writeln!(
        s,
        r##"<g class="axes" stroke="#333"><line x1="{MARGIN_L}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/><line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{:.2}"/></g>"##,
        MARGIN_T + ph,
        MARGIN_L + pw,
        MARGIN_T + ph,
        MARGIN_T + ph
    )
    .unwrap();
    for &f in &frames {
        let x = sx(f as f64);
        writeln!(
            s,
            r##"<g class="xtick"><line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#333"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{f}</text></g>"##,
            MARGIN_T + ph,
            MARGIN_T + ph + 5.0,
            MARGIN_T + ph + 19.0
        )
        .unwrap();
    }
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = sy(v);
        writeln!(
            s,
            r##"<g class="ytick"><line x1="{:.2}" y1="{y:.2}" x2="{MARGIN_L}" y2="{y:.2}" stroke="#333"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text></g>"##,
            MARGIN_L - 5.0,
            MARGIN_L - 8.0,
            y + 4.0,
            tick_label(v)
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">frame</text>"#,
        MARGIN_L + pw / 2.0,
        HEIGHT - 12.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text transform="translate(18 {:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
        MARGIN_T + ph / 2.0,
        esc(y_label)
    )
    .unwrap();

    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if ser.points.is_empty() {
            continue;
        }
        let upper: Vec<String> = ser.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.0 as f64), sy(p.1 + p.2))).collect();
        let lower: Vec<String> = ser.points.iter().rev().map(|p| format!("{:.2},{:.2}", sx(p.0 as f64), sy(p.1 - p.2))).collect();
        writeln!(
            s,
            r#"<polygon class="band" points="{} {}" fill="{color}" fill-opacity="0.18" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        )
        .unwrap();
        let line: Vec<String> = ser.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.0 as f64), sy(p.1))).collect();
        writeln!(
            s,
            r#"<polyline class="mean" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        )
        .unwrap();
        for p in &ser.points {
            writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(p.0 as f64), sy(p.1)).unwrap();
        }
        let ly = MARGIN_T + 10.0 + 20.0 * k as f64;
        let lx = WIDTH - MARGIN_R + 15.0;
        writeln!(
            s,
            r#"<g class="legend"><rect x="{lx:.2}" y="{:.2}" width="14" height="4" fill="{color}"/><text x="{:.2}" y="{:.2}">{}</text></g>"#,
            ly - 2.0,
            lx + 20.0,
            ly + 4.0,
            esc(&ser.label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

const CELL: f64 = 4.0;
const GAP: f64 = 8.0;

fn strip_header(s: &mut String, columns: usize, h: usize, w: usize, labels: &[String]) -> (f64, f64) {
    let tile_w = w as f64 * CELL;
    let tile_h = h as f64 * CELL;
    let total_w = columns as f64 * (tile_w + GAP) + GAP;
    let total_h = tile_h + 2.0 * GAP + 16.0;
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w:.0}" height="{total_h:.0}" viewBox="0 0 {total_w:.0} {total_h:.0}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{total_w:.0}" height="{total_h:.0}" fill="white"/>"#).unwrap();
    for (k, label) in labels.iter().enumerate() {
        let x = GAP + k as f64 * (tile_w + GAP) + tile_w / 2.0;
        writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, tile_h + GAP + 14.0, esc(label)).unwrap();
    }
    (tile_w, tile_h)
}

/// Greyscale frames side by side, one rectangle per pixel (values clamped
/// to `[0, 1]`).
pub fn image_strip<F: Real>(frames: &[GridImage<F>], labels: &[String]) -> Result<String> {
    let first = frames.first().ok_or_else(|| Error::contract("image strip needs at least one frame"))?;
    let (h, w) = first.dims();
    if frames.iter().any(|f| f.dims() != (h, w)) || labels.len() != frames.len() {
        return Err(Error::contract("image strip frames must share one size and have one label each"));
    }
    let mut s = String::new();
    let (tile_w, _) = strip_header(&mut s, frames.len(), h, w, labels);
    for (k, f) in frames.iter().enumerate() {
        let ox = GAP + k as f64 * (tile_w + GAP);
        writeln!(s, r#"<g class="frame" transform="translate({ox:.1} {GAP:.1})" shape-rendering="crispEdges">"#).unwrap();
        for y in 0..h {
            for x in 0..w {
                let v = (f.get(x, y).as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
                writeln!(
                    s,
                    r##"<rect x="{:.0}" y="{:.0}" width="{CELL}" height="{CELL}" fill="#{v:02x}{v:02x}{v:02x}"/>"##,
                    x as f64 * CELL,
                    y as f64 * CELL
                )
                .unwrap();
            }
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Polylines tracing where the horizontal and vertical gridlines of spacing
/// `spacing` pixels land under each deformation.
pub fn grid_strip<F: Real>(fields: &[DeformationField<F>], labels: &[String], spacing: usize) -> Result<String> {
    let first = fields.first().ok_or_else(|| Error::contract("grid strip needs at least one field"))?;
    let (h, w) = first.dims();
    if fields.iter().any(|f| f.dims() != (h, w)) || labels.len() != fields.len() {
        return Err(Error::contract("grid strip fields must share one size and have one label each"));
    }
    if spacing == 0 {
        return Err(Error::contract("grid spacing must be positive"));
    }
    let mut s = String::new();
    let (tile_w, tile_h) = strip_header(&mut s, fields.len(), h, w, labels);
    let px = |v: f64| v * CELL + CELL / 2.0;
    for (k, phi) in fields.iter().enumerate() {
        let ox = GAP + k as f64 * (tile_w + GAP);
        writeln!(s, r#"<g class="grid" transform="translate({ox:.1} {GAP:.1})">"#).unwrap();
        writeln!(s, r##"<rect width="{tile_w:.0}" height="{tile_h:.0}" fill="none" stroke="#bbb"/>"##).unwrap();
        let mut line = |pts: Vec<(usize, usize)>| {
            let coords: Vec<String> = pts
                .into_iter()
                .map(|(x, y)| {
                    let (ux, uy) = phi.at(x, y);
                    format!("{:.2},{:.2}", px(x as f64 + ux.as_f64()), px(y as f64 + uy.as_f64()))
                })
                .collect();
            writeln!(s, r##"<polyline points="{}" fill="none" stroke="#1f4e9c" stroke-width="1"/>"##, coords.join(" ")).unwrap();
        };
        for y in (0..h).step_by(spacing) {
            line((0..w).map(|x| (x, y)).collect());
        }
        for x in (0..w).step_by(spacing) {
            line((0..h).map(|y| (x, y)).collect());
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    Ok(s)
}
