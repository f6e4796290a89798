use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::CarDepthPair;

/// Reads the per-car CSV written by the evaluation.
pub fn read_car_pairs(path: &Path) -> Result<Vec<CarDepthPair>> {
    let bad = |e: csv::Error| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(bad)?;
    let headers = r.headers().map_err(bad)?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Decode {
            path: path.to_path_buf(),
            message: format!("missing column {name}"),
        })
    };
    let (ci, cn, cg, cp, cx) = (
        col("image_id")?,
        col("instance_id")?,
        col("gt_depth_m")?,
        col("pred_depth_m")?,
        col("pixels")?,
    );
    let mut pairs = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(bad)?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i).trim().parse().map_err(|_| Error::Decode {
                path: path.to_path_buf(),
                message: format!("bad number {:?}", field(i)),
            })
        };
        pairs.push(CarDepthPair {
            image_id: field(ci).to_string(),
            instance_id: num(cn)? as u32,
            gt_depth: num(cg)?,
            pred_depth: num(cp)?,
            pixel_count: num(cx)? as usize,
        });
    }
    Ok(pairs)
}

const SIZE: f64 = 480.0;
const MARGIN: f64 = 56.0;

/// Scatter of ground-truth (x) against predicted (y) car depth with the
/// identity line, as SVG. Returns the number of points drawn.
pub fn emit_scatter(csv_path: &Path, out: &Path) -> Result<usize> {
    let pairs = read_car_pairs(csv_path)?;
    if pairs.is_empty() {
        return Err(Error::EmptySet("car depth CSV"));
    }
    let svg = scatter_svg(&pairs);
    fs::write(out, svg).map_err(|e| Error::io(out, e))?;
    Ok(pairs.len())
}

fn nice_ceiling(v: f64) -> f64 {
    let step = if v <= 20.0 { 5.0 } else { 10.0 };
    ((v / step).ceil() * step).max(step)
}

pub fn scatter_svg(pairs: &[CarDepthPair]) -> String {
    let max = pairs
        .iter()
        .flat_map(|p| [p.gt_depth, p.pred_depth])
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let top = nice_ceiling(max);
    let plot = SIZE - 2.0 * MARGIN;
    let x = |v: f64| MARGIN + v / top * plot;
    let y = |v: f64| SIZE - MARGIN - v / top * plot;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let step = if top <= 20.0 { 5.0 } else { 10.0 * (top / 100.0).ceil() };
    let mut t = 0.0;
    while t <= top + 1e-9 {
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/><line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            x(t),
            y(0.0),
            x(t),
            y(top),
            x(0.0),
            y(t),
            x(top),
            y(t)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{t}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{t}</text>"#,
            x(t),
            y(0.0) + 16.0,
            x(0.0) - 6.0,
            y(t) + 4.0
        );
        t += step;
    }
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{plot}" height="{plot}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-dasharray="4 3"/>"#,
        x(0.0),
        y(0.0),
        x(top),
        y(top)
    );
    for p in pairs {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#1f77b4" fill-opacity="0.7"/>"##,
            x(p.gt_depth.clamp(0.0, top)),
            y(p.pred_depth.clamp(0.0, top))
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">ground truth depth [m]</text>"#,
        SIZE / 2.0,
        SIZE - 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">predicted depth [m]</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
    s.push_str("</svg>\n");
    s
}
