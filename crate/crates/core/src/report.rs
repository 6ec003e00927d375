//! CSV tables and the SVG heatmap. All output is a pure function of its
//! input, so reruns produce identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::algebra::{Separability, SimilarityMatrix};
use crate::steer::SteerMode;
use crate::transcoder::TransmissionRow;
use crate::{Error, Result};

/// Scale endpoints and midpoint of the heatmap palette.
pub const COLOR_NEG: (u8, u8, u8) = (33, 102, 172);
pub const COLOR_MID: (u8, u8, u8) = (247, 247, 247);
pub const COLOR_POS: (u8, u8, u8) = (178, 24, 43);

const CELL: usize = 56;
const LABEL_MARGIN: usize = 180;
const LEGEND_WIDTH: usize = 90;

/// Fixed-precision formatting that never prints a negative zero.
pub fn fixed(x: f64, decimals: usize) -> String {
    let s = format!("{x:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn lerp(a: u8, b: u8, t: f64) -> u8 {
    (a as f64 + (b as f64 - a as f64) * t).round() as u8
}

/// Diverging palette on the fixed range [-1, 1]; values outside are clamped.
pub fn color(value: f64) -> (u8, u8, u8) {
    let v = if value.is_nan() { 0.0 } else { value.clamp(-1.0, 1.0) };
    let (from, to, t) = if v < 0.0 {
        (COLOR_MID, COLOR_NEG, -v)
    } else {
        (COLOR_MID, COLOR_POS, v)
    };
    (lerp(from.0, to.0, t), lerp(from.1, to.1, t), lerp(from.2, to.2, t))
}

fn hex((r, g, b): (u8, u8, u8)) -> String {
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// `trait,<labels…>` header, then one row per trait with 6 decimals.
pub fn matrix_csv(m: &SimilarityMatrix) -> String {
    let mut out = String::from("trait");
    for l in &m.labels {
        let _ = write!(out, ",{l}");
    }
    out.push('\n');
    for (l, row) in m.labels.iter().zip(&m.values) {
        out.push_str(l.label());
        for v in row {
            let _ = write!(out, ",{}", fixed(*v, 6));
        }
        out.push('\n');
    }
    out
}

pub fn heatmap_svg(m: &SimilarityMatrix) -> String {
    let n = m.len();
    let grid = n * CELL;
    let width = LABEL_MARGIN + grid + LEGEND_WIDTH;
    let height = LABEL_MARGIN + grid + 20;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"##
    );
    let _ = writeln!(
        s,
        r##"<title>cosine similarity, layer {}, {}</title>"##,
        m.layer,
        escape(&m.model)
    );
    let _ = writeln!(s, r##"<rect width="{width}" height="{height}" fill="#ffffff"/>"##);
    for (i, l) in m.labels.iter().enumerate() {
        let c = LABEL_MARGIN + i * CELL + CELL / 2;
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{c}" font-size="12" text-anchor="end" dominant-baseline="middle">{}</text>"##,
            LABEL_MARGIN - 6,
            escape(l.label())
        );
        let _ = writeln!(
            s,
            r##"<text x="{c}" y="{}" font-size="12" text-anchor="start" dominant-baseline="middle" transform="rotate(-60 {c} {})">{}</text>"##,
            LABEL_MARGIN - 6,
            LABEL_MARGIN - 6,
            escape(l.label())
        );
    }
    for (i, row) in m.values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let (x, y) = (LABEL_MARGIN + j * CELL, LABEL_MARGIN + i * CELL);
            let fill = color(v);
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="#ffffff" stroke-width="1"/>"##,
                hex(fill)
            );
            let ink = if v.abs() > 0.6 { "#ffffff" } else { "#000000" };
            let _ = writeln!(
                s,
                r##"<text x="{}" y="{}" font-size="13" text-anchor="middle" dominant-baseline="middle" fill="{ink}">{}</text>"##,
                x + CELL / 2,
                y + CELL / 2,
                fixed(v, 2)
            );
        }
    }
    let lx = LABEL_MARGIN + grid + 24;
    let _ = writeln!(
        s,
        r##"<defs><linearGradient id="scale" x1="0" y1="1" x2="0" y2="0"><stop offset="0" stop-color="{}"/><stop offset="0.5" stop-color="{}"/><stop offset="1" stop-color="{}"/></linearGradient></defs>"##,
        hex(COLOR_NEG),
        hex(COLOR_MID),
        hex(COLOR_POS)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{lx}" y="{LABEL_MARGIN}" width="16" height="{grid}" fill="url(#scale)" stroke="#000000" stroke-width="0.5"/>"##
    );
    for (label, frac) in [("1", 0usize), ("0", 1), ("-1", 2)] {
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" font-size="11" dominant-baseline="middle">{label}</text>"##,
            lx + 22,
            LABEL_MARGIN + frac * grid / 2
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn emit_heatmap(m: &SimilarityMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, heatmap_svg(m).as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoseRow {
    pub direction: String,
    pub mode: SteerMode,
    pub lambda: f64,
    pub gap: f64,
}

pub fn dose_response_csv(rows: &[DoseRow]) -> String {
    let mut out = String::from("direction,mode,lambda,gap\n");
    for r in rows {
        let mode = match r.mode {
            SteerMode::Add => "add",
            SteerMode::Subtract => "subtract",
            SteerMode::ProjectOut => "project_out",
        };
        let _ = writeln!(out, "{},{mode},{},{}", r.direction, fixed(r.lambda, 6), fixed(r.gap, 6));
    }
    out
}

pub fn separability_csv(rows: &[(String, String, String, Separability)]) -> String {
    let mut out = String::from("a,b,reference,cos_ab,cos_a_ref,cos_b_ref,angle_ab_degrees\n");
    for (a, b, r, s) in rows {
        let _ = writeln!(
            out,
            "{a},{b},{r},{},{},{},{}",
            fixed(s.cos_ab, 6),
            fixed(s.cos_a_ref, 6),
            fixed(s.cos_b_ref, 6),
            fixed(s.angle_ab_degrees, 4)
        );
    }
    out
}

pub fn transmission_csv(rows: &[TransmissionRow]) -> String {
    let mut out = String::from("src_layer,dst_layer,gain\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.src_layer, r.dst_layer, fixed(r.gain, 6));
    }
    out
}

/// `index,value` rows for a sensitivity result, headed by the total gain.
pub fn gains_csv(gain: f64, top: &[(usize, f64)]) -> String {
    let mut out = format!("coordinate,value\ngain,{}\n", fixed(gain, 6));
    for (i, v) in top {
        let _ = writeln!(out, "{i},{}", fixed(*v, 6));
    }
    out
}
