//! Run-directory persistence: CSV metrics, JSON attack reports and
//! summaries, PGM/PPM reconstructions, and self-contained SVG plots.
//!
//! Everything written here is deterministic for a given input — field
//! orders are fixed, floats use Rust's shortest-roundtrip formatting, and
//! no timestamps or machine identifiers are embedded — so reruns with the
//! same configuration produce byte-identical artifacts.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl::{Defense, RoundHistory};
use crate::metrics::quartiles;
use crate::tensor::Tensor;

// ── metrics.csv ───────────────────────────────────────────────────────────

/// Per-round training metrics: `round,accuracy,masked_fraction,loss_c0,…`.
/// One loss column per client, in client order.
pub fn write_metrics_csv(path: impl AsRef<Path>, history: &RoundHistory) -> Result<()> {
    let mut out = String::new();
    let clients = history.records.first().map_or(0, |r| r.client_losses.len());
    out.push_str("round,accuracy,masked_fraction");
    for c in 0..clients {
        out.push_str(&format!(",loss_c{c}"));
    }
    out.push('\n');
    for rec in &history.records {
        out.push_str(&format!(
            "{},{},{}",
            rec.round, rec.accuracy, rec.masked_fraction
        ));
        for loss in &rec.client_losses {
            out.push_str(&format!(",{loss}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// ── attacks.json / summary.json ───────────────────────────────────────────

/// One attacked image: what was reconstructed and how well.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageReport {
    pub image_index: usize,
    pub label: usize,
    pub ssim: f64,
    /// Final gradient cosine similarity, for attacks that track one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosine: Option<f64>,
    pub iterations: usize,
    pub degenerate: bool,
    /// Reconstruction image file, relative to the run directory.
    pub reconstruction: String,
}

/// Full attack report for one run cell (one defense, one attack).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: String,
    pub defense: Defense,
    pub median_ssim: f64,
    /// min, first quartile, median, third quartile, max of per-image SSIM.
    pub ssim_quartiles: [f64; 5],
    pub images: Vec<ImageReport>,
}

pub fn write_attacks_json(path: impl AsRef<Path>, report: &AttackReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_attacks_json(path: impl AsRef<Path>) -> Result<AttackReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// One line of summary.json: the mechanized privacy decision for a cell.
/// `private` means the median attack SSIM fell below 0.5.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub attack: String,
    pub defense: Defense,
    pub median_ssim: f64,
    pub private: bool,
    pub final_accuracy: f64,
}

/// Run-level summary: one entry per cell (single-cell runs have one).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub cells: Vec<CellSummary>,
}

pub fn write_summary_json(path: impl AsRef<Path>, summary: &Summary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_summary_json(path: impl AsRef<Path>) -> Result<Summary> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

// ── PGM / PPM images ──────────────────────────────────────────────────────

fn byte_pixel(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interpret a tensor as a grayscale or RGB image: `[H,W]` and `[1,H,W]`
/// are grayscale, `[3,H,W]` is RGB.
fn image_planes(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [h, w] => Ok((1, h, w)),
        [c @ (1 | 3), h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(
            "image file",
            "[H,W], [1,H,W] or [3,H,W]",
            format!("{:?}", image.shape()),
        )),
    }
}

/// Binary PGM (P5), 8-bit, pixels clamped from [0,1]. Grayscale only.
pub fn write_pgm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let (c, h, w) = image_planes(image)?;
    if c != 1 {
        return Err(Error::shape("pgm", "1 channel", c));
    }
    let mut file = fs::File::create(path)?;
    write!(file, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = image.data().iter().map(|&v| byte_pixel(v)).collect();
    file.write_all(&bytes)?;
    Ok(())
}

/// Binary PPM (P6), 8-bit, pixels clamped from [0,1]. Expects `[3,H,W]`.
pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let (c, h, w) = image_planes(image)?;
    if c != 3 {
        return Err(Error::shape("ppm", "3 channels", c));
    }
    let mut file = fs::File::create(path)?;
    write!(file, "P6\n{w} {h}\n255\n")?;
    let data = image.data();
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            bytes.push(byte_pixel(data[ch * plane + i]));
        }
    }
    file.write_all(&bytes)?;
    Ok(())
}

/// Write grayscale tensors as `.pgm`, 3-channel as `.ppm`; returns the file
/// name actually written (the stem plus the chosen extension).
pub fn write_image(dir: impl AsRef<Path>, stem: &str, image: &Tensor) -> Result<String> {
    let (c, _, _) = image_planes(image)?;
    let name = format!("{stem}.{}", if c == 3 { "ppm" } else { "pgm" });
    if c == 3 {
        write_ppm(dir.as_ref().join(&name), image)?;
    } else {
        write_pgm(dir.as_ref().join(&name), image)?;
    }
    Ok(name)
}

// ── plot data files ───────────────────────────────────────────────────────

/// Accuracy-vs-round series: `round,<label0>,<label1>,…`. All series must
/// share the round axis (equal lengths).
pub fn write_series_csv(
    path: impl AsRef<Path>,
    x_name: &str,
    series: &[(String, Vec<f64>)],
) -> Result<()> {
    let len = series.first().map_or(0, |(_, v)| v.len());
    if series.iter().any(|(_, v)| v.len() != len) {
        return Err(Error::Config("plot series must have equal lengths".into()));
    }
    let mut out = String::from(x_name);
    for (label, _) in series {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    for i in 0..len {
        out.push_str(&i.to_string());
        for (_, v) in series {
            out.push_str(&format!(",{}", v[i]));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Box-plot quartile table: `cell,min,q1,median,q3,max`.
pub fn write_quartiles_csv(path: impl AsRef<Path>, rows: &[(String, [f64; 5])]) -> Result<()> {
    let mut out = String::from("cell,min,q1,median,q3,max\n");
    for (label, q) in rows {
        out.push_str(&format!(
            "{label},{},{},{},{},{}\n",
            q[0], q[1], q[2], q[3], q[4]
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Convenience: quartile row from raw per-image scores.
pub fn quartile_row(label: impl Into<String>, scores: &[f64]) -> Result<(String, [f64; 5])> {
    Ok((label.into(), quartiles(scores)?))
}

// ── self-contained SVG plots ──────────────────────────────────────────────

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn fmt(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".into()
    } else {
        s.into()
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let span = if self.x1 > self.x0 {
            self.x1 - self.x0
        } else {
            1.0
        };
        MARGIN_L + (v - self.x0) / span * (SVG_W - MARGIN_L - MARGIN_R)
    }

    fn y(&self, v: f64) -> f64 {
        let span = if self.y1 > self.y0 {
            self.y1 - self.y0
        } else {
            1.0
        };
        SVG_H - MARGIN_B - (v - self.y0) / span * (SVG_H - MARGIN_T - MARGIN_B)
    }
}

fn svg_head(title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" ",
            "font-family=\"sans-serif\" font-size=\"12\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n"
        ),
        w = SVG_W,
        h = SVG_H,
        tx = SVG_W / 2.0,
        title = title,
    )
}

fn svg_axes(frame: &Frame, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    let (px0, px1) = (MARGIN_L, SVG_W - MARGIN_R);
    let (py0, py1) = (SVG_H - MARGIN_B, MARGIN_T);
    s.push_str(&format!(
        "<line x1=\"{px0}\" y1=\"{py0}\" x2=\"{px1}\" y2=\"{py0}\" stroke=\"black\"/>\n\
         <line x1=\"{px0}\" y1=\"{py0}\" x2=\"{px0}\" y2=\"{py1}\" stroke=\"black\"/>\n"
    ));
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = frame.x0 + t * (frame.x1 - frame.x0);
        let yv = frame.y0 + t * (frame.y1 - frame.y0);
        let xp = frame.x(xv);
        let yp = frame.y(yv);
        s.push_str(&format!(
            "<line x1=\"{xp}\" y1=\"{py0}\" x2=\"{xp}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{xp}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            py0 + 5.0,
            py0 + 20.0,
            fmt(xv)
        ));
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{yp}\" x2=\"{px0}\" y2=\"{yp}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            px0 - 5.0,
            px0 - 8.0,
            yp + 4.0,
            fmt(yv)
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xlabel}</text>\n",
        (px0 + px1) / 2.0,
        SVG_H - 10.0
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{ylabel}</text>\n",
        (py0 + py1) / 2.0,
        (py0 + py1) / 2.0
    ));
    s
}

/// Line plot of one or more (x, y) series. Self-contained SVG markup.
pub fn svg_line_plot(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<String> {
    if series.is_empty() || series.iter().any(|(_, pts)| pts.is_empty()) {
        return Err(Error::Config(
            "svg line plot needs at least one nonempty series".into(),
        ));
    }
    let all = series.iter().flat_map(|(_, pts)| pts.iter());
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::Config("svg line plot requires finite points".into()));
        }
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if y0 == y1 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let frame = Frame { x0, x1, y0, y1 };
    let mut s = svg_head(title);
    s.push_str(&svg_axes(&frame, xlabel, ylabel));
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.x(x), frame.y(y)))
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        ));
        let ly = MARGIN_T + 14.0 * i as f64;
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{}\" y=\"{}\">{label}</text>\n",
            SVG_W - MARGIN_R - 120.0,
            SVG_W - MARGIN_R - 100.0,
            SVG_W - MARGIN_R - 95.0,
            ly + 4.0
        ));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Box plot from (label, [min, q1, median, q3, max]) rows. Whiskers span
/// min to max; the box spans the interquartile range with the median line.
pub fn svg_box_plot(title: &str, ylabel: &str, rows: &[(String, [f64; 5])]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Config("svg box plot needs at least one row".into()));
    }
    let mut y0 = f64::INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for (_, q) in rows {
        for &v in q {
            if !v.is_finite() {
                return Err(Error::Config(
                    "svg box plot requires finite quartiles".into(),
                ));
            }
            y0 = y0.min(v);
            y1 = y1.max(v);
        }
    }
    if y0 == y1 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    let frame = Frame {
        x0: 0.0,
        x1: rows.len() as f64,
        y0: y0 - pad,
        y1: y1 + pad,
    };
    let mut s = svg_head(title);
    s.push_str(&svg_axes(&frame, "", ylabel));
    let slot = (SVG_W - MARGIN_L - MARGIN_R) / rows.len() as f64;
    for (i, (label, [lo, q1, med, q3, hi])) in rows.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let cx = MARGIN_L + slot * (i as f64 + 0.5);
        let half = (slot * 0.3).min(40.0);
        let (ylo, yq1, ymed, yq3, yhi) = (
            frame.y(*lo),
            frame.y(*q1),
            frame.y(*med),
            frame.y(*q3),
            frame.y(*hi),
        );
        s.push_str(&format!(
            "<line x1=\"{cx}\" y1=\"{ylo}\" x2=\"{cx}\" y2=\"{yq1}\" stroke=\"black\"/>\n\
             <line x1=\"{cx}\" y1=\"{yq3}\" x2=\"{cx}\" y2=\"{yhi}\" stroke=\"black\"/>\n\
             <line x1=\"{}\" y1=\"{ylo}\" x2=\"{}\" y2=\"{ylo}\" stroke=\"black\"/>\n\
             <line x1=\"{}\" y1=\"{yhi}\" x2=\"{}\" y2=\"{yhi}\" stroke=\"black\"/>\n",
            cx - half / 2.0,
            cx + half / 2.0,
            cx - half / 2.0,
            cx + half / 2.0,
        ));
        s.push_str(&format!(
            "<rect x=\"{}\" y=\"{yq3}\" width=\"{}\" height=\"{}\" fill=\"{color}\" \
             fill-opacity=\"0.35\" stroke=\"{color}\"/>\n\
             <line x1=\"{}\" y1=\"{ymed}\" x2=\"{}\" y2=\"{ymed}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            cx - half,
            2.0 * half,
            (yq1 - yq3).max(0.5),
            cx - half,
            cx + half,
        ));
        s.push_str(&format!(
            "<text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\">{label}</text>\n",
            SVG_H - MARGIN_B + 20.0
        ));
    }
    s.push_str("</svg>\n");
    Ok(s)
}
