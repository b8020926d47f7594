//! CSV tables, sample files, SVG histograms and run manifests.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use scott_core::sampling::SampleBatch;

use crate::error::{CliError, CliResult};

/// Full-precision, locale-independent number text.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// A table with a fixed column order.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width differs from the header");
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| io_err(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let mut r = match csv::Reader::from_path(path) {
            Ok(r) => r,
            Err(e) => {
                if let csv::ErrorKind::Io(io) = e.kind() {
                    if io.kind() == std::io::ErrorKind::NotFound {
                        return Err(CliError::Dependency(format!("{} does not exist", path.display())));
                    }
                }
                return Err(io_err(path, e));
            }
        };
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()?;
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> CliResult<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(format!("table lacks column `{name}`")))
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// One row per sample: `generator, steps, seed, x0, x1, ...`.
pub fn write_samples(batch: &SampleBatch, path: &Path) -> CliResult<()> {
    let dim = batch.vectors.ncols();
    let mut header = vec!["generator".to_string(), "steps".into(), "seed".into()];
    header.extend((0..dim).map(|j| format!("x{j}")));
    let mut t = Table {
        header,
        rows: Vec::with_capacity(batch.len()),
    };
    for row in batch.vectors.rows() {
        let mut r = vec![batch.generator.clone(), batch.steps.to_string(), batch.seed.to_string()];
        r.extend(row.iter().map(|&v| fmt_f64(v)));
        t.rows.push(r);
    }
    t.write(path)
}

pub fn read_samples(path: &Path) -> CliResult<SampleBatch> {
    let t = Table::read(path)?;
    let bad = |m: &str| CliError::Config(format!("{}: {m}", path.display()));
    if t.header.len() < 4 || t.header[..3] != ["generator", "steps", "seed"] {
        return Err(bad("not a sample file"));
    }
    let first = t.rows.first().ok_or_else(|| bad("no samples"))?;
    let dim = t.header.len() - 3;
    let mut data = Vec::with_capacity(t.rows.len() * dim);
    for r in &t.rows {
        for v in &r[3..] {
            data.push(v.parse::<f64>().map_err(|_| bad(&format!("invalid number `{v}`")))?);
        }
    }
    let vectors = Array2::from_shape_vec((t.rows.len(), dim), data).expect("rows x dim");
    let steps = first[1].parse().map_err(|_| bad("invalid step count"))?;
    let seed = first[2].parse().map_err(|_| bad("invalid seed"))?;
    Ok(SampleBatch::new(vectors, &first[0], steps, seed)?)
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi]`; values
/// outside the range are dropped.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        if v < lo || v > hi {
            continue;
        }
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

pub const HISTOGRAM_BINS: usize = 100;

/// Bar chart of a 1-D sample over `range`.
pub fn histogram_svg(values: &[f64], range: (f64, f64), title: &str) -> String {
    let (w, h, pad) = (600.0, 240.0, 20.0);
    let counts = histogram(values, range.0, range.1, HISTOGRAM_BINS);
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar = (w - 2.0 * pad) / HISTOGRAM_BINS as f64;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{pad}" y="14" font-size="12" font-family="sans-serif">{}</text>"#,
        escape(title)
    )
    .unwrap();
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let bh = (h - 2.0 * pad - 10.0) * c as f64 / max;
        let x = pad + i as f64 * bar;
        let y = h - pad - bh;
        writeln!(
            s,
            r##"<rect x="{x:.2}" y="{y:.2}" width="{bar:.2}" height="{bh:.2}" fill="#4a6fa5"/>"##
        )
        .unwrap();
    }
    let base = h - pad;
    writeln!(
        s,
        r#"<line x1="{pad}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        w - pad
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{pad}" y="{}" font-size="10" font-family="sans-serif">{}</text>"#,
        h - 4.0,
        range.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="10" font-family="sans-serif" text-anchor="end">{}</text>"#,
        w - pad,
        h - 4.0,
        range.1
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Everything needed to rerun a command: the resolved config, its hash and
/// the seed, plus versions and timing.
pub fn write_manifest(
    path: &Path,
    command: &str,
    config_text: &str,
    config_hash: &str,
    seed: u64,
    wall_secs: f64,
) -> CliResult<()> {
    let mut s = String::new();
    writeln!(s, "command = {command}").unwrap();
    writeln!(s, "scott_lab_version = {}", env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(s, "config_hash = {config_hash}").unwrap();
    writeln!(s, "seed = {seed}").unwrap();
    writeln!(s, "wall_time_s = {wall_secs:.3}").unwrap();
    writeln!(
        s,
        "rerun = scott-lab {command} --config {}",
        path.with_extension("cfg").display()
    )
    .unwrap();
    s.push_str("[config]\n");
    s.push_str(config_text);
    std::fs::write(path, s).map_err(|e| io_err(path, e))?;
    // The resolved config next to it, directly loadable with --config.
    std::fs::write(path.with_extension("cfg"), config_text).map_err(|e| io_err(path, e))
}
