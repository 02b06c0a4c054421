//! Metric CSV files and static SVG line charts.
//!
//! Every plotted point carries its coordinates as `data-x`/`data-y`
//! attributes so charts can be checked without rendering them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const CSV_HEADER: [&str; 5] = ["metric", "part", "value", "n", "notes"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub part: String,
    /// Empty in the file when the metric is undefined.
    pub value: Option<f64>,
    pub n: usize,
    pub notes: String,
}

impl MetricRow {
    pub fn new(metric: impl Into<String>, part: impl Into<String>, value: f64, n: usize) -> Self {
        Self {
            metric: metric.into(),
            part: part.into(),
            value: Some(value),
            n,
            notes: String::new(),
        }
    }

    pub fn with_notes(mut self, notes: impl Into<String>) -> Self {
        self.notes = notes.into();
        self
    }
}

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::Format {
        offset,
        message: e.to_string(),
    }
}

pub fn csv_string(rows: &[MetricRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Format {
            offset: 0,
            message: format!("expected header {}, found {:?}", CSV_HEADER.join(","), header),
        });
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn write_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, csv_string(rows)?).map_err(io_err(path))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricRow>> {
    parse_csv(&std::fs::read_to_string(path).map_err(io_err(path))?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

impl LineChart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            series: Vec::new(),
        }
    }

    pub fn with_series(mut self, name: &str, points: Vec<(f64, f64)>) -> Self {
        self.series.push(Series {
            name: name.into(),
            points,
        });
        self
    }

    pub fn to_svg(&self) -> String {
        let all = || self.series.iter().flat_map(|s| s.points.iter());
        let (x0, x1) = span(all().map(|p| p.0));
        let (y0, y1) = span(all().map(|p| p.1));
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
        let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let (left, bottom) = (MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(
            s,
            r#"<path d="M{left} {MARGIN} L{left} {bottom} L{} {bottom}" stroke="black" fill="none"/>"#,
            WIDTH - MARGIN
        );
        for (v, anchor) in [(x0, "start"), (x1, "end")] {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{}" text-anchor="{anchor}">{}</text>"#,
                sx(v),
                bottom + 16.0,
                fmt_tick(v)
            );
        }
        for v in [y0, y1] {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
                left - 6.0,
                sy(v) + 4.0,
                fmt_tick(v)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 16.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(&self.y_label)
        );
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let name = escape(&series.name);
            let finite: Vec<&(f64, f64)> = series
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .collect();
            if finite.len() > 1 {
                let d: Vec<String> = finite
                    .iter()
                    .enumerate()
                    .map(|(j, p)| format!("{}{:.2} {:.2}", if j == 0 { 'M' } else { 'L' }, sx(p.0), sy(p.1)))
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<path d="{}" stroke="{color}" stroke-width="2" fill="none" data-series="{name}"/>"#,
                    d.join(" ")
                );
            }
            for p in &finite {
                let _ = writeln!(
                    s,
                    r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3" fill="{color}" data-series="{name}" data-x="{}" data-y="{}"/>"#,
                    sx(p.0),
                    sy(p.1),
                    p.0,
                    p.1
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
                WIDTH - MARGIN + 4.0 - 120.0,
                MARGIN + 16.0 * i as f64
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// `(series, x, y)` for every plotted point of an SVG written by
/// [`LineChart::to_svg`].
pub fn scrape_points(svg: &str) -> Vec<(String, f64, f64)> {
    let attr = |tag: &str, name: &str| -> Option<String> {
        let key = format!("{name}=\"");
        let start = tag.find(&key)? + key.len();
        let len = tag[start..].find('"')?;
        Some(tag[start..start + len].to_string())
    };
    svg.lines()
        .filter(|l| l.trim_start().starts_with("<circle class=\"point\""))
        .filter_map(|l| {
            Some((
                attr(l, "data-series")?,
                attr(l, "data-x")?.parse().ok()?,
                attr(l, "data-y")?.parse().ok()?,
            ))
        })
        .collect()
}

/// Write `<stem>.csv` and, when there is anything to plot, one SVG per chart
/// (`<stem>_<index>.svg`). Returns the written paths.
pub fn emit_report(dir: &Path, stem: &str, rows: &[MetricRow], charts: &[LineChart]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    write_csv(&csv_path, rows)?;
    let mut written = vec![csv_path];
    if rows.is_empty() {
        return Ok(written);
    }
    for (i, chart) in charts.iter().enumerate() {
        let path = if charts.len() == 1 {
            dir.join(format!("{stem}.svg"))
        } else {
            dir.join(format!("{stem}_{i}.svg"))
        };
        std::fs::write(&path, chart.to_svg()).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}
