//! Synthetic datasets, matrix files, and result emission (report CSV, metric
//! CSV, SVG scatter plots).
//!
//! Matrix files come in two formats, told apart by their first bytes:
//!
//! - CSV with header `f0,...,f{d-1},label`, one point per line.
//! - Binary: magic `BIMX1`; `N`, `d` and a label-presence flag (0 or 1) as
//!   little-endian `u64`; `N * d` little-endian `f64` features in row-major
//!   order; then, if flagged, `N` labels as little-endian `i64`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ByteReader;
use crate::rng::SeededRng;
use crate::trainers::TrainReport;
use crate::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    GaussianBlobs,
    ConcentricRings,
    File,
}

impl std::str::FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blobs" | "blobs" => Ok(Generator::GaussianBlobs),
            "concentric_rings" | "rings" => Ok(Generator::ConcentricRings),
            "file" => Ok(Generator::File),
            _ => Err(Error::Config(format!(
                "unknown generator {s:?}; expected gaussian_blobs, concentric_rings or file"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub generator: Generator,
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    /// Distance between class means in units of the per-coordinate noise
    /// standard deviation (ring spacing for `concentric_rings`).
    pub separation: f64,
    pub seed: u64,
    pub path: Option<PathBuf>,
}

impl DatasetSpec {
    pub fn blobs(n: usize, d: usize, classes: usize, separation: f64, seed: u64) -> Self {
        DatasetSpec {
            generator: Generator::GaussianBlobs,
            n,
            d,
            classes,
            separation,
            seed,
            path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.generator == Generator::File {
            return match self.path {
                Some(_) => Ok(()),
                None => Err(Error::Config("file dataset needs a path".into())),
            };
        }
        if self.classes < 1 || self.n < 2 * self.classes {
            return Err(Error::Config(format!(
                "dataset needs N >= 2 x classes (N = {}, classes = {})",
                self.n, self.classes
            )));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::Config(format!(
                "separation must be > 0, got {}",
                self.separation
            )));
        }
        if self.d < 2 {
            return Err(Error::Config(format!("dataset needs d >= 2, got {}", self.d)));
        }
        Ok(())
    }
}

/// Features with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl LabeledMatrix {
    pub fn new(features: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.nrows() {
                return Err(Error::Dimension(format!(
                    "{} rows but {} labels",
                    features.nrows(),
                    l.len()
                )));
            }
        }
        if let Some(((i, j), v)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Domain(format!("feature ({i}, {j}) = {v} is not finite")));
        }
        Ok(LabeledMatrix { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Precondition("dataset has no labels".into()))
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let (n, d) = self.features.dim();
        let mut out = Vec::with_capacity(29 + 8 * n * (d + 1));
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        out.extend_from_slice(&u64::from(self.labels.is_some()).to_le_bytes());
        for v in self.features.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in self.labels.iter().flatten() {
            out.extend_from_slice(&(l as i64).to_le_bytes());
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(5)? != BINARY_MAGIC {
            return Err(Error::Format("missing BIMX1 magic".into()));
        }
        let n = r.usize()?;
        let d = r.usize()?;
        let has_labels = match r.u64()? {
            0 => false,
            1 => true,
            f => return Err(Error::Format(format!("label flag must be 0 or 1, got {f}"))),
        };
        let features = r.matrix(n, d)?;
        let labels = if has_labels {
            if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                return Err(Error::Format(format!("truncated: {n} labels expected")));
            }
            let mut v = Vec::with_capacity(n);
            for i in 0..n {
                let l = r.i64()?;
                let l = usize::try_from(l)
                    .map_err(|_| Error::Format(format!("label {i} is negative: {l}")))?;
                v.push(l);
            }
            Some(v)
        } else {
            None
        };
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        LabeledMatrix::new(features, labels)
    }

    /// CSV with header `f0,...,f{d-1},label`. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn to_csv(&self) -> Result<String> {
        let labels = self.labels()?;
        let d = self.features.ncols();
        let mut out = String::new();
        for k in 0..d {
            let _ = write!(out, "f{k},");
        }
        out.push_str("label\n");
        for (row, l) in self.features.rows().into_iter().zip(labels) {
            for v in row {
                let _ = write!(out, "{v:?},");
            }
            let _ = writeln!(out, "{l}");
        }
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| csv_error(&e))?
            .iter()
            .map(str::to_owned)
            .collect();
        let joined = header.join(",");
        match header.last() {
            Some(last) if last == "label" => {}
            _ => {
                return Err(Error::Parse {
                    line: Some(1),
                    message: format!("header {joined:?} is missing the label column"),
                })
            }
        }
        let d = header.len() - 1;
        if d == 0 {
            return Err(Error::Parse {
                line: Some(1),
                message: format!("header {joined:?} has no feature columns"),
            });
        }
        for (k, name) in header[..d].iter().enumerate() {
            if *name != format!("f{k}") {
                return Err(Error::Parse {
                    line: Some(1),
                    message: format!("header {joined:?}: column {k} should be f{k}, found {name:?}"),
                });
            }
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(&e))?;
            let line = record.position().map(|p| p.line());
            let bad = |message: String| Error::Parse { line, message };
            for (k, field) in record.iter().take(d).enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| bad(format!("column f{k}: {field:?} is not a number")))?;
                if !v.is_finite() {
                    return Err(bad(format!("column f{k}: {field:?} is not finite")));
                }
                data.push(v);
            }
            let field = &record[d];
            labels.push(
                field
                    .parse::<usize>()
                    .map_err(|_| bad(format!("label {field:?} is not a non-negative integer")))?,
            );
        }
        if labels.is_empty() {
            return Err(Error::Parse {
                line: None,
                message: "no data rows".into(),
            });
        }
        let features =
            Array2::from_shape_vec((labels.len(), d), data).expect("row lengths checked by csv");
        LabeledMatrix::new(features, Some(labels))
    }

    /// Binary when the bytes start with the `BIMX1` magic, CSV otherwise.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(BINARY_MAGIC) {
            return LabeledMatrix::from_binary(bytes);
        }
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
            line: None,
            message: format!("not UTF-8 text: {e}"),
        })?;
        LabeledMatrix::from_csv(text)
    }

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_binary()).map_err(|e| Error::io(path, e))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

const BINARY_MAGIC: &[u8; 5] = b"BIMX1";

fn csv_error(e: &csv::Error) -> Error {
    Error::Parse {
        line: e.position().map(|p| p.line()),
        message: e.to_string(),
    }
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<LabeledMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    LabeledMatrix::from_bytes(&bytes)
}

/// Builds the dataset described by `spec`. Pure in `spec`, seed included.
///
/// Blob labels cycle `0, 1, ..., classes-1`. With `classes <= d`, class `c`
/// is centered at `e_c * separation / sqrt 2` so every pair of means sits at
/// distance `separation`; otherwise means are random directions at that
/// radius. Each coordinate gets unit Gaussian noise.
///
/// Rings put class `c` on a circle of radius `(c + 1) * separation` in the
/// first two coordinates with unit radial noise; further coordinates are
/// unit noise.
pub fn generate(spec: &DatasetSpec) -> Result<LabeledMatrix> {
    spec.validate()?;
    let (n, d, classes) = (spec.n, spec.d, spec.classes);
    let mut rng = SeededRng::new(spec.seed);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let features = match spec.generator {
        Generator::File => {
            let path = spec.path.as_ref().expect("validated");
            return load_matrix(path);
        }
        Generator::GaussianBlobs => {
            let radius = spec.separation / std::f64::consts::SQRT_2;
            let means = if classes <= d {
                Array2::from_shape_fn((classes, d), |(c, k)| if c == k { radius } else { 0.0 })
            } else {
                let mut m = Array2::from_shape_simple_fn((classes, d), || rng.normal());
                for mut row in m.rows_mut() {
                    let norm = row.dot(&row).sqrt();
                    row.mapv_inplace(|v| radius * v / norm);
                }
                m
            };
            let mut x = Array2::zeros((n, d));
            for i in 0..n {
                for k in 0..d {
                    x[[i, k]] = means[[labels[i], k]] + rng.normal();
                }
            }
            x
        }
        Generator::ConcentricRings => {
            let mut x = Array2::zeros((n, d));
            for i in 0..n {
                let r = (labels[i] + 1) as f64 * spec.separation + rng.normal();
                let theta = std::f64::consts::TAU * rng.uniform();
                x[[i, 0]] = r * theta.cos();
                x[[i, 1]] = r * theta.sin();
                for k in 2..d {
                    x[[i, k]] = rng.normal();
                }
            }
            x
        }
    };
    LabeledMatrix::new(features, Some(labels))
}

/// Ten-color categorical palette; class `c` gets `PALETTE[c % 10]`.
pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

const PLOT_SIZE: f64 = 500.0;
const LEGEND_WIDTH: f64 = 120.0;

/// Standalone SVG 1.1 scatter plot: one `<circle>` per point colored by class,
/// scaled into a square plot area with a 5% margin, legend on the right.
pub fn render_scatter_svg(points: &Matrix, labels: &[usize]) -> Result<String> {
    if points.ncols() != 2 {
        return Err(Error::Dimension(format!(
            "scatter plot needs 2-D points, got {} columns",
            points.ncols()
        )));
    }
    if points.nrows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} points but {} labels",
            points.nrows(),
            labels.len()
        )));
    }
    let bounds = |k: usize| {
        points.column(k).iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    };
    let (x0, x1) = bounds(0);
    let (y0, y1) = bounds(1);
    let span = (x1 - x0).max(y1 - y0);
    let span = if span > 0.0 && span.is_finite() { span } else { 1.0 };
    let margin = 0.05 * PLOT_SIZE;
    let scale = (PLOT_SIZE - 2.0 * margin) / span;
    // center the shorter axis
    let ox = margin + 0.5 * (span - (x1 - x0).max(0.0)) * scale;
    let oy = margin + 0.5 * (span - (y1 - y0).max(0.0)) * scale;
    let x0 = if x0.is_finite() { x0 } else { 0.0 };
    let y1 = if y1.is_finite() { y1 } else { 0.0 };

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8" standalone="no"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = PLOT_SIZE + LEGEND_WIDTH,
        h = PLOT_SIZE
    );
    svg.push_str("<g id=\"points\" stroke=\"none\">\n");
    for (row, &l) in points.rows().into_iter().zip(labels) {
        let cx = ox + (row[0] - x0) * scale;
        let cy = oy + (y1 - row[1]) * scale;
        let _ = writeln!(
            svg,
            r#"<circle cx="{cx:.3}" cy="{cy:.3}" r="2.5" fill="{}"/>"#,
            PALETTE[l % PALETTE.len()]
        );
    }
    svg.push_str("</g>\n");
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    svg.push_str("<g id=\"legend\" font-family=\"sans-serif\" font-size=\"12\">\n");
    for (row, c) in classes.iter().enumerate() {
        let y = margin + 18.0 * row as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{}"/>"#,
            PLOT_SIZE + 10.0,
            y,
            PALETTE[c % PALETTE.len()]
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}">class {c}</text>"#,
            PLOT_SIZE + 26.0,
            y + 9.0
        );
    }
    svg.push_str("</g>\n</svg>\n");
    Ok(svg)
}

pub fn emit_scatter_svg(points: &Matrix, labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let svg = render_scatter_svg(points, labels)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// 17 significant digits, enough to recover any `f64` exactly.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Report CSV: `step,loss,grad_norm_<tensor>...,<metric>...` with one row per
/// step. Metric cells are empty on steps without a snapshot.
pub fn render_report_csv(report: &TrainReport) -> String {
    let metrics = report.metric_names();
    let mut out = String::from("step,loss");
    for name in &report.tensor_names {
        let _ = write!(out, ",grad_norm_{name}");
    }
    for m in &metrics {
        let _ = write!(out, ",{m}");
    }
    out.push('\n');
    let mut snaps = report.snapshots.iter().peekable();
    for (step, rec) in report.steps.iter().enumerate() {
        let _ = write!(out, "{step},{}", fmt_real(rec.loss));
        for g in &rec.grad_norms {
            let _ = write!(out, ",{}", fmt_real(*g));
        }
        let snap = snaps.next_if(|s| s.step == step);
        for m in &metrics {
            out.push(',');
            if let Some(v) = snap.and_then(|s| s.get(m)) {
                out.push_str(&fmt_real(v));
            }
        }
        out.push('\n');
    }
    out
}

pub fn emit_report_csv(report: &TrainReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_report_csv(report)).map_err(|e| Error::io(path, e))
}

/// A parsed numeric CSV table; empty cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }
}

/// Parses a report CSV back into columns of numbers.
pub fn parse_report_csv(text: &str) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(&e))?
        .iter()
        .map(str::to_owned)
        .collect();
    if columns.first().map(String::as_str) != Some("step") {
        return Err(Error::Parse {
            line: Some(1),
            message: format!("report header must start with step, got {:?}", columns.join(",")),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&e))?;
        let line = record.position().map(|p| p.line());
        let row = record
            .iter()
            .map(|f| {
                if f.is_empty() {
                    Ok(None)
                } else {
                    f.parse::<f64>().map(Some).map_err(|_| Error::Parse {
                        line,
                        message: format!("{f:?} is not a number"),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(Table { columns, rows })
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub config_hash: u64,
    pub seed: u64,
}

pub const METRICS_HEADER: &str = "metric,value,config_hash,seed";

pub fn render_metric_row(row: &MetricRow) -> String {
    format!(
        "{},{},{:016x},{}",
        row.metric,
        fmt_real(row.value),
        row.config_hash,
        row.seed
    )
}

/// Appends rows to a metrics CSV, writing the header when the file is new or
/// empty.
pub fn append_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(METRICS_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&render_metric_row(r));
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
