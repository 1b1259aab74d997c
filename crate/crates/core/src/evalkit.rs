//! Evaluation: RD curves, BD-rate, near-lossless rate and compression
//! ratio, the layer-wise distortion protocol, and CSV/SVG reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitstream::HEADER_LEN;
use crate::checkpoint::Checkpoint;
use crate::codec::{Codec, CodecError};
use crate::coder::EntropyCoder;
use crate::pyramid::{fpf_bytes, layer_dims, FeaturePyramid, PyramidError};
use crate::training::{distortion_total, TrainError, DEFAULT_LAYER_WEIGHTS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("curve {0:?} needs at least 2 points")]
    TooFewPoints(String),
    #[error("curve {label:?}: bpp must be positive and finite (got {bpp})")]
    BadRate { label: String, bpp: f64 },
    #[error("curve {0:?} repeats a metric value, so rate is not a function of metric")]
    RepeatedMetric(String),
    #[error("curve {0:?} has no task metric at some point")]
    MissingMetric(String),
    #[error("metric ranges do not overlap: test [{test_lo}, {test_hi}], anchor [{anchor_lo}, {anchor_hi}]")]
    NoOverlap {
        test_lo: f64,
        test_hi: f64,
        anchor_lo: f64,
        anchor_hi: f64,
    },
    #[error("curve {0:?} has more than one uncompressed reference")]
    DuplicateReference(String),
    #[error("curve {0:?} has no uncompressed reference")]
    NoReference(String),
    #[error("no checkpoint for lambda {0}")]
    MissingCheckpoint(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub metric: Option<f64>,
    pub d_total: Option<f64>,
    pub lambda: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Uncompressed {
    pub bpp: f64,
    pub metric: f64,
}

/// Points are kept sorted by bpp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    pub label: String,
    points: Vec<RdPoint>,
    pub reference: Option<Uncompressed>,
}

impl RdCurve {
    pub fn new(label: impl Into<String>, mut points: Vec<RdPoint>, reference: Option<Uncompressed>) -> Result<Self, EvalError> {
        let label = label.into();
        if let Some(p) = points.iter().find(|p| !(p.bpp > 0.0 && p.bpp.is_finite())) {
            return Err(EvalError::BadRate { label, bpp: p.bpp });
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        Ok(RdCurve {
            label,
            points,
            reference,
        })
    }

    /// Convenience for `(bpp, metric)` pairs.
    pub fn from_pairs(label: impl Into<String>, pairs: &[(f64, f64)], reference: Option<Uncompressed>) -> Result<Self, EvalError> {
        let points = pairs
            .iter()
            .map(|&(bpp, m)| RdPoint {
                bpp,
                metric: Some(m),
                d_total: None,
                lambda: None,
            })
            .collect();
        RdCurve::new(label, points, reference)
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    fn rate_metric(&self) -> Result<Vec<(f64, f64)>, EvalError> {
        self.points
            .iter()
            .map(|p| p.metric.map(|m| (p.bpp, m)).ok_or_else(|| EvalError::MissingMetric(self.label.clone())))
            .collect()
    }
}

/// Raw feature size in bits per image pixel for p2..p5, plus p6 when
/// `p6_bits` is given.
pub fn uncompressed_bpp(image_width: u32, image_height: u32, channels: usize, bits_per_value: u32, p6_bits: Option<u32>) -> f64 {
    let count = |level: u8| {
        let (h, w) = layer_dims(image_width, image_height, level).expect("nonzero image dims");
        (h * w) as f64
    };
    let mut bits = bits_per_value as f64 * channels as f64 * (2..=5).map(count).sum::<f64>();
    if let Some(b) = p6_bits {
        let (h5, w5) = layer_dims(image_width, image_height, 5).expect("nonzero image dims");
        bits += b as f64 * channels as f64 * (h5.div_ceil(2) * w5.div_ceil(2)) as f64;
    }
    bits / (image_width as f64 * image_height as f64)
}

/// Shape-preserving piecewise cubic Hermite interpolant.
#[derive(Clone, Debug)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    /// `x` must be strictly increasing with at least two knots.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        assert!(x.len() >= 2 && x.len() == y.len());
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let m: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = m[0];
            d[1] = m[0];
        } else {
            for k in 1..n - 1 {
                if m[k - 1] * m[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / m[k - 1] + w2 / m[k]);
                }
            }
            d[0] = edge(h[0], h[1], m[0], m[1]);
            d[n - 1] = edge(h[n - 2], h[n - 3], m[n - 2], m[n - 3]);
        }
        Pchip { x, y, d }
    }

    fn segment(&self, t: f64) -> usize {
        self.x.partition_point(|&v| v <= t).clamp(1, self.x.len() - 1) - 1
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.segment(t);
        let h = self.x[k + 1] - self.x[k];
        let s = (t - self.x[k]) / h;
        let (s2, s3) = (s * s, s * s * s);
        self.y[k] * (2.0 * s3 - 3.0 * s2 + 1.0)
            + h * self.d[k] * (s3 - 2.0 * s2 + s)
            + self.y[k + 1] * (-2.0 * s3 + 3.0 * s2)
            + h * self.d[k + 1] * (s3 - s2)
    }

    /// Integral over `[x_k, x_k + s·h]` of segment `k`.
    fn partial(&self, k: usize, s: f64) -> f64 {
        let h = self.x[k + 1] - self.x[k];
        let (s2, s3, s4) = (s * s, s * s * s, s * s * s * s);
        h * (self.y[k] * (s4 / 2.0 - s3 + s)
            + h * self.d[k] * (s4 / 4.0 - 2.0 * s3 / 3.0 + s2 / 2.0)
            + self.y[k + 1] * (-s4 / 2.0 + s3)
            + h * self.d[k + 1] * (s4 / 4.0 - s3 / 3.0))
    }

    fn antiderivative(&self, t: f64) -> f64 {
        let k = self.segment(t);
        let whole: f64 = (0..k).map(|j| self.partial(j, 1.0)).sum();
        whole + self.partial(k, (t - self.x[k]) / (self.x[k + 1] - self.x[k]))
    }

    pub fn integrate(&self, lo: f64, hi: f64) -> f64 {
        self.antiderivative(hi) - self.antiderivative(lo)
    }
}

fn edge(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if d.signum() != m0.signum() || m0 == 0.0 {
        0.0
    } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

fn log_rate_interp(curve: &RdCurve) -> Result<(Pchip, f64, f64), EvalError> {
    let mut pts = curve.rate_metric()?;
    if pts.len() < 2 {
        return Err(EvalError::TooFewPoints(curve.label.clone()));
    }
    pts.sort_by(|a, b| a.1.total_cmp(&b.1));
    if pts.windows(2).any(|w| w[0].1 == w[1].1) {
        return Err(EvalError::RepeatedMetric(curve.label.clone()));
    }
    let (lo, hi) = (pts[0].1, pts[pts.len() - 1].1);
    let (x, y) = pts.iter().map(|&(r, m)| (m, r.log10())).unzip();
    Ok((Pchip::new(x, y), lo, hi))
}

/// Average rate difference (percent) of `test` against `anchor` over their
/// common metric range. Negative means `test` needs fewer bits.
pub fn bd_rate(test: &RdCurve, anchor: &RdCurve) -> Result<f64, EvalError> {
    let (pt, tlo, thi) = log_rate_interp(test)?;
    let (pa, alo, ahi) = log_rate_interp(anchor)?;
    let (lo, hi) = (tlo.max(alo), thi.min(ahi));
    if !(lo < hi) {
        return Err(EvalError::NoOverlap {
            test_lo: tlo,
            test_hi: thi,
            anchor_lo: alo,
            anchor_hi: ahi,
        });
    }
    let avg = (pt.integrate(lo, hi) - pa.integrate(lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NearLossless {
    Reached { r_nl: f64, cr_nl: f64, threshold: f64 },
    /// The curve stays below the threshold at every tested rate.
    NotReached { threshold: f64, best_metric: f64 },
}

pub const NEAR_LOSSLESS_FRACTION: f64 = 0.99;

/// Smallest rate at which the running-maximum envelope of metric vs bpp,
/// linearly interpolated, reaches 99% of the uncompressed metric.
pub fn near_lossless(curve: &RdCurve) -> Result<NearLossless, EvalError> {
    let reference = curve.reference.ok_or_else(|| EvalError::NoReference(curve.label.clone()))?;
    let pts = curve.rate_metric()?;
    if pts.is_empty() {
        return Err(EvalError::TooFewPoints(curve.label.clone()));
    }
    let threshold = NEAR_LOSSLESS_FRACTION * reference.metric;
    let mut envelope = f64::NEG_INFINITY;
    let mut prev: Option<(f64, f64)> = None;
    for &(r, m) in &pts {
        let m = m.max(envelope);
        if m >= threshold {
            let r_nl = match prev {
                Some((r0, m0)) => r0 + (r - r0) * (threshold - m0) / (m - m0),
                None => r,
            };
            return Ok(NearLossless::Reached {
                r_nl,
                cr_nl: reference.bpp / r_nl,
                threshold,
            });
        }
        envelope = m;
        prev = Some((r, m));
    }
    Ok(NearLossless::NotReached {
        threshold,
        best_metric: envelope,
    })
}

/// One line of a results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub label: String,
    #[serde(default)]
    pub lambda: Option<f64>,
    pub bpp: f64,
    #[serde(default)]
    pub metric: Option<f64>,
    #[serde(default, rename = "D_total")]
    pub d_total: Option<f64>,
    #[serde(default, rename = "D_2")]
    pub d_2: Option<f64>,
    #[serde(default, rename = "D_3")]
    pub d_3: Option<f64>,
    #[serde(default, rename = "D_4")]
    pub d_4: Option<f64>,
    #[serde(default, rename = "D_5")]
    pub d_5: Option<f64>,
    /// Marks the uncompressed reference row of a label.
    #[serde(default)]
    pub uncompressed: bool,
}

impl ResultRecord {
    pub fn point(label: &str, lambda: f64, bpp: f64, metric: f64, d_total: Option<f64>) -> Self {
        ResultRecord {
            label: label.into(),
            lambda: Some(lambda),
            bpp,
            metric: Some(metric),
            d_total,
            d_2: None,
            d_3: None,
            d_4: None,
            d_5: None,
            uncompressed: false,
        }
    }

    pub fn reference(label: &str, bpp: f64, metric: f64) -> Self {
        ResultRecord {
            uncompressed: true,
            lambda: None,
            d_total: None,
            ..ResultRecord::point(label, 0.0, bpp, metric, None)
        }
    }
}

/// Reads line-delimited JSON records; blank lines and `#` comments are skipped.
pub fn read_results_jsonl(reader: impl BufRead) -> Result<Vec<ResultRecord>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(serde_json::from_str(t).map_err(|e| EvalError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Reads the CSV layout written by [`write_results_csv`].
pub fn read_results_csv(reader: impl std::io::Read) -> Result<Vec<ResultRecord>, EvalError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Picks JSONL or CSV by extension.
pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>, EvalError> {
    let file = std::fs::File::open(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        read_results_csv(file)
    } else {
        read_results_jsonl(std::io::BufReader::new(file))
    }
}

/// Groups records into curves by label, in label order.
pub fn curves_from_records(records: &[ResultRecord]) -> Result<Vec<RdCurve>, EvalError> {
    let mut groups: BTreeMap<&str, (Vec<RdPoint>, Option<Uncompressed>)> = BTreeMap::new();
    for r in records {
        let g = groups.entry(&r.label).or_default();
        if r.uncompressed {
            let metric = r.metric.ok_or_else(|| EvalError::MissingMetric(r.label.clone()))?;
            if g.1.replace(Uncompressed { bpp: r.bpp, metric }).is_some() {
                return Err(EvalError::DuplicateReference(r.label.clone()));
            }
        } else {
            g.0.push(RdPoint {
                bpp: r.bpp,
                metric: r.metric,
                d_total: r.d_total,
                lambda: r.lambda,
            });
        }
    }
    groups
        .into_iter()
        .map(|(label, (points, reference))| RdCurve::new(label, points, reference))
        .collect()
}

pub const RESULT_COLUMNS: [&str; 10] = ["D_2", "D_3", "D_4", "D_5", "D_total", "bpp", "label", "lambda", "metric", "uncompressed"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes records with columns in name order and rows ordered by
/// `(label, uncompressed, bpp)`.
pub fn write_results_csv(records: &[ResultRecord], writer: impl std::io::Write) -> Result<(), EvalError> {
    let mut sorted: Vec<&ResultRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.label
            .cmp(&b.label)
            .then(a.uncompressed.cmp(&b.uncompressed))
            .then(a.bpp.total_cmp(&b.bpp))
    });
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RESULT_COLUMNS)?;
    for r in sorted {
        w.write_record([
            opt(r.d_2),
            opt(r.d_3),
            opt(r.d_4),
            opt(r.d_5),
            opt(r.d_total),
            r.bpp.to_string(),
            r.label.clone(),
            opt(r.lambda),
            opt(r.metric),
            r.uncompressed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A named scalar derived from a curve (BD-rate, R_NL, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub label: String,
    pub name: String,
    pub value: f64,
}

pub fn write_metrics_csv(metrics: &[MetricRecord], writer: impl std::io::Write) -> Result<(), EvalError> {
    let mut sorted: Vec<&MetricRecord> = metrics.iter().collect();
    sorted.sort_by(|a, b| a.label.cmp(&b.label).then(a.name.cmp(&b.name)));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["label", "name", "value"])?;
    for m in sorted {
        w.write_record([m.label.as_str(), m.name.as_str(), &m.value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(reader: impl std::io::Read) -> Result<Vec<MetricRecord>, EvalError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Standard derived metrics: R_NL/CR_NL per curve with a reference, and
/// BD-rate of every curve against `anchor` when it names a curve.
pub fn derive_metrics(curves: &[RdCurve], anchor: Option<&str>) -> Vec<MetricRecord> {
    let mut out = Vec::new();
    let anchor_curve = anchor.and_then(|a| curves.iter().find(|c| c.label == a));
    for c in curves {
        if let Ok(NearLossless::Reached { r_nl, cr_nl, .. }) = near_lossless(c) {
            out.push(MetricRecord {
                label: c.label.clone(),
                name: "R_NL".into(),
                value: r_nl,
            });
            out.push(MetricRecord {
                label: c.label.clone(),
                name: "CR_NL".into(),
                value: cr_nl,
            });
        }
        if let Some(a) = anchor_curve {
            if a.label != c.label {
                if let Ok(bd) = bd_rate(c, a) {
                    out.push(MetricRecord {
                        label: c.label.clone(),
                        name: format!("bd_rate_vs_{}", a.label),
                        value: bd,
                    });
                }
            }
        }
    }
    out
}

struct Series<'a> {
    label: &'a str,
    points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn svg_plot(title: &str, x_label: &str, y_label: &str, series: &[Series], log_x: bool) -> String {
    let (w, h, m) = (640.0, 440.0, 60.0);
    let tx = |x: f64| if log_x { x.log10() } else { x };
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().map(|&(x, y)| (tx(x), y))).collect();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, title);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}{}</text>"#,
        w / 2.0,
        h - 10.0,
        x_label,
        if log_x { " (log)" } else { "" }
    );
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        y_label
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * m,
        h - 2.0 * m
    );
    if !all.is_empty() {
        let range = |f: fn(&(f64, f64)) -> f64| {
            let lo = all.iter().map(f).fold(f64::INFINITY, f64::min);
            let hi = all.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        let (x0, x1) = range(|p| p.0);
        let (y0, y1) = range(|p| p.1);
        let px = |x: f64| m + (tx(x) - x0) / (x1 - x0) * (w - 2.0 * m);
        let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
        let _ = writeln!(svg, r#"<text x="{m}" y="{}" text-anchor="middle">{:.4}</text>"#, h - m + 15.0, if log_x { 10f64.powf(x0) } else { x0 });
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{:.4}</text>"#, w - m, h - m + 15.0, if log_x { 10f64.powf(x1) } else { x1 });
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{:.4}</text>"#, m - 4.0, h - m, y0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{:.4}</text>"#, m - 4.0, m + 4.0, y1);
        for (i, s) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
            for &(x, y) in &s.points {
                let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y));
            }
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
                m + 10.0,
                m + 16.0 * (i + 1) as f64,
                s.label
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub points_csv: PathBuf,
    pub metrics_csv: PathBuf,
    pub rate_plot: PathBuf,
    pub distortion_plot: PathBuf,
}

/// Writes `points.csv`, `metrics.csv`, `rate_metric.svg` and
/// `distortion_metric.svg` into `dir`.
pub fn emit_report(dir: &Path, curves: &[RdCurve], metrics: &[MetricRecord]) -> Result<ReportFiles, EvalError> {
    std::fs::create_dir_all(dir)?;
    let files = ReportFiles {
        points_csv: dir.join("points.csv"),
        metrics_csv: dir.join("metrics.csv"),
        rate_plot: dir.join("rate_metric.svg"),
        distortion_plot: dir.join("distortion_metric.svg"),
    };
    let mut records = Vec::new();
    for c in curves {
        for p in &c.points {
            records.push(ResultRecord {
                lambda: p.lambda,
                metric: p.metric,
                d_total: p.d_total,
                ..ResultRecord::point(&c.label, 0.0, p.bpp, 0.0, None)
            });
        }
        if let Some(r) = c.reference {
            records.push(ResultRecord::reference(&c.label, r.bpp, r.metric));
        }
    }
    write_results_csv(&records, std::fs::File::create(&files.points_csv)?)?;
    write_metrics_csv(metrics, std::fs::File::create(&files.metrics_csv)?)?;
    let rate: Vec<Series> = curves
        .iter()
        .map(|c| Series {
            label: &c.label,
            points: c.points.iter().filter_map(|p| p.metric.map(|m| (p.bpp, m))).collect(),
        })
        .collect();
    std::fs::write(&files.rate_plot, svg_plot("Rate vs task metric", "bpp", "metric", &rate, true))?;
    let dist: Vec<Series> = curves
        .iter()
        .map(|c| {
            let mut points: Vec<(f64, f64)> = c.points.iter().filter_map(|p| Some((p.d_total?, p.metric?))).collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label: &c.label, points }
        })
        .collect();
    std::fs::write(
        &files.distortion_plot,
        svg_plot("Distortion vs task metric", "D_total", "metric", &dist, false),
    )?;
    Ok(files)
}

/// One row of the layer-wise table, averaged over the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseRow {
    pub lambda: f64,
    pub bpp: f64,
    pub d_total: f64,
    /// Distortion of p2..p5 alone.
    pub d: [f64; 4],
}

/// Builds `(P \ {p_i}) ∪ {p̂_i}` for `level` in 2..=5.
pub fn hybrid_pyramid(original: &FeaturePyramid, recon: &FeaturePyramid, level: u8) -> FeaturePyramid {
    let mut out = original.clone();
    let i = (level - 2) as usize;
    out.layers[i] = recon.layers[i].clone();
    out
}

/// Compresses each pyramid with each checkpoint and writes the four
/// hybrid pyramids `{name}_lambda{λ}_p{i}.fpf` to `out_dir`. Rates come
/// from `coder` when given, otherwise from the model estimate plus the
/// container header.
pub fn layerwise_protocol(
    checkpoints: &[(f64, &Checkpoint)],
    lambdas: &[f64],
    corpus: &[(String, FeaturePyramid)],
    coder: Option<&dyn EntropyCoder>,
    out_dir: &Path,
) -> Result<Vec<LayerwiseRow>, EvalError> {
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for &lambda in lambdas {
        let ckpt = checkpoints
            .iter()
            .find(|(l, _)| (l - lambda).abs() <= 1e-12 * lambda.abs().max(1.0))
            .map(|(_, c)| *c)
            .ok_or(EvalError::MissingCheckpoint(lambda))?;
        let codec = Codec::new(ckpt.meta.codec.clone())?;
        let mut row = LayerwiseRow {
            lambda,
            bpp: 0.0,
            d_total: 0.0,
            d: [0.0; 4],
        };
        for (name, pyr) in corpus {
            let inf = codec.infer(&ckpt.params, &ckpt.tables, pyr)?;
            let bits = match coder {
                Some(c) => codec.encode(&ckpt.params, &ckpt.tables, c, pyr)?.stream.len() as f64 * 8.0,
                None => inf.latents.estimate.total() + HEADER_LEN as f64 * 8.0,
            };
            row.bpp += bits / (pyr.image_width as f64 * pyr.image_height as f64);
            let (total, d) = distortion_total(pyr, &inf.recon, &DEFAULT_LAYER_WEIGHTS)?;
            row.d_total += total;
            for i in 0..4 {
                row.d[i] += d[i];
            }
            for level in 2..=5u8 {
                let hybrid = hybrid_pyramid(pyr, &inf.recon, level);
                std::fs::write(out_dir.join(format!("{name}_lambda{lambda}_p{level}.fpf")), fpf_bytes(&hybrid))?;
            }
        }
        let n = corpus.len().max(1) as f64;
        row.bpp /= n;
        row.d_total /= n;
        for v in row.d.iter_mut() {
            *v /= n;
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(label: &str, pairs: &[(f64, f64)]) -> RdCurve {
        RdCurve::from_pairs(label, pairs, None).unwrap()
    }

    #[test]
    fn uncompressed_examples() {
        assert_eq!(uncompressed_bpp(1024, 512, 256, 32, None), 680.0);
        assert_eq!(uncompressed_bpp(64, 64, 1, 32, None), 2.65625);
        // 64×64: p6 is 1×1 per channel.
        assert_eq!(uncompressed_bpp(64, 64, 1, 32, Some(16)), 2.65625 + 16.0 / 4096.0);
        // 100×60 rounds layer sizes up: 25×15 + 13×8 + 7×4 + 4×2 values.
        assert_eq!(uncompressed_bpp(100, 60, 1, 8, None), 8.0 * (375 + 104 + 28 + 8) as f64 / 6000.0);
    }

    #[test]
    fn pchip_reproduces_linear_data_and_integrates_it() {
        let p = Pchip::new(vec![0.0, 1.0, 3.0, 4.0], vec![1.0, 3.0, 7.0, 9.0]);
        for t in [0.0, 0.5, 2.0, 3.7, 4.0] {
            assert!((p.eval(t) - (1.0 + 2.0 * t)).abs() < 1e-12);
        }
        // ∫ 1 + 2t over [0.5, 3.5] = 3 + 12
        assert!((p.integrate(0.5, 3.5) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn pchip_does_not_overshoot() {
        let x = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let y = vec![0.0, 0.0, 1.0, 1.0, 1.0];
        let p = Pchip::new(x, y);
        for i in 0..=400 {
            let v = p.eval(i as f64 / 100.0);
            assert!((-1e-12..=1.0 + 1e-12).contains(&v), "{v}");
        }
    }

    #[test]
    fn pchip_integral_matches_quadrature() {
        let p = Pchip::new(vec![0.0, 0.7, 1.5, 2.0, 3.1], vec![0.2, 1.0, 1.1, 2.5, 2.6]);
        let n = 200_000;
        let (lo, hi) = (0.3, 2.9);
        let h = (hi - lo) / n as f64;
        let mid: f64 = (0..n).map(|i| p.eval(lo + (i as f64 + 0.5) * h)).sum::<f64>() * h;
        assert!((p.integrate(lo, hi) - mid).abs() < 1e-8);
    }

    #[test]
    fn bd_rate_examples() {
        let a = curve("a", &[(0.1, 30.0), (0.2, 34.0), (0.4, 37.0), (0.8, 39.0)]);
        assert_eq!(bd_rate(&a, &a).unwrap(), 0.0);
        let doubled = curve("b", &a.points().iter().map(|p| (2.0 * p.bpp, p.metric.unwrap())).collect::<Vec<_>>());
        assert!((bd_rate(&doubled, &a).unwrap() - 100.0).abs() < 0.01);
        assert!((bd_rate(&a, &doubled).unwrap() + 50.0).abs() < 0.01);
        let far = curve("c", &[(0.1, 50.0), (0.2, 60.0)]);
        assert!(matches!(bd_rate(&far, &a), Err(EvalError::NoOverlap { .. })));
        assert!(matches!(bd_rate(&curve("d", &[(0.1, 30.0)]), &a), Err(EvalError::TooFewPoints(_))));
    }

    const DETECTION: [(f64, f64); 6] = [
        (0.0019, 37.977),
        (0.0033, 60.999),
        (0.0135, 77.484),
        (0.0248, 78.256),
        (0.0348, 78.562),
        (0.0453, 78.953),
    ];

    #[test]
    fn near_lossless_on_detection_points() {
        let c = RdCurve::from_pairs("det", &DETECTION, Some(Uncompressed { bpp: 841.940, metric: 79.225 })).unwrap();
        let NearLossless::Reached { r_nl, cr_nl, .. } = near_lossless(&c).unwrap() else {
            panic!("not reached")
        };
        // Independent: 0.0248 + 0.01 × (0.99 × 79.225 − 78.256) / (78.562 − 78.256)
        let expected = 0.0248 + 0.01 * (0.99 * 79.225 - 78.256) / (78.562 - 78.256);
        assert!((r_nl - expected).abs() < 1e-12);
        assert!((r_nl - 0.031).abs() <= 0.001);
        assert!((cr_nl - 27_555.0).abs() / 27_555.0 < 0.02);
    }

    #[test]
    fn near_lossless_edge_cases() {
        let top = Some(Uncompressed { bpp: 100.0, metric: 10.0 });
        let c = RdCurve::from_pairs("x", &[(1.0, 9.95), (2.0, 10.0)], top).unwrap();
        assert_eq!(
            near_lossless(&c).unwrap(),
            NearLossless::Reached {
                r_nl: 1.0,
                cr_nl: 100.0,
                threshold: 9.9
            }
        );
        let low = RdCurve::from_pairs("y", &[(1.0, 5.0), (2.0, 6.0)], top).unwrap();
        assert!(matches!(near_lossless(&low).unwrap(), NearLossless::NotReached { best_metric, .. } if best_metric == 6.0));
        let none = RdCurve::from_pairs("z", &[(1.0, 5.0)], None).unwrap();
        assert!(matches!(near_lossless(&none), Err(EvalError::NoReference(_))));
    }

    #[test]
    fn records_round_trip_through_csv() {
        let recs = vec![
            ResultRecord::point("b", 0.5, 0.2, 40.0, Some(0.18)),
            ResultRecord::reference("a", 680.0, 43.1),
            ResultRecord::point("a", 0.125, 0.04, 36.2, None),
        ];
        let mut buf = Vec::new();
        write_results_csv(&recs, &mut buf).unwrap();
        let back = read_results_csv(buf.as_slice()).unwrap();
        assert_eq!(back, vec![recs[2].clone(), recs[1].clone(), recs[0].clone()]);
        let mut empty = Vec::new();
        write_metrics_csv(&[], &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), "label,name,value\n");
    }

    #[test]
    fn jsonl_records_group_into_curves() {
        let text = "# detection\n{\"label\":\"det\",\"lambda\":0.0125,\"bpp\":0.0019,\"metric\":37.977,\"D_total\":0.654}\n\n{\"label\":\"det\",\"bpp\":841.94,\"metric\":79.225,\"uncompressed\":true}\n{\"label\":\"det\",\"lambda\":0.025,\"bpp\":0.0033,\"metric\":60.999}\n";
        let recs = read_results_jsonl(text.as_bytes()).unwrap();
        let curves = curves_from_records(&recs).unwrap();
        assert_eq!(curves.len(), 1);
        assert_eq!(curves[0].points().len(), 2);
        assert_eq!(curves[0].reference.unwrap().bpp, 841.94);
        assert!(matches!(
            read_results_jsonl("{\"label\":1}".as_bytes()),
            Err(EvalError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn report_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let c = RdCurve::from_pairs("det", &DETECTION, Some(Uncompressed { bpp: 841.94, metric: 79.225 })).unwrap();
        let metrics = derive_metrics(std::slice::from_ref(&c), None);
        let files = emit_report(dir.path(), &[c], &metrics).unwrap();
        let m = read_metrics_csv(std::fs::File::open(&files.metrics_csv).unwrap()).unwrap();
        assert_eq!(m.iter().map(|r| r.name.as_str()).collect::<Vec<_>>(), ["CR_NL", "R_NL"]);
        assert!(std::fs::read_to_string(&files.rate_plot).unwrap().contains("<polyline"));
        let pts = read_results_csv(std::fs::File::open(&files.points_csv).unwrap()).unwrap();
        assert_eq!(pts.len(), 7);
    }

    #[test]
    fn second_reference_for_a_label_is_rejected() {
        let records = [
            ResultRecord::point("a", 0.1, 0.1, 30.0, None),
            ResultRecord::reference("a", 680.0, 40.0),
            ResultRecord::reference("a", 680.0, 41.0),
        ];
        assert_eq!(curves_from_records(&records).unwrap_err().to_string(), "curve \"a\" has more than one uncompressed reference");
    }
}
