//! Pixel-level evaluation: confusion counts, IoU, TPR, PPV, distribution
//! summaries and TP/FP/FN overlays.

use std::fmt::Write as _;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("mask shapes differ: {0} vs {1}")]
    ShapeMismatch(Shape, Shape),
    #[error("mask is not binary at flat offset {0}")]
    NonBinary(usize),
    #[error("cannot summarize an empty record list")]
    Empty,
    #[error("malformed metrics CSV at line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn iou(&self) -> f64 {
        iou(self.tp, self.fp, self.fn_)
    }

    pub fn rates(&self) -> (f64, f64) {
        rates(self.tp, self.fp, self.fn_)
    }
}

fn binary_flags<T: Real>(t: &Tensor<T>) -> Result<impl Iterator<Item = bool> + '_, MetricsError> {
    if let Some(i) = t.data().iter().position(|&v| v != T::zero() && v != T::one()) {
        return Err(MetricsError::NonBinary(i));
    }
    Ok(t.data().iter().map(|&v| v == T::one()))
}

/// Pixel confusion counts of a binary prediction against binary truth.
pub fn confusion<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<Confusion, MetricsError> {
    if pred.shape() != truth.shape() {
        return Err(MetricsError::ShapeMismatch(pred.shape(), truth.shape()));
    }
    let mut c = Confusion::default();
    for (p, t) in binary_flags(pred)?.zip(binary_flags(truth)?) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c.tn = pred.shape().len() as u64 - c.tp - c.fp - c.fn_;
    Ok(c)
}

/// `tp / (tp + fp + fn)`; 1.0 when both masks are empty.
pub fn iou(tp: u64, fp: u64, fn_: u64) -> f64 {
    ratio(tp, tp + fp + fn_)
}

/// `(tpr, ppv)` = `(tp / (tp + fn), tp / (tp + fp))`. An empty denominator
/// means there was nothing to miss (or nothing claimed), which counts as 1.0.
pub fn rates(tp: u64, fp: u64, fn_: u64) -> (f64, f64) {
    (ratio(tp, tp + fn_), ratio(tp, tp + fp))
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Binarizes a probability map: `p >= threshold` is foreground.
pub fn threshold<T: Real>(prob: &Tensor<T>, threshold: T) -> Tensor<T> {
    prob.map(|p| if p >= threshold { T::one() } else { T::zero() }).expect("binary values are finite")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub id: String,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub iou: f64,
    pub tpr: f64,
    pub ppv: f64,
}

impl MetricsRecord {
    pub fn new(id: impl Into<String>, c: Confusion) -> Self {
        let (tpr, ppv) = c.rates();
        MetricsRecord { id: id.into(), tp: c.tp, fp: c.fp, fn_: c.fn_, tn: c.tn, iou: c.iou(), tpr, ppv }
    }

    pub fn evaluate<T: Real>(id: impl Into<String>, pred: &Tensor<T>, truth: &Tensor<T>) -> Result<Self, MetricsError> {
        Ok(Self::new(id, confusion(pred, truth)?))
    }
}

pub const CSV_HEADER: &str = "id,tp,fp,fn,tn,iou,tpr,ppv";

/// Writes records as CSV. Fractions use the shortest round-trip formatting,
/// so identical records always produce identical bytes.
pub fn write_csv<W: Write>(mut out: W, records: &[MetricsRecord]) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{},{},{},{},{},{},{},{}", r.id, r.tp, r.fp, r.fn_, r.tn, r.iou, r.tpr, r.ppv)?;
    }
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRecord>, MetricsError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        Some((i, _)) => return Err(MetricsError::Csv { line: i + 1, reason: "unexpected header".into() }),
        None => return Err(MetricsError::Csv { line: 1, reason: "missing header".into() }),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let err = |reason: String| MetricsError::Csv { line: i + 1, reason };
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", f.len())));
        }
        let int = |s: &str| s.parse::<u64>().map_err(|e| err(format!("{s:?}: {e}")));
        let frac = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| (0.0..=1.0).contains(v))
                .ok_or_else(|| err(format!("{s:?} is not a fraction in [0, 1]")))
        };
        out.push(MetricsRecord {
            id: f[0].to_string(),
            tp: int(f[1])?,
            fp: int(f[2])?,
            fn_: int(f[3])?,
            tn: int(f[4])?,
            iou: frac(f[5])?,
            tpr: frac(f[6])?,
            ppv: frac(f[7])?,
        });
    }
    Ok(out)
}

/// Five-number summary plus mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl Spread {
    /// Quartiles by linear interpolation between closest ranks: the `p`
    /// quantile of sorted `x[0..n]` sits at rank `h = (n - 1)·p`.
    pub fn of(values: &[f64]) -> Result<Self, MetricsError> {
        if values.is_empty() {
            return Err(MetricsError::Empty);
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = (v.len() - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(v.len() - 1);
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Ok(Spread {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub n: usize,
    pub iou: Spread,
    pub tpr: Spread,
    pub ppv: Spread,
}

pub fn summarize(records: &[MetricsRecord]) -> Result<DistributionSummary, MetricsError> {
    let col = |f: fn(&MetricsRecord) -> f64| Spread::of(&records.iter().map(f).collect::<Vec<_>>());
    Ok(DistributionSummary { n: records.len(), iou: col(|r| r.iou)?, tpr: col(|r| r.tpr)?, ppv: col(|r| r.ppv)? })
}

impl DistributionSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    /// Plain-text table, one metric per row, suitable for any plotting tool.
    pub fn five_number_table(&self) -> String {
        let mut s = String::from("metric\tn\tmin\tq1\tmedian\tq3\tmax\tmean\n");
        for (name, m) in [("iou", &self.iou), ("ppv", &self.ppv), ("tpr", &self.tpr)] {
            let _ = writeln!(
                s,
                "{name}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                self.n, m.min, m.q1, m.median, m.q3, m.max, m.mean
            );
        }
        s
    }
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

pub const GREEN: [u8; 3] = [0, 255, 0];
pub const RED: [u8; 3] = [255, 0, 0];
pub const BLUE: [u8; 3] = [0, 0, 255];

impl RgbImage {
    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 3);
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }
}

/// Grayscale image with TP pixels in pure green, FP in pure red and FN in pure
/// blue; true negatives keep their gray level.
pub fn render_overlay<T: Real>(image: &Tensor<T>, pred: &Tensor<T>, truth: &Tensor<T>) -> Result<RgbImage, MetricsError> {
    if image.shape() != pred.shape() {
        return Err(MetricsError::ShapeMismatch(image.shape(), pred.shape()));
    }
    if pred.shape() != truth.shape() {
        return Err(MetricsError::ShapeMismatch(pred.shape(), truth.shape()));
    }
    let pixels = binary_flags(pred)?
        .zip(binary_flags(truth)?)
        .zip(image.data())
        .map(|((p, t), &v)| match (p, t) {
            (true, true) => GREEN,
            (true, false) => RED,
            (false, true) => BLUE,
            (false, false) => {
                let g = (v.to_f64().unwrap_or(0.0).clamp(0.0, 1.0) * 255.0).round() as u8;
                [g, g, g]
            }
        })
        .collect();
    Ok(RgbImage { width: image.width(), height: image.height(), pixels })
}
