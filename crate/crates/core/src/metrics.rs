//! Counting metrics: MAE, RMSE, OBO, OBZ, Off-By-N, and grouped tables.
//!
//! OBZ compares against the rounded prediction (ties round up); OBO, MAE and
//! RMSE use the raw real-valued prediction. MAE divides by `max(c, 1)`.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("no prediction pairs")]
    Empty,
    #[error("value {value} for item {index} falls outside every bin")]
    Unbinned { index: usize, value: f64 },
    #[error("bin spec: {0}")]
    Bins(String),
}

/// Ground-truth count and real-valued prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountPair {
    pub truth: u32,
    pub predicted: f64,
}

impl CountPair {
    pub fn new(truth: u32, predicted: f64) -> Self {
        Self { truth, predicted }
    }

    pub fn abs_error(&self) -> f64 {
        (f64::from(self.truth) - self.predicted).abs()
    }
}

/// Nearest integer, ties up, clamped at zero.
pub fn round_count(x: f64) -> u32 {
    (x + 0.5).floor().max(0.0) as u32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub obo: f64,
    pub obz: f64,
    /// OBO on rounded predictions.
    pub obo_rounded: f64,
}

pub fn compute_metrics(pairs: &[CountPair]) -> Result<MetricReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = pairs.len() as f64;
    let mut mae = 0.0;
    let mut se = 0.0;
    let mut obo = 0usize;
    let mut obz = 0usize;
    let mut obo_r = 0usize;
    for p in pairs {
        let err = p.abs_error();
        mae += err / f64::from(p.truth.max(1));
        se += err * err;
        obo += usize::from(err <= 1.0);
        let r = round_count(p.predicted);
        obz += usize::from(r == p.truth);
        obo_r += usize::from(r.abs_diff(p.truth) <= 1);
    }
    Ok(MetricReport {
        n: pairs.len(),
        mae: mae / n,
        rmse: (se / n).sqrt(),
        obo: obo as f64 / n,
        obz: obz as f64 / n,
        obo_rounded: obo_r as f64 / n,
    })
}

/// Off-By-N accuracy for `N = 0..=n_max`; `N = 0` is OBZ, `N ≥ 1` uses raw error.
pub fn off_by_n(pairs: &[CountPair], n_max: usize) -> Vec<f64> {
    if pairs.is_empty() {
        return vec![0.0; n_max + 1];
    }
    let total = pairs.len() as f64;
    let mut errs: Vec<f64> = pairs.iter().map(CountPair::abs_error).collect();
    errs.sort_by(f64::total_cmp);
    let exact = pairs.iter().filter(|p| round_count(p.predicted) == p.truth).count();
    let mut curve = Vec::with_capacity(n_max + 1);
    curve.push(exact as f64 / total);
    for n in 1..=n_max {
        let within = errs.partition_point(|&e| e <= n as f64);
        curve.push(within as f64 / total);
    }
    curve
}

/// A prediction with the value used for binning (duration, count, ...).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupItem {
    pub pair: CountPair,
    pub key: f64,
}

/// `[lo, hi)` bins; the last bin also includes `hi`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BinSpec {
    EqualPopulation { bins: usize },
    Explicit { bins: Vec<(String, f64, f64)> },
}

impl BinSpec {
    /// Average repetition duration in seconds.
    pub fn repetition_duration_preset() -> Self {
        Self::explicit(&[0.0, 0.96, 1.53, 2.29, 3.09, f64::INFINITY])
    }

    /// Video duration in seconds.
    pub fn video_duration_preset() -> Self {
        Self::explicit(&[8.0, 11.0, 26.0, 33.9, 45.9, 68.0])
    }

    fn explicit(edges: &[f64]) -> Self {
        let labels = size_labels(edges.len() - 1);
        Self::Explicit {
            bins: labels
                .into_iter()
                .zip(edges.windows(2))
                .map(|(l, w)| (l, w[0], w[1]))
                .collect(),
        }
    }
}

fn size_labels(n: usize) -> Vec<String> {
    match n {
        5 => ["XS", "S", "M", "L", "XL"].iter().map(|s| s.to_string()).collect(),
        3 => ["S", "M", "L"].iter().map(|s| s.to_string()).collect(),
        _ => (0..n).map(|i| format!("B{i}")).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
    pub report: Option<MetricReport>,
}

pub fn grouped_report(items: &[GroupItem], spec: &BinSpec) -> Result<Vec<GroupRow>, MetricsError> {
    match spec {
        BinSpec::EqualPopulation { bins } => {
            if *bins == 0 {
                return Err(MetricsError::Bins("zero bins".into()));
            }
            if items.is_empty() {
                return Err(MetricsError::Empty);
            }
            let mut order: Vec<usize> = (0..items.len()).collect();
            order.sort_by(|&a, &b| items[a].key.total_cmp(&items[b].key).then(a.cmp(&b)));
            let labels = size_labels(*bins);
            let n = items.len();
            (0..*bins)
                .map(|b| {
                    let chunk = &order[b * n / bins..(b + 1) * n / bins];
                    let pairs: Vec<CountPair> = chunk.iter().map(|&i| items[i].pair).collect();
                    let lo = chunk.first().map_or(f64::NAN, |&i| items[i].key);
                    let hi = chunk.last().map_or(f64::NAN, |&i| items[i].key);
                    Ok(GroupRow {
                        label: labels[b].clone(),
                        lo,
                        hi,
                        report: compute_metrics(&pairs).ok(),
                    })
                })
                .collect()
        }
        BinSpec::Explicit { bins } => {
            if bins.is_empty() {
                return Err(MetricsError::Bins("no bins".into()));
            }
            let last = bins.len() - 1;
            let mut members: Vec<Vec<CountPair>> = vec![Vec::new(); bins.len()];
            for (i, item) in items.iter().enumerate() {
                let slot = bins.iter().enumerate().position(|(b, (_, lo, hi))| {
                    item.key >= *lo && (item.key < *hi || (b == last && item.key == *hi))
                });
                match slot {
                    Some(b) => members[b].push(item.pair),
                    None => return Err(MetricsError::Unbinned { index: i, value: item.key }),
                }
            }
            Ok(bins
                .iter()
                .zip(members)
                .map(|((label, lo, hi), pairs)| GroupRow {
                    label: label.clone(),
                    lo: *lo,
                    hi: *hi,
                    report: compute_metrics(&pairs).ok(),
                })
                .collect())
        }
    }
}

/// Plain-text table of a report.
pub fn format_report(r: &MetricReport) -> String {
    format!(
        "{:>6} {:>8} {:>8} {:>8} {:>8}\n{:>6} {:>8.3} {:>8.3} {:>8.3} {:>8.3}\n",
        "n", "RMSE", "MAE", "OBZ", "OBO", r.n, r.rmse, r.mae, r.obz, r.obo
    )
}

/// Predicted vs ground-truth count scatter as a standalone SVG document.
///
/// The dashed diagonal marks perfect predictions.
pub fn scatter_svg(pairs: &[CountPair], title: &str) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    let top = pairs
        .iter()
        .map(|p| f64::from(p.truth).max(p.predicted))
        .fold(1.0f64, f64::max)
        .ceil();
    let span = SIZE - 2.0 * PAD;
    let x = |v: f64| PAD + v / top * span;
    let y = |v: f64| SIZE - PAD - v / top * span;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n"
    );
    out.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        SIZE / 2.0,
        escape_xml(title)
    ));
    out.push_str(&format!(
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{span}\" height=\"{span}\" fill=\"none\" stroke=\"black\"/>\n"
    ));
    out.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"grey\" stroke-dasharray=\"4 4\"/>\n",
        x(0.0),
        y(0.0),
        x(top),
        y(top)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">ground truth (max {top})</text>\n",
        SIZE / 2.0,
        SIZE - 10.0
    ));
    out.push_str(&format!(
        "<text x=\"12\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 12 {})\">predicted</text>\n",
        SIZE / 2.0,
        SIZE / 2.0
    ));
    for p in pairs {
        out.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\" fill-opacity=\"0.7\"/>\n",
            x(f64::from(p.truth)),
            y(p.predicted.max(0.0))
        ));
    }
    out.push_str("</svg>\n");
    out
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
