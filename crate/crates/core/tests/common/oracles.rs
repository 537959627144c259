//! Brute-force reference implementations.

use escounts::metrics::CountPair;
use rand::Rng;

pub struct BruteMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub obo: f64,
    pub obz: f64,
}

/// Nearest integer with ties up, by explicit comparison.
pub fn nearest(x: f64) -> u32 {
    let lo = x.floor();
    let up = if x - lo >= 0.5 { lo + 1.0 } else { lo };
    if up < 0.0 { 0 } else { up as u32 }
}

pub fn brute_metrics(pairs: &[CountPair]) -> BruteMetrics {
    let n = pairs.len() as f64;
    let mut mae = 0.0;
    let mut se = 0.0;
    let mut obo = 0.0;
    let mut obz = 0.0;
    for p in pairs {
        let c = f64::from(p.truth);
        let e = (c - p.predicted).abs();
        mae += e / if p.truth == 0 { 1.0 } else { c };
        se += e * e;
        if e <= 1.0 {
            obo += 1.0;
        }
        if nearest(p.predicted) == p.truth {
            obz += 1.0;
        }
    }
    BruteMetrics { mae: mae / n, rmse: (se / n).sqrt(), obo: obo / n, obz: obz / n }
}

pub fn brute_off_by_n(pairs: &[CountPair], n_max: usize) -> Vec<f64> {
    (0..=n_max)
        .map(|n| {
            let hits = pairs
                .iter()
                .filter(|p| {
                    if n == 0 {
                        nearest(p.predicted) == p.truth
                    } else {
                        (f64::from(p.truth) - p.predicted).abs() <= n as f64
                    }
                })
                .count();
            hits as f64 / pairs.len() as f64
        })
        .collect()
}

/// Enumerates every token to classify peaks and intervals.
pub fn brute_jaccard(peaks: &[usize], intervals: &[(usize, usize)], tokens: usize) -> f64 {
    let mut is_peak = vec![false; tokens];
    let mut covered = vec![false; tokens];
    for &p in peaks {
        is_peak[p] = true;
    }
    for &(s, e) in intervals {
        for c in covered.iter_mut().take(e + 1).skip(s) {
            *c = true;
        }
    }
    let mut tp = 0;
    let mut fn_ = 0;
    for &(s, e) in intervals {
        if (s..=e).any(|t| is_peak[t]) {
            tp += 1;
        } else {
            fn_ += 1;
        }
    }
    let fp = (0..tokens).filter(|&t| is_peak[t] && !covered[t]).count();
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp + fn_) as f64
    }
}

/// Strict local maxima by direct definition, then the relative threshold.
pub fn brute_peaks(d: &[f32], theta: f64) -> Vec<usize> {
    let lo = d.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = d.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let r = theta * (hi - lo);
    let n = d.len();
    let mut out = Vec::new();
    for t in 0..n {
        if t > 0 && d[t - 1] == d[t] {
            continue; // not the leftmost index of its plateau
        }
        let mut end = t;
        while end + 1 < n && d[end + 1] == d[t] {
            end += 1;
        }
        let left = t == 0 || d[t - 1] < d[t];
        let right = end == n - 1 || d[end + 1] < d[t];
        if left && right && !(t == 0 && end == n - 1) && f64::from(d[t]) - lo >= r {
            out.push(t);
        }
    }
    out
}

pub fn random_pairs<R: Rng>(rng: &mut R) -> Vec<CountPair> {
    let n = rng.random_range(1..40);
    (0..n)
        .map(|_| {
            let c = rng.random_range(0..25u32);
            // mix exact hits, half-integers and continuous values
            let p = match rng.random_range(0..4) {
                0 => f64::from(c),
                1 => f64::from(c) + rng.random_range(-3i32..=3) as f64 * 0.5,
                _ => f64::from(c) + rng.random_range(-4.0..4.0),
            };
            CountPair::new(c, p.max(0.0))
        })
        .collect()
}

pub fn random_intervals<R: Rng>(rng: &mut R, tokens: usize) -> Vec<(usize, usize)> {
    let k = rng.random_range(0..5);
    let mut v: Vec<(usize, usize)> = (0..k)
        .map(|_| {
            let s = rng.random_range(0..tokens);
            let e = (s + rng.random_range(0..4)).min(tokens - 1);
            (s, e)
        })
        .collect();
    v.sort_unstable();
    v
}

use escounts::annotations::{RepetitionAnnotation, SigmaMode};

pub const SIGMA_MODES: [SigmaMode; 6] = [
    SigmaMode::Fixed { sigma: 0.0 },
    SigmaMode::Fixed { sigma: 0.5 },
    SigmaMode::Fixed { sigma: 3.0 },
    SigmaMode::Variable { scale: 0.25 },
    SigmaMode::Variable { scale: 1.0 },
    SigmaMode::Fixed { sigma: 1e-3 },
];

/// Random annotation over `tokens · fpt` frames, with centres pushed to the edges
/// about a third of the time.
pub fn random_annotation<R: Rng>(rng: &mut R, tokens: usize, fpt: u32) -> RepetitionAnnotation {
    let frames = tokens as u32 * fpt;
    let count = rng.random_range(0..=20u32);
    let repetitions = (0..count)
        .map(|_| {
            let len = rng.random_range(1..=frames.min(4 * fpt));
            let start = match rng.random_range(0..3) {
                0 => 0,
                1 => frames - len,
                _ => rng.random_range(0..=frames - len),
            };
            (start, start + len)
        })
        .collect();
    RepetitionAnnotation {
        video_id: "rand".into(),
        class_label: "c".into(),
        fps: 30.0,
        count,
        repetitions,
        is_pseudo: false,
    }
}

/// Independent map: each kernel evaluated and normalised in `f64`.
pub fn reference_density(ann: &RepetitionAnnotation, tokens: usize, fpt: f64, sigma: SigmaMode) -> Vec<f64> {
    let mut d = vec![0.0; tokens];
    for &(s, e) in &ann.repetitions {
        let mu = (f64::from(s) + f64::from(e)) / (2.0 * fpt) - 0.5;
        let width = match sigma {
            SigmaMode::Fixed { sigma } => sigma,
            SigmaMode::Variable { scale } => scale * f64::from(e - s) / fpt,
        };
        let w: Vec<f64> = (0..tokens)
            .map(|t| if width > 0.0 { (-((t as f64 - mu) / width).powi(2) / 2.0).exp() } else { 0.0 })
            .collect();
        let z: f64 = w.iter().sum();
        if z > 0.0 {
            for (a, b) in d.iter_mut().zip(&w) {
                *a += b / z;
            }
        } else {
            let k = nearest(mu).min(tokens as u32 - 1) as usize;
            d[k] += 1.0;
        }
    }
    d
}
