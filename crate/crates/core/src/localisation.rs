//! Repetition localisation from density peaks.
//!
//! Peaks are strict local maxima (a plateau contributes its leftmost index,
//! boundary bins compare against their single neighbour) whose height above
//! the map minimum is at least `r = θ·(max − min)`. A repetition is found if
//! any peak lies in its closed token interval.

use serde::{Deserialize, Serialize};

use crate::annotations::{RepetitionAnnotation, Timeline};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakSet {
    pub peaks: Vec<usize>,
    pub r: f64,
    pub theta: f64,
}

pub fn detect_peaks(d: &[f32], theta: f64) -> PeakSet {
    if d.is_empty() {
        return PeakSet { peaks: Vec::new(), r: 0.0, theta };
    }
    let (lo, hi) = d
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(f64::from(x)), hi.max(f64::from(x))));
    let r = theta * (hi - lo);
    let n = d.len();
    let mut peaks = Vec::new();
    let mut t = 0;
    while t < n {
        // extent of the plateau starting at t
        let mut end = t;
        while end + 1 < n && d[end + 1] == d[t] {
            end += 1;
        }
        let left_ok = t == 0 || d[t - 1] < d[t];
        let right_ok = end == n - 1 || d[end + 1] < d[t];
        let is_whole_map = t == 0 && end == n - 1;
        if left_ok && right_ok && !is_whole_map && f64::from(d[t]) - lo >= r {
            peaks.push(t);
        }
        t = end + 1;
    }
    PeakSet { peaks, r, theta }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correspondence {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Correspondence {
    pub fn jaccard(&self) -> f64 {
        let all = self.tp + self.fp + self.fn_;
        if all == 0 {
            1.0
        } else {
            self.tp as f64 / all as f64
        }
    }
}

/// Matches peaks against closed token intervals.
pub fn correspondences(peaks: &[usize], intervals: &[(usize, usize)]) -> Correspondence {
    let inside = |p: usize, &(s, e): &(usize, usize)| s <= p && p <= e;
    let tp = intervals.iter().filter(|iv| peaks.iter().any(|&p| inside(p, iv))).count();
    let fp = peaks.iter().filter(|&&p| !intervals.iter().any(|iv| inside(p, iv))).count();
    Correspondence { tp, fp, fn_: intervals.len() - tp }
}

pub fn jaccard(peaks: &[usize], intervals: &[(usize, usize)]) -> f64 {
    correspondences(peaks, intervals).jaccard()
}

/// Annotated repetitions in token units.
pub fn token_intervals(ann: &RepetitionAnnotation, timeline: &Timeline) -> Vec<(usize, usize)> {
    ann.repetitions.iter().map(|&iv| timeline.token_span(iv)).collect()
}

pub const THETA_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LocalisationError {
    #[error("no prediction for {0}")]
    MissingPrediction(String),
    #[error("no videos")]
    Empty,
}

/// A predicted map with the video's token geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalisationInput<'a> {
    pub density: &'a [f32],
    pub annotation: &'a RepetitionAnnotation,
    pub frames_per_token: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalisationReport {
    /// `(θ, mean 𝒥)` per threshold.
    pub per_theta: Vec<(f64, f64)>,
    pub average: f64,
}

pub fn localisation_report(inputs: &[LocalisationInput<'_>], thetas: &[f64]) -> Result<LocalisationReport, LocalisationError> {
    if inputs.is_empty() || thetas.is_empty() {
        return Err(LocalisationError::Empty);
    }
    for x in inputs {
        if x.density.is_empty() {
            return Err(LocalisationError::MissingPrediction(x.annotation.video_id.clone()));
        }
    }
    let intervals: Vec<Vec<(usize, usize)>> = inputs
        .iter()
        .map(|x| token_intervals(x.annotation, &Timeline::new(x.density.len(), x.frames_per_token)))
        .collect();
    let per_theta: Vec<(f64, f64)> = thetas
        .iter()
        .map(|&theta| {
            let total: f64 = inputs
                .iter()
                .zip(&intervals)
                .map(|(x, iv)| jaccard(&detect_peaks(x.density, theta).peaks, iv))
                .sum();
            (theta, total / inputs.len() as f64)
        })
        .collect();
    let average = per_theta.iter().map(|(_, j)| j).sum::<f64>() / per_theta.len() as f64;
    Ok(LocalisationReport { per_theta, average })
}

pub fn format_localisation(report: &LocalisationReport) -> String {
    let mut head = String::new();
    let mut row = String::new();
    for (theta, j) in &report.per_theta {
        head.push_str(&format!("{:>7}", format!("{theta:.1}")));
        row.push_str(&format!("{:>7.2}", 100.0 * j));
    }
    format!("{head}{:>7}\n{row}{:>7.2}\n", "Avg", 100.0 * report.average)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_map_has_no_peaks() {
        assert!(detect_peaks(&[0.3; 8], 0.5).peaks.is_empty());
        assert!(detect_peaks(&[0.3; 8], 0.0).peaks.is_empty());
    }

    #[test]
    fn relative_threshold() {
        // r = 0.8 and both maxima clear it
        assert_eq!(detect_peaks(&[0.0, 1.0, 0.0, 2.0, 0.0], 0.4).peaks, vec![1, 3]);
        let p = detect_peaks(&[0.0, 1.0, 0.0, 2.0, 0.0], 0.6);
        assert!((p.r - 1.2).abs() < 1e-12);
        assert_eq!(p.peaks, vec![3]);
    }

    #[test]
    fn plateaus_and_boundaries() {
        assert_eq!(detect_peaks(&[0.0, 2.0, 2.0, 2.0, 1.0], 0.0).peaks, vec![1]);
        // a plateau that is not a maximum on the right
        assert!(detect_peaks(&[0.0, 2.0, 2.0, 3.0], 0.0).peaks == vec![3]);
        assert_eq!(detect_peaks(&[3.0, 1.0, 0.0, 2.0], 0.0).peaks, vec![0, 3]);
        assert_eq!(detect_peaks(&[1.0], 0.0).peaks, Vec::<usize>::new());
    }

    #[test]
    fn jaccard_fixtures() {
        assert_eq!(jaccard(&[1, 5, 9], &[(0, 2), (4, 6), (8, 10)]), 1.0);
        let c = correspondences(&[1, 7], &[(0, 2), (4, 5)]);
        assert_eq!(c, Correspondence { tp: 1, fp: 1, fn_: 1 });
        assert_eq!(c.jaccard(), 1.0 / 3.0);
        assert_eq!(jaccard(&[], &[(0, 1), (2, 3), (4, 5)]), 0.0);
        assert_eq!(jaccard(&[], &[]), 1.0);
        // two peaks in one repetition count once; boundary is inside
        assert_eq!(jaccard(&[0, 2], &[(0, 2)]), 1.0);
    }

    #[test]
    fn perfect_corpus_scores_one() {
        let ann = RepetitionAnnotation {
            video_id: "v".into(),
            class_label: "c".into(),
            fps: 30.0,
            count: 2,
            repetitions: vec![(0, 64), (64, 128)],
            is_pseudo: false,
        };
        let d = [0.1f32, 0.8, 0.1, 0.1, 0.8, 0.1, 0.0, 0.0];
        let input = LocalisationInput { density: &d, annotation: &ann, frames_per_token: 16.0 };
        let rep = localisation_report(&[input], &THETA_GRID).unwrap();
        assert!(rep.per_theta.iter().all(|&(_, j)| j == 1.0));
        assert_eq!(rep.average, 1.0);
        assert!(format_localisation(&rep).contains("100.00"));
    }

    fn small_map() -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(0u8..5, 1..20).prop_map(|v| v.into_iter().map(f32::from).collect())
    }

    proptest! {
        #[test]
        fn peak_count_non_increasing(d in small_map()) {
            let counts: Vec<usize> = (0..=10).map(|i| detect_peaks(&d, i as f64 / 10.0).peaks.len()).collect();
            prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn shift_invariance(
            peaks in prop::collection::btree_set(0usize..20, 0..6),
            ivs in prop::collection::vec((0usize..20, 0usize..4), 0..5),
            k in 0usize..30,
        ) {
            let peaks: Vec<usize> = peaks.into_iter().collect();
            let ivs: Vec<(usize, usize)> = ivs.into_iter().map(|(s, l)| (s, s + l)).collect();
            let sp: Vec<usize> = peaks.iter().map(|p| p + k).collect();
            let si: Vec<(usize, usize)> = ivs.iter().map(|&(s, e)| (s + k, e + k)).collect();
            prop_assert_eq!(jaccard(&peaks, &ivs), jaccard(&sp, &si));
        }
    }
}
