//! Repetition intervals, pseudo-labels, and ground-truth density maps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("cannot split {frames} frames into {count} repetitions")]
    TooFewFrames { count: u32, frames: u32 },
    #[error("repetition centre {center} lies outside [0, {tokens}) temporal tokens")]
    CenterOutOfRange { center: f64, tokens: usize },
    #[error("frame {frame} outside [0, {frames})")]
    FrameOutOfRange { frame: u32, frames: u32 },
    #[error("invalid annotation: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("sidecar: {0}")]
    Json(#[from] serde_json::Error),
}

/// Ground-truth (or pseudo) repetitions for one video, in raw frames.
///
/// Serialized as the `.json` sidecar next to each feature file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionAnnotation {
    pub video_id: String,
    pub class_label: String,
    pub fps: f64,
    pub count: u32,
    pub repetitions: Vec<(u32, u32)>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_pseudo: bool,
}

impl RepetitionAnnotation {
    pub fn validate(&self) -> Result<(), AnnotationError> {
        if !self.repetitions.is_empty() && self.repetitions.len() != self.count as usize {
            return Err(AnnotationError::Invalid(format!(
                "{} intervals for count {}",
                self.repetitions.len(),
                self.count
            )));
        }
        for &(s, e) in &self.repetitions {
            if s >= e {
                return Err(AnnotationError::Invalid(format!("empty interval [{s}, {e}]")));
            }
        }
        if self.repetitions.windows(2).any(|w| w[0].0 > w[1].0) {
            return Err(AnnotationError::Invalid("intervals not sorted".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AnnotationError> {
        let ann: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        ann.validate()?;
        Ok(ann)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AnnotationError> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Shifts every interval `ε` frames earlier and clips to `[0, frames)`.
    ///
    /// A repetition survives if its centre stays inside the clipped span.
    pub fn shift_earlier(&self, epsilon: u32, frames: u32) -> Self {
        let repetitions: Vec<(u32, u32)> = self
            .repetitions
            .iter()
            .filter_map(|&(s, e)| {
                let center = (f64::from(s) + f64::from(e)) / 2.0 - f64::from(epsilon);
                if center < 0.0 || center >= f64::from(frames) {
                    return None;
                }
                let ns = s.saturating_sub(epsilon);
                let ne = e.saturating_sub(epsilon).min(frames);
                (ns < ne).then_some((ns, ne))
            })
            .collect();
        let count = if self.repetitions.is_empty() {
            self.count
        } else {
            repetitions.len() as u32
        };
        Self {
            count,
            repetitions,
            ..self.clone()
        }
    }
}

/// Splits `[0, frames)` into `count` contiguous near-equal intervals.
pub fn make_pseudo_labels(
    video_id: &str,
    class_label: &str,
    fps: f64,
    count: u32,
    frames: u32,
) -> Result<RepetitionAnnotation, AnnotationError> {
    if count > 0 && frames < count {
        return Err(AnnotationError::TooFewFrames { count, frames });
    }
    let c = u64::from(count);
    let r = u64::from(frames);
    let repetitions = (0..c)
        .map(|i| ((i * r / c) as u32, ((i + 1) * r / c) as u32))
        .collect();
    Ok(RepetitionAnnotation {
        video_id: video_id.into(),
        class_label: class_label.into(),
        fps,
        count,
        repetitions,
        is_pseudo: true,
    })
}

/// `floor(frame / frames_per_token)` clamped to `[0, tokens-1]`; `None` outside the video.
pub fn downsample_alignment(frame: u32, frames: u32, tokens: usize) -> Option<usize> {
    if frame >= frames || tokens == 0 {
        return None;
    }
    let per_token = f64::from(frames) / tokens as f64;
    Some(((f64::from(frame) / per_token).floor() as usize).min(tokens - 1))
}

/// Raw-frame to temporal-token mapping for one sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timeline {
    pub tokens: usize,
    pub frames_per_token: f64,
}

impl Timeline {
    pub fn new(tokens: usize, frames_per_token: f64) -> Self {
        Self {
            tokens,
            frames_per_token,
        }
    }

    pub fn frames(&self) -> u32 {
        (self.tokens as f64 * self.frames_per_token).round() as u32
    }

    /// Continuous token coordinate where bin `t` is centred on `t`.
    pub fn token_coordinate(&self, frame: f64) -> f64 {
        frame / self.frames_per_token - 0.5
    }

    /// Closed token interval `[first, last]` covered by `[start, end)` frames.
    pub fn token_span(&self, (start, end): (u32, u32)) -> (usize, usize) {
        let last_frame = end.max(start + 1) - 1;
        let to_tok = |f: u32| ((f64::from(f) / self.frames_per_token).floor() as usize).min(self.tokens.saturating_sub(1));
        (to_tok(start), to_tok(last_frame))
    }
}

/// Kernel width policy for density peaks, in temporal tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SigmaMode {
    Fixed { sigma: f64 },
    /// `σ_i = scale · interval length in tokens`.
    Variable { scale: f64 },
}

impl SigmaMode {
    pub const DEFAULT_VARIABLE_SCALE: f64 = 0.25;

    pub fn variable() -> Self {
        SigmaMode::Variable { scale: Self::DEFAULT_VARIABLE_SCALE }
    }
}

impl Default for SigmaMode {
    fn default() -> Self {
        SigmaMode::Fixed { sigma: 0.5 }
    }
}

/// Per-temporal-bin density; sums to the count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityMap {
    pub values: Vec<f32>,
    pub frames_per_token: f64,
}

impl DensityMap {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v)).sum()
    }
}

/// Discrete Gaussian at `mu` over bins `0..tokens`, renormalized to unit mass.
fn unit_kernel(mu: f64, sigma: f64, tokens: usize) -> Vec<f64> {
    let mut k = vec![0.0; tokens];
    let nearest = ((mu + 0.5).floor().max(0.0) as usize).min(tokens - 1);
    if sigma > 0.0 {
        for (t, v) in k.iter_mut().enumerate() {
            let z = (t as f64 - mu) / sigma;
            *v = (-0.5 * z * z).exp();
        }
        let total: f64 = k.iter().sum();
        if total > 0.0 && total.is_finite() {
            k.iter_mut().for_each(|v| *v /= total);
            return k;
        }
        k.iter_mut().for_each(|v| *v = 0.0);
    }
    k[nearest] = 1.0;
    k
}

/// Builds the ground-truth density map: one unit-mass Gaussian per repetition,
/// centred on the repetition midpoint in token coordinates.
pub fn make_density_map(
    ann: &RepetitionAnnotation,
    timeline: Timeline,
    sigma: SigmaMode,
) -> Result<DensityMap, AnnotationError> {
    if timeline.tokens == 0 {
        return Err(AnnotationError::Invalid("zero-length timeline".into()));
    }
    let mut d = vec![0.0f64; timeline.tokens];
    for &(s, e) in &ann.repetitions {
        let center_frames = (f64::from(s) + f64::from(e)) / 2.0;
        let center_tokens = center_frames / timeline.frames_per_token;
        if !(0.0..timeline.tokens as f64).contains(&center_tokens) {
            return Err(AnnotationError::CenterOutOfRange {
                center: center_tokens,
                tokens: timeline.tokens,
            });
        }
        let mu = timeline.token_coordinate(center_frames);
        let width = match sigma {
            SigmaMode::Fixed { sigma } => sigma,
            SigmaMode::Variable { scale } => scale * f64::from(e - s) / timeline.frames_per_token,
        };
        for (dv, kv) in d.iter_mut().zip(unit_kernel(mu, width.max(0.0), timeline.tokens)) {
            *dv += kv;
        }
    }
    Ok(DensityMap {
        values: d.into_iter().map(|v| v as f32).collect(),
        frames_per_token: timeline.frames_per_token,
    })
}

/// Builds a map directly from token-coordinate centres (tests and tooling).
pub fn density_from_centers(centers: &[f64], tokens: usize, sigma: f64) -> Vec<f64> {
    let mut d = vec![0.0; tokens];
    for &mu in centers {
        for (dv, kv) in d.iter_mut().zip(unit_kernel(mu, sigma, tokens)) {
            *dv += kv;
        }
    }
    d
}
