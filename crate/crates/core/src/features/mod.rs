//! Encoded video latents and their on-disk container.

mod escf;
mod synth;

pub use escf::{load_features, read_features, save_features, write_features, ESCF_MAGIC, ESCF_VERSION};
pub use synth::{synth_sequence, Motif, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}, expected \"ESCF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported ESCF version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("positional encoding needs an even channel count, got {0}")]
    OddChannels(usize),
    #[error("invalid interval [{start}, {end}) for a {frames}-frame sequence")]
    Interval { start: u32, end: u32, frames: u32 },
    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Token grid `(T′, H′, W′)`; `t` counts temporal tokens across the whole sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn tokens(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }
}

/// Encoded video `z_v`: `M = T′·H′·W′` tokens of `C` channels, temporal-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub tokens: Tensor<f32>,
    pub grid: Grid,
    pub raw_frames: u32,
    pub frames_per_window: u32,
    pub source_id: String,
}

impl FeatureSequence {
    pub fn new(
        tokens: Tensor<f32>,
        grid: Grid,
        raw_frames: u32,
        frames_per_window: u32,
        source_id: impl Into<String>,
    ) -> Result<Self, FeatureError> {
        let (m, _) = tokens.dims2()?;
        if m != grid.tokens() || grid.t == 0 {
            return Err(FeatureError::DimMismatch(format!(
                "{m} tokens for grid {grid:?}"
            )));
        }
        if raw_frames == 0 || frames_per_window == 0 {
            return Err(FeatureError::DimMismatch("zero frame counts".into()));
        }
        Ok(Self {
            tokens,
            grid,
            raw_frames,
            frames_per_window,
            source_id: source_id.into(),
        })
    }

    pub fn channels(&self) -> usize {
        self.tokens.last_dim()
    }

    pub fn frames_per_temporal_token(&self) -> f64 {
        f64::from(self.raw_frames) / self.grid.t as f64
    }

    /// Temporal tokens produced by one encoder window.
    pub fn temporal_tokens_per_window(&self) -> usize {
        (f64::from(self.frames_per_window) / self.frames_per_temporal_token()).round() as usize
    }

    /// `floor(frame / frames_per_temporal_token)` clamped to the last token.
    pub fn frame_to_token(&self, frame: u32) -> Option<usize> {
        crate::annotations::downsample_alignment(frame, self.raw_frames, self.grid.t)
    }

    /// Features of temporal slice `t` (`H′·W′` rows).
    pub fn temporal_slice(&self, t: usize) -> &[f32] {
        let c = self.channels();
        let s = self.grid.spatial();
        &self.tokens.data()[t * s * c..(t + 1) * s * c]
    }

    /// Drops the first `n` temporal tokens, keeping the frame rate per token.
    pub fn drop_front(&self, n: usize) -> Result<Self, FeatureError> {
        if n >= self.grid.t {
            return Err(FeatureError::DimMismatch(format!(
                "cannot drop {n} of {} temporal tokens",
                self.grid.t
            )));
        }
        let c = self.channels();
        let s = self.grid.spatial();
        let data = self.tokens.data()[n * s * c..].to_vec();
        let grid = Grid::new(self.grid.t - n, self.grid.h, self.grid.w);
        let raw = (grid.t as f64 * self.frames_per_temporal_token()).round() as u32;
        Ok(Self {
            tokens: Tensor::new(vec![grid.tokens(), c], data)?,
            grid,
            raw_frames: raw,
            frames_per_window: self.frames_per_window,
            source_id: self.source_id.clone(),
        })
    }
}

/// How sinusoidal positions are assigned to tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    /// One position per flattened token index.
    #[default]
    Flattened,
    /// Channel pairs cycle over the `t`, `h`, `w` axes.
    Factorized,
}

/// Sinusoidal table `[M, C]` for a grid.
pub fn positional_encoding(
    grid: Grid,
    channels: usize,
    mode: PositionalMode,
) -> Result<Tensor<f32>, FeatureError> {
    if channels % 2 != 0 {
        return Err(FeatureError::OddChannels(channels));
    }
    let pairs = channels / 2;
    let m = grid.tokens();
    let mut data = vec![0.0f32; m * channels];
    for pos in 0..m {
        let (t, rem) = (pos / grid.spatial(), pos % grid.spatial());
        let (h, w) = (rem / grid.w, rem % grid.w);
        for i in 0..pairs {
            let (p, rate) = match mode {
                PositionalMode::Flattened => (pos as f64, i as f64 / pairs as f64),
                PositionalMode::Factorized => {
                    let axis = i % 3;
                    let per_axis = (pairs + 2 - axis) / 3;
                    let coord = [t, h, w][axis] as f64;
                    (coord, (i / 3) as f64 / per_axis.max(1) as f64)
                }
            };
            let angle = p / 10000f64.powf(rate);
            data[pos * channels + 2 * i] = angle.sin() as f32;
            data[pos * channels + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Ok(Tensor::new(vec![m, channels], data)?)
}

/// Adds the sinusoidal table elementwise. Applying twice adds it twice.
pub fn add_positional_encoding(
    seq: &FeatureSequence,
    mode: PositionalMode,
) -> Result<FeatureSequence, FeatureError> {
    let pe = positional_encoding(seq.grid, seq.channels(), mode)?;
    let mut out = seq.clone();
    out.tokens.add_assign(&pe);
    Ok(out)
}

/// Where an exemplar came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarOrigin {
    SameVideo,
    OtherVideo,
    LearnedZ0,
}

/// Encoded single-repetition clip `z_s`, `[M_e, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarLatent {
    pub tokens: Tensor<f32>,
    pub origin: ExemplarOrigin,
    /// Source repetition in raw frames; `None` for the learned latent.
    pub interval: Option<(u32, u32)>,
    pub source_id: String,
}

/// Temporal token indices sampled uniformly across `[start, start+len)`.
///
/// Shorter spans repeat indices (nearest-index padding); longer spans stride.
pub fn exemplar_token_indices(start: usize, len: usize, budget: usize) -> Vec<usize> {
    let len = len.max(1);
    (0..budget).map(|j| start + j * len / budget).collect()
}

/// Samples `budget` temporal slices across a repetition interval.
///
/// Output is always `[budget·H′·W′, C]`.
pub fn extract_exemplar(
    seq: &FeatureSequence,
    interval: (u32, u32),
    budget: usize,
    origin: ExemplarOrigin,
) -> Result<ExemplarLatent, FeatureError> {
    let (start, end) = interval;
    if start >= end || end > seq.raw_frames {
        return Err(FeatureError::Interval {
            start,
            end,
            frames: seq.raw_frames,
        });
    }
    let fpt = seq.frames_per_temporal_token();
    let first = (f64::from(start) / fpt).floor() as usize;
    let last = ((f64::from(end) / fpt).ceil() as usize).min(seq.grid.t);
    let first = first.min(seq.grid.t - 1);
    let len = last.saturating_sub(first).max(1);
    let c = seq.channels();
    let mut data = Vec::with_capacity(budget * seq.grid.spatial() * c);
    for t in exemplar_token_indices(first, len, budget) {
        data.extend_from_slice(seq.temporal_slice(t));
    }
    Ok(ExemplarLatent {
        tokens: Tensor::new(vec![budget * seq.grid.spatial(), c], data)?,
        origin,
        interval: Some(interval),
        source_id: seq.source_id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_sequence(t: usize, h: usize, w: usize, c: usize) -> FeatureSequence {
        let grid = Grid::new(t, h, w);
        let data = (0..grid.tokens() * c).map(|i| i as f32).collect();
        let tokens = Tensor::new(vec![grid.tokens(), c], data).unwrap();
        FeatureSequence::new(tokens, grid, (t * 16) as u32, 64, "ramp").unwrap()
    }

    #[test]
    fn encoding_at_position_zero() {
        let pe = positional_encoding(Grid::new(1, 2, 2), 8, PositionalMode::Flattened).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn encoding_prefix_property() {
        let short = positional_encoding(Grid::new(2, 2, 2), 16, PositionalMode::Flattened).unwrap();
        let long = positional_encoding(Grid::new(5, 2, 2), 16, PositionalMode::Flattened).unwrap();
        assert_eq!(short.data(), &long.data()[..short.numel()]);
    }

    #[test]
    fn encoding_closed_form_c8_position1() {
        // independent table: freq_i = 10000^(-2i/8)
        let expected: Vec<f32> = (0..4)
            .flat_map(|i| {
                let f = 1.0f64 / 10000f64.powf(2.0 * i as f64 / 8.0);
                [f.sin() as f32, f.cos() as f32]
            })
            .collect();
        let pe = positional_encoding(Grid::new(1, 1, 2), 8, PositionalMode::Flattened).unwrap();
        for (a, b) in pe.row(1).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn encoding_rejects_odd_channels() {
        let seq = ramp_sequence(2, 1, 1, 3);
        assert!(matches!(
            add_positional_encoding(&seq, PositionalMode::Flattened),
            Err(FeatureError::OddChannels(3))
        ));
    }

    #[test]
    fn factorized_encoding_depends_only_on_coordinates() {
        let pe = positional_encoding(Grid::new(3, 2, 2), 12, PositionalMode::Factorized).unwrap();
        // tokens (t=1,h=0,w=0) and (t=1,h=0,w=1) share the t-axis channels 0..2
        assert_eq!(pe.row(4)[..2], pe.row(5)[..2]);
        assert_ne!(pe.row(0)[..2], pe.row(4)[..2]);
    }

    #[test]
    fn encoding_is_not_idempotent() {
        let seq = ramp_sequence(2, 1, 1, 4);
        let once = add_positional_encoding(&seq, PositionalMode::Flattened).unwrap();
        let twice = add_positional_encoding(&once, PositionalMode::Flattened).unwrap();
        assert_ne!(once.tokens, twice.tokens);
    }

    #[test]
    fn exemplar_identity_selection() {
        let seq = ramp_sequence(8, 2, 2, 4);
        // tokens 2..6 span frames [32, 96)
        let ex = extract_exemplar(&seq, (32, 96), 4, ExemplarOrigin::SameVideo).unwrap();
        let expected: Vec<f32> = (2..6).flat_map(|t| seq.temporal_slice(t).to_vec()).collect();
        assert_eq!(ex.tokens.data(), expected.as_slice());
        assert_eq!(ex.tokens.shape(), &[16, 4]);
    }

    #[test]
    fn exemplar_single_token_broadcasts() {
        let seq = ramp_sequence(8, 2, 2, 4);
        let ex = extract_exemplar(&seq, (50, 60), 4, ExemplarOrigin::SameVideo).unwrap();
        for j in 0..4 {
            assert_eq!(&ex.tokens.data()[j * 16..(j + 1) * 16], seq.temporal_slice(3));
        }
    }

    #[test]
    fn exemplar_double_length_strides_by_two() {
        let seq = ramp_sequence(12, 2, 2, 4);
        let ex = extract_exemplar(&seq, (16, 16 + 8 * 16), 4, ExemplarOrigin::SameVideo).unwrap();
        // index oracle: start 1, every other token
        let expected: Vec<f32> = [1, 3, 5, 7]
            .iter()
            .flat_map(|&t| seq.temporal_slice(t).to_vec())
            .collect();
        assert_eq!(ex.tokens.data(), expected.as_slice());
    }

    #[test]
    fn exemplar_rejects_bad_intervals() {
        let seq = ramp_sequence(4, 1, 1, 2);
        assert!(extract_exemplar(&seq, (10, 10), 4, ExemplarOrigin::SameVideo).is_err());
        assert!(extract_exemplar(&seq, (10, 65), 4, ExemplarOrigin::SameVideo).is_err());
    }

    #[test]
    fn exemplar_shape_is_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let grid = Grid::new(20, 2, 2);
        let tokens = Tensor::randn(&[grid.tokens(), 8], 1.0, &mut rng);
        let seq = FeatureSequence::new(tokens, grid, 320, 64, "r").unwrap();
        for (s, e) in [(0, 1), (0, 320), (17, 40), (100, 300)] {
            let ex = extract_exemplar(&seq, (s, e), 4, ExemplarOrigin::OtherVideo).unwrap();
            assert_eq!(ex.tokens.shape(), &[16, 8]);
        }
    }

    #[test]
    fn drop_front_keeps_rate() {
        let seq = ramp_sequence(8, 2, 2, 4);
        let cut = seq.drop_front(3).unwrap();
        assert_eq!(cut.grid.t, 5);
        assert_eq!(cut.raw_frames, 80);
        assert_eq!(cut.temporal_slice(0), seq.temporal_slice(3));
        assert_eq!(cut.frames_per_temporal_token(), 16.0);
    }
}
