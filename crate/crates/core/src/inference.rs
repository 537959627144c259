//! Counting with time-shift ensembling, split evaluation, and the prediction dump.

use std::io::{BufRead, Write};

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::decoder::{Decoder, DecoderError};
use crate::exemplars::{exemplars_for_inference, ExemplarError, InferenceSource};
use crate::features::{ExemplarLatent, FeatureSequence};
use crate::metrics::{compute_metrics, round_count, CountPair, MetricReport, MetricsError};

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Exemplar(#[from] ExemplarError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("shift count must be at least 1")]
    NoShifts,
    #[error("empty evaluation corpus")]
    EmptyCorpus,
    #[error("prediction dump: {0}")]
    Dump(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountPrediction {
    /// Ensembled map over the full sequence.
    pub density: Vec<f32>,
    pub raw_count: f64,
    pub rounded_count: u32,
    /// `(token offset, map)` per shift, each map starting at its offset.
    pub shifts: Vec<(usize, Vec<f32>)>,
}

/// Token offsets for `K` shifts of `k·fpw/K` frames.
pub fn shift_offsets(seq: &FeatureSequence, shifts: usize) -> Vec<usize> {
    let fpt = seq.frames_per_temporal_token();
    let fpw = f64::from(seq.frames_per_window);
    (0..shifts)
        .map(|k| ((k as f64 * fpw / shifts as f64) / fpt).floor() as usize)
        .collect()
}

/// Runs one pass per offset and averages each bin over the passes covering it.
pub fn predict_with_offsets(
    decoder: &Decoder,
    seq: &FeatureSequence,
    exemplars: &[ExemplarLatent],
    offsets: &[usize],
) -> Result<CountPrediction, InferenceError> {
    if offsets.is_empty() {
        return Err(InferenceError::NoShifts);
    }
    let t = seq.grid.t;
    let mut sum = vec![0.0f64; t];
    let mut cover = vec![0u32; t];
    let mut shifts = Vec::with_capacity(offsets.len());
    for &off in offsets {
        let view = if off == 0 { seq.clone() } else { seq.drop_front(off).map_err(DecoderError::from)? };
        let d = decoder.density(&view, exemplars)?;
        for (i, &v) in d.iter().enumerate() {
            sum[off + i] += f64::from(v);
            cover[off + i] += 1;
        }
        shifts.push((off, d));
    }
    let density: Vec<f32> = sum
        .iter()
        .zip(&cover)
        .map(|(&s, &c)| (s / f64::from(c.max(1))) as f32)
        .collect();
    let raw_count: f64 = density.iter().map(|&x| f64::from(x)).sum();
    Ok(CountPrediction {
        rounded_count: round_count(raw_count),
        density,
        raw_count,
        shifts,
    })
}

/// `K`-shift prediction; falls back to one pass when a shifted view would be
/// shorter than one window.
pub fn predict(
    decoder: &Decoder,
    seq: &FeatureSequence,
    exemplars: &[ExemplarLatent],
    shifts: usize,
) -> Result<CountPrediction, InferenceError> {
    if shifts == 0 {
        return Err(InferenceError::NoShifts);
    }
    let mut offsets = shift_offsets(seq, shifts);
    let window = seq.temporal_tokens_per_window();
    if offsets.iter().any(|&o| seq.grid.t < o + window) {
        warn!("{}: too short for {shifts} shifts, using a single pass", seq.source_id);
        offsets = vec![0];
    }
    predict_with_offsets(decoder, seq, exemplars, &offsets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// `|K|`
    pub shifts: usize,
    /// Exemplars per query; 0 is zero-shot.
    pub shots: usize,
    pub source: InferenceSource,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            shifts: 4,
            shots: 0,
            source: InferenceSource::TestVideo,
            seed: 0,
        }
    }
}

/// One record of the prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub video_id: String,
    pub raw_count: f64,
    pub rounded_count: u32,
    pub density: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub predictions: Vec<VideoPrediction>,
    pub pairs: Vec<CountPair>,
    pub report: MetricReport,
    /// Videos that ran without exemplars.
    pub zero_shot: usize,
}

/// Predicts every video of `corpus` and scores the counts.
///
/// `donors` supplies same-class exemplars for [`InferenceSource::TrainClassDonor`].
pub fn evaluate_split(
    decoder: &Decoder,
    corpus: &Corpus,
    donors: Option<&Corpus>,
    cfg: &EvalConfig,
) -> Result<EvalResult, InferenceError> {
    if corpus.is_empty() {
        return Err(InferenceError::EmptyCorpus);
    }
    let budget = decoder.config.tokens_per_window;
    let donor_items = donors.map_or(&[][..], |d| &d.items[..]);
    let results: Vec<Result<(VideoPrediction, CountPair, bool), InferenceError>> = corpus
        .items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let ex = exemplars_for_inference(cfg.shots, cfg.source, item, donor_items, budget, &mut rng)?;
            let p = predict(decoder, &item.features, &ex, cfg.shifts)?;
            Ok((
                VideoPrediction {
                    video_id: item.annotation.video_id.clone(),
                    raw_count: p.raw_count,
                    rounded_count: p.rounded_count,
                    density: p.density,
                },
                CountPair::new(item.annotation.count, p.raw_count),
                ex.is_empty(),
            ))
        })
        .collect();
    let mut predictions = Vec::with_capacity(results.len());
    let mut pairs = Vec::with_capacity(results.len());
    let mut zero_shot = 0;
    for r in results {
        let (p, pair, z) = r?;
        predictions.push(p);
        pairs.push(pair);
        zero_shot += usize::from(z);
    }
    let report = compute_metrics(&pairs)?;
    Ok(EvalResult { predictions, pairs, report, zero_shot })
}

/// Newline-delimited JSON, one record per video.
pub fn write_predictions<W: Write>(out: &mut W, predictions: &[VideoPrediction]) -> std::io::Result<()> {
    for p in predictions {
        serde_json::to_writer(&mut *out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(input: R) -> Result<Vec<VideoPrediction>, InferenceError> {
    input
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(n, l)| {
            let l = l.map_err(|e| InferenceError::Dump(e.to_string()))?;
            serde_json::from_str(&l).map_err(|e| InferenceError::Dump(format!("line {}: {e}", n + 1)))
        })
        .collect()
}
