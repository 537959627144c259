//! End-to-end helpers shared by the CLI, benches, and acceptance tests.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusItem};
use crate::features::{synth_sequence, FeatureError, SyntheticSpec};
use crate::training::{LossReport, StepRecord, TrainError, Trainer};

/// A synthetic train/test corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub video: SyntheticSpec,
    pub classes: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            video: SyntheticSpec::default(),
            classes: 4,
            train_videos: 200,
            test_videos: 50,
            seed: 0,
        }
    }
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl CorpusSpec {
    /// Generates `n` videos for `split`; classes cycle, motifs are shared across splits.
    pub fn generate(&self, split: &str, n: usize) -> Result<Corpus, FeatureError> {
        let split_key = split.bytes().fold(0u64, |h, b| mix(h, u64::from(b)));
        let items = (0..n)
            .map(|i| {
                let spec = SyntheticSpec {
                    class: i % self.classes.max(1),
                    motif_seed: self.seed,
                    seed: mix(mix(self.seed, split_key), i as u64),
                    ..self.video.clone()
                };
                let (features, annotation) = synth_sequence(&spec, &format!("{split}_{i:04}"))?;
                Ok(CorpusItem { features, annotation })
            })
            .collect::<Result<Vec<_>, FeatureError>>()?;
        Ok(Corpus::new(items))
    }

    pub fn splits(&self) -> Result<(Corpus, Corpus), FeatureError> {
        Ok((self.generate("train", self.train_videos)?, self.generate("test", self.test_videos)?))
    }
}

/// Trains until `trainer.config.epochs`, reporting steps and finished epochs.
pub fn fit(
    trainer: &mut Trainer,
    corpus: &Corpus,
    mut on_step: impl FnMut(&StepRecord),
    mut on_epoch: impl FnMut(&Trainer, &LossReport) -> Result<(), TrainError>,
) -> Result<Vec<LossReport>, TrainError> {
    let mut history = Vec::new();
    while trainer.state.epoch < trainer.config.epochs {
        let report = trainer.train_epoch(corpus, &mut on_step)?;
        on_epoch(trainer, &report)?;
        history.push(report);
    }
    Ok(history)
}
