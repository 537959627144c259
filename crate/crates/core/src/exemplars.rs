//! Exemplar selection for training and inference.

use log::warn;
use rand::seq::{IndexedRandom, IteratorRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClassIndex, CorpusItem};
use crate::features::{extract_exemplar, ExemplarLatent, ExemplarOrigin, FeatureError};

#[derive(Debug, thiserror::Error)]
pub enum ExemplarError {
    #[error("video {video} has no annotated repetitions and no same-class donor exists")]
    NoSource { video: String },
    #[error("video {video} has {available} annotated repetitions, {requested} requested")]
    Insufficient {
        video: String,
        available: usize,
        requested: usize,
    },
    #[error("shot set is empty")]
    EmptyShotSet,
    #[error("cross-video probability {0} outside [0, 1]")]
    Probability(f64),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Whether the same-vs-other-video coin is flipped per exemplar or per instance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossVideoMode {
    #[default]
    PerExemplar,
    PerInstance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExemplarPolicy {
    /// Allowed `|S|` values, drawn uniformly.
    pub shot_set: Vec<usize>,
    /// Probability of drawing an exemplar from another same-class video.
    pub p_cross_video: f64,
    pub mode: CrossVideoMode,
    /// Temporal tokens sampled per exemplar.
    pub budget: usize,
}

impl Default for ExemplarPolicy {
    fn default() -> Self {
        Self {
            shot_set: vec![0, 1, 2],
            p_cross_video: 0.4,
            mode: CrossVideoMode::PerExemplar,
            budget: 4,
        }
    }
}

impl ExemplarPolicy {
    pub fn validate(&self) -> Result<(), ExemplarError> {
        if self.shot_set.is_empty() {
            return Err(ExemplarError::EmptyShotSet);
        }
        if !(0.0..=1.0).contains(&self.p_cross_video) {
            return Err(ExemplarError::Probability(self.p_cross_video));
        }
        Ok(())
    }
}

/// Query plus the exemplars it is trained against.
#[derive(Clone, Debug)]
pub struct TrainingInstance {
    pub query: usize,
    pub exemplars: Vec<ExemplarLatent>,
    pub uses_z0: bool,
}

fn pick_repetition<R: Rng + ?Sized>(
    item: &CorpusItem,
    origin: ExemplarOrigin,
    budget: usize,
    rng: &mut R,
) -> Result<ExemplarLatent, ExemplarError> {
    let &interval = item
        .annotation
        .repetitions
        .choose(rng)
        .ok_or_else(|| ExemplarError::NoSource {
            video: item.annotation.video_id.clone(),
        })?;
    Ok(extract_exemplar(&item.features, interval, budget, origin)?)
}

/// Draws `|S|` and then each exemplar's source video and repetition.
pub fn sample_exemplars<R: Rng + ?Sized>(
    policy: &ExemplarPolicy,
    query: usize,
    items: &[CorpusItem],
    index: &ClassIndex,
    rng: &mut R,
) -> Result<TrainingInstance, ExemplarError> {
    policy.validate()?;
    let shots = *policy.shot_set.choose(rng).expect("validated non-empty");
    if shots == 0 {
        return Ok(TrainingInstance {
            query,
            exemplars: Vec::new(),
            uses_z0: true,
        });
    }
    let item = &items[query];
    let donors = index.donors(&item.annotation.class_label, Some(query));
    let own = !item.annotation.repetitions.is_empty();
    if !own && donors.is_empty() {
        return Err(ExemplarError::NoSource {
            video: item.annotation.video_id.clone(),
        });
    }
    let instance_coin = rng.random_bool(policy.p_cross_video);
    let mut exemplars = Vec::with_capacity(shots);
    for _ in 0..shots {
        let cross = match policy.mode {
            CrossVideoMode::PerExemplar => rng.random_bool(policy.p_cross_video),
            CrossVideoMode::PerInstance => instance_coin,
        };
        let use_donor = if cross && donors.is_empty() {
            warn!(
                "no same-class donor for {}; sampling exemplar from the query video",
                item.annotation.video_id
            );
            false
        } else {
            cross || !own
        };
        let ex = if use_donor {
            let &d = donors.choose(rng).expect("donors checked non-empty");
            pick_repetition(&items[d], ExemplarOrigin::OtherVideo, policy.budget, rng)?
        } else {
            pick_repetition(item, ExemplarOrigin::SameVideo, policy.budget, rng)?
        };
        exemplars.push(ex);
    }
    Ok(TrainingInstance {
        query,
        exemplars,
        uses_z0: false,
    })
}

/// Where inference-time exemplars come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceSource {
    #[default]
    TestVideo,
    TrainClassDonor,
}

/// `k` exemplars for evaluation; `k = 0` is zero-shot and returns nothing.
///
/// Same-video exemplars use `k` distinct repetitions of the query.
pub fn exemplars_for_inference<R: Rng + ?Sized>(
    k: usize,
    source: InferenceSource,
    query: &CorpusItem,
    donors: &[CorpusItem],
    budget: usize,
    rng: &mut R,
) -> Result<Vec<ExemplarLatent>, ExemplarError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    match source {
        InferenceSource::TestVideo => {
            let reps = &query.annotation.repetitions;
            if reps.len() < k {
                return Err(ExemplarError::Insufficient {
                    video: query.annotation.video_id.clone(),
                    available: reps.len(),
                    requested: k,
                });
            }
            let mut chosen = (0..reps.len()).choose_multiple(rng, k);
            chosen.sort_unstable();
            chosen
                .into_iter()
                .map(|i| Ok(extract_exemplar(&query.features, reps[i], budget, ExemplarOrigin::SameVideo)?))
                .collect()
        }
        InferenceSource::TrainClassDonor => {
            let pool: Vec<&CorpusItem> = donors
                .iter()
                .filter(|d| {
                    d.annotation.class_label == query.annotation.class_label && !d.annotation.repetitions.is_empty()
                })
                .collect();
            if pool.is_empty() {
                return Err(ExemplarError::NoSource {
                    video: query.annotation.video_id.clone(),
                });
            }
            (0..k)
                .map(|_| {
                    let d = pool.choose(rng).expect("non-empty pool");
                    pick_repetition(d, ExemplarOrigin::OtherVideo, budget, rng)
                })
                .collect()
        }
    }
}
