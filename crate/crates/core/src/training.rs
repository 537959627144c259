//! Objective, AdamW, and the epoch loop.
//!
//! Instances are sampled sequentially from a per-epoch RNG stream, so an
//! epoch is reproducible from `(seed, epoch)` alone and resuming from a
//! checkpoint replays exactly. Gradients inside an accumulation group are
//! computed in parallel and reduced in instance order.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{make_density_map, AnnotationError, RepetitionAnnotation, SigmaMode, Timeline};
use crate::corpus::{ClassIndex, Corpus};
use crate::decoder::{forward, prepare_exemplar, prepare_video, Checkpoint, Decoder, DecoderError, DecoderParams, TrainState};
use crate::exemplars::{sample_exemplars, ExemplarError, ExemplarPolicy};
use crate::features::{ExemplarLatent, FeatureError, FeatureSequence};
use crate::numerics::{NumericsError, Real, Tape, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Exemplar(#[from] ExemplarError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("non-finite loss at epoch {epoch}, step {step}, video {video}: {detail}")]
    NonFinite {
        epoch: usize,
        step: u64,
        video: String,
        detail: String,
    },
    #[error("training config: {0}")]
    Config(String),
    #[error("empty training corpus")]
    EmptyCorpus,
}

/// Which terms enter the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    pub mse: bool,
    pub mae: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Self { mse: true, mae: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Multiplicative decay applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub weight_decay: f64,
    /// Instances per optimizer update.
    pub accumulation: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub exemplars: ExemplarPolicy,
    pub sigma: SigmaMode,
    pub time_shift: bool,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 5e-5,
            lr_decay: 0.8,
            decay_every: 60,
            weight_decay: 5e-2,
            accumulation: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            exemplars: ExemplarPolicy::default(),
            sigma: SigmaMode::default(),
            time_shift: true,
            objective: Objective::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Short schedule for the small synthetic corpus.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            decay_every: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if self.decay_every == 0 || self.accumulation == 0 {
            return bad("decay_every and accumulation must be positive");
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("weight decay and betas out of range");
        }
        if !(self.objective.mse || self.objective.mae) {
            return bad("objective has no terms");
        }
        self.exemplars.validate()?;
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    pub mae: f64,
    pub total: f64,
}

impl LossReport {
    fn new(mse: f64, mae: f64) -> Self {
        Self { mse, mae, total: mse + mae }
    }
}

/// `MSE = ‖d − d̃‖²/T′`, `MAE = |c − Σd̃| / max(c, 1)`.
pub fn loss(d: &[f32], d_pred: &[f32], count: u32) -> Result<LossReport, TrainError> {
    if d.len() != d_pred.len() || d.is_empty() {
        return Err(TrainError::Config(format!("density lengths {} and {}", d.len(), d_pred.len())));
    }
    let mse = d
        .iter()
        .zip(d_pred)
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum::<f64>()
        / d.len() as f64;
    let sum: f64 = d_pred.iter().map(|&x| f64::from(x)).sum();
    let mae = (f64::from(count) - sum).abs() / f64::from(count.max(1));
    Ok(LossReport::new(mse, mae))
}

/// The objective on a tape. Returns `(total, mse, mae)`.
pub fn loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &[f32],
    count: u32,
    objective: Objective,
) -> Result<(Var, Var, Var), TrainError> {
    let n = target.len();
    if tape.shape(pred) != [n] {
        return Err(TrainError::Config(format!("prediction shape {:?} vs target {n}", tape.shape(pred))));
    }
    let tgt = tape.constant(Tensor::new(vec![n], target.iter().map(|&x| T::of(f64::from(x))).collect())?);
    let diff = tape.sub(pred, tgt)?;
    let sq = tape.square(diff)?;
    let sq = tape.sum_all(sq)?;
    let mse = tape.scale(sq, T::of(1.0 / n as f64))?;
    let total_pred = tape.sum_all(pred)?;
    let off = tape.add_scalar(total_pred, T::of(-f64::from(count)))?;
    let off = tape.abs(off)?;
    let mae = tape.scale(off, T::of(1.0 / f64::from(count.max(1))))?;
    let total = match (objective.mse, objective.mae) {
        (true, true) => tape.add(mse, mae)?,
        (true, false) => mse,
        (false, true) => mae,
        (false, false) => return Err(TrainError::Config("objective has no terms".into())),
    };
    Ok((total, mse, mae))
}

/// Drops the leading `⌊ε/fpt⌋` temporal tokens and moves the annotation with them.
pub fn time_shift_train(
    seq: &FeatureSequence,
    ann: &RepetitionAnnotation,
    epsilon_frames: u32,
) -> Result<(FeatureSequence, RepetitionAnnotation), TrainError> {
    let fpt = seq.frames_per_temporal_token();
    let tokens = ((f64::from(epsilon_frames) / fpt).floor() as usize).min(seq.grid.t - 1);
    if tokens == 0 {
        return Ok((seq.clone(), ann.clone()));
    }
    let shifted = seq.drop_front(tokens)?;
    let frames = (tokens as f64 * fpt).round() as u32;
    Ok((shifted.clone(), ann.shift_earlier(frames, shifted.raw_frames)))
}

/// One fully prepared training sample.
#[derive(Clone, Debug)]
pub struct Instance {
    pub video_id: String,
    pub sequence: FeatureSequence,
    pub exemplars: Vec<ExemplarLatent>,
    pub target: Vec<f32>,
    pub count: u32,
}

impl Instance {
    pub fn new(
        sequence: FeatureSequence,
        annotation: &RepetitionAnnotation,
        exemplars: Vec<ExemplarLatent>,
        sigma: SigmaMode,
    ) -> Result<Self, TrainError> {
        let timeline = Timeline::new(sequence.grid.t, sequence.frames_per_temporal_token());
        let target = make_density_map(annotation, timeline, sigma)?.values;
        Ok(Self {
            video_id: annotation.video_id.clone(),
            sequence,
            exemplars,
            target,
            count: annotation.count,
        })
    }
}

/// Loss and per-parameter gradients for one instance.
pub fn instance_gradients(
    decoder: &Decoder,
    inst: &Instance,
    objective: Objective,
) -> Result<(LossReport, Vec<Tensor<f32>>), TrainError> {
    let cfg = &decoder.config;
    let mut tape = Tape::<f32>::new();
    let p = decoder.params.bind(&mut tape);
    let video = tape.constant(prepare_video(cfg, &inst.sequence)?);
    let ex = inst
        .exemplars
        .iter()
        .map(|e| Ok(tape.constant(prepare_exemplar(cfg, e)?)))
        .collect::<Result<Vec<_>, DecoderError>>()?;
    let pred = forward(&mut tape, cfg, &p, video, inst.sequence.grid, &ex)?;
    let (total, mse, mae) = loss_on_tape(&mut tape, pred, &inst.target, inst.count, objective)?;
    let grads = tape.backward(total)?;
    let report = LossReport::new(
        if objective.mse { f64::from(tape.value(mse).data()[0]) } else { 0.0 },
        if objective.mae { f64::from(tape.value(mae).data()[0]) } else { 0.0 },
    );
    let g = p.vars().iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
    Ok((report, g))
}

/// Mean loss and mean gradient over `instances`, reduced in order.
pub fn accumulate_gradients(
    decoder: &Decoder,
    instances: &[Instance],
    objective: Objective,
) -> Result<(LossReport, Vec<Tensor<f32>>), TrainError> {
    if instances.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let results: Vec<Result<(LossReport, Vec<Tensor<f32>>), TrainError>> = instances
        .par_iter()
        .map(|inst| instance_gradients(decoder, inst, objective))
        .collect();
    let scale = 1.0 / instances.len() as f32;
    let mut sum: Option<Vec<Tensor<f32>>> = None;
    let (mut mse, mut mae) = (0.0, 0.0);
    for r in results {
        let (rep, g) = r?;
        mse += rep.mse;
        mae += rep.mae;
        match &mut sum {
            None => sum = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.add_assign(b);
                }
            }
        }
    }
    let grads = sum
        .expect("non-empty")
        .into_iter()
        .map(|t| t.map(|x| x * scale))
        .collect();
    let n = instances.len() as f64;
    Ok((LossReport::new(mse / n, mae / n), grads))
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &DecoderParams<f32>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor<f32>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut DecoderParams<f32>, grads: &[Tensor<f32>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let step = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (((pi, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(md.iter_mut()).zip(vd.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi = *pi * decay - step * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub mse: f64,
    pub mae: f64,
    pub lr: f64,
}

pub struct Trainer {
    pub decoder: Decoder,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(decoder: Decoder, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let optimizer = AdamW::new(&decoder.params, &config);
        let state = TrainState { epoch: 0, step: 0, seed: config.seed };
        Ok(Self { decoder, config, optimizer, state })
    }

    /// Continues from a checkpoint, restoring optimizer moments when present.
    pub fn resume(ck: Checkpoint, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let decoder = Decoder::from_parts(ck.config, ck.params)?;
        let mut optimizer = AdamW::new(&decoder.params, &config);
        if let Some((m, v)) = ck.moments {
            optimizer.m = m;
            optimizer.v = v;
        }
        optimizer.t = ck.state.step;
        let state = TrainState { seed: config.seed, ..ck.state };
        Ok(Self { decoder, config, optimizer, state })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.decoder.config.clone(),
            state: self.state.clone(),
            params: self.decoder.params.clone(),
            moments: Some((self.optimizer.m.clone(), self.optimizer.v.clone())),
        }
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        rng
    }

    /// Samples shift and exemplars for one query.
    fn make_instance<R: Rng>(
        &self,
        corpus: &Corpus,
        index: &ClassIndex,
        query: usize,
        rng: &mut R,
    ) -> Result<Instance, TrainError> {
        let item = &corpus.items[query];
        let sampled = sample_exemplars(&self.config.exemplars, query, &corpus.items, index, rng)?;
        let (seq, ann) = if self.config.time_shift {
            let eps = rng.random_range(0..item.features.frames_per_window);
            time_shift_train(&item.features, &item.annotation, eps)?
        } else {
            (item.features.clone(), item.annotation.clone())
        };
        Instance::new(seq, &ann, sampled.exemplars, self.config.sigma)
    }

    /// Runs one epoch; `log` receives one record per optimizer update.
    pub fn train_epoch(
        &mut self,
        corpus: &Corpus,
        log: &mut dyn FnMut(&StepRecord),
    ) -> Result<LossReport, TrainError> {
        if corpus.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let epoch = self.state.epoch;
        let lr = self.config.lr_at(epoch);
        let index = corpus.class_index();
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        let (mut mse, mut mae) = (0.0, 0.0);
        for group in order.chunks(self.config.accumulation) {
            let instances = group
                .iter()
                .map(|&q| self.make_instance(corpus, &index, q, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            let (rep, grads) = accumulate_gradients(&self.decoder, &instances, self.config.objective)
                .map_err(|e| self.non_finite(e, &instances))?;
            if !rep.total.is_finite() || !grads.iter().all(Tensor::is_finite) {
                return Err(self.non_finite(
                    TrainError::Config("non-finite gradient".into()),
                    &instances,
                ));
            }
            self.optimizer.step(&mut self.decoder.params, &grads, lr);
            self.state.step += 1;
            mse += rep.mse * group.len() as f64;
            mae += rep.mae * group.len() as f64;
            log(&StepRecord { epoch, step: self.state.step, mse: rep.mse, mae: rep.mae, lr });
        }
        self.state.epoch += 1;
        let n = corpus.len() as f64;
        Ok(LossReport::new(mse / n, mae / n))
    }

    fn non_finite(&self, err: TrainError, instances: &[Instance]) -> TrainError {
        let numeric = matches!(
            &err,
            TrainError::Numerics(NumericsError::NonFinite { .. })
                | TrainError::Decoder(DecoderError::Numerics(NumericsError::NonFinite { .. }))
                | TrainError::Config(_)
        );
        if !numeric {
            return err;
        }
        // the last instance that still yields a finite loss is not the culprit
        let culprit = instances
            .iter()
            .find(|inst| instance_gradients(&self.decoder, inst, self.config.objective).is_err())
            .or(instances.last())
            .map(|i| i.video_id.clone())
            .unwrap_or_default();
        TrainError::NonFinite {
            epoch: self.state.epoch,
            step: self.state.step,
            video: culprit,
            detail: err.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::features::Grid;
    use rand_distr::{Distribution, Normal};

    fn tiny() -> DecoderConfig {
        DecoderConfig {
            channels: 8,
            heads: 2,
            ca_blocks: 1,
            wsa_blocks: 1,
            mlp_ratio: 2,
            ..DecoderConfig::desk()
        }
    }

    fn toy_instance(seed: u64, tokens_t: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::new(tokens_t, 2, 2);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let data = (0..grid.tokens() * 8).map(|_| normal.sample(&mut rng)).collect();
        let seq = FeatureSequence::new(
            Tensor::new(vec![grid.tokens(), 8], data).unwrap(),
            grid,
            (tokens_t * 16) as u32,
            64,
            format!("toy{seed}"),
        )
        .unwrap();
        let ann = RepetitionAnnotation {
            video_id: format!("toy{seed}"),
            class_label: "c".into(),
            fps: 30.0,
            count: 2,
            repetitions: vec![(0, 48), (64, 112)],
            is_pseudo: false,
        };
        Instance::new(seq, &ann, Vec::new(), SigmaMode::default()).unwrap()
    }

    #[test]
    fn loss_hand_fixture() {
        let r = loss(&[0.0; 4], &[0.5; 4], 0).unwrap();
        assert_eq!((r.mse, r.mae, r.total), (0.25, 2.0, 2.25));
        let d = [0.25, 0.75, 1.0, 0.0];
        let r = loss(&d, &d, 2).unwrap();
        assert_eq!(r.total, 0.0);
        assert!(loss(&d, &d[..3], 2).is_err());
    }

    #[test]
    fn tape_loss_matches_and_mae_gradient_is_signed_constant() {
        for (count, pred, sign) in [(3u32, [0.5f32, 0.5, 0.5, 0.5], -1.0f32), (1, [1.0, 0.5, 0.5, 0.5], 1.0)] {
            let target = [0.25f32; 4];
            let mut tape = Tape::<f32>::new();
            let x = tape.param(Tensor::new(vec![4], pred.to_vec()).unwrap());
            let (_, _, mae) = loss_on_tape(&mut tape, x, &target, count, Objective::default()).unwrap();
            let g = tape.backward(mae).unwrap();
            for &gi in g.get(x).unwrap().data() {
                assert!((gi - sign / count.max(1) as f32).abs() < 1e-7);
            }
            let (total, _, _) = loss_on_tape(&mut tape, x, &target, count, Objective::default()).unwrap();
            let host = loss(&target, &pred, count).unwrap();
            assert!((f64::from(tape.value(total).data()[0]) - host.total).abs() < 1e-6);
        }
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 5e-5);
        assert_eq!(cfg.lr_at(59), 5e-5);
        assert!((cfg.lr_at(60) - 5e-5 * 0.8).abs() < 1e-20);
        assert!((cfg.lr_at(120) - 5e-5 * 0.64).abs() < 1e-18);
        assert_eq!(cfg.accumulation, 8);
        assert_eq!(cfg.weight_decay, 5e-2);
    }

    #[test]
    fn zero_lr_keeps_params_bit_exact() {
        let dec = Decoder::new(tiny(), 1).unwrap();
        let before = dec.params.clone();
        let mut params = dec.params.clone();
        let cfg = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        let mut opt = AdamW::new(&params, &cfg);
        let (_, g) = instance_gradients(&dec, &toy_instance(0, 8), Objective::default()).unwrap();
        opt.step(&mut params, &g, 0.0);
        assert_eq!(params, before);
        assert!(opt.m.iter().any(|m| m.data().iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let dec = Decoder::new(tiny(), 1).unwrap();
        let mut params = dec.params.clone();
        let cfg = TrainConfig::default();
        let mut opt = AdamW::new(&params, &cfg);
        let zeros: Vec<_> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let lr = 1e-2;
        opt.step(&mut params, &zeros, lr);
        let factor = (1.0 - lr * cfg.weight_decay) as f32;
        for (a, b) in params.tensors().iter().zip(dec.params.tensors()) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                assert_eq!(x, y * factor);
            }
        }
    }

    #[test]
    fn accumulation_equals_joint_batch() {
        let dec = Decoder::new(tiny(), 2).unwrap();
        let insts: Vec<Instance> = (0..8).map(|s| toy_instance(s, 8)).collect();
        let (_, acc) = accumulate_gradients(&dec, &insts, Objective::default()).unwrap();

        let cfg = &dec.config;
        let mut tape = Tape::<f32>::new();
        let p = dec.params.bind(&mut tape);
        let mut losses = Vec::new();
        for inst in &insts {
            let video = tape.constant(prepare_video(cfg, &inst.sequence).unwrap());
            let pred = forward(&mut tape, cfg, &p, video, inst.sequence.grid, &[]).unwrap();
            losses.push(loss_on_tape(&mut tape, pred, &inst.target, inst.count, Objective::default()).unwrap().0);
        }
        let mean = tape.mean(&losses).unwrap();
        let g = tape.backward(mean).unwrap();
        for (&v, a) in p.vars().iter().zip(&acc) {
            let b = g.get_or_zeros(&tape, v);
            assert!(a.max_abs_diff(&b) < 1e-5);
        }
    }

    #[test]
    fn overfits_single_instance() {
        let dec = Decoder::new(tiny(), 3).unwrap();
        let inst = toy_instance(9, 8);
        let cfg = TrainConfig { lr: 5e-4, weight_decay: 0.0, ..TrainConfig::default() };
        let mut params = dec.params.clone();
        let mut opt = AdamW::new(&params, &cfg);
        let mut losses = Vec::new();
        for _ in 0..50 {
            let d = Decoder { config: dec.config.clone(), params: params.clone() };
            let (rep, g) = instance_gradients(&d, &inst, Objective::default()).unwrap();
            losses.push(rep.total);
            opt.step(&mut params, &g, cfg.lr);
        }
        let non_increasing = losses.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(non_increasing * 10 >= 9 * (losses.len() - 1), "{losses:?}");
        assert!(losses[49] < 0.5 * losses[0], "{losses:?}");
    }

    #[test]
    fn time_shift_by_one_token_moves_map_one_bin() {
        let inst = toy_instance(1, 8);
        let ann = RepetitionAnnotation {
            video_id: "toy1".into(),
            class_label: "c".into(),
            fps: 30.0,
            count: 2,
            repetitions: vec![(48, 80), (80, 112)],
            is_pseudo: false,
        };
        let sigma = SigmaMode::Fixed { sigma: 0.3 };
        let (same, a0) = time_shift_train(&inst.sequence, &ann, 0).unwrap();
        assert_eq!(same, inst.sequence);
        assert_eq!(a0, ann);
        let (s1, a1) = time_shift_train(&inst.sequence, &ann, 16).unwrap();
        assert_eq!(s1.grid.t, 7);
        assert_eq!(a1.count, 2);
        let before = Instance::new(inst.sequence.clone(), &ann, vec![], sigma).unwrap();
        let after = Instance::new(s1, &a1, vec![], sigma).unwrap();
        for t in 0..7 {
            assert!((before.target[t + 1] - after.target[t]).abs() < 1e-6);
        }
    }

    #[test]
    fn epoch_is_deterministic_and_logs() {
        let insts: Vec<_> = (0..5).map(|s| toy_instance(s, 8)).collect();
        let corpus = Corpus::new(
            insts
                .iter()
                .map(|i| crate::corpus::CorpusItem {
                    features: i.sequence.clone(),
                    annotation: RepetitionAnnotation {
                        video_id: i.video_id.clone(),
                        class_label: "c".into(),
                        fps: 30.0,
                        count: 2,
                        repetitions: vec![(0, 48), (64, 112)],
                        is_pseudo: false,
                    },
                })
                .collect(),
        );
        let run = || {
            let dec = Decoder::new(tiny(), 4).unwrap();
            let mut tr = Trainer::new(dec, TrainConfig { accumulation: 2, ..TrainConfig::desk() }).unwrap();
            let mut records = Vec::new();
            tr.train_epoch(&corpus, &mut |r| records.push(r.clone())).unwrap();
            (tr.decoder.params, records)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.len(), 3);
        assert_eq!(ra[2].step, 3);
    }
}
