//! Fixtures shared by the decoder benchmarks.

pub use escounts::features::ExemplarOrigin;
pub use escounts::training::{instance_gradients, Instance, Objective};
pub use escounts::{predict, Decoder, DecoderConfig, ExemplarLatent, FeatureSequence, SigmaMode, SyntheticSpec};

use escounts::features::{extract_exemplar, synth_sequence};

/// A seeded synthetic video of `windows` encoder windows with its first
/// repetition as exemplar, and a decoder for `cfg`.
pub struct Fixture {
    pub decoder: Decoder,
    pub instance: Instance,
}

impl Fixture {
    pub fn new(cfg: DecoderConfig, windows: usize, shots: usize) -> Self {
        let spec = SyntheticSpec {
            channels: cfg.channels,
            height: cfg.height,
            width: cfg.width,
            tokens_per_window: cfg.tokens_per_window,
            count_range: (8, 10),
            seed: 7,
            ..SyntheticSpec::default()
        };
        let (mut seq, mut ann) = synth_sequence(&spec, "bench").expect("synthetic video");
        let keep = windows * cfg.tokens_per_window;
        assert!(seq.grid.t >= keep, "fixture video has only {} tokens", seq.grid.t);
        if seq.grid.t > keep {
            seq = truncate(&seq, keep);
            ann.repetitions.retain(|&(_, e)| e < seq.raw_frames);
            ann.count = ann.repetitions.len() as u32;
        }
        let exemplars = ann
            .repetitions
            .iter()
            .take(shots)
            .map(|&r| extract_exemplar(&seq, r, cfg.tokens_per_window, ExemplarOrigin::SameVideo).expect("exemplar"))
            .collect();
        let instance = Instance::new(seq, &ann, exemplars, SigmaMode::default()).expect("instance");
        Self { decoder: Decoder::new(cfg, 0).expect("decoder"), instance }
    }

    pub fn tokens(&self) -> usize {
        self.instance.sequence.grid.tokens()
    }
}

fn truncate(seq: &FeatureSequence, t: usize) -> FeatureSequence {
    let per = seq.grid.spatial() * seq.channels();
    let data = seq.tokens.data()[..t * per].to_vec();
    let grid = escounts::Grid::new(t, seq.grid.h, seq.grid.w);
    let frames = (t as f64 * seq.frames_per_temporal_token()).round() as u32;
    let tokens = escounts::numerics::Tensor::new(vec![grid.tokens(), seq.channels()], data).expect("shape");
    FeatureSequence::new(tokens, grid, frames, seq.frames_per_window, seq.source_id.clone()).expect("sequence")
}
