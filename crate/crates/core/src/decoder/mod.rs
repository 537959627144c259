//! Exemplar-conditioned density decoder.
//!
//! `L` cross-attention blocks fuse exemplar latents (or the learned `z0`)
//! into the video latents, `L′` windowed self-attention blocks mix local
//! spatio-temporal neighbourhoods, and a per-token projection collapses the
//! spatial axes into a length-`T′` density map.

mod checkpoint;
mod params;
mod window;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{Bound, DecoderParams};
pub use window::{window_plan, WindowPlan, PAD_GROUP};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{positional_encoding, ExemplarLatent, FeatureError, FeatureSequence, Grid, PositionalMode};
use crate::numerics::{AttentionLayout, NumericsError, Real, Tape, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum DecoderError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("decoder config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// How per-token head outputs become one value per temporal index.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialAggregation {
    #[default]
    Sum,
    Mean,
}

/// Output non-linearity of the density head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadActivation {
    #[default]
    Softplus,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub channels: usize,
    pub heads: usize,
    /// `L`
    pub ca_blocks: usize,
    /// `L′`
    pub wsa_blocks: usize,
    /// `(t′, h′, w′)`
    pub window: (usize, usize, usize),
    pub mlp_ratio: usize,
    /// Temporal tokens per encoder window.
    pub tokens_per_window: usize,
    pub height: usize,
    pub width: usize,
    pub aggregation: SpatialAggregation,
    pub head_activation: HeadActivation,
    pub positional: PositionalMode,
    pub head_bias_init: f32,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DecoderConfig {
    /// Laptop-sized grid `(4, 2, 2)`, `C = 32`.
    pub fn desk() -> Self {
        Self {
            channels: 32,
            heads: 4,
            ca_blocks: 2,
            wsa_blocks: 3,
            window: (2, 2, 2),
            mlp_ratio: 4,
            tokens_per_window: 4,
            height: 2,
            width: 2,
            aggregation: SpatialAggregation::Sum,
            head_activation: HeadActivation::Softplus,
            positional: PositionalMode::Flattened,
            head_bias_init: -2.0,
        }
    }

    /// ViT-B style grid `(8, 14, 14)`, `C = 512`, window `(4, 7, 7)`.
    pub fn paper_scale() -> Self {
        Self {
            channels: 512,
            heads: 8,
            window: (4, 7, 7),
            tokens_per_window: 8,
            height: 14,
            width: 14,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper-scale" => Some(Self::paper_scale()),
            _ => None,
        }
    }

    /// `M_e`: one encoder window of tokens.
    pub fn exemplar_tokens(&self) -> usize {
        self.tokens_per_window * self.height * self.width
    }

    pub fn exemplar_grid(&self) -> Grid {
        Grid::new(self.tokens_per_window, self.height, self.width)
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        let bad = |m: String| Err(DecoderError::Config(m));
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!("{} channels not divisible by {} heads", self.channels, self.heads));
        }
        if self.channels % 2 != 0 {
            return bad("channel count must be even".into());
        }
        let (t, h, w) = self.window;
        if t == 0 || h == 0 || w == 0 || h > self.height || w > self.width {
            return bad(format!(
                "window {:?} does not fit spatial grid {}x{}",
                self.window, self.height, self.width
            ));
        }
        if self.tokens_per_window == 0 || self.mlp_ratio == 0 {
            return bad("zero-sized grid or MLP".into());
        }
        Ok(())
    }
}

fn linear<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var, w: &str, b: Option<&str>) -> Result<Var, DecoderError> {
    let y = tape.matmul(x, p.var(w)?)?;
    Ok(match b {
        Some(b) => tape.add_row(y, p.var(b)?)?,
        None => y,
    })
}

fn norm<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var, prefix: &str) -> Result<Var, DecoderError> {
    let g = p.var(&format!("{prefix}.gain"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    Ok(tape.layer_norm(x, g, b)?)
}

fn mlp<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var, prefix: &str) -> Result<Var, DecoderError> {
    let h = linear(tape, p, x, &format!("{prefix}.w1"), Some(&format!("{prefix}.b1")))?;
    let h = tape.gelu(h)?;
    linear(tape, p, h, &format!("{prefix}.w2"), Some(&format!("{prefix}.b2")))
}

/// Projected multi-head attention; `queries` attend `context`.
fn attend<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    queries: Var,
    context: Var,
    layout: AttentionLayout,
) -> Result<Var, DecoderError> {
    let q = linear(tape, p, queries, &format!("{prefix}.wq"), Some(&format!("{prefix}.bq")))?;
    let k = linear(tape, p, context, &format!("{prefix}.wk"), None)?;
    let v = linear(tape, p, context, &format!("{prefix}.wv"), Some(&format!("{prefix}.bv")))?;
    let o = tape.attention(q, k, v, layout)?;
    linear(tape, p, o, &format!("{prefix}.wo"), Some(&format!("{prefix}.bo")))
}

/// Global multi-head self-attention with the weights under `prefix`.
pub fn self_attention<T: Real>(
    tape: &mut Tape<T>,
    cfg: &DecoderConfig,
    p: &Bound,
    prefix: &str,
    x: Var,
) -> Result<Var, DecoderError> {
    attend(tape, p, prefix, x, x, AttentionLayout::dense(cfg.heads))
}

/// Cross-attention block `l`:
///
/// ```text
/// z′  = SA(LN z) + z
/// z″  = mean_s CA(z_s, LN z′) + z′
/// out = MLP(LN z″) + z″
/// ```
pub fn ca_block<T: Real>(
    tape: &mut Tape<T>,
    cfg: &DecoderConfig,
    p: &Bound,
    l: usize,
    z: Var,
    exemplars: &[Var],
) -> Result<Var, DecoderError> {
    if exemplars.is_empty() {
        return Err(DecoderError::Config("cross-attention needs at least one exemplar latent".into()));
    }
    let c = tape.shape(z)[1];
    for &e in exemplars {
        if tape.shape(e).get(1) != Some(&c) {
            return Err(DecoderError::Config(format!(
                "exemplar channels {:?} differ from video channels {c}",
                tape.shape(e)
            )));
        }
    }
    let n1 = norm(tape, p, z, &format!("ca.{l}.ln1"))?;
    let sa = self_attention(tape, cfg, p, &format!("ca.{l}.sa"), n1)?;
    let z1 = tape.add(sa, z)?;

    let n2 = norm(tape, p, z1, &format!("ca.{l}.ln2"))?;
    let pre = format!("ca.{l}.ca");
    let q = linear(tape, p, n2, &format!("{pre}.wq"), Some(&format!("{pre}.bq")))?;
    let mut fused = Vec::with_capacity(exemplars.len());
    for &e in exemplars {
        let k = linear(tape, p, e, &format!("{pre}.wk"), None)?;
        let v = linear(tape, p, e, &format!("{pre}.wv"), Some(&format!("{pre}.bv")))?;
        let o = tape.attention(q, k, v, AttentionLayout::dense(cfg.heads))?;
        fused.push(linear(tape, p, o, &format!("{pre}.wo"), Some(&format!("{pre}.bo")))?);
    }
    let mean = tape.mean(&fused)?;
    let z2 = tape.add(mean, z1)?;

    let n3 = norm(tape, p, z2, &format!("ca.{l}.ln3"))?;
    let m = mlp(tape, p, n3, &format!("ca.{l}.mlp"))?;
    Ok(tape.add(m, z2)?)
}

/// Windowed self-attention block `l` (0-based within the WSA stack).
///
/// The first block uses aligned windows; later blocks roll the grid by half
/// a window before partitioning and roll back afterwards.
pub fn wsa_block<T: Real>(
    tape: &mut Tape<T>,
    cfg: &DecoderConfig,
    p: &Bound,
    l: usize,
    z: Var,
    grid: Grid,
) -> Result<Var, DecoderError> {
    if tape.shape(z)[0] != grid.tokens() {
        return Err(DecoderError::Config(format!(
            "{} tokens for grid {grid:?}",
            tape.shape(z)[0]
        )));
    }
    let plan = window_plan(grid, cfg.window, l > 0);
    let n1 = norm(tape, p, z, &format!("wsa.{l}.ln1"))?;
    let windows = tape.gather_rows(n1, plan.gather.clone())?;
    let layout = AttentionLayout {
        heads: cfg.heads,
        blocks: plan.windows,
        query_groups: Some(plan.groups.clone()),
        key_groups: Some(plan.groups.clone()),
    };
    let attended = attend(tape, p, &format!("wsa.{l}.attn"), windows, windows, layout)?;
    let restored = tape.gather_rows(attended, plan.scatter_index())?;
    let z1 = tape.add(restored, z)?;
    let n2 = norm(tape, p, z1, &format!("wsa.{l}.ln2"))?;
    let m = mlp(tape, p, n2, &format!("wsa.{l}.mlp"))?;
    Ok(tape.add(m, z1)?)
}

/// `[M, C]` → `[T′]`: per-token projection, activation, then spatial aggregation.
pub fn density_head<T: Real>(
    tape: &mut Tape<T>,
    cfg: &DecoderConfig,
    p: &Bound,
    z: Var,
    grid: Grid,
) -> Result<Var, DecoderError> {
    if tape.shape(z)[0] != grid.tokens() {
        return Err(DecoderError::Config(format!(
            "{} tokens for grid {grid:?}",
            tape.shape(z)[0]
        )));
    }
    let y = linear(tape, p, z, "head.w", Some("head.b"))?;
    let y = match cfg.head_activation {
        HeadActivation::Softplus => tape.softplus(y)?,
        HeadActivation::Linear => y,
    };
    let y = tape.reshape(y, &[grid.t, grid.spatial()])?;
    let d = tape.sum_last_dim(y)?;
    Ok(match cfg.aggregation {
        SpatialAggregation::Sum => d,
        SpatialAggregation::Mean => tape.scale(d, T::one() / T::of(grid.spatial() as f64))?,
    })
}

/// Full decoder pass. Empty `exemplars` selects the learned latent `z0`.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    cfg: &DecoderConfig,
    p: &Bound,
    video: Var,
    grid: Grid,
    exemplars: &[Var],
) -> Result<Var, DecoderError> {
    let z0;
    let exemplars = if exemplars.is_empty() {
        z0 = [p.var("z0")?];
        &z0[..]
    } else {
        exemplars
    };
    let mut z = video;
    for l in 0..cfg.ca_blocks {
        z = ca_block(tape, cfg, p, l, z, exemplars)?;
    }
    for l in 0..cfg.wsa_blocks {
        z = wsa_block(tape, cfg, p, l, z, grid)?;
    }
    density_head(tape, cfg, p, z, grid)
}

/// Video tokens plus positional encoding, ready for [`forward`].
pub fn prepare_video(cfg: &DecoderConfig, seq: &FeatureSequence) -> Result<Tensor<f32>, DecoderError> {
    if seq.channels() != cfg.channels || seq.grid.h != cfg.height || seq.grid.w != cfg.width {
        return Err(DecoderError::Config(format!(
            "sequence grid {:?} x {} does not match decoder {}x{} x {}",
            seq.grid,
            seq.channels(),
            cfg.height,
            cfg.width,
            cfg.channels
        )));
    }
    let mut t = seq.tokens.clone();
    t.add_assign(&positional_encoding(seq.grid, cfg.channels, cfg.positional)?);
    Ok(t)
}

/// Exemplar tokens plus positional encoding over one window grid.
pub fn prepare_exemplar(cfg: &DecoderConfig, ex: &ExemplarLatent) -> Result<Tensor<f32>, DecoderError> {
    let (m, c) = ex.tokens.dims2()?;
    if m != cfg.exemplar_tokens() || c != cfg.channels {
        return Err(DecoderError::Config(format!(
            "exemplar shape [{m}, {c}] does not match [{}, {}]",
            cfg.exemplar_tokens(),
            cfg.channels
        )));
    }
    let mut t = ex.tokens.clone();
    t.add_assign(&positional_encoding(cfg.exemplar_grid(), cfg.channels, cfg.positional)?);
    Ok(t)
}

/// Config plus `f32` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub params: DecoderParams<f32>,
}

impl Decoder {
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self, DecoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = DecoderParams::init(&config, &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: DecoderConfig, params: DecoderParams<f32>) -> Result<Self, DecoderError> {
        config.validate()?;
        params.check(&config)?;
        Ok(Self { config, params })
    }

    /// Density map without recording gradients for parameters.
    pub fn density(&self, seq: &FeatureSequence, exemplars: &[ExemplarLatent]) -> Result<Vec<f32>, DecoderError> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind_frozen(&mut tape);
        let video = tape.constant(prepare_video(&self.config, seq)?);
        let ex = exemplars
            .iter()
            .map(|e| Ok(tape.constant(prepare_exemplar(&self.config, e)?)))
            .collect::<Result<Vec<_>, DecoderError>>()?;
        let d = forward(&mut tape, &self.config, &p, video, seq.grid, &ex)?;
        Ok(tape.value(d).data().to_vec())
    }
}
