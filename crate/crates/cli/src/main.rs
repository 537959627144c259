//! `escounts`: synthesize corpora, train, evaluate and inspect the counting decoder.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use escounts::{InferenceSource, SigmaMode};

use crate::commands::GroupBy;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "escounts", version, about = "Exemplar-based video repetition counting")]
struct Cli {
    /// TOML file with optional `seed`, `[corpus]`, `[decoder]`, `[train]` and `[eval]` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for corpus synthesis, initialisation, sampling and exemplar draws [default: 0].
    #[arg(long, global = true, env = "ESCOUNTS_SEED")]
    seed: Option<u64>,
    /// Worker threads [default: all cores].
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic train/test corpus (ESCF features, JSON sidecars, manifests).
    Synth(SynthArgs),
    /// Train the decoder on the train split.
    Train(TrainCmd),
    /// Score a checkpoint on a split: counting metrics and localisation.
    Eval(EvalCmd),
    /// Count repetitions in one feature file.
    Infer(InferCmd),
    /// Jaccard localisation scores from a prediction dump.
    Localise(LocaliseCmd),
    /// Throughput in sec/sample and samples/sec for training and inference.
    Bench(BenchCmd),
    /// Grouped metrics, Off-By-N curve and scatter plot from a prediction dump.
    Report(ReportCmd),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Training videos [default: 200].
    #[arg(long)]
    train_videos: Option<usize>,
    /// Test videos [default: 50].
    #[arg(long)]
    test_videos: Option<usize>,
    /// Action classes [default: 4].
    #[arg(long)]
    classes: Option<usize>,
    /// Smallest repetition count [default: 2].
    #[arg(long)]
    count_min: Option<u32>,
    /// Largest repetition count [default: 10].
    #[arg(long)]
    count_max: Option<u32>,
    /// Sampling rate: raw frames covered by one encoder window [default: 64].
    #[arg(long)]
    frames_per_window: Option<u32>,
    /// Sampling rate: temporal tokens per encoder window [default: 4].
    #[arg(long)]
    tokens_per_window: Option<usize>,
    /// Feature channels C [default: 32].
    #[arg(long)]
    channels: Option<usize>,
    /// Per-token noise standard deviation [default: 0.1].
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct DecoderKnobs {
    /// L: cross-attention blocks [default: 2].
    #[arg(long)]
    ca_blocks: Option<usize>,
    /// L′: shifted-window self-attention blocks [default: 3].
    #[arg(long)]
    wsa_blocks: Option<usize>,
    /// Attention window t,h,w in tokens [default: 2,2,2].
    #[arg(long, value_parser = parse_window)]
    window: Option<(usize, usize, usize)>,
    /// Attention heads [default: 4].
    #[arg(long)]
    heads: Option<usize>,
    /// Named decoder preset: desk or paper-scale [default: desk].
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct TrainCmd {
    /// Corpus directory written by `synth` or the feature extractor.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Newline-delimited JSON log, one record per optimizer update.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also checkpoint every N epochs; 0 writes only the final one.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Continue from this checkpoint; the lr schedule resumes at its epoch.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Train on the first N videos only.
    #[arg(long)]
    limit: Option<usize>,
    /// Total epochs [default: 30].
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate [default: 1e-3].
    #[arg(long)]
    lr: Option<f64>,
    /// Instances per optimizer update [default: 8].
    #[arg(long)]
    accumulation: Option<usize>,
    /// σ: fixed Gaussian width in temporal tokens [default: 0.5].
    #[arg(long, conflicts_with = "sigma_scale")]
    sigma: Option<f64>,
    /// Variable σ as this fraction of each repetition's length in tokens [default scale: 0.25].
    #[arg(long, num_args = 0..=1, default_missing_value = "0.25")]
    sigma_scale: Option<f64>,
    /// p: probability of drawing exemplars from another video of the class [default: 0.4].
    #[arg(long)]
    p_cross: Option<f64>,
    /// |S|: allowed exemplar counts, one drawn per instance [default: 0,1,2].
    #[arg(long, value_delimiter = ',')]
    shot_set: Option<Vec<usize>>,
    /// Disable random time-shift augmentation.
    #[arg(long)]
    no_time_shift: bool,
    #[command(flatten)]
    decoder: DecoderKnobs,
}

#[derive(Args)]
struct EvalKnobs {
    /// |K|: time-shifted passes averaged at inference [default: 4].
    #[arg(long)]
    shifts: Option<usize>,
    /// Exemplars per query at inference; 0 is zero-shot [default: 0].
    #[arg(long)]
    shots: Option<usize>,
    /// Take exemplars from training videos of the same class instead of the query.
    #[arg(long)]
    cross_video: bool,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to score [default: test].
    #[arg(long, default_value = "test")]
    split: String,
    /// Write per-video predictions as newline-delimited JSON.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    knobs: EvalKnobs,
}

#[derive(Args)]
struct InferCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// ESCF feature file.
    #[arg(long)]
    features: PathBuf,
    /// Annotation sidecar for same-video exemplars [default: next to the features].
    #[arg(long)]
    annotation: Option<PathBuf>,
    /// Also print the density map.
    #[arg(long)]
    density: bool,
    #[command(flatten)]
    knobs: EvalKnobs,
}

#[derive(Args)]
struct LocaliseCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Prediction dump from `eval --predictions`.
    #[arg(long)]
    predictions: PathBuf,
    /// θ: single relative peak threshold [default: average over 0.1..0.9].
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct BenchCmd {
    /// Synthetic videos timed per phase.
    #[arg(long, default_value_t = 16)]
    videos: usize,
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    decoder: DecoderKnobs,
    #[command(flatten)]
    knobs: EvalKnobs,
}

#[derive(Args)]
struct ReportCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    predictions: PathBuf,
    /// Grouping for the per-bin table.
    #[arg(long, value_enum, default_value_t = GroupBy::Count)]
    group_by: GroupBy,
    /// Largest N of the Off-By-N curve.
    #[arg(long, default_value_t = 10)]
    max_n: usize,
    /// Write the predicted vs ground-truth scatter plot here.
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

fn parse_window(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [t, h, w] => Ok((t, h, w)),
        _ => Err(format!("expected t,h,w, got {s:?}")),
    }
}

impl DecoderKnobs {
    fn apply(&self, cfg: &mut RunConfig) -> anyhow::Result<()> {
        if let Some(name) = &self.preset {
            cfg.decoder = escounts::DecoderConfig::preset(name).with_context(|| format!("unknown preset {name:?}"))?;
        }
        set(&mut cfg.decoder.ca_blocks, self.ca_blocks);
        set(&mut cfg.decoder.wsa_blocks, self.wsa_blocks);
        set(&mut cfg.decoder.window, self.window);
        set(&mut cfg.decoder.heads, self.heads);
        Ok(())
    }
}

impl TrainCmd {
    fn apply(&self, cfg: &mut RunConfig) -> anyhow::Result<()> {
        self.decoder.apply(cfg)?;
        let t = &mut cfg.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.lr, self.lr);
        set(&mut t.accumulation, self.accumulation);
        if let Some(sigma) = self.sigma {
            t.sigma = SigmaMode::Fixed { sigma };
        }
        if let Some(scale) = self.sigma_scale {
            t.sigma = SigmaMode::Variable { scale };
        }
        set(&mut t.exemplars.p_cross_video, self.p_cross);
        set(&mut t.exemplars.shot_set, self.shot_set.clone());
        if self.no_time_shift {
            t.time_shift = false;
        }
        Ok(())
    }
}

impl EvalKnobs {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.eval.shifts, self.shifts);
        set(&mut cfg.eval.shots, self.shots);
        if self.cross_video {
            cfg.eval.source = InferenceSource::TrainClassDonor;
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply_seed(cli.seed);
    match &cli.command {
        Command::Synth(a) => {
            set(&mut cfg.corpus.train_videos, a.train_videos);
            set(&mut cfg.corpus.test_videos, a.test_videos);
            set(&mut cfg.corpus.classes, a.classes);
            let v = &mut cfg.corpus.video;
            set(&mut v.count_range.0, a.count_min);
            set(&mut v.count_range.1, a.count_max);
            set(&mut v.frames_per_window, a.frames_per_window);
            set(&mut v.tokens_per_window, a.tokens_per_window);
            set(&mut v.channels, a.channels);
            set(&mut v.noise_std, a.noise);
            commands::synth(&cfg, &a.out)
        }
        Command::Train(a) => {
            a.apply(&mut cfg)?;
            commands::train(
                &cfg,
                &commands::TrainArgs {
                    data: &a.data,
                    out: &a.out,
                    log: a.log.as_deref(),
                    checkpoint_every: a.checkpoint_every,
                    resume: a.resume.as_deref(),
                    limit: a.limit,
                },
            )
        }
        Command::Eval(a) => {
            a.knobs.apply(&mut cfg);
            commands::eval(
                &cfg,
                &commands::EvalArgs {
                    data: &a.data,
                    checkpoint: &a.checkpoint,
                    split: &a.split,
                    predictions: a.predictions.as_deref(),
                    json: a.json.as_deref(),
                },
            )
        }
        Command::Infer(a) => {
            a.knobs.apply(&mut cfg);
            commands::infer(
                &cfg,
                &commands::InferArgs {
                    checkpoint: &a.checkpoint,
                    features: &a.features,
                    annotation: a.annotation.as_deref(),
                    density: a.density,
                },
            )
        }
        Command::Localise(a) => commands::localise(&a.data, &a.split, &a.predictions, a.theta, a.json.as_deref()),
        Command::Bench(a) => {
            a.decoder.apply(&mut cfg)?;
            a.knobs.apply(&mut cfg);
            commands::bench(&cfg, a.videos, a.json.as_deref())
        }
        Command::Report(a) => commands::report(&commands::ReportArgs {
            data: &a.data,
            split: &a.split,
            predictions: &a.predictions,
            group_by: a.group_by,
            max_n: a.max_n,
            svg: a.svg.as_deref(),
            json: a.json.as_deref(),
        }),
    }
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
