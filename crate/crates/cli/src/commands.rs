use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context};
use escounts::annotations::RepetitionAnnotation;
use escounts::exemplars::exemplars_for_inference;
use escounts::inference::{read_predictions, write_predictions};
use escounts::localisation::{format_localisation, LocalisationInput};
use escounts::metrics::{format_report, grouped_report, scatter_svg, GroupItem, GroupRow};
use escounts::pipeline::fit;
use escounts::{
    evaluate_split, load_checkpoint, load_features, localisation_report, off_by_n, predict, save_checkpoint, BinSpec,
    CorpusItem, Corpus, CountPair, Decoder, EvalConfig, LocalisationReport, MetricReport, StepRecord, Trainer,
    VideoPrediction, THETA_GRID,
};
use log::info;
use serde::Serialize;

use crate::config::RunConfig;

pub fn synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let (train, test) = cfg.corpus.splits()?;
    train.save_split(out, "train")?;
    test.save_split(out, "test")?;
    fs::write(out.join("corpus.toml"), toml::to_string(&cfg.corpus)?)?;
    println!("wrote {} train and {} test videos to {}", train.len(), test.len(), out.display());
    Ok(())
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub log: Option<&'a Path>,
    pub checkpoint_every: usize,
    pub resume: Option<&'a Path>,
    pub limit: Option<usize>,
}

fn load_split(data: &Path, split: &str, limit: Option<usize>) -> anyhow::Result<Corpus> {
    let mut corpus = Corpus::load_split(data, split).with_context(|| format!("loading {split} split from {}", data.display()))?;
    if let Some(n) = limit {
        corpus.items.truncate(n);
    }
    ensure!(!corpus.is_empty(), "{split} split in {} is empty", data.display());
    Ok(corpus)
}

pub fn train(cfg: &RunConfig, args: &TrainArgs<'_>) -> anyhow::Result<()> {
    let corpus = load_split(args.data, "train", args.limit)?;
    let mut trainer = match args.resume {
        Some(path) => {
            let ck = load_checkpoint(path, None).with_context(|| format!("loading {}", path.display()))?;
            info!("resuming from epoch {} step {}", ck.state.epoch, ck.state.step);
            Trainer::resume(ck, cfg.train.clone())?
        }
        None => Trainer::new(Decoder::new(cfg.decoder.clone(), cfg.train.seed)?, cfg.train.clone())?,
    };
    let mut log = match args.log {
        Some(path) => {
            let file = OpenOptions::new()
                .create(true)
                .append(args.resume.is_some())
                .write(true)
                .truncate(args.resume.is_none())
                .open(path)
                .with_context(|| format!("opening {}", path.display()))?;
            Some(BufWriter::new(file))
        }
        None => None,
    };
    let mut log_error = None;
    let started = Instant::now();
    let every = args.checkpoint_every;
    fit(
        &mut trainer,
        &corpus,
        |rec: &StepRecord| {
            if let Some(w) = log.as_mut() {
                let line = serde_json::to_writer(&mut *w, rec).map_err(std::io::Error::from).and_then(|()| w.write_all(b"\n"));
                if let Err(e) = line {
                    log_error.get_or_insert(e);
                }
            }
        },
        |t, rep| {
            info!(
                "epoch {} loss {:.4} (mse {:.4} mae {:.4}) {:.1}s",
                t.state.epoch,
                rep.total,
                rep.mse,
                rep.mae,
                started.elapsed().as_secs_f64()
            );
            if every > 0 && t.state.epoch % every == 0 {
                save_checkpoint(&t.checkpoint(), args.out)?;
            }
            Ok(())
        },
    )?;
    if let Some(e) = log_error {
        return Err(e).context("writing training log");
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    save_checkpoint(&trainer.checkpoint(), args.out)?;
    println!(
        "trained to epoch {} ({} updates) in {:.1}s; checkpoint {}",
        trainer.state.epoch,
        trainer.state.step,
        started.elapsed().as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

/// Machine-readable evaluation document.
#[derive(Serialize)]
pub struct EvalDocument {
    pub split: String,
    pub shots: usize,
    pub shifts: usize,
    pub zero_shot_videos: usize,
    pub metrics: MetricReport,
    pub off_by_n: Vec<f64>,
    pub localisation: LocalisationReport,
}

pub struct EvalArgs<'a> {
    pub data: &'a Path,
    pub checkpoint: &'a Path,
    pub split: &'a str,
    pub predictions: Option<&'a Path>,
    pub json: Option<&'a Path>,
}

fn localisation_inputs<'a>(corpus: &'a Corpus, predictions: &'a [VideoPrediction]) -> anyhow::Result<Vec<LocalisationInput<'a>>> {
    corpus
        .items
        .iter()
        .map(|item| {
            let id = &item.annotation.video_id;
            let p = predictions
                .iter()
                .find(|p| &p.video_id == id)
                .with_context(|| format!("no prediction for {id}"))?;
            Ok(LocalisationInput {
                density: &p.density,
                annotation: &item.annotation,
                frames_per_token: item.features.frames_per_temporal_token(),
            })
        })
        .collect()
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs<'_>) -> anyhow::Result<()> {
    let corpus = load_split(args.data, args.split, None)?;
    let ck = load_checkpoint(args.checkpoint, None).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let decoder = Decoder::from_parts(ck.config, ck.params)?;
    let donors = match cfg.eval.source {
        escounts::InferenceSource::TrainClassDonor if cfg.eval.shots > 0 => Some(load_split(args.data, "train", None)?),
        _ => None,
    };
    let result = evaluate_split(&decoder, &corpus, donors.as_ref(), &cfg.eval)?;
    let localisation = localisation_report(&localisation_inputs(&corpus, &result.predictions)?, &THETA_GRID)?;
    let doc = EvalDocument {
        split: args.split.to_string(),
        shots: cfg.eval.shots,
        shifts: cfg.eval.shifts,
        zero_shot_videos: result.zero_shot,
        off_by_n: off_by_n(&result.pairs, 10),
        metrics: result.report,
        localisation,
    };
    print!("{}", format_report(&doc.metrics));
    println!("OBO on rounded predictions {:.3}", doc.metrics.obo_rounded);
    print!("Jaccard by threshold (%)\n{}", format_localisation(&doc.localisation));
    if let Some(path) = args.predictions {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        write_predictions(&mut w, &result.predictions)?;
        w.flush()?;
    }
    if let Some(path) = args.json {
        fs::write(path, serde_json::to_string_pretty(&doc)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub struct InferArgs<'a> {
    pub checkpoint: &'a Path,
    pub features: &'a Path,
    pub annotation: Option<&'a Path>,
    pub density: bool,
}

fn sidecar_for(features: &Path) -> PathBuf {
    features.with_extension("json")
}

pub fn infer(cfg: &RunConfig, args: &InferArgs<'_>) -> anyhow::Result<()> {
    let ck = load_checkpoint(args.checkpoint, None).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let decoder = Decoder::from_parts(ck.config, ck.params)?;
    let features = load_features(args.features).with_context(|| format!("loading {}", args.features.display()))?;
    let exemplars = if cfg.eval.shots == 0 {
        Vec::new()
    } else {
        let path = args.annotation.map_or_else(|| sidecar_for(args.features), Path::to_path_buf);
        let annotation = RepetitionAnnotation::load(&path).with_context(|| format!("exemplars need {}", path.display()))?;
        let query = CorpusItem { features: features.clone(), annotation };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.eval.seed);
        exemplars_for_inference(
            cfg.eval.shots,
            escounts::InferenceSource::TestVideo,
            &query,
            &[],
            decoder.config.tokens_per_window,
            &mut rng,
        )?
    };
    let p = predict(&decoder, &features, &exemplars, cfg.eval.shifts)?;
    println!("{}: raw count {:.3}, rounded count {}", features.source_id, p.raw_count, p.rounded_count);
    if args.density {
        let values: Vec<String> = p.density.iter().map(|v| format!("{v:.4}")).collect();
        println!("density {}", values.join(" "));
    }
    Ok(())
}

pub fn localise(data: &Path, split: &str, predictions: &Path, theta: Option<f64>, json: Option<&Path>) -> anyhow::Result<()> {
    let corpus = load_split(data, split, None)?;
    let preds = read_predictions(BufReader::new(File::open(predictions).with_context(|| format!("opening {}", predictions.display()))?))?;
    let thetas: Vec<f64> = theta.map_or_else(|| THETA_GRID.to_vec(), |t| vec![t]);
    if thetas.iter().any(|t| !(0.0..=1.0).contains(t)) {
        bail!("theta must lie in [0, 1]");
    }
    let report = localisation_report(&localisation_inputs(&corpus, &preds)?, &thetas)?;
    print!("Jaccard by threshold (%)\n{}", format_localisation(&report));
    if let Some(path) = json {
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(())
}

#[derive(Serialize)]
pub struct BenchDocument {
    pub videos: usize,
    pub threads: usize,
    pub train_sec_per_sample: f64,
    pub train_samples_per_sec: f64,
    pub infer_sec_per_sample: f64,
    pub infer_samples_per_sec: f64,
}

pub fn bench(cfg: &RunConfig, videos: usize, json: Option<&Path>) -> anyhow::Result<()> {
    ensure!(videos > 0, "bench needs at least one video");
    let corpus = cfg.corpus.generate("bench", videos)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.epochs = 1;
    let mut trainer = Trainer::new(Decoder::new(cfg.decoder.clone(), train_cfg.seed)?, train_cfg)?;
    let t0 = Instant::now();
    trainer.train_epoch(&corpus, &mut |_| {})?;
    let train_s = t0.elapsed().as_secs_f64() / videos as f64;
    let eval = EvalConfig { shots: 0, ..cfg.eval.clone() };
    let t1 = Instant::now();
    evaluate_split(&trainer.decoder, &corpus, None, &eval)?;
    let infer_s = t1.elapsed().as_secs_f64() / videos as f64;
    let doc = BenchDocument {
        videos,
        threads: rayon::current_num_threads(),
        train_sec_per_sample: train_s,
        train_samples_per_sec: 1.0 / train_s,
        infer_sec_per_sample: infer_s,
        infer_samples_per_sec: 1.0 / infer_s,
    };
    println!("{:<8} {:>12} {:>14}", "phase", "sec/sample", "samples/sec");
    println!("{:<8} {:>12.4} {:>14.2}", "train", doc.train_sec_per_sample, doc.train_samples_per_sec);
    println!("{:<8} {:>12.4} {:>14.2}", "infer", doc.infer_sec_per_sample, doc.infer_samples_per_sec);
    if let Some(path) = json {
        fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum GroupBy {
    /// Mean repetition duration, fixed second boundaries.
    RepetitionDuration,
    /// Video duration, fixed second boundaries.
    VideoDuration,
    /// Ground-truth count, five equal-population bins.
    Count,
}

#[derive(Serialize)]
pub struct ReportDocument {
    pub metrics: MetricReport,
    pub off_by_n: Vec<f64>,
    pub groups: Vec<GroupRow>,
}

pub struct ReportArgs<'a> {
    pub data: &'a Path,
    pub split: &'a str,
    pub predictions: &'a Path,
    pub group_by: GroupBy,
    pub max_n: usize,
    pub svg: Option<&'a Path>,
    pub json: Option<&'a Path>,
}

pub fn report(args: &ReportArgs<'_>) -> anyhow::Result<()> {
    let corpus = load_split(args.data, args.split, None)?;
    let preds = read_predictions(BufReader::new(
        File::open(args.predictions).with_context(|| format!("opening {}", args.predictions.display()))?,
    ))?;
    let mut items = Vec::with_capacity(corpus.len());
    for item in &corpus.items {
        let ann = &item.annotation;
        let p = preds
            .iter()
            .find(|p| p.video_id == ann.video_id)
            .with_context(|| format!("no prediction for {}", ann.video_id))?;
        let key = match args.group_by {
            GroupBy::RepetitionDuration => {
                let frames: u32 = ann.repetitions.iter().map(|(s, e)| e - s).sum();
                f64::from(frames) / ann.repetitions.len().max(1) as f64 / ann.fps
            }
            GroupBy::VideoDuration => f64::from(item.features.raw_frames) / ann.fps,
            GroupBy::Count => f64::from(ann.count),
        };
        items.push(GroupItem { pair: CountPair::new(ann.count, p.raw_count), key });
    }
    let spec = match args.group_by {
        GroupBy::RepetitionDuration => BinSpec::repetition_duration_preset(),
        GroupBy::VideoDuration => BinSpec::video_duration_preset(),
        GroupBy::Count => BinSpec::EqualPopulation { bins: 5 },
    };
    let pairs: Vec<CountPair> = items.iter().map(|i| i.pair).collect();
    let doc = ReportDocument {
        metrics: escounts::compute_metrics(&pairs)?,
        off_by_n: off_by_n(&pairs, args.max_n),
        groups: grouped_report(&items, &spec)?,
    };
    print!("{}", format_report(&doc.metrics));
    println!("{:<4} {:>8} {:>8} {:>4} {:>8} {:>8} {:>8}", "bin", "lo", "hi", "n", "MAE", "OBZ", "OBO");
    for row in &doc.groups {
        match &row.report {
            Some(r) => println!(
                "{:<4} {:>8.2} {:>8.2} {:>4} {:>8.3} {:>8.3} {:>8.3}",
                row.label, row.lo, row.hi, r.n, r.mae, r.obz, r.obo
            ),
            None => println!("{:<4} {:>8.2} {:>8.2} {:>4}", row.label, row.lo, row.hi, 0),
        }
    }
    let curve: Vec<String> = doc.off_by_n.iter().enumerate().map(|(n, v)| format!("{n}:{v:.3}")).collect();
    println!("off-by-N {}", curve.join(" "));
    if let Some(path) = args.svg {
        fs::write(path, scatter_svg(&pairs, &format!("{} split", args.split)))?;
    }
    if let Some(path) = args.json {
        fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    }
    Ok(())
}
