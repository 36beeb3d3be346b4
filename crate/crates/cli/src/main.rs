//! `iris`: command-line front end for the recognition pipeline.
//!
//! Subcommands cover the whole artifact flow: synthetic dataset generation,
//! per-stage training, gallery enrollment, single-probe matching, and
//! evaluation reports. Every command writes its artifacts under `--out`
//! together with a run manifest (config hash + seed) that suffices to
//! replay the run. `IRIS_THREADS` caps per-image fan-out during enrollment
//! and evaluation; training is single-threaded by design so model files
//! stay bit-reproducible.
//!
//! Exit codes: 0 success, 1 failure, 2 usage error, 3 no-detection
//! (matching only; the probe image had no usable eye geometry).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use iris_core::codec::{format_match_list, load_gallery, save_gallery, Metric};
use iris_core::error::Error;
use iris_core::eval::{roc_csv, write_report, ProtocolSpec, ScoreSet};
use iris_core::image::load_image;
use iris_core::pipeline::{
    end_to_end, enroll_dataset, evaluate_dataset, load_models, save_models_detector,
    save_models_embedder, save_models_segmenter, train_detector, train_embedder, train_segmenter,
    write_run_manifest, Config, Outcome, SampleMeta, TrainOutcome, Variant,
};
use iris_core::synth::{gen_dataset, load_dataset, Eye, GenConfig, Spectrum};

#[derive(Parser)]
#[command(
    name = "iris",
    version,
    about = "Iris recognition pipeline: synthesize data, train the detector/segmenter/embedder, enroll galleries, match probes, and evaluate",
    after_help = "Environment:\n  IRIS_THREADS  worker threads for enrollment/evaluation fan-out (default 1;\n                output is identical for any value)"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Sectioned key-value config file; defaults apply for absent keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every stochastic choice the command makes
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl CommonOpts {
    fn load_config(&self) -> iris_core::Result<Config> {
        match &self.config {
            Some(path) => Config::load(path),
            None => Ok(Config::default()),
        }
    }
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    Metric::parse(s).ok_or_else(|| format!("unknown metric {s:?} (cosine or hamming)"))
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s)
        .ok_or_else(|| format!("unknown variant {s:?} (segmented, bbox-only, or polar-remap)"))
}

#[derive(Subcommand)]
enum Command {
    /// Render a labeled synthetic eye dataset into --out
    GenData {
        #[command(flatten)]
        common: CommonOpts,
        /// Dataset directory to create
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the iris/pupil box detector on a gen-data directory
    TrainDetector {
        #[command(flatten)]
        common: CommonOpts,
        /// Dataset directory (from gen-data)
        #[arg(long)]
        data: PathBuf,
        /// Directory for the model file and run manifest
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the iris/pupil pixel segmenter on a gen-data directory
    TrainSegmenter {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the feature embedder on a gen-data directory
    TrainEmbedder {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every dataset image through the pipeline into a gallery
    Enroll {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        /// Directory holding the trained model files
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// How the iris region is isolated before embedding
        #[arg(long, value_parser = parse_variant, default_value = "segmented")]
        variant: Variant,
        /// cosine stores real features; hamming stores binary codes
        #[arg(long, value_parser = parse_metric, default_value = "cosine")]
        metric: Metric,
    },
    /// Match one probe image against a saved gallery
    Match {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        models: PathBuf,
        /// Gallery base path (as passed to enroll --out, plus /gallery)
        #[arg(long)]
        gallery: PathBuf,
        /// Probe image (PGM/PPM)
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_parser = parse_variant, default_value = "segmented")]
        variant: Variant,
        /// Print only the best N candidates (default: all)
        #[arg(long)]
        top: Option<usize>,
    },
    /// Score an identification protocol and write report, ROC, and scores
    Evaluate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        out: PathBuf,
        /// Score a saved genuine/impostor score file instead of a dataset
        #[arg(long, conflicts_with_all = ["data", "models"])]
        scores: Option<PathBuf>,
        #[arg(long, requires = "models")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        models: Option<PathBuf>,
        #[arg(long, value_parser = parse_variant, default_value = "segmented")]
        variant: Variant,
        #[arg(long, value_parser = parse_metric, default_value = "cosine")]
        metric: Metric,
    },
}

fn thread_count() -> Result<usize, String> {
    match std::env::var("IRIS_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(format!("IRIS_THREADS must be a positive integer, got {v:?}")),
        },
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(format!("IRIS_THREADS is not valid unicode: {e}")),
    }
}

fn write_artifact(out: &Path, name: &str, text: &str) -> iris_core::Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn print_training_summary(name: &str, outcome: &TrainOutcome) {
    println!(
        "{name}: {} epochs, final loss {:.6}, {} lr drop(s){}",
        outcome.epoch_losses.len(),
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
        outcome.lr_drops,
        if outcome.stopped_early { ", stopped on plateau" } else { "" },
    );
}

fn run(cli: Cli) -> iris_core::Result<Option<&'static str>> {
    let threads = thread_count().map_err(|m| Error::arg("IRIS_THREADS", m))?;
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = common.load_config()?;
            let gen = GenConfig {
                subjects: cfg.dataset.subjects,
                shots_per_eye: cfg.dataset.shots_per_eye,
                edge: cfg.dataset.edge,
                spectrum: cfg.dataset.spectrum,
                seed: common.seed,
            };
            let entries = gen_dataset(&gen, &out)?;
            let artifacts: Vec<String> = std::iter::once("manifest.csv".to_string())
                .chain(entries.iter().flat_map(|e| {
                    [e.image.clone(), e.mask.clone(), e.boxes.clone()]
                }))
                .collect();
            write_run_manifest(&out, "gen-data", &cfg.to_text(), common.seed, &artifacts)?;
            println!(
                "gen-data: {} samples ({} subjects x 2 eyes x {} shots) in {}",
                entries.len(),
                cfg.dataset.subjects,
                cfg.dataset.shots_per_eye,
                out.display()
            );
            Ok(None)
        }
        Command::TrainDetector { common, data, out } => {
            let cfg = common.load_config()?;
            let samples = load_dataset(&data)?;
            let (net, means, outcome) =
                train_detector(&samples, &cfg, common.seed, &mut |l| println!("{l}"))?;
            let path = save_models_detector(&out, &net, &means)?;
            write_run_manifest(&out, "train-detector", &cfg.to_text(), common.seed, &[
                path.file_name().unwrap().to_string_lossy().into_owned(),
            ])?;
            print_training_summary("train-detector", &outcome);
            Ok(None)
        }
        Command::TrainSegmenter { common, data, out } => {
            let cfg = common.load_config()?;
            let samples = load_dataset(&data)?;
            let (net, means, outcome) =
                train_segmenter(&samples, &cfg, common.seed, &mut |l| println!("{l}"))?;
            let path = save_models_segmenter(&out, &net, &means)?;
            write_run_manifest(&out, "train-segmenter", &cfg.to_text(), common.seed, &[
                path.file_name().unwrap().to_string_lossy().into_owned(),
            ])?;
            print_training_summary("train-segmenter", &outcome);
            Ok(None)
        }
        Command::TrainEmbedder { common, data, out } => {
            let cfg = common.load_config()?;
            let samples = load_dataset(&data)?;
            let (net, means, outcome) =
                train_embedder(&samples, &cfg, common.seed, &mut |l| println!("{l}"))?;
            let path = save_models_embedder(&out, &net, &means)?;
            write_run_manifest(&out, "train-embedder", &cfg.to_text(), common.seed, &[
                path.file_name().unwrap().to_string_lossy().into_owned(),
            ])?;
            print_training_summary("train-embedder", &outcome);
            Ok(None)
        }
        Command::Enroll { common, data, models, out, variant, metric } => {
            let cfg = common.load_config()?;
            let samples = load_dataset(&data)?;
            let bundle = load_models(&models, variant, cfg.detector.conf_threshold)?;
            let binarize = metric == Metric::Hamming;
            let (gallery, skipped) = enroll_dataset(&samples, &bundle, variant, binarize, threads)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            save_gallery(&out.join("gallery"), &gallery)?;
            write_run_manifest(&out, "enroll", &cfg.to_text(), common.seed, &[
                "gallery.bin".into(),
                "gallery.keys".into(),
            ])?;
            println!(
                "enroll: {} templates ({metric}, {variant}), {skipped} no-detection skip(s)",
                gallery.len()
            );
            Ok(None)
        }
        Command::Match { common, models, gallery, image, variant, top } => {
            let cfg = common.load_config()?;
            let gallery = load_gallery(&gallery)?;
            let bundle = load_models(&models, variant, cfg.detector.conf_threshold)?;
            let img = load_image(&image)?;
            let meta = SampleMeta {
                subject: "probe".into(),
                eye: Eye::Left,
                spectrum: Spectrum::Nir,
                sample: 0,
            };
            match end_to_end(&img, &bundle, variant, gallery.is_binary(), &meta)? {
                Outcome::Template(probe) => {
                    let mut ranked = gallery.match_probe(&probe)?;
                    if let Some(n) = top {
                        ranked.truncate(n);
                    }
                    print!("{}", format_match_list(&ranked));
                    Ok(None)
                }
                Outcome::NoDetection(reason) => {
                    println!("NO_DETECTION {reason}");
                    Ok(Some("no-detection"))
                }
            }
        }
        Command::Evaluate { common, out, scores, data, models, variant, metric } => {
            let cfg = common.load_config()?;
            let report = if let Some(scores_path) = scores {
                let set = ScoreSet::from_text(
                    &fs::read_to_string(&scores_path).map_err(|e| Error::io(&scores_path, e))?,
                    &scores_path,
                )?;
                let report = write_report(&set, &[])?;
                write_artifact(&out, "report.txt", &report)?;
                write_artifact(&out, "roc.csv", &roc_csv(&set.roc()?))?;
                write_run_manifest(&out, "evaluate", &cfg.to_text(), common.seed, &[
                    "report.txt".into(),
                    "roc.csv".into(),
                ])?;
                report
            } else {
                let (data, models) = match (data, models) {
                    (Some(d), Some(m)) => (d, m),
                    _ => {
                        return Err(Error::arg(
                            "evaluate",
                            "pass either --scores FILE or both --data DIR and --models DIR",
                        ))
                    }
                };
                let samples = load_dataset(&data)?;
                let bundle = load_models(&models, variant, cfg.detector.conf_threshold)?;
                let spec = ProtocolSpec {
                    gallery_ratio: cfg.protocol.gallery_ratio,
                    seed: common.seed,
                };
                let arts = evaluate_dataset(&samples, &bundle, variant, metric, &spec, threads)?;
                write_artifact(&out, "report.txt", &arts.report)?;
                write_artifact(&out, "roc.csv", &arts.roc)?;
                write_artifact(&out, "scores.txt", &arts.scores_text)?;
                write_run_manifest(&out, "evaluate", &cfg.to_text(), common.seed, &[
                    "report.txt".into(),
                    "roc.csv".into(),
                    "scores.txt".into(),
                ])?;
                arts.report
            };
            print!("{report}");
            Ok(None)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(_)) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
