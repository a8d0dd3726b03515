use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctxscore::coco::{self, DatasetBundle};
use ctxscore::config::ToolConfig;
use ctxscore::evaluation::evaluate;
use ctxscore::export;
use ctxscore::features::image_class_sets;
use ctxscore::overlay;
use ctxscore::pipelines::{self, pipeline_eval_input, relabel_all, rescore_all};
use ctxscore::synth::synth_generate;
use ctxscore::{build_cooccurrence, build_training_set, ContextModel};

#[derive(Parser)]
#[command(name = "ctxscore", version, about = "Contextual rescoring and relabeling of detections")]
struct Cli {
    /// Tool configuration, TOML or JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Co-occurrence matrix of the ground truth, as CSV.
    Cooc {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Labeled context features of every detection in multi-object images.
    Features {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the context classifier.
    Train {
        #[arg(long)]
        annotations: PathBuf,
        /// Detections to build features from.
        #[arg(long, conflicts_with = "features", required_unless_present = "features")]
        detections: Option<PathBuf>,
        /// A feature CSV written by `features`.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the training report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Replace detector confidences with context scores.
    Rescore {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rescore, then relabel or remove low scorers through their top-5 classes.
    Relabel {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        /// Relabel threshold T.
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// One JSON record per input detection.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// AUC, mAP@0.5 and F1 of detector, rescored or relabeled output.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = Mode::Detector)]
        mode: Mode,
        /// Required for the rescore and relabel modes.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with planted contextual rules.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        first_image_id: Option<u64>,
        #[arg(long)]
        mislabel_fraction: Option<f64>,
    },
    /// SVG overlay of one image: green correct, red incorrect, white removed.
    Viz {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        image: u64,
        /// Draw the relabel outcome instead of the raw detections.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    /// Detector threshold; defaults to the first configured one.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Detector,
    Rescore,
    Relabel,
}

impl From<Mode> for pipelines::Mode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Detector => pipelines::Mode::Detector,
            Mode::Rescore => pipelines::Mode::Rescore,
            Mode::Relabel => pipelines::Mode::Relabel,
        }
    }
}

enum Failure {
    Usage(String),
    Data(ctxscore::Error),
}

impl From<ctxscore::Error> for Failure {
    fn from(e: ctxscore::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ToolConfig, Failure> {
    let cfg = match path {
        Some(p) => ToolConfig::load(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => ToolConfig::default(),
    };
    Ok(cfg)
}

fn log_config(cfg: &ToolConfig) {
    match cfg.to_toml() {
        Ok(text) => log::info!("resolved config:\n{text}"),
        Err(e) => log::warn!("could not render config: {e}"),
    }
    log::info!("seed: train {}, synth {}", cfg.train.seed, cfg.synth.seed);
}

fn check_unit(name: &str, v: f64, lo_open: bool) -> Result<f64, Failure> {
    let ok = if lo_open { v > 0.0 && v <= 1.0 } else { (0.0..1.0).contains(&v) };
    if ok {
        Ok(v)
    } else {
        Err(Failure::Usage(format!("{name} {v} is out of range")))
    }
}

fn threshold(arg: Option<f64>, cfg: &ToolConfig) -> Result<f64, Failure> {
    check_unit("threshold", arg.unwrap_or(cfg.detector_thresholds[0]), true)
}

fn relabel_t(arg: Option<f64>, cfg: &ToolConfig) -> Result<f64, Failure> {
    check_unit("t", arg.unwrap_or(cfg.relabel_t), false)
}

fn load_data(data: &DataArgs, cfg: &ToolConfig) -> Result<(DatasetBundle, f64), Failure> {
    let thr = threshold(data.threshold, cfg)?;
    let mut bundle = coco::load_annotations(&data.annotations)?;
    let kept = coco::load_detections(&data.detections, &mut bundle, thr)?;
    log::info!(
        "loaded {} images, {} ground-truth boxes, {kept} detections at threshold {thr}",
        bundle.images.len(),
        bundle.ground_truth_count()
    );
    Ok((bundle, thr))
}

fn load_model(path: &Path, bundle: &DatasetBundle) -> Result<ContextModel, Failure> {
    let model = ContextModel::load(path)?;
    if model.vocab != bundle.vocab {
        return Err(Failure::Data(ctxscore::Error::Config(format!(
            "{} was trained on a different category list",
            path.display()
        ))));
    }
    Ok(model)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn write(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Cooc { annotations, out } => {
            log_config(&cfg);
            let bundle = coco::load_annotations(&annotations)?;
            let m = build_cooccurrence(image_class_sets(&bundle.ground_truth), &bundle.vocab)?;
            export::write_cooc_csv(create(&out)?, &m, &bundle.vocab)?;
            log::info!("wrote {}", out.display());
        }
        Command::Features { data, out } => {
            log_config(&cfg);
            let (bundle, _) = load_data(&data, &cfg)?;
            let set = build_training_set(&bundle.detections, &bundle.ground_truth, &cfg.relations, &bundle.vocab)?;
            export::write_features_csv(create(&out)?, &set)?;
            log::info!("wrote {} rows of {} features to {}", set.len(), set.feature_dim(), out.display());
        }
        Command::Train {
            annotations,
            detections,
            features,
            threshold: thr,
            seed,
            hidden,
            out,
            report,
        } => {
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(h) = hidden {
                cfg.train.hidden = h;
            }
            cfg.validate()?;
            log_config(&cfg);
            let mut bundle = coco::load_annotations(&annotations)?;
            let set = match (features, detections) {
                (Some(f), _) => export::read_features_csv(fs::File::open(f)?)?,
                (None, Some(d)) => {
                    coco::load_detections(&d, &mut bundle, threshold(thr, &cfg)?)?;
                    build_training_set(&bundle.detections, &bundle.ground_truth, &cfg.relations, &bundle.vocab)?
                }
                (None, None) => return Err(Failure::Usage("train needs --detections or --features".into())),
            };
            let positives = set.labels.iter().filter(|l| **l).count();
            log::info!("training on {} samples ({positives} correct)", set.len());
            let (model, rep) = ContextModel::train(&set, &bundle.vocab, &cfg.relations, &cfg.train)?;
            model.save(&out)?;
            log::info!("wrote {}", out.display());
            if let Some(path) = report {
                write(&path, &serde_json::to_string_pretty(&rep).map_err(ctxscore::Error::from)?)?;
            }
        }
        Command::Rescore { data, model, out } => {
            log_config(&cfg);
            let (bundle, thr) = load_data(&data, &cfg)?;
            let model = load_model(&model, &bundle)?;
            let (rescored, skipped) = rescore_all(&model, &bundle.detections, thr)?;
            log::info!("{skipped} single-detection images passed through unchanged");
            write(&out, &coco::results_json(rescored.values().flatten(), &bundle.vocab)?)?;
        }
        Command::Relabel {
            data,
            model,
            t,
            out,
            audit,
        } => {
            log_config(&cfg);
            let t = relabel_t(t, &cfg)?;
            let (bundle, thr) = load_data(&data, &cfg)?;
            let model = load_model(&model, &bundle)?;
            let outcomes = relabel_all(&model, &bundle.detections, thr, t)?;
            let kept = outcomes.values().flat_map(|o| &o.scene.detections);
            write(&out, &coco::results_json(kept, &bundle.vocab)?)?;
            if let Some(path) = audit {
                let records: Vec<_> = outcomes
                    .values()
                    .flat_map(|o| &o.records)
                    .map(|r| r.to_audit(&bundle.vocab))
                    .collect();
                export::write_audit_log(create(&path)?, &records)?;
                log::info!("wrote {}", path.display());
            }
        }
        Command::Eval {
            data,
            mode,
            model,
            t,
            out,
        } => {
            if mode != Mode::Detector && model.is_none() {
                let name = pipelines::Mode::from(mode).name();
                return Err(Failure::Usage(format!("--mode {name} needs --model")));
            }
            log_config(&cfg);
            let t = relabel_t(t, &cfg)?;
            let (bundle, thr) = load_data(&data, &cfg)?;
            let model = model.map(|m| load_model(&m, &bundle)).transpose()?;
            let mode = pipelines::Mode::from(mode);
            let input =
                pipeline_eval_input(mode, model.as_ref(), &bundle.detections, &bundle.ground_truth, thr, t)?;
            let report = evaluate(&input, &bundle.ground_truth, &bundle.vocab, mode.name(), thr);
            let text = export::metrics_json(&report)?;
            match out {
                Some(path) => write(&path, &text)?,
                None => println!("{text}"),
            }
        }
        Command::Synth {
            out_dir,
            images,
            seed,
            first_image_id,
            mislabel_fraction,
        } => {
            let spec = &mut cfg.synth;
            if let Some(v) = images {
                spec.images = v;
            }
            if let Some(v) = seed {
                spec.seed = v;
            }
            if let Some(v) = first_image_id {
                spec.first_image_id = v;
            }
            if let Some(v) = mislabel_fraction {
                spec.mislabel_fraction = v;
            }
            cfg.validate()?;
            log_config(&cfg);
            let out = synth_generate(&cfg.synth)?;
            let b = &out.bundle;
            write(&out_dir.join("annotations.json"), &coco::annotations_json(b)?)?;
            write(&out_dir.join("detections.json"), &coco::results_json(b.detections.values().flatten(), &b.vocab)?)?;
            let summary = serde_json::to_string_pretty(&out.summary).map_err(ctxscore::Error::from)?;
            write(&out_dir.join("summary.json"), &summary)?;
            if out.summary.degenerate {
                log::warn!("every detection has the same correctness; AUC will be undefined");
            }
        }
        Command::Viz {
            data,
            image,
            model,
            t,
            out,
        } => {
            log_config(&cfg);
            let t = relabel_t(t, &cfg)?;
            let (bundle, thr) = load_data(&data, &cfg)?;
            let info = bundle.images.get(&image).ok_or_else(|| {
                Failure::Data(ctxscore::Error::UnknownImages(vec![image]))
            })?;
            let dets = bundle.detections.get(&image).cloned().unwrap_or_default();
            let gts = &bundle.ground_truth[&image];
            let items = match model {
                Some(m) => {
                    let model = load_model(&m, &bundle)?;
                    let scene = pipelines::SceneDetections::new(image, thr, dets);
                    let outcome = pipelines::relabel_scene(&model, &scene, t)?;
                    overlay::relabel_items(&outcome, gts, &bundle.vocab)
                }
                None => overlay::detection_items(&dets, gts, &bundle.vocab),
            };
            let (w, h) = extent(info.width, info.height, &items);
            write(&out, &overlay::render_overlay(w, h, &items))?;
        }
    }
    Ok(())
}

/// Image size, or the boxes' extent when the annotation omits it.
fn extent(width: f64, height: f64, items: &[overlay::OverlayItem]) -> (f64, f64) {
    if width > 0.0 && height > 0.0 {
        return (width, height);
    }
    items.iter().fold((1.0, 1.0), |(w, h), it| {
        (w.max(it.bbox.right()), h.max(it.bbox.bottom()))
    })
}
