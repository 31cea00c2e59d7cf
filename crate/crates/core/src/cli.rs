//! Command-line front end: `generate-data`, `train`, `infer`, `eval`, `plot`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datagen::{
    decode_rle, encode_rle, generate_dataset, load_dataset, load_predictions, save_predictions, GenConfig, PredictionRecord, VideoSample,
};
use crate::error::{Error, Result};
use crate::inference::{infer_video, to_record, DetectionDump, InferenceConfig, TrackPrediction};
use crate::metrics::{evaluate, gt_tracks, EvalParams, EvalVideo, Metrics};
use crate::model::{load_checkpoint, save_checkpoint, train, Model, ModelConfig, TrainConfig};
use crate::plot::{pca_2d, plot_embeddings, plot_losses, LossRow};

/// Relative `--out` paths are resolved against this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "STC_VIS_OUTPUT_ROOT";
pub const CONFIG_ECHO_FILE: &str = "run_config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const LOSS_PLOT_FILE: &str = "loss_curve.svg";
pub const EMBEDDING_PLOT_FILE: &str = "embeddings_pca.svg";
pub const LOSS_LOG_HEADER: [&str; 5] = ["step", "L_condinst", "L_bi_track", "L_consistency", "total"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub n_videos: usize,
    pub video: GenConfig,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            n_videos: 8,
            video: GenConfig::default(),
        }
    }
}

/// Every command's parameters, read from one TOML file. `seed` drives data
/// generation, parameter initialization and training order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub generate: GenerateSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            generate: GenerateSection::default(),
            model: ModelConfig {
                embed_dim: 32,
                ..Default::default()
            },
            train: TrainConfig {
                epochs: 20,
                lr_steps: vec![15],
                ..Default::default()
            },
            inference: InferenceConfig::default(),
            eval: EvalParams::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `seed` everywhere it is consumed.
    fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.generate.video.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        if self.eval.iou_thresholds.is_empty() || self.eval.max_dets.is_empty() {
            return Err(Error::Config("eval.iou_thresholds and eval.max_dets must be nonempty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "stc-vis", version, about = "Video instance segmentation with contrastive tracking embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; relative paths honor $STC_VIS_OUTPUT_ROOT.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_videos: Option<usize>,
    },
    /// Train a model and write a checkpoint plus loss log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run online inference and write predictions.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Also write per-detection embeddings.
        #[arg(long)]
        dump_embeddings: bool,
    },
    /// Score predictions against dataset annotations.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Render a loss curve and, optionally, an embedding projection.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenerateData { common, .. }
            | Command::Train { common, .. }
            | Command::Infer { common, .. }
            | Command::Eval { common, .. }
            | Command::Plot { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::GenerateData { .. } => "generate-data",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
            Command::Eval { .. } => "eval",
            Command::Plot { .. } => "plot",
        }
    }
}

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const RUNTIME: i32 = 2;
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => exit::USAGE,
        _ => exit::RUNTIME,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::SUCCESS };
        }
    };
    match execute(&cli.command) {
        Ok(()) => exit::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve_out(out: Option<&Path>, command: &str) -> PathBuf {
    let out = out.map_or_else(|| PathBuf::from("runs").join(command), Path::to_path_buf);
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out,
    }
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!("{} is not empty; pass --force to write into it", dir.display())));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn execute(command: &Command) -> Result<()> {
    let common = command.common();
    let base = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_seed(common.seed);
    match command {
        Command::GenerateData { n_videos: Some(n), .. } => cfg.generate.n_videos = *n,
        Command::Train { epochs: Some(e), .. } => cfg.train.epochs = *e,
        _ => {}
    }
    cfg.validate()?;
    let out = resolve_out(common.out.as_deref(), command.name());
    prepare_out(&out, common.force)?;
    fs::write(out.join(CONFIG_ECHO_FILE), cfg.to_toml()?).map_err(|e| Error::io(out.join(CONFIG_ECHO_FILE), e))?;
    log::info!("{} -> {}", command.name(), out.display());
    match command {
        Command::GenerateData { .. } => cmd_generate(&cfg, &out),
        Command::Train { dataset, .. } => cmd_train(&cfg, dataset, &out),
        Command::Infer {
            checkpoint,
            dataset,
            dump_embeddings,
            ..
        } => cmd_infer(&cfg, checkpoint, dataset, *dump_embeddings, &out),
        Command::Eval { predictions, dataset, .. } => cmd_eval(&cfg, predictions, dataset, &out).map(|_| ()),
        Command::Plot { loss_log, embeddings, .. } => cmd_plot(loss_log.as_deref(), embeddings.as_deref(), &out),
    }
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let videos = generate_dataset(&cfg.generate.video, cfg.seed, cfg.generate.n_videos)?;
    crate::datagen::write_dataset(out, &cfg.generate.video, cfg.seed, &videos)?;
    Ok(())
}

/// Trains and writes the checkpoint and loss log. The log is written even
/// when training diverges.
pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<()> {
    let (_, videos) = load_dataset(dataset)?;
    let model = Model::new(&cfg.model, cfg.seed)?;
    let log_path = out.join(LOSS_LOG_FILE);
    let mut writer = csv::Writer::from_path(&log_path).map_err(|e| Error::format(log_path.display().to_string(), e.to_string()))?;
    let csv_err = |e: csv::Error| Error::format(log_path.display().to_string(), e.to_string());
    writer.write_record(LOSS_LOG_HEADER).map_err(csv_err)?;
    let mut write_failure = None;
    let result = train(&model, &videos, &cfg.train, |s| {
        let l = s.losses;
        let row = [s.step.to_string(), l.condinst.to_string(), l.bi_track.to_string(), l.consistency.to_string(), l.total.to_string()];
        if let Err(e) = writer.write_record(&row) {
            write_failure.get_or_insert(e);
        }
        if s.step % 50 == 0 {
            log::info!("step {} epoch {} total {:.4}", s.step, s.epoch, l.total);
        }
    });
    writer.flush().map_err(|e| Error::io(&log_path, e))?;
    if let Some(e) = write_failure {
        return Err(csv_err(e));
    }
    result?;
    save_checkpoint(&model, &out.join(CHECKPOINT_FILE), Some(&cfg.train))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEmbeddings {
    pub video_id: String,
    pub detections: Vec<DetectionDump>,
}

pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, dump_embeddings: bool, out: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let (_, videos) = load_dataset(dataset)?;
    let mut records = Vec::new();
    let mut dumps = Vec::new();
    for video in &videos {
        let (tracks, dump) = infer_video(&model, video, &cfg.inference)?;
        records.extend(tracks.iter().map(|t| to_record(&video.video_id, t)));
        if dump_embeddings {
            dumps.push(VideoEmbeddings {
                video_id: video.video_id.clone(),
                detections: dump,
            });
        }
    }
    save_predictions(&out.join(PREDICTIONS_FILE), &records)?;
    if dump_embeddings {
        write_json(&out.join(EMBEDDINGS_FILE), &dumps)?;
    }
    Ok(())
}

/// Groups prediction records by video. Track ids follow file order.
pub fn eval_videos(records: &[PredictionRecord], videos: &[VideoSample], origin: &str) -> Result<Vec<EvalVideo>> {
    let index: BTreeMap<&str, usize> = videos.iter().enumerate().map(|(i, v)| (v.video_id.as_str(), i)).collect();
    let mut preds: Vec<Vec<TrackPrediction>> = vec![Vec::new(); videos.len()];
    for (i, r) in records.iter().enumerate() {
        let &v = index
            .get(r.video_id.as_str())
            .ok_or_else(|| Error::format(origin, format!("[{i}].video_id {} is not in the dataset", r.video_id)))?;
        let video = &videos[v];
        if r.segmentations.len() != video.len() {
            return Err(Error::format(
                origin,
                format!("[{i}].segmentations has {} frames, video {} has {}", r.segmentations.len(), r.video_id, video.len()),
            ));
        }
        let masks = r
            .segmentations
            .iter()
            .enumerate()
            .map(|(t, s)| {
                s.as_ref()
                    .map(|rle| {
                        let m = decode_rle(rle).map_err(|e| Error::format(origin, format!("[{i}].segmentations[{t}]: {e}")))?;
                        if m.shape() != (video.height(), video.width()) {
                            return Err(Error::format(origin, format!("[{i}].segmentations[{t}] has the wrong size")));
                        }
                        Ok(m)
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        preds[v].push(TrackPrediction {
            track_id: i as u64,
            category: r.category_id,
            score: r.score,
            masks,
        });
    }
    Ok(videos
        .iter()
        .zip(preds)
        .map(|(v, preds)| EvalVideo {
            length: v.len(),
            preds,
            gts: gt_tracks(v),
        })
        .collect())
}

/// Ground truth rewritten as score-1 prediction records.
pub fn ground_truth_records(video: &VideoSample) -> Vec<PredictionRecord> {
    gt_tracks(video)
        .into_iter()
        .map(|g| PredictionRecord {
            video_id: video.video_id.clone(),
            category_id: g.category,
            score: 1.0,
            segmentations: g.masks.iter().map(|m| m.as_ref().map(encode_rle)).collect(),
        })
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig, predictions: &Path, dataset: &Path, out: &Path) -> Result<Metrics> {
    let records = load_predictions(predictions)?;
    let (_, videos) = load_dataset(dataset)?;
    let evs = eval_videos(&records, &videos, &predictions.display().to_string())?;
    let metrics = evaluate(&evs, &cfg.eval)?;
    write_json(&out.join(METRICS_FILE), &metrics)?;
    Ok(metrics)
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRow>> {
    let origin = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(&origin, format!("{other:?}")),
    })?;
    let header = reader.headers().map_err(|e| Error::format(&origin, e.to_string()))?.clone();
    if header.iter().ne(LOSS_LOG_HEADER) {
        return Err(Error::format(&origin, format!("unexpected header {header:?}")));
    }
    reader
        .records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| Error::format(&origin, e.to_string()))?;
            let num = |k: usize| -> Result<f64> {
                rec.get(k)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format(&origin, format!("row {}: bad {}", i + 1, LOSS_LOG_HEADER[k])))
            };
            Ok(LossRow {
                step: num(0)? as usize,
                condinst: num(1)?,
                bi_track: num(2)?,
                consistency: num(3)?,
                total: num(4)?,
            })
        })
        .collect()
}

pub fn cmd_plot(loss_log: Option<&Path>, embeddings: Option<&Path>, out: &Path) -> Result<()> {
    if loss_log.is_none() && embeddings.is_none() {
        return Err(Error::Config("plot needs --loss-log and/or --embeddings".into()));
    }
    if let Some(path) = loss_log {
        plot_losses(&read_loss_log(path)?, &out.join(LOSS_PLOT_FILE))?;
    }
    if let Some(path) = embeddings {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let videos: Vec<VideoEmbeddings> = serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        let (rows, labels) = embedding_points(&videos);
        plot_embeddings(&pca_2d(&rows)?, &labels, &out.join(EMBEDDING_PLOT_FILE))?;
    }
    Ok(())
}

/// Flattens dumped detections into vectors labeled by a per-file track index.
pub fn embedding_points(videos: &[VideoEmbeddings]) -> (Vec<Vec<f32>>, Vec<u64>) {
    let mut labels = BTreeMap::new();
    let mut rows = Vec::new();
    let mut out = Vec::new();
    for v in videos {
        for d in &v.detections {
            let next = labels.len() as u64;
            let label = *labels.entry((v.video_id.clone(), d.track_id)).or_insert(next);
            rows.push(d.embedding.clone());
            out.push(label);
        }
    }
    (rows, out)
}
