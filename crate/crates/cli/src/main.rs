//! `tsseg` — timestamp-supervised temporal segmentation from the command
//! line: synthetic dataset generation, training, evaluation and dense-label
//! generation.
//!
//! Exit codes are a stable contract for scripts: 0 success, 2 usage or
//! configuration errors, 3 data or compatibility errors, 4 numerical
//! divergence.

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};
use tsseg_core::data::{
    load_dataset, sample_timestamps, synth_dataset, write_labels, Dataset, SynthConfig,
};
use tsseg_core::gcn::{
    generate_labels, load_gcn_checkpoint, save_gcn_checkpoint, GcnParams, GcnVariant,
};
use tsseg_core::graph::{build_graph, EdgeMode};
use tsseg_core::losses::LossWeights;
use tsseg_core::metrics::{accuracy, evaluate_dataset, segments_from_labels};
use tsseg_core::numerics::{derive_seed, Real, REAL_BITS};
use tsseg_core::segmenter::{load_tcn_checkpoint, predict, save_tcn_checkpoint, tcn_forward, TcnParams};
use tsseg_core::trainer::{run, Phase, RunRecord, ScheduleConfig};
use tsseg_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tsseg", version, about = "Timestamp-supervised temporal activity segmentation")]
struct Cli {
    /// Cap the worker thread pool (default: all cores; TSSEG_WORKERS works too)
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    /// Numeric precision this invocation expects (must match the build)
    #[arg(long, global = true, default_value = "f64")]
    precision: String,

    /// Omit wall-clock stamps from logs and the run record, for
    /// byte-reproducible output
    #[arg(long, global = true)]
    no_timestamps: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth and timestamps
    Synth(SynthArgs),
    /// Train the segmenter (and propagation network) on a dataset
    Train(Box<TrainArgs>),
    /// Score a segmenter checkpoint and export predictions and timelines
    Eval(EvalArgs),
    /// Generate dense framewise labels from trained checkpoints
    GenLabels(GenLabelsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for features/, gt/, timestamps/ and manifest.json
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    videos: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Feature dimensionality
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Minimum segment length in frames
    #[arg(long, default_value_t = 20)]
    min_len: usize,
    /// Maximum segment length in frames
    #[arg(long, default_value_t = 60)]
    max_len: usize,
    #[arg(long, default_value_t = 3)]
    min_segments: usize,
    #[arg(long, default_value_t = 6)]
    max_segments: usize,
    /// Per-dimension Gaussian feature noise
    #[arg(long, default_value_t = 0.4)]
    noise_sigma: f64,
    /// Frames around each boundary blended between class prototypes
    #[arg(long, default_value_t = 3)]
    boundary_blur: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (JSON)
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoints and the run record
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    init_epochs: usize,
    #[arg(long, default_value_t = 20)]
    refine_iters: usize,
    /// Propagation-network epochs per refinement iteration
    /// (default 300, or 60 with --synthetic-preset)
    #[arg(long)]
    gcn_epochs_per_iter: Option<usize>,
    #[arg(long, default_value_t = 3)]
    seg_epochs_per_iter: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 2)]
    num_stages: usize,
    #[arg(long, default_value_t = 6)]
    layers_per_stage: usize,
    #[arg(long, default_value_t = 64)]
    feature_maps: usize,
    #[arg(long, default_value_t = 32)]
    gcn_hidden: usize,
    /// Label-propagation architecture: "gcn" or "mlp"
    #[arg(long, default_value = "gcn")]
    gcn_variant: GcnVariant,
    /// Temporal window for graph edges (odd)
    #[arg(long, default_value_t = 31)]
    window: usize,
    /// Edge weighting: "weighted" (cosine) or "binary"
    #[arg(long, default_value = "weighted")]
    edge_mode: EdgeMode,
    #[arg(long, default_value_t = 0.0005)]
    seg_lr: f64,
    #[arg(long, default_value_t = 0.01)]
    gcn_lr: f64,
    #[arg(long, default_value_t = 0.0005)]
    gcn_weight_decay: f64,
    /// Smoothing-loss weight
    #[arg(long, default_value_t = 0.15)]
    alpha: f64,
    /// Confidence-loss weight
    #[arg(long, default_value_t = 0.075)]
    beta: f64,
    /// Smoothing-loss truncation threshold
    #[arg(long, default_value_t = 4.0)]
    tau: f64,
    /// Apply the confidence loss only to the final stage's logits
    #[arg(long)]
    conf_final_stage_only: bool,
    /// Keep video order fixed instead of shuffling each epoch
    #[arg(long)]
    no_shuffle: bool,
    /// Reinitialize the propagation network at every refinement iteration
    #[arg(long)]
    gcn_reinit: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Schedule preset for the bundled synthetic generator
    #[arg(long)]
    synthetic_preset: bool,
    /// Ignore stored timestamps; sample one frame per ground-truth segment
    /// with this seed
    #[arg(long, value_name = "SEED")]
    sample_timestamps: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Segmenter checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for predictions/, timelines/ and report.txt
    #[arg(long)]
    out: PathBuf,
    /// Class excluded from edit/F1 segment sets (e.g. background)
    #[arg(long)]
    exclude_class: Option<usize>,
}

#[derive(Args)]
struct GenLabelsArgs {
    /// Segmenter checkpoint (provides the framewise embeddings)
    #[arg(long)]
    segmenter: PathBuf,
    /// Propagation-network checkpoint
    #[arg(long)]
    gcn: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for labels/
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 31)]
    window: usize,
    #[arg(long, default_value = "weighted")]
    edge_mode: EdgeMode,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Numerical(_) => 4,
        _ => 3,
    }
}

fn now_stamp() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

struct Logger {
    stamps: bool,
}

impl Logger {
    fn say(&self, msg: &str) {
        if self.stamps {
            println!("[{}] {msg}", now_stamp());
        } else {
            println!("{msg}");
        }
    }
}

fn configure_workers(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("TSSEG_WORKERS") {
            Ok(raw) => Some(raw.parse::<usize>().map_err(|_| {
                Error::Config(format!("TSSEG_WORKERS must be a positive integer, got '{raw}'"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("could not size the worker pool: {e}")))?;
    }
    Ok(())
}

fn check_precision(flag: &str) -> Result<()> {
    let requested = match flag {
        "f64" => 64,
        "f32" => 32,
        other => {
            return Err(Error::Config(format!(
                "unknown precision '{other}' (expected 'f32' or 'f64')"
            )))
        }
    };
    if requested != REAL_BITS {
        let hint = if requested == 32 {
            "rebuild with `--features f32`"
        } else {
            "rebuild without the `f32` feature"
        };
        return Err(Error::Config(format!(
            "this binary computes with {REAL_BITS}-bit floats; {hint} for {requested}-bit"
        )));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    check_precision(&cli.precision)?;
    configure_workers(cli.workers)?;
    let log = Logger { stamps: !cli.no_timestamps };
    match cli.command {
        Command::Synth(args) => cmd_synth(args, &log),
        Command::Train(args) => cmd_train(*args, &log),
        Command::Eval(args) => cmd_eval(args, &log),
        Command::GenLabels(args) => cmd_gen_labels(args, &log),
    }
}

fn cmd_synth(args: SynthArgs, log: &Logger) -> Result<()> {
    let config = SynthConfig {
        num_videos: args.videos,
        num_classes: args.classes,
        feature_dim: args.dim,
        segment_len_range: (args.min_len, args.max_len),
        segments_per_video: (args.min_segments, args.max_segments),
        noise_sigma: args.noise_sigma as Real,
        boundary_blur: args.boundary_blur,
        seed: args.seed,
    };
    let out = synth_dataset(&config, &args.out)?;
    log.say(&format!(
        "wrote {} videos ({} classes, dim {}) under {}",
        out.manifest.videos.len(),
        out.manifest.num_classes,
        args.dim,
        args.out.display()
    ));
    println!("{}", out.manifest_path.display());
    Ok(())
}

fn schedule_from_args(args: &TrainArgs) -> ScheduleConfig {
    ScheduleConfig {
        init_epochs: args.init_epochs,
        refine_iters: args.refine_iters,
        gcn_epochs_per_iter: args
            .gcn_epochs_per_iter
            .unwrap_or(if args.synthetic_preset { 60 } else { 300 }),
        seg_epochs_per_iter: args.seg_epochs_per_iter,
        batch_size: args.batch_size,
        num_stages: args.num_stages,
        layers_per_stage: args.layers_per_stage,
        num_feature_maps: args.feature_maps,
        gcn_hidden: args.gcn_hidden,
        gcn_variant: args.gcn_variant,
        window: args.window,
        edge_mode: args.edge_mode,
        seg_lr: args.seg_lr as Real,
        gcn_lr: args.gcn_lr as Real,
        gcn_weight_decay: args.gcn_weight_decay as Real,
        loss_weights: LossWeights {
            alpha: args.alpha as Real,
            beta: args.beta as Real,
            tau: args.tau as Real,
        },
        conf_all_stages: !args.conf_final_stage_only,
        shuffle: !args.no_shuffle,
        gcn_reinit: args.gcn_reinit,
        seed: args.seed,
    }
}

/// Prints one summary line per schedule phase from the accumulated record.
fn summarize_record(record: &RunRecord, log: &Logger) {
    let last_loss = |phase: Phase, iter: usize| {
        record
            .epochs
            .iter()
            .filter(|e| e.phase == phase && e.iteration == iter)
            .filter_map(|e| e.loss)
            .next_back()
    };
    if let Some(loss) = last_loss(Phase::Init, 0) {
        log.say(&format!("initialization: final loss {loss:.6}"));
    }
    let iters: Vec<usize> = {
        let mut seen = Vec::new();
        for e in &record.epochs {
            if e.phase == Phase::Labels && !seen.contains(&e.iteration) {
                seen.push(e.iteration);
            }
        }
        seen
    };
    for iter in iters {
        let gcn = last_loss(Phase::Gcn, iter)
            .map_or_else(|| "-".into(), |l| format!("{l:.6}"));
        let seg = last_loss(Phase::Seg, iter)
            .map_or_else(|| "-".into(), |l| format!("{l:.6}"));
        let acc = record
            .epochs
            .iter()
            .find(|e| e.phase == Phase::Labels && e.iteration == iter)
            .and_then(|e| e.label_accuracy)
            .map_or_else(|| "-".into(), |a| format!("{a:.2}%"));
        log.say(&format!(
            "refinement {iter}: gcn loss {gcn}, label acc {acc}, seg loss {seg}"
        ));
    }
}

fn cmd_train(args: TrainArgs, log: &Logger) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let mut dataset = load_dataset(&args.manifest)?;
    if let Some(seed) = args.sample_timestamps {
        for (v, video) in dataset.videos.iter_mut().enumerate() {
            let gt = video.gt_labels.as_ref().ok_or_else(|| {
                Error::Data(format!(
                    "--sample-timestamps needs ground truth, but video '{}' has none",
                    video.id
                ))
            })?;
            video.timestamps = Some(sample_timestamps(gt, derive_seed(seed, v as u64))?);
        }
    }

    let config = schedule_from_args(&args);
    log.say(&format!(
        "training on {} videos ({} classes, dim {}), schedule ({}, {})",
        dataset.videos.len(),
        dataset.num_classes,
        dataset.feature_dim(),
        config.init_epochs,
        config.refine_iters,
    ));

    let wall_clock = log.stamps.then(now_stamp);
    let mut record = RunRecord::new(&config)?;
    let outcome = run(&config, &dataset, &mut record);
    // The record survives divergence: persist whatever completed first.
    let record_path = args.out.join("run_record.txt");
    record.write(&record_path, wall_clock.as_deref())?;
    let (tcn, gcn) = outcome?;

    summarize_record(&record, log);
    let seg_path = args.out.join("segmenter.ckpt");
    save_tcn_checkpoint(&tcn, &seg_path)?;
    log.say(&format!("segmenter checkpoint: {}", seg_path.display()));
    if let Some(gcn) = &gcn {
        let gcn_path = args.out.join("gcn.ckpt");
        save_gcn_checkpoint(gcn, &gcn_path)?;
        log.say(&format!("propagation-network checkpoint: {}", gcn_path.display()));
    }
    log.say(&format!("run record: {}", record_path.display()));

    if let Some(metrics) = &record.final_metrics {
        println!("{}", metrics.table());
        print!("{}", metrics.machine_lines());
    }
    Ok(())
}

fn check_segmenter_compat(tcn: &TcnParams, dataset: &Dataset, path: &Path) -> Result<()> {
    let cfg = tcn.config();
    if cfg.input_dim != dataset.feature_dim() {
        return Err(Error::Data(format!(
            "checkpoint {} expects {}-dimensional features but the dataset provides {}",
            path.display(),
            cfg.input_dim,
            dataset.feature_dim()
        )));
    }
    if cfg.num_classes != dataset.num_classes {
        return Err(Error::Data(format!(
            "checkpoint {} was trained for {} classes but the dataset declares {}",
            path.display(),
            cfg.num_classes,
            dataset.num_classes
        )));
    }
    Ok(())
}

fn write_timeline(labels: &[usize], path: &Path) -> Result<()> {
    let mut text = String::new();
    for seg in segments_from_labels(labels) {
        text.push_str(&format!("{},{},{}\n", seg.class, seg.start, seg.end));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_eval(args: EvalArgs, log: &Logger) -> Result<()> {
    let dataset = load_dataset(&args.manifest)?;
    let tcn = load_tcn_checkpoint(&args.checkpoint, 0.0)?;
    check_segmenter_compat(&tcn, &dataset, &args.checkpoint)?;
    if let Some(c) = args.exclude_class {
        if c >= dataset.num_classes {
            return Err(Error::Config(format!(
                "--exclude-class {c} is out of range for {} classes",
                dataset.num_classes
            )));
        }
    }

    let predictions: Vec<Vec<usize>> = dataset
        .videos
        .par_iter()
        .map(|v| predict(&tcn, &v.features))
        .collect::<Result<_>>()?;

    let pred_dir = args.out.join("predictions");
    let timeline_dir = args.out.join("timelines");
    std::fs::create_dir_all(&pred_dir)?;
    std::fs::create_dir_all(&timeline_dir)?;
    for (video, labels) in dataset.videos.iter().zip(&predictions) {
        write_labels(labels, &pred_dir.join(format!("{}.txt", video.id)))?;
        write_timeline(labels, &timeline_dir.join(format!("{}.csv", video.id)))?;
    }
    log.say(&format!(
        "wrote {} prediction and timeline files under {}",
        predictions.len(),
        args.out.display()
    ));

    let pairs: Vec<(Vec<usize>, Vec<usize>)> = dataset
        .videos
        .iter()
        .zip(&predictions)
        .filter_map(|(v, p)| v.gt_labels.as_ref().map(|gt| (p.clone(), gt.clone())))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Data(
            "no video in the manifest carries ground-truth labels to score against".into(),
        ));
    }
    let scores = evaluate_dataset(&pairs, args.exclude_class)?;
    let report = format!("{}\n{}", scores.table(), scores.machine_lines());
    std::fs::write(args.out.join("report.txt"), &report)?;
    println!("{}", scores.table());
    print!("{}", scores.machine_lines());
    Ok(())
}

fn check_gcn_compat(gcn: &GcnParams, tcn: &TcnParams, dataset: &Dataset, path: &Path) -> Result<()> {
    if gcn.input_dim() != tcn.config().num_feature_maps {
        return Err(Error::Data(format!(
            "propagation checkpoint {} expects {}-dimensional embeddings but the segmenter \
             produces {}",
            path.display(),
            gcn.input_dim(),
            tcn.config().num_feature_maps
        )));
    }
    if gcn.num_classes() != dataset.num_classes {
        return Err(Error::Data(format!(
            "propagation checkpoint {} was trained for {} classes but the dataset declares {}",
            path.display(),
            gcn.num_classes(),
            dataset.num_classes
        )));
    }
    Ok(())
}

fn cmd_gen_labels(args: GenLabelsArgs, log: &Logger) -> Result<()> {
    let dataset = load_dataset(&args.manifest)?;
    let tcn = load_tcn_checkpoint(&args.segmenter, 0.0)?;
    check_segmenter_compat(&tcn, &dataset, &args.segmenter)?;
    let gcn = load_gcn_checkpoint(&args.gcn, 0.0, 0.0)?;
    check_gcn_compat(&gcn, &tcn, &dataset, &args.gcn)?;

    let generated: Vec<Vec<usize>> = dataset
        .videos
        .par_iter()
        .map(|video| {
            let stamps = video.timestamps.as_ref().ok_or_else(|| {
                Error::Annotation(format!("video '{}' has no timestamp annotations", video.id))
            })?;
            let trace = tcn_forward(&tcn, &video.features)?;
            let embedding = trace.penultimate();
            let graph = build_graph(embedding, args.window, args.edge_mode)?;
            generate_labels(&gcn, &graph, embedding, stamps)
        })
        .collect::<Result<_>>()?;

    let label_dir = args.out.join("labels");
    std::fs::create_dir_all(&label_dir)?;
    for (video, labels) in dataset.videos.iter().zip(&generated) {
        write_labels(labels, &label_dir.join(format!("{}.txt", video.id)))?;
    }
    log.say(&format!(
        "wrote dense labels for {} videos under {}",
        generated.len(),
        label_dir.display()
    ));

    let mut with_gt = 0usize;
    let mut acc_sum = 0.0;
    for (video, labels) in dataset.videos.iter().zip(&generated) {
        if let Some(gt) = &video.gt_labels {
            let acc = accuracy(labels, gt)?;
            println!("{},{:.4}", video.id, acc);
            acc_sum += acc;
            with_gt += 1;
        }
    }
    if with_gt > 0 {
        println!("mean,{:.4}", acc_sum / with_gt as Real);
    }
    Ok(())
}
