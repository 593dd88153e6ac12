//! Alternating-learning orchestration: an initialization stage trains the
//! segmenter on sparse timestamp labels alone, then refinement iterations
//! alternate between (re)fitting the label-propagation network on the
//! segmenter's current embeddings and training the segmenter on the dense
//! labels it generates. Evaluation afterwards uses only the segmenter.

use crate::data::{Dataset, TimestampAnnotation, VideoData};
use crate::error::{Error, Result};
use crate::gcn::{
    gcn_init, generate_labels, train_gcn_epoch, GcnParams, GcnTrainItem, GcnVariant,
};
use crate::graph::{build_graph, EdgeMode, TemporalGraph};
use crate::losses::LossWeights;
use crate::metrics::{accuracy, evaluate_dataset, DatasetScores};
use crate::numerics::{derive_seed, Matrix, Real};
use crate::segmenter::{
    predict, tcn_forward, tcn_init, train_seg_epoch, SegTrainItem, TcnConfig, TcnParams,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const SEED_STREAM_TCN: u64 = 1;
const SEED_STREAM_SHUFFLE: u64 = 2;
const SEED_STREAM_GCN: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Epochs of timestamp-only segmenter training before refinement.
    pub init_epochs: usize,
    /// Refinement iterations (each: fit propagation net, generate labels,
    /// train segmenter).
    pub refine_iters: usize,
    pub gcn_epochs_per_iter: usize,
    pub seg_epochs_per_iter: usize,
    pub batch_size: usize,
    pub num_stages: usize,
    pub layers_per_stage: usize,
    pub num_feature_maps: usize,
    pub gcn_hidden: usize,
    pub gcn_variant: GcnVariant,
    pub window: usize,
    pub edge_mode: EdgeMode,
    pub seg_lr: Real,
    pub gcn_lr: Real,
    pub gcn_weight_decay: Real,
    pub loss_weights: LossWeights,
    /// Apply the confidence term to every stage's logits rather than only the
    /// final stage's.
    pub conf_all_stages: bool,
    /// Shuffle video order each epoch (seeded by the run seed).
    pub shuffle: bool,
    /// Draw fresh propagation-network weights at every refinement iteration
    /// instead of carrying them across iterations.
    pub gcn_reinit: bool,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            init_epochs: 30,
            refine_iters: 20,
            gcn_epochs_per_iter: 300,
            seg_epochs_per_iter: 3,
            batch_size: 8,
            num_stages: 2,
            layers_per_stage: 6,
            num_feature_maps: 64,
            gcn_hidden: 32,
            gcn_variant: GcnVariant::Gcn,
            window: 31,
            edge_mode: EdgeMode::Weighted,
            seg_lr: 0.0005,
            gcn_lr: 0.01,
            gcn_weight_decay: 0.0005,
            loss_weights: LossWeights::default(),
            conf_all_stages: true,
            shuffle: true,
            gcn_reinit: false,
            seed: 0,
        }
    }
}

impl ScheduleConfig {
    /// Defaults tuned for the bundled synthetic generator: identical to the
    /// full schedule except the propagation network trains 60 epochs per
    /// iteration, which is plenty at synthetic scale and keeps runs short.
    pub fn synthetic_preset() -> Self {
        ScheduleConfig { gcn_epochs_per_iter: 60, ..ScheduleConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.init_epochs + self.refine_iters == 0 {
            return Err(Error::Config(
                "schedule trains nothing: init_epochs and refine_iters are both 0".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.num_stages == 0
            || self.layers_per_stage == 0
            || self.num_feature_maps == 0
            || self.gcn_hidden == 0
        {
            return Err(Error::Config("model dimensions must be at least 1".into()));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "window must be odd and positive, got {}",
                self.window
            )));
        }
        if self.gcn_reinit && self.refine_iters == 0 {
            return Err(Error::Config(
                "gcn_reinit has no effect without refinement iterations".into(),
            ));
        }
        if self.refine_iters > 0 && self.gcn_epochs_per_iter == 0 {
            return Err(Error::Config(
                "refinement needs gcn_epochs_per_iter >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Which part of the schedule a record row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Timestamp-only segmenter epochs.
    Init,
    /// Propagation-network epochs inside a refinement iteration.
    Gcn,
    /// One row per refinement iteration, after dense-label generation.
    Labels,
    /// Segmenter epochs on generated labels.
    Seg,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Gcn => "gcn",
            Phase::Labels => "labels",
            Phase::Seg => "seg",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub phase: Phase,
    /// Refinement iteration (1-based); 0 during initialization.
    pub iteration: usize,
    /// Epoch within its phase (1-based); 0 for `labels` rows.
    pub epoch: usize,
    pub loss: Option<Real>,
    /// Mean framewise accuracy of generated labels against ground truth,
    /// present on `labels` rows when the dataset carries ground truth.
    pub label_accuracy: Option<Real>,
}

/// Everything a run leaves behind besides checkpoints. The caller owns the
/// record and persists it even when the run aborts mid-schedule.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config_json: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub final_metrics: Option<DatasetScores>,
}

impl RunRecord {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        let config_json = serde_json::to_string(config)
            .map_err(|e| Error::Config(format!("could not snapshot config: {e}")))?;
        Ok(RunRecord { config_json, seed: config.seed, epochs: Vec::new(), final_metrics: None })
    }

    pub fn count(&self, phase: Phase) -> usize {
        self.epochs.iter().filter(|e| e.phase == phase).count()
    }

    /// Text form: commented header, one CSV row per epoch, metric lines at
    /// the end. `wall_clock` is stamped into the header when given; omit it
    /// for byte-reproducible output.
    pub fn render(&self, wall_clock: Option<&str>) -> String {
        let mut s = String::from("# tsseg run record\n");
        if let Some(ts) = wall_clock {
            s.push_str(&format!("# time: {ts}\n"));
        }
        s.push_str(&format!("# seed: {}\n", self.seed));
        s.push_str(&format!("# config: {}\n", self.config_json));
        s.push_str("phase,iteration,epoch,loss,label_acc\n");
        for e in &self.epochs {
            let loss = e.loss.map_or_else(|| "-".into(), |v: Real| v.to_string());
            let acc = e.label_accuracy.map_or_else(|| "-".into(), |v: Real| v.to_string());
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.phase.as_str(),
                e.iteration,
                e.epoch,
                loss,
                acc
            ));
        }
        if let Some(m) = &self.final_metrics {
            s.push_str("# final metrics\n");
            s.push_str(&m.machine_lines());
        }
        s
    }

    pub fn write(&self, path: &std::path::Path, wall_clock: Option<&str>) -> Result<()> {
        std::fs::write(path, self.render(wall_clock))?;
        Ok(())
    }
}

fn video_timestamps(video: &VideoData) -> Result<&TimestampAnnotation> {
    video.timestamps.as_ref().ok_or_else(|| {
        Error::Annotation(format!("video '{}' has no timestamp annotations", video.id))
    })
}

fn sparse_label_table(dataset: &Dataset) -> Result<Vec<Vec<Option<usize>>>> {
    dataset
        .videos
        .iter()
        .map(|v| video_timestamps(v)?.to_sparse_labels(v.num_frames()))
        .collect()
}

fn check_loss_finite(loss: Real, context: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("{context}: loss diverged to {loss}")));
    }
    Ok(())
}

fn check_tcn_finite(params: &TcnParams, context: &str) -> Result<()> {
    if params.params().iter().any(|p| !p.value.all_finite()) {
        return Err(Error::Numerical(format!("{context}: segmenter parameters diverged")));
    }
    Ok(())
}

fn check_gcn_finite(params: &GcnParams, context: &str) -> Result<()> {
    if !params.w1.value.all_finite() || !params.w2.value.all_finite() {
        return Err(Error::Numerical(format!(
            "{context}: propagation-network parameters diverged"
        )));
    }
    Ok(())
}

/// Timestamp-only training of the segmenter for `config.init_epochs` epochs.
pub fn initialize_stage(
    tcn: &mut TcnParams,
    dataset: &Dataset,
    config: &ScheduleConfig,
    shuffle_rng: &mut ChaCha8Rng,
    record: &mut RunRecord,
) -> Result<()> {
    let sparse = sparse_label_table(dataset)?;
    let stamps: Vec<&TimestampAnnotation> =
        dataset.videos.iter().map(video_timestamps).collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..dataset.videos.len()).collect();
    for epoch in 1..=config.init_epochs {
        if config.shuffle {
            order.shuffle(shuffle_rng);
        }
        let items: Vec<SegTrainItem<'_>> = order
            .iter()
            .map(|&i| SegTrainItem {
                features: &dataset.videos[i].features,
                labels: &sparse[i],
                timestamps: stamps[i],
            })
            .collect();
        let loss = train_seg_epoch(
            tcn,
            &items,
            &config.loss_weights,
            config.batch_size,
            config.conf_all_stages,
        )?;
        record.epochs.push(EpochRecord {
            phase: Phase::Init,
            iteration: 0,
            epoch,
            loss: Some(loss),
            label_accuracy: None,
        });
        check_loss_finite(loss, "initialization")?;
        check_tcn_finite(tcn, "initialization")?;
    }
    Ok(())
}

/// Mean per-video framewise accuracy of generated labels against ground
/// truth, over the videos that carry ground truth.
fn generated_label_accuracy(dataset: &Dataset, generated: &[Vec<usize>]) -> Result<Option<Real>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (video, gen) in dataset.videos.iter().zip(generated) {
        if let Some(gt) = &video.gt_labels {
            sum += accuracy(gen, gt)?;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as Real))
}

/// One refinement iteration: embed every video with the current segmenter,
/// build fresh temporal graphs, train the propagation network on the sparse
/// timestamps, generate dense labels, and train the segmenter on them (the
/// confidence term keeps using the original timestamps). Returns the
/// generated labels.
pub fn refine_iteration(
    tcn: &mut TcnParams,
    gcn: &mut Option<GcnParams>,
    dataset: &Dataset,
    config: &ScheduleConfig,
    iteration: usize,
    shuffle_rng: &mut ChaCha8Rng,
    record: &mut RunRecord,
) -> Result<Vec<Vec<usize>>> {
    let sparse = sparse_label_table(dataset)?;
    let stamps: Vec<&TimestampAnnotation> =
        dataset.videos.iter().map(video_timestamps).collect::<Result<_>>()?;

    // Fresh embeddings and graphs every iteration: the segmenter just moved,
    // so last iteration's graphs no longer describe its feature space.
    let snapshot: &TcnParams = tcn;
    let embedded: Vec<(Matrix, TemporalGraph)> = dataset
        .videos
        .par_iter()
        .map(|video| {
            let trace = tcn_forward(snapshot, &video.features)?;
            let embedding = trace.penultimate().clone();
            let graph = build_graph(&embedding, config.window, config.edge_mode)?;
            Ok((embedding, graph))
        })
        .collect::<Result<_>>()?;

    if config.gcn_reinit || gcn.is_none() {
        *gcn = Some(gcn_init(
            config.num_feature_maps,
            config.gcn_hidden,
            dataset.num_classes,
            config.gcn_variant,
            derive_seed(config.seed, SEED_STREAM_GCN.wrapping_add(iteration as u64)),
            config.gcn_lr,
            config.gcn_weight_decay,
        )?);
    }
    let gcn_params = gcn.as_mut().expect("initialized above");

    let mut order: Vec<usize> = (0..dataset.videos.len()).collect();
    for epoch in 1..=config.gcn_epochs_per_iter {
        if config.shuffle {
            order.shuffle(shuffle_rng);
        }
        let items: Vec<GcnTrainItem<'_>> = order
            .iter()
            .map(|&i| GcnTrainItem {
                graph: &embedded[i].1,
                features: &embedded[i].0,
                labels: &sparse[i],
            })
            .collect();
        let loss = train_gcn_epoch(gcn_params, &items, &config.loss_weights, config.batch_size)?;
        record.epochs.push(EpochRecord {
            phase: Phase::Gcn,
            iteration,
            epoch,
            loss: Some(loss),
            label_accuracy: None,
        });
        check_loss_finite(loss, "propagation-network training")?;
        check_gcn_finite(gcn_params, "propagation-network training")?;
    }

    let generated: Vec<Vec<usize>> = dataset
        .videos
        .iter()
        .enumerate()
        .map(|(i, _)| generate_labels(gcn_params, &embedded[i].1, &embedded[i].0, stamps[i]))
        .collect::<Result<_>>()?;
    record.epochs.push(EpochRecord {
        phase: Phase::Labels,
        iteration,
        epoch: 0,
        loss: None,
        label_accuracy: generated_label_accuracy(dataset, &generated)?,
    });

    let dense: Vec<Vec<Option<usize>>> = generated
        .iter()
        .map(|labels| labels.iter().map(|&c| Some(c)).collect())
        .collect();
    for epoch in 1..=config.seg_epochs_per_iter {
        if config.shuffle {
            order.shuffle(shuffle_rng);
        }
        let items: Vec<SegTrainItem<'_>> = order
            .iter()
            .map(|&i| SegTrainItem {
                features: &dataset.videos[i].features,
                labels: &dense[i],
                timestamps: stamps[i],
            })
            .collect();
        let loss = train_seg_epoch(
            tcn,
            &items,
            &config.loss_weights,
            config.batch_size,
            config.conf_all_stages,
        )?;
        record.epochs.push(EpochRecord {
            phase: Phase::Seg,
            iteration,
            epoch,
            loss: Some(loss),
            label_accuracy: None,
        });
        check_loss_finite(loss, "refinement segmenter training")?;
        check_tcn_finite(tcn, "refinement segmenter training")?;
    }

    Ok(generated)
}

/// Executes the full schedule. The record accumulates in place so callers can
/// persist whatever completed if an error (e.g. numerical divergence) cuts
/// the run short. The propagation network is returned for inspection but the
/// evaluation below never reads it.
pub fn run(
    config: &ScheduleConfig,
    dataset: &Dataset,
    record: &mut RunRecord,
) -> Result<(TcnParams, Option<GcnParams>)> {
    config.validate()?;
    if dataset.videos.is_empty() {
        return Err(Error::Data("dataset has no videos".into()));
    }
    for video in &dataset.videos {
        video_timestamps(video)?;
    }

    let tcn_config = TcnConfig {
        num_stages: config.num_stages,
        layers_per_stage: config.layers_per_stage,
        num_feature_maps: config.num_feature_maps,
        input_dim: dataset.feature_dim(),
        num_classes: dataset.num_classes,
    };
    let mut tcn = tcn_init(tcn_config, derive_seed(config.seed, SEED_STREAM_TCN), config.seg_lr)?;
    let mut shuffle_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SEED_STREAM_SHUFFLE));

    initialize_stage(&mut tcn, dataset, config, &mut shuffle_rng, record)?;
    let mut gcn: Option<GcnParams> = None;
    for iteration in 1..=config.refine_iters {
        refine_iteration(
            &mut tcn,
            &mut gcn,
            dataset,
            config,
            iteration,
            &mut shuffle_rng,
            record,
        )?;
    }

    if dataset.videos.iter().any(|v| v.gt_labels.is_some()) {
        record.final_metrics = Some(evaluate_segmenter(&tcn, dataset, None)?);
    }
    Ok((tcn, gcn))
}

/// Scores the segmenter against every video that has ground truth. Takes only
/// segmenter parameters: the propagation network plays no part in inference.
pub fn evaluate_segmenter(
    tcn: &TcnParams,
    dataset: &Dataset,
    exclude_class: Option<usize>,
) -> Result<DatasetScores> {
    let with_gt: Vec<(&Matrix, &Vec<usize>)> = dataset
        .videos
        .iter()
        .filter_map(|v| v.gt_labels.as_ref().map(|gt| (&v.features, gt)))
        .collect();
    if with_gt.is_empty() {
        return Err(Error::Data("no videos carry ground-truth labels".into()));
    }
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = with_gt
        .par_iter()
        .map(|(features, gt)| Ok((predict(tcn, features)?, (*gt).clone())))
        .collect::<Result<_>>()?;
    evaluate_dataset(&pairs, exclude_class)
}
