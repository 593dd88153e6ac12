//! Dataset plumbing: binary feature files, text annotation files, the JSON
//! manifest tying them together, timestamp sampling, and a synthetic dataset
//! generator for fast end-to-end verification.
//!
//! On-disk formats:
//! - features: little-endian binary, magic `TSAF`, u32 version = 1, u32 T,
//!   u32 D, then `T*D` 4-byte floats row-major;
//! - ground-truth labels: one integer class id per line;
//! - timestamps: `frame,class` lines with 1-indexed frames;
//! - manifest: JSON, with file paths resolved relative to its directory.

use crate::bytes::{check_magic, check_version, read_u32};
use crate::error::{Error, Result};
use crate::metrics::segments_from_labels;
use crate::numerics::{derive_seed, Matrix, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

const FEATURE_MAGIC: &[u8; 4] = b"TSAF";
const FEATURE_VERSION: u32 = 1;

/// One annotated frame per ground-truth segment: `(frame, class)` pairs with
/// strictly increasing frames. Frames are 0-based in memory; the text format
/// uses 1-based frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestampAnnotation {
    entries: Vec<(usize, usize)>,
}

impl TimestampAnnotation {
    pub fn new(entries: Vec<(usize, usize)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Annotation(
                "timestamp annotation must contain at least one entry".into(),
            ));
        }
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Annotation(format!(
                    "timestamp frames must be strictly increasing, got {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(TimestampAnnotation { entries })
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor rejects empty annotations
    }

    pub fn first_frame(&self) -> usize {
        self.entries[0].0
    }

    pub fn last_frame(&self) -> usize {
        self.entries[self.entries.len() - 1].0
    }

    /// Expands to a length-`num_frames` sparse label sequence: `Some(class)`
    /// at annotated frames, `None` elsewhere.
    pub fn to_sparse_labels(&self, num_frames: usize) -> Result<Vec<Option<usize>>> {
        if self.last_frame() >= num_frames {
            return Err(Error::Annotation(format!(
                "timestamp frame {} out of range for {} frames",
                self.last_frame(),
                num_frames
            )));
        }
        let mut labels = vec![None; num_frames];
        for &(frame, class) in &self.entries {
            labels[frame] = Some(class);
        }
        Ok(labels)
    }
}

// ---------------------------------------------------------------------------
// Binary feature files
// ---------------------------------------------------------------------------

/// Reads a `T x D` feature matrix from the binary feature format.
pub fn read_features(path: &Path) -> Result<Matrix> {
    let buf = fs::read(path)?;
    let mut off = 0usize;
    check_magic(&buf, &mut off, FEATURE_MAGIC, path)?;
    check_version(&buf, &mut off, FEATURE_VERSION, path)?;
    let t = read_u32(&buf, &mut off, path)? as usize;
    let d = read_u32(&buf, &mut off, path)? as usize;
    if t == 0 || d == 0 {
        return Err(Error::format(
            path,
            format!("header at byte 8 declares degenerate shape {t}x{d}"),
        ));
    }
    let expected = (t as u64) * (d as u64) * 4;
    let actual = (buf.len() - off) as u64;
    if expected != actual {
        return Err(Error::format(
            path,
            format!(
                "payload at byte {off} holds {actual} bytes but header promises {expected}"
            ),
        ));
    }
    let mut data = Vec::with_capacity(t * d);
    for (idx, chunk) in buf[off..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(
                path,
                format!("non-finite value at byte {}", off + idx * 4),
            ));
        }
        data.push(v as Real);
    }
    Matrix::from_vec(t, d, data)
}

/// Writes a feature matrix in the binary feature format (32-bit payload).
pub fn write_features(features: &Matrix, path: &Path) -> Result<()> {
    let (t, d) = features.shape();
    if t == 0 || d == 0 {
        return Err(Error::Config(format!(
            "refusing to write degenerate {t}x{d} feature matrix"
        )));
    }
    if t > u32::MAX as usize || d > u32::MAX as usize {
        return Err(Error::Config("feature matrix too large for format".into()));
    }
    if !features.all_finite() {
        return Err(Error::Config("feature matrix contains non-finite values".into()));
    }
    let mut buf = Vec::with_capacity(16 + features.data().len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Text annotation files
// ---------------------------------------------------------------------------

/// Reads a label file: one class id per line.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            return Err(Error::format(path, format!("empty line {}", lineno + 1)));
        }
        let class: usize = trimmed.parse().map_err(|_| {
            Error::format(path, format!("line {}: '{}' is not a class id", lineno + 1, trimmed))
        })?;
        labels.push(class);
    }
    if labels.is_empty() {
        return Err(Error::format(path, "no labels"));
    }
    Ok(labels)
}

pub fn write_labels(labels: &[usize], path: &Path) -> Result<()> {
    let mut out = String::new();
    for &l in labels {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a timestamp file: `frame,class` per line, frames 1-indexed.
pub fn read_timestamps(path: &Path) -> Result<TimestampAnnotation> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.trim().split(',');
        let bad = || Error::format(path, format!("line {}: expected 'frame,class'", lineno + 1));
        let frame: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let class: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if parts.next().is_some() {
            return Err(bad());
        }
        if frame == 0 {
            return Err(Error::format(
                path,
                format!("line {}: frames are 1-indexed", lineno + 1),
            ));
        }
        entries.push((frame - 1, class));
    }
    TimestampAnnotation::new(entries)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_timestamps(annotation: &TimestampAnnotation, path: &Path) -> Result<()> {
    let mut out = String::new();
    for &(frame, class) in annotation.entries() {
        out.push_str(&format!("{},{}\n", frame + 1, class));
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest and dataset loading
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ManifestVideo {
    pub id: String,
    pub features: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamps: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub videos: Vec<ManifestVideo>,
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })?;
    if manifest.num_classes == 0 {
        return Err(Error::format(path, "num_classes must be at least 1"));
    }
    if manifest.class_names.len() != manifest.num_classes {
        return Err(Error::format(
            path,
            format!(
                "{} class names for {} classes",
                manifest.class_names.len(),
                manifest.num_classes
            ),
        ));
    }
    if manifest.videos.is_empty() {
        return Err(Error::format(path, "manifest lists no videos"));
    }
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// One loaded video: features plus whatever annotations the manifest listed.
#[derive(Clone, Debug)]
pub struct VideoData {
    pub id: String,
    pub features: Matrix,
    pub gt_labels: Option<Vec<usize>>,
    pub timestamps: Option<TimestampAnnotation>,
}

impl VideoData {
    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }
}

/// A fully loaded dataset, validated for internal consistency.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub videos: Vec<VideoData>,
}

impl Dataset {
    pub fn feature_dim(&self) -> usize {
        self.videos[0].features.cols()
    }
}

/// Loads every file referenced by a manifest and cross-validates shapes,
/// label ranges and timestamp ranges.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut videos = Vec::with_capacity(manifest.videos.len());
    let mut dim: Option<usize> = None;
    for entry in &manifest.videos {
        let features = read_features(&base.join(&entry.features))?;
        match dim {
            None => dim = Some(features.cols()),
            Some(d) if d != features.cols() => {
                return Err(Error::Data(format!(
                    "video '{}' has feature dim {} but the dataset uses {}",
                    entry.id,
                    features.cols(),
                    d
                )));
            }
            _ => {}
        }
        let t = features.rows();
        let gt_labels = match &entry.gt_labels {
            Some(rel) => {
                let labels = read_labels(&base.join(rel))?;
                if labels.len() != t {
                    return Err(Error::Data(format!(
                        "video '{}' has {} frames but {} gt labels",
                        entry.id,
                        t,
                        labels.len()
                    )));
                }
                if let Some(&bad) = labels.iter().find(|&&c| c >= manifest.num_classes) {
                    return Err(Error::Data(format!(
                        "video '{}' labels class {} but the dataset has {} classes",
                        entry.id, bad, manifest.num_classes
                    )));
                }
                Some(labels)
            }
            None => None,
        };
        let timestamps = match &entry.timestamps {
            Some(rel) => {
                let ts = read_timestamps(&base.join(rel))?;
                if ts.last_frame() >= t {
                    return Err(Error::Data(format!(
                        "video '{}' timestamp frame {} exceeds {} frames",
                        entry.id,
                        ts.last_frame() + 1,
                        t
                    )));
                }
                if let Some(&(_, bad)) =
                    ts.entries().iter().find(|&&(_, c)| c >= manifest.num_classes)
                {
                    return Err(Error::Data(format!(
                        "video '{}' timestamp labels class {} but the dataset has {} classes",
                        entry.id, bad, manifest.num_classes
                    )));
                }
                Some(ts)
            }
            None => None,
        };
        videos.push(VideoData {
            id: entry.id.clone(),
            features,
            gt_labels,
            timestamps,
        });
    }
    Ok(Dataset {
        name: manifest.name,
        num_classes: manifest.num_classes,
        class_names: manifest.class_names,
        videos,
    })
}

// ---------------------------------------------------------------------------
// Timestamp sampling
// ---------------------------------------------------------------------------

/// Draws one annotated frame uniformly from each ground-truth segment.
pub fn sample_timestamps(gt_labels: &[usize], seed: u64) -> Result<TimestampAnnotation> {
    if gt_labels.is_empty() {
        return Err(Error::Annotation("cannot sample timestamps from an empty sequence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = segments_from_labels(gt_labels)
        .into_iter()
        .map(|seg| (rng.random_range(seg.start..=seg.end), seg.class))
        .collect();
    TimestampAnnotation::new(entries)
}

// ---------------------------------------------------------------------------
// Synthetic dataset generation
// ---------------------------------------------------------------------------

/// Parameters for the synthetic generator. Class prototypes are unit-norm
/// random vectors kept pairwise dissimilar; videos are random segment
/// sequences whose frame features are the prototype plus Gaussian noise, with
/// linear blends across segment boundaries.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub segment_len_range: (usize, usize),
    pub segments_per_video: (usize, usize),
    pub noise_sigma: Real,
    pub boundary_blur: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_videos: 20,
            num_classes: 5,
            feature_dim: 64,
            segment_len_range: (20, 60),
            segments_per_video: (3, 6),
            noise_sigma: 0.4,
            boundary_blur: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.num_videos == 0 || self.num_classes == 0 || self.feature_dim == 0 {
            return Err(Error::Config("synthetic counts must all be at least 1".into()));
        }
        let (lo, hi) = self.segment_len_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "invalid segment length range {lo}..={hi}"
            )));
        }
        let (slo, shi) = self.segments_per_video;
        if slo == 0 || slo > shi {
            return Err(Error::Config(format!(
                "invalid segments-per-video range {slo}..={shi}"
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct SynthOutput {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
    /// `num_classes x feature_dim` prototype means, for oracle checks.
    pub class_means: Matrix,
}

const MAX_MEAN_REJECTIONS: usize = 1000;
const PROTOTYPE_MAX_COSINE: Real = 0.3;

fn draw_class_means(rng: &mut ChaCha8Rng, num_classes: usize, dim: usize) -> Result<Matrix> {
    let mut means = Matrix::zeros(num_classes, dim);
    for c in 0..num_classes {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_MEAN_REJECTIONS {
                return Err(Error::Config(format!(
                    "could not place {num_classes} dissimilar class prototypes in {dim} dimensions"
                )));
            }
            let mut v: Vec<Real> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<Real>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            for x in &mut v {
                *x /= norm;
            }
            let ok = (0..c).all(|prev| {
                let cos: Real = means.row(prev).iter().zip(&v).map(|(a, b)| a * b).sum();
                cos < PROTOTYPE_MAX_COSINE
            });
            if ok {
                means.row_mut(c).copy_from_slice(&v);
                break;
            }
        }
    }
    Ok(means)
}

fn synth_video_labels(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<usize> {
    let num_segments = rng.random_range(cfg.segments_per_video.0..=cfg.segments_per_video.1);
    let mut labels = Vec::new();
    let mut prev_class: Option<usize> = None;
    for _ in 0..num_segments {
        let class = loop {
            let c = rng.random_range(0..cfg.num_classes);
            if cfg.num_classes == 1 || Some(c) != prev_class {
                break c;
            }
        };
        prev_class = Some(class);
        let len = rng.random_range(cfg.segment_len_range.0..=cfg.segment_len_range.1);
        labels.extend(std::iter::repeat(class).take(len));
    }
    labels
}

/// Frame feature bases for one video: each frame gets its segment's prototype,
/// except near boundaries where prototypes blend linearly. A boundary sits
/// between frames, and the `blur` frames on each side of it interpolate from
/// one prototype to the other.
fn base_features(labels: &[usize], means: &Matrix, blur: usize) -> Matrix {
    let t = labels.len();
    let d = means.cols();
    let segments = segments_from_labels(labels);
    let mut base = Matrix::zeros(t, d);
    for (k, seg) in segments.iter().enumerate() {
        for frame in seg.start..=seg.end {
            // Signed distances to the boundaries flanking this segment
            // (boundaries live at half-integer positions between frames).
            let left = if k > 0 {
                Some(frame as Real - (seg.start as Real - 0.5))
            } else {
                None
            };
            let right = if k + 1 < segments.len() {
                Some((seg.end as Real + 0.5) - frame as Real)
            } else {
                None
            };
            let b = blur as Real;
            // Pick the nearer boundary; blend only inside the blur zone.
            let (dist, neighbour) = match (left, right) {
                (Some(l), Some(r)) if l <= r => (l, segments[k - 1].class),
                (Some(l), None) => (l, segments[k - 1].class),
                (_, Some(r)) => (r, segments[k + 1].class),
                (None, None) => (Real::INFINITY, seg.class),
            };
            let own_weight = if blur > 0 && dist < b {
                0.5 + dist / (2.0 * b)
            } else {
                1.0
            };
            let row = base.row_mut(frame);
            let own = means.row(seg.class);
            let other = means.row(neighbour);
            for i in 0..d {
                row[i] = own_weight * own[i] + (1.0 - own_weight) * other[i];
            }
        }
    }
    base
}

/// Generates a synthetic dataset under `out_dir` and returns the manifest and
/// the class prototypes. Layout: `features/`, `gt/`, `timestamps/` plus
/// `manifest.json`.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthOutput> {
    cfg.validate()?;
    fs::create_dir_all(out_dir.join("features"))?;
    fs::create_dir_all(out_dir.join("gt"))?;
    fs::create_dir_all(out_dir.join("timestamps"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = draw_class_means(&mut rng, cfg.num_classes, cfg.feature_dim)?;
    let noise = Normal::new(0.0, cfg.noise_sigma as f64)
        .map_err(|e| Error::Config(format!("bad noise sigma: {e}")))?;

    let mut entries = Vec::with_capacity(cfg.num_videos);
    for v in 0..cfg.num_videos {
        let id = format!("video_{v:03}");
        let labels = synth_video_labels(&mut rng, cfg);
        let mut features = base_features(&labels, &means, cfg.boundary_blur);
        for x in features.data_mut() {
            *x += noise.sample(&mut rng) as Real;
        }
        let timestamps = sample_timestamps(&labels, derive_seed(cfg.seed, 0x7355 + v as u64))?;

        write_features(&features, &out_dir.join("features").join(format!("{id}.tsaf")))?;
        write_labels(&labels, &out_dir.join("gt").join(format!("{id}.txt")))?;
        write_timestamps(&timestamps, &out_dir.join("timestamps").join(format!("{id}.txt")))?;
        entries.push(ManifestVideo {
            id: id.clone(),
            features: format!("features/{id}.tsaf"),
            gt_labels: Some(format!("gt/{id}.txt")),
            timestamps: Some(format!("timestamps/{id}.txt")),
        });
    }

    let manifest = DatasetManifest {
        name: "synthetic".into(),
        num_classes: cfg.num_classes,
        class_names: (0..cfg.num_classes).map(|c| format!("class_{c}")).collect(),
        videos: entries,
    };
    // The manifest goes last so an interrupted run never leaves a loadable
    // manifest pointing at missing files.
    let manifest_path = out_dir.join("manifest.json");
    write_manifest(&manifest, &manifest_path)?;
    Ok(SynthOutput {
        manifest,
        manifest_path,
        class_means: means,
    })
}
