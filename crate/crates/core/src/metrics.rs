//! Segmentation quality metrics: framewise accuracy, segmental edit score
//! (normalised Levenshtein over segment-class sequences) and segmental
//! F1@k with greedy IoU matching.

use crate::error::{Error, Result};
use crate::numerics::Real;
use serde::{Deserialize, Serialize};

/// Overlap thresholds reported by default: F1@10, F1@25 and F1@50.
pub const F1_THRESHOLDS: [Real; 3] = [0.10, 0.25, 0.50];

/// A maximal run of identical labels; `start..=end` frame range, inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false // start <= end by construction
    }
}

/// Run-length encodes a label sequence into segments.
pub fn segments_from_labels(labels: &[usize]) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut iter = labels.iter().enumerate();
    let Some((_, &first)) = iter.next() else {
        return segments;
    };
    let mut current = Segment { class: first, start: 0, end: 0 };
    for (i, &class) in iter {
        if class == current.class {
            current.end = i;
        } else {
            segments.push(current);
            current = Segment { class, start: i, end: i };
        }
    }
    segments.push(current);
    segments
}

/// Inverse of [`segments_from_labels`] for contiguous segment lists.
pub fn labels_from_segments(segments: &[Segment]) -> Vec<usize> {
    let mut labels = Vec::new();
    for seg in segments {
        labels.extend(std::iter::repeat(seg.class).take(seg.len()));
    }
    labels
}

fn check_lengths(op: &'static str, pred: &[usize], gt: &[usize]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape(op, (1, pred.len()), (1, gt.len())));
    }
    Ok(())
}

/// Framewise accuracy in percent.
pub fn accuracy(pred: &[usize], gt: &[usize]) -> Result<Real> {
    check_lengths("accuracy", pred, gt)?;
    let matches = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(100.0 * matches as Real / gt.len() as Real)
}

fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

fn filtered_segments(labels: &[usize], exclude: Option<usize>) -> Vec<Segment> {
    segments_from_labels(labels)
        .into_iter()
        .filter(|s| Some(s.class) != exclude)
        .collect()
}

/// Segmental edit score in percent:
/// `100 * (1 - lev(pred_segments, gt_segments) / max(len_pred, len_gt))`,
/// floored at 0.
pub fn edit_score(pred: &[usize], gt: &[usize]) -> Result<Real> {
    edit_score_excluding(pred, gt, None)
}

pub fn edit_score_excluding(
    pred: &[usize],
    gt: &[usize],
    exclude: Option<usize>,
) -> Result<Real> {
    check_lengths("edit_score", pred, gt)?;
    let p: Vec<usize> = filtered_segments(pred, exclude).iter().map(|s| s.class).collect();
    let g: Vec<usize> = filtered_segments(gt, exclude).iter().map(|s| s.class).collect();
    let denom = p.len().max(g.len());
    if denom == 0 {
        return Ok(100.0);
    }
    let dist = levenshtein(&p, &g);
    Ok((100.0 * (1.0 - dist as Real / denom as Real)).max(0.0))
}

fn interval_iou(a: &Segment, b: &Segment) -> Real {
    let inter_start = a.start.max(b.start);
    let inter_end = a.end.min(b.end);
    let inter = if inter_start > inter_end {
        0
    } else {
        inter_end - inter_start + 1
    };
    let union = a.len() + b.len() - inter;
    inter as Real / union as Real
}

/// Greedy segment matching at one IoU threshold, returning
/// `(true positives, false positives, false negatives)`.
///
/// Each predicted segment, in temporal order, matches the unmatched
/// ground-truth segment of the same class with the highest IoU; the match
/// counts if that IoU meets the threshold (inclusive).
pub fn match_counts(
    pred_segments: &[Segment],
    gt_segments: &[Segment],
    threshold: Real,
) -> (usize, usize, usize) {
    let mut matched = vec![false; gt_segments.len()];
    let mut tp = 0;
    let mut fp = 0;
    for p in pred_segments {
        let mut best: Option<(usize, Real)> = None;
        for (gi, g) in gt_segments.iter().enumerate() {
            if matched[gi] || g.class != p.class {
                continue;
            }
            let iou = interval_iou(p, g);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou >= threshold => {
                matched[gi] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
    }
    let fn_count = matched.iter().filter(|&&m| !m).count();
    (tp, fp, fn_count)
}

fn f1_from_counts(tp: usize, fp: usize, fn_count: usize) -> Real {
    let denom = 2 * tp + fp + fn_count;
    if denom == 0 {
        0.0
    } else {
        200.0 * tp as Real / denom as Real
    }
}

/// Segmental F1 in percent at an IoU threshold.
pub fn f1_at(pred: &[usize], gt: &[usize], threshold: Real) -> Result<Real> {
    f1_at_excluding(pred, gt, threshold, None)
}

pub fn f1_at_excluding(
    pred: &[usize],
    gt: &[usize],
    threshold: Real,
    exclude: Option<usize>,
) -> Result<Real> {
    check_lengths("f1_at", pred, gt)?;
    let p = filtered_segments(pred, exclude);
    let g = filtered_segments(gt, exclude);
    let (tp, fp, fn_count) = match_counts(&p, &g, threshold);
    Ok(f1_from_counts(tp, fp, fn_count))
}

/// Dataset-level scores: accuracy and edit are averaged per video, F1 pools
/// matched/unmatched segment counts across videos (the field convention).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetScores {
    pub accuracy: Real,
    pub edit: Real,
    pub f1: [Real; 3],
}

impl DatasetScores {
    /// `metric,value` lines for machine consumption.
    pub fn machine_lines(&self) -> String {
        format!(
            "acc,{:.4}\nedit,{:.4}\nf1_10,{:.4}\nf1_25,{:.4}\nf1_50,{:.4}\n",
            self.accuracy, self.edit, self.f1[0], self.f1[1], self.f1[2]
        )
    }

    /// Human-readable fixed-width table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str("metric   value\n");
        s.push_str(&format!("Acc    {:7.2}\n", self.accuracy));
        s.push_str(&format!("Edit   {:7.2}\n", self.edit));
        for (t, v) in [(10, self.f1[0]), (25, self.f1[1]), (50, self.f1[2])] {
            s.push_str(&format!("F1@{t:<2} {v:8.2}\n"));
        }
        s
    }
}

/// Evaluates a set of (prediction, ground truth) pairs.
pub fn evaluate_dataset(
    pairs: &[(Vec<usize>, Vec<usize>)],
    exclude: Option<usize>,
) -> Result<DatasetScores> {
    if pairs.is_empty() {
        return Err(Error::Data("no videos to evaluate".into()));
    }
    let mut acc_sum = 0.0;
    let mut edit_sum = 0.0;
    let mut counts = [(0usize, 0usize, 0usize); 3];
    for (pred, gt) in pairs {
        acc_sum += accuracy(pred, gt)?;
        edit_sum += edit_score_excluding(pred, gt, exclude)?;
        let p = filtered_segments(pred, exclude);
        let g = filtered_segments(gt, exclude);
        for (k, &thr) in F1_THRESHOLDS.iter().enumerate() {
            let (tp, fp, fn_count) = match_counts(&p, &g, thr);
            counts[k].0 += tp;
            counts[k].1 += fp;
            counts[k].2 += fn_count;
        }
    }
    let n = pairs.len() as Real;
    Ok(DatasetScores {
        accuracy: acc_sum / n,
        edit: edit_sum / n,
        f1: [
            f1_from_counts(counts[0].0, counts[0].1, counts[0].2),
            f1_from_counts(counts[1].0, counts[1].1, counts[1].2),
            f1_from_counts(counts[2].0, counts[2].1, counts[2].2),
        ],
    })
}
