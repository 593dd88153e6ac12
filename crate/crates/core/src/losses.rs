//! Training objectives. Every loss takes rowwise log-probabilities (`T x C`)
//! and returns its value together with the analytic gradient **with respect to
//! the logits** that produced those log-probabilities.
//!
//! - classification: mean negative log-likelihood over labeled frames;
//! - smoothing: truncated squared difference of adjacent-frame
//!   log-probabilities, countering over-segmentation;
//! - confidence: hinge penalties pushing each annotated action's confidence to
//!   peak at its timestamp and decay monotonically away from it;
//! - combined segmenter / propagation objectives mixing the above.

use crate::data::TimestampAnnotation;
use crate::error::{Error, Result};
use crate::numerics::{logp_grad_to_logit_grad, Matrix, Real};
use serde::{Deserialize, Serialize};

/// Mixing weights for the combined objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the smoothing term.
    pub alpha: Real,
    /// Weight of the confidence term (segmenter objective only).
    pub beta: Real,
    /// Truncation threshold for the smoothing term.
    pub tau: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.15, beta: 0.075, tau: 4.0 }
    }
}

fn check_labels(log_probs: &Matrix, labels: &[Option<usize>]) -> Result<()> {
    if labels.len() != log_probs.rows() {
        return Err(Error::shape(
            "class_loss labels",
            log_probs.shape(),
            (labels.len(), 1),
        ));
    }
    let c = log_probs.cols();
    for (t, l) in labels.iter().enumerate() {
        if let Some(class) = l {
            if *class >= c {
                return Err(Error::Annotation(format!(
                    "frame {t} labeled class {class} but the model has {c} classes"
                )));
            }
        }
    }
    Ok(())
}

/// Cross-entropy over the labeled frames only, averaged over their count.
/// Frames with `None` contribute nothing — this is what makes sparse
/// timestamp supervision and dense supervision share one code path.
pub fn class_loss(log_probs: &Matrix, labels: &[Option<usize>]) -> Result<(Real, Matrix)> {
    check_labels(log_probs, labels)?;
    let labeled = labels.iter().flatten().count();
    if labeled == 0 {
        return Err(Error::Annotation("class_loss needs at least one labeled frame".into()));
    }
    let scale = 1.0 / labeled as Real;
    let mut value = 0.0;
    let mut grad_logp = Matrix::zeros(log_probs.rows(), log_probs.cols());
    for (t, label) in labels.iter().enumerate() {
        if let Some(class) = label {
            value -= log_probs.get(t, *class);
            grad_logp.set(t, *class, -scale);
        }
    }
    let grad = logp_grad_to_logit_grad(log_probs, &grad_logp)?;
    Ok((value * scale, grad))
}

/// Truncated smoothing term: squared adjacent-frame log-probability
/// differences, clipped at `tau`, averaged over `T * C`. Differences beyond
/// the truncation contribute the constant `tau^2` and no gradient; the
/// boundary case `|delta| == tau` keeps its gradient.
pub fn smooth_loss(log_probs: &Matrix, tau: Real) -> Result<(Real, Matrix)> {
    let (t_len, c_len) = log_probs.shape();
    if t_len == 0 {
        return Err(Error::Data("smooth_loss needs at least one frame".into()));
    }
    let mut grad_logp = Matrix::zeros(t_len, c_len);
    let scale = 1.0 / (t_len as Real * c_len as Real);
    let mut value = 0.0;
    for t in 1..t_len {
        for c in 0..c_len {
            let delta = log_probs.get(t, c) - log_probs.get(t - 1, c);
            if delta.abs() <= tau {
                value += delta * delta;
                let g = 2.0 * delta * scale;
                grad_logp.row_mut(t)[c] += g;
                grad_logp.row_mut(t - 1)[c] -= g;
            } else {
                value += tau * tau;
            }
        }
    }
    let grad = logp_grad_to_logit_grad(log_probs, &grad_logp)?;
    Ok((value * scale, grad))
}

/// Confidence term: for each annotated frame `t_i` with action `a_i`, the
/// log-probability of `a_i` must not decrease while approaching `t_i` from the
/// earlier timestamp's side, and must not increase while moving away toward
/// the next timestamp. Violations are hinged and averaged over
/// `T' = 2 (t_N - t_1)`, the number of penalised frame transitions. A single
/// timestamp defines no transitions and scores 0.
pub fn conf_loss(log_probs: &Matrix, timestamps: &TimestampAnnotation) -> Result<(Real, Matrix)> {
    let (t_len, c_len) = log_probs.shape();
    let entries = timestamps.entries();
    if timestamps.last_frame() >= t_len {
        return Err(Error::Annotation(format!(
            "timestamp frame {} out of range for {} frames",
            timestamps.last_frame(),
            t_len
        )));
    }
    if let Some(&(_, bad)) = entries.iter().find(|&&(_, c)| c >= c_len) {
        return Err(Error::Annotation(format!(
            "timestamp class {bad} out of range for {c_len} classes"
        )));
    }
    let n = entries.len();
    let mut grad_logp = Matrix::zeros(t_len, c_len);
    if n == 1 {
        return Ok((0.0, grad_logp));
    }
    let norm = 2.0 * (timestamps.last_frame() - timestamps.first_frame()) as Real;
    let mut value = 0.0;
    for i in 0..n {
        let (t_i, a_i) = entries[i];
        // The window around timestamp i, clamped at the annotation ends.
        let prev = if i == 0 { entries[0].0 } else { entries[i - 1].0 };
        let next = if i + 1 == n { t_i } else { entries[i + 1].0 };
        for t in (prev + 1)..=next {
            // Rising side before/at the timestamp, falling side after it.
            let delta = if t <= t_i {
                log_probs.get(t - 1, a_i) - log_probs.get(t, a_i)
            } else {
                log_probs.get(t, a_i) - log_probs.get(t - 1, a_i)
            };
            if delta > 0.0 {
                value += delta;
                let (hi, lo) = if t <= t_i { (t - 1, t) } else { (t, t - 1) };
                grad_logp.row_mut(hi)[a_i] += 1.0 / norm;
                grad_logp.row_mut(lo)[a_i] -= 1.0 / norm;
            }
        }
    }
    let grad = logp_grad_to_logit_grad(log_probs, &grad_logp)?;
    Ok((value / norm, grad))
}

/// Segmenter objective over all stages: per stage,
/// `L_class + alpha * L_smooth + beta * L_conf`, averaged across stages.
/// Returns the per-stage gradients w.r.t. that stage's logits (the direct
/// term only; chaining through stage inputs is the model's responsibility).
///
/// `conf_all_stages = false` restricts the confidence term to the final
/// stage's predictions.
pub fn seg_loss(
    stage_log_probs: &[Matrix],
    labels: &[Option<usize>],
    timestamps: &TimestampAnnotation,
    weights: &LossWeights,
    conf_all_stages: bool,
) -> Result<(Real, Vec<Matrix>)> {
    if stage_log_probs.is_empty() {
        return Err(Error::Config("seg_loss needs at least one stage".into()));
    }
    let stages = stage_log_probs.len() as Real;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(stage_log_probs.len());
    for (s, log_probs) in stage_log_probs.iter().enumerate() {
        let (v_class, g_class) = class_loss(log_probs, labels)?;
        let (v_smooth, g_smooth) = smooth_loss(log_probs, weights.tau)?;
        let mut value = v_class + weights.alpha * v_smooth;
        let mut grad = g_class;
        grad.add_scaled(&g_smooth, weights.alpha)?;
        if conf_all_stages || s + 1 == stage_log_probs.len() {
            let (v_conf, g_conf) = conf_loss(log_probs, timestamps)?;
            value += weights.beta * v_conf;
            grad.add_scaled(&g_conf, weights.beta)?;
        }
        total += value;
        grad.scale(1.0 / stages);
        grads.push(grad);
    }
    Ok((total / stages, grads))
}

/// Label-propagation objective: `L_class + alpha * L_smooth` (no confidence
/// term).
pub fn graph_loss(
    log_probs: &Matrix,
    labels: &[Option<usize>],
    weights: &LossWeights,
) -> Result<(Real, Matrix)> {
    let (v_class, g_class) = class_loss(log_probs, labels)?;
    let (v_smooth, g_smooth) = smooth_loss(log_probs, weights.tau)?;
    let mut grad = g_class;
    grad.add_scaled(&g_smooth, weights.alpha)?;
    Ok((v_class + weights.alpha * v_smooth, grad))
}
