//! Two-layer graph convolutional network that propagates sparse timestamp
//! labels along the temporal graph: `probs = softmax(A * relu(A * X * W1) * W2)`
//! with `A` the symmetric-normalised adjacency. An `Mlp` variant replaces `A`
//! with the identity, giving the parameter-matched baseline for ablations.

use crate::bytes::{check_magic, check_version, expect_eof, push_f64_matrix, read_f64_matrix, read_u32, read_u8};
use crate::data::TimestampAnnotation;
use crate::error::{Error, Result};
use crate::graph::TemporalGraph;
use crate::losses::{graph_loss, LossWeights};
use crate::numerics::{
    log_row_softmax, matmul, matmul_a_bt, matmul_at_b, relu, row_softmax, Matrix, Param, Real,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

const GCN_MAGIC: &[u8; 4] = b"TSGC";
const GCN_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcnVariant {
    Gcn,
    Mlp,
}

impl std::str::FromStr for GcnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(GcnVariant::Gcn),
            "mlp" => Ok(GcnVariant::Mlp),
            other => Err(Error::Config(format!(
                "unknown propagation variant '{other}' (expected 'gcn' or 'mlp')"
            ))),
        }
    }
}

impl std::fmt::Display for GcnVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GcnVariant::Gcn => write!(f, "gcn"),
            GcnVariant::Mlp => write!(f, "mlp"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GcnParams {
    pub w1: Param,
    pub w2: Param,
    pub variant: GcnVariant,
}

impl GcnParams {
    pub fn input_dim(&self) -> usize {
        self.w1.value.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.value.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.value.cols()
    }
}

pub(crate) fn uniform_fan_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let bound = (6.0 / (rows + cols) as Real).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

/// Seeded fan-based uniform initialisation of both layers.
pub fn gcn_init(
    d_in: usize,
    d_hidden: usize,
    num_classes: usize,
    variant: GcnVariant,
    seed: u64,
    learning_rate: Real,
    weight_decay: Real,
) -> Result<GcnParams> {
    if d_in == 0 || d_hidden == 0 || num_classes == 0 {
        return Err(Error::Config("all network dimensions must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w1 = uniform_fan_init(&mut rng, d_in, d_hidden);
    let w2 = uniform_fan_init(&mut rng, d_hidden, num_classes);
    Ok(GcnParams {
        w1: Param::new(w1, learning_rate, weight_decay),
        w2: Param::new(w2, learning_rate, weight_decay),
        variant,
    })
}

#[derive(Clone, Debug)]
pub struct GcnForwardTrace {
    /// First-layer pre-activation (`T x d_hidden`).
    pub h1_pre: Matrix,
    /// First-layer post-ReLU activation.
    pub h1: Matrix,
    /// Output logits (`T x C`).
    pub logits: Matrix,
    /// Rowwise softmax of the logits.
    pub probs: Matrix,
}

pub fn gcn_forward(
    params: &GcnParams,
    graph: &TemporalGraph,
    features: &Matrix,
) -> Result<GcnForwardTrace> {
    if features.cols() != params.input_dim() {
        return Err(Error::shape(
            "gcn_forward features",
            features.shape(),
            params.w1.value.shape(),
        ));
    }
    if features.rows() != graph.num_nodes() {
        return Err(Error::shape(
            "gcn_forward graph",
            (graph.num_nodes(), features.cols()),
            features.shape(),
        ));
    }
    let xw = matmul(features, &params.w1.value)?;
    let h1_pre = match params.variant {
        GcnVariant::Gcn => graph.propagate(&xw)?,
        GcnVariant::Mlp => xw,
    };
    let h1 = relu(&h1_pre);
    let hw = matmul(&h1, &params.w2.value)?;
    let logits = match params.variant {
        GcnVariant::Gcn => graph.propagate(&hw)?,
        GcnVariant::Mlp => hw,
    };
    let probs = row_softmax(&logits);
    Ok(GcnForwardTrace { h1_pre, h1, logits, probs })
}

#[derive(Clone, Debug)]
pub struct GcnGrads {
    pub w1: Matrix,
    pub w2: Matrix,
}

/// Analytic gradient of the propagation objective
/// (`L_class + alpha * L_smooth`) w.r.t. both weight matrices. Exploits the
/// adjacency's symmetry: the transposed propagation in the chain rule is the
/// propagation itself.
pub fn gcn_backward(
    params: &GcnParams,
    graph: &TemporalGraph,
    features: &Matrix,
    trace: &GcnForwardTrace,
    labels: &[Option<usize>],
    weights: &LossWeights,
) -> Result<(GcnGrads, Real)> {
    let log_probs = log_row_softmax(&trace.logits);
    let (loss, g_logits) = graph_loss(&log_probs, labels, weights)?;
    let g_hw = match params.variant {
        GcnVariant::Gcn => graph.propagate(&g_logits)?,
        GcnVariant::Mlp => g_logits,
    };
    let w2_grad = matmul_at_b(&trace.h1, &g_hw)?;
    let mut g_pre = matmul_a_bt(&g_hw, &params.w2.value)?;
    for (g, &pre) in g_pre.data_mut().iter_mut().zip(trace.h1_pre.data()) {
        if pre <= 0.0 {
            *g = 0.0;
        }
    }
    let g_xw = match params.variant {
        GcnVariant::Gcn => graph.propagate(&g_pre)?,
        GcnVariant::Mlp => g_pre,
    };
    let w1_grad = matmul_at_b(features, &g_xw)?;
    Ok((GcnGrads { w1: w1_grad, w2: w2_grad }, loss))
}

/// One video's training inputs for an epoch pass.
#[derive(Clone, Copy)]
pub struct GcnTrainItem<'a> {
    pub graph: &'a TemporalGraph,
    pub features: &'a Matrix,
    pub labels: &'a [Option<usize>],
}

/// One epoch over the items: per batch, per-video gradients are computed in
/// parallel against a parameter snapshot, averaged, and applied as a single
/// ADAM step. Returns the mean per-video loss.
pub fn train_gcn_epoch(
    params: &mut GcnParams,
    items: &[GcnTrainItem<'_>],
    weights: &LossWeights,
    batch_size: usize,
) -> Result<Real> {
    if items.is_empty() {
        return Err(Error::Config("train_gcn_epoch needs at least one video".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut total = 0.0;
    for chunk in items.chunks(batch_size) {
        let snapshot: &GcnParams = params;
        let results: Vec<(GcnGrads, Real)> = chunk
            .par_iter()
            .map(|item| {
                let trace = gcn_forward(snapshot, item.graph, item.features)?;
                gcn_backward(snapshot, item.graph, item.features, &trace, item.labels, weights)
            })
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / results.len() as Real;
        let mut g1 = Matrix::zeros(params.w1.value.rows(), params.w1.value.cols());
        let mut g2 = Matrix::zeros(params.w2.value.rows(), params.w2.value.cols());
        for (grads, loss) in &results {
            g1.add_scaled(&grads.w1, scale)?;
            g2.add_scaled(&grads.w2, scale)?;
            total += loss;
        }
        params.w1.apply_grad(&g1)?;
        params.w2.apply_grad(&g2)?;
    }
    Ok(total / items.len() as Real)
}

/// Index of the row maximum; ties break toward the lowest class index.
pub(crate) fn argmax_row(row: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Densifies sparse supervision: argmax of the propagation network's output
/// per frame, with annotated frames forced to their ground-truth timestamp
/// classes (those labels are exact by construction and never relabeled).
pub fn generate_labels(
    params: &GcnParams,
    graph: &TemporalGraph,
    features: &Matrix,
    timestamps: &TimestampAnnotation,
) -> Result<Vec<usize>> {
    let trace = gcn_forward(params, graph, features)?;
    let t = trace.probs.rows();
    if timestamps.last_frame() >= t {
        return Err(Error::Annotation(format!(
            "timestamp frame {} out of range for {} frames",
            timestamps.last_frame(),
            t
        )));
    }
    let mut labels: Vec<usize> = (0..t).map(|i| argmax_row(trace.probs.row(i))).collect();
    for &(frame, class) in timestamps.entries() {
        labels[frame] = class;
    }
    Ok(labels)
}

/// Checkpoint layout: magic `TSGC`, u32 version, u32 d_in, u32 d_hidden,
/// u32 C, u8 variant (0 = gcn, 1 = mlp), then w1 and w2 row-major as 8-byte
/// little-endian floats.
pub fn save_gcn_checkpoint(params: &GcnParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(GCN_MAGIC);
    buf.extend_from_slice(&GCN_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.input_dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(params.hidden_dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(params.num_classes() as u32).to_le_bytes());
    buf.push(match params.variant {
        GcnVariant::Gcn => 0,
        GcnVariant::Mlp => 1,
    });
    push_f64_matrix(&mut buf, &params.w1.value);
    push_f64_matrix(&mut buf, &params.w2.value);
    std::fs::write(path, buf)?;
    Ok(())
}

/// Loads a checkpoint with fresh optimiser state at the given hyperparameters.
pub fn load_gcn_checkpoint(
    path: &Path,
    learning_rate: Real,
    weight_decay: Real,
) -> Result<GcnParams> {
    let buf = std::fs::read(path)?;
    let mut off = 0usize;
    check_magic(&buf, &mut off, GCN_MAGIC, path)?;
    check_version(&buf, &mut off, GCN_VERSION, path)?;
    let d_in = read_u32(&buf, &mut off, path)? as usize;
    let d_hidden = read_u32(&buf, &mut off, path)? as usize;
    let num_classes = read_u32(&buf, &mut off, path)? as usize;
    if d_in == 0 || d_hidden == 0 || num_classes == 0 {
        return Err(Error::format(path, "header declares a zero dimension"));
    }
    let variant = match read_u8(&buf, &mut off, path)? {
        0 => GcnVariant::Gcn,
        1 => GcnVariant::Mlp,
        other => {
            return Err(Error::format(path, format!("unknown variant byte {other} at byte 16")))
        }
    };
    let w1 = read_f64_matrix(&buf, &mut off, d_in, d_hidden, path)?;
    let w2 = read_f64_matrix(&buf, &mut off, d_hidden, num_classes, path)?;
    expect_eof(&buf, off, path)?;
    Ok(GcnParams {
        w1: Param::new(w1, learning_rate, weight_decay),
        w2: Param::new(w2, learning_rate, weight_decay),
        variant,
    })
}
