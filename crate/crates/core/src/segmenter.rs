//! Multi-stage temporal convolutional segmenter. Each stage projects its
//! input to `F` feature maps, runs a stack of dilated residual blocks
//! (kernel-3 conv at dilation `2^l`, ReLU, 1x1 conv, residual add), and
//! classifies per frame; stages after the first consume the softmax of the
//! previous stage's logits. The final stage's last residual output doubles as
//! the framewise embedding consumed by the label-propagation network.

use crate::bytes::{check_magic, check_version, expect_eof, push_f64_matrix, read_f64_matrix, read_u32};
use crate::data::TimestampAnnotation;
use crate::error::{Error, Result};
use crate::gcn::{argmax_row, uniform_fan_init};
use crate::losses::{seg_loss, LossWeights};
use crate::numerics::{
    add_row_bias, gemm_into, log_row_softmax, matmul, matmul_a_bt, matmul_at_b, relu,
    row_softmax, softmax_vjp, GemmOperand, Matrix, Param, Real,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

const TCN_MAGIC: &[u8; 4] = b"TSTC";
const TCN_VERSION: u32 = 1;

/// Largest layer count for which `2^(l-1)` dilations stay comfortably inside
/// `usize` on every platform we build for.
const MAX_LAYERS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcnConfig {
    pub num_stages: usize,
    pub layers_per_stage: usize,
    pub num_feature_maps: usize,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_stages == 0
            || self.layers_per_stage == 0
            || self.num_feature_maps == 0
            || self.input_dim == 0
            || self.num_classes == 0
        {
            return Err(Error::Config(
                "segmenter config requires every dimension to be at least 1".into(),
            ));
        }
        if self.layers_per_stage > MAX_LAYERS {
            return Err(Error::Config(format!(
                "layers_per_stage {} exceeds the supported maximum of {MAX_LAYERS}",
                self.layers_per_stage
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count: per stage,
    /// `in*F + F` (projection) `+ L*(4F^2 + 2F)` (blocks: three conv taps,
    /// conv bias, pointwise weight and bias) `+ F*C + C` (classifier), where
    /// `in` is `input_dim` for the first stage and `C` afterwards.
    pub fn param_count(&self) -> usize {
        let f = self.num_feature_maps;
        let c = self.num_classes;
        let per_blocks = self.layers_per_stage * (4 * f * f + 2 * f);
        let tail = per_blocks + f * c + c;
        let first = self.input_dim * f + f + tail;
        let later = c * f + f + tail;
        first + (self.num_stages - 1) * later
    }

    /// Frames on either side of `t` that can influence the output at `t`:
    /// each stage's block stack reaches `2^L - 1` frames out, and stages
    /// compose additively.
    pub fn receptive_radius(&self) -> usize {
        self.num_stages * ((1usize << self.layers_per_stage) - 1)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1x1 {
    pub w: Param,
    pub b: Param,
}

#[derive(Clone, Debug)]
pub struct DilatedBlock {
    pub dilation: usize,
    pub w_before: Param,
    pub w_center: Param,
    pub w_after: Param,
    pub b_conv: Param,
    pub w_point: Param,
    pub b_point: Param,
}

#[derive(Clone, Debug)]
pub struct TcnStage {
    pub proj: Conv1x1,
    pub blocks: Vec<DilatedBlock>,
    pub classifier: Conv1x1,
}

#[derive(Clone, Debug)]
pub struct TcnParams {
    config: TcnConfig,
    stages: Vec<TcnStage>,
}

impl TcnParams {
    pub fn config(&self) -> &TcnConfig {
        &self.config
    }

    /// All parameters in canonical (checkpoint) order: per stage, projection
    /// weight and bias, then per block the three conv taps, conv bias,
    /// pointwise weight and bias, then classifier weight and bias.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for stage in &self.stages {
            out.push(&stage.proj.w);
            out.push(&stage.proj.b);
            for block in &stage.blocks {
                out.push(&block.w_before);
                out.push(&block.w_center);
                out.push(&block.w_after);
                out.push(&block.b_conv);
                out.push(&block.w_point);
                out.push(&block.b_point);
            }
            out.push(&stage.classifier.w);
            out.push(&stage.classifier.b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            out.push(&mut stage.proj.w);
            out.push(&mut stage.proj.b);
            for block in &mut stage.blocks {
                out.push(&mut block.w_before);
                out.push(&mut block.w_center);
                out.push(&mut block.w_after);
                out.push(&mut block.b_conv);
                out.push(&mut block.w_point);
                out.push(&mut block.b_point);
            }
            out.push(&mut stage.classifier.w);
            out.push(&mut stage.classifier.b);
        }
        out
    }

    pub fn apply_grads(&mut self, grads: &TcnGrads) -> Result<()> {
        let params = self.params_mut();
        if params.len() != grads.0.len() {
            return Err(Error::Config(format!(
                "gradient list has {} entries for {} parameters",
                grads.0.len(),
                params.len()
            )));
        }
        for (param, grad) in params.into_iter().zip(&grads.0) {
            param.apply_grad(grad)?;
        }
        Ok(())
    }
}

/// Builds the parameter tree in canonical order, pulling each matrix from
/// `next(rows, cols, is_weight)`. Initialization and checkpoint loading share
/// this so the two can never disagree on layout.
fn build_params<F>(config: TcnConfig, learning_rate: Real, mut next: F) -> Result<TcnParams>
where
    F: FnMut(usize, usize, bool) -> Result<Matrix>,
{
    config.validate()?;
    let f = config.num_feature_maps;
    let c = config.num_classes;
    let param = |rows, cols, is_weight, next: &mut F| -> Result<Param> {
        Ok(Param::new(next(rows, cols, is_weight)?, learning_rate, 0.0))
    };
    let mut stages = Vec::with_capacity(config.num_stages);
    for s in 0..config.num_stages {
        let d_in = if s == 0 { config.input_dim } else { c };
        let proj = Conv1x1 {
            w: param(d_in, f, true, &mut next)?,
            b: param(1, f, false, &mut next)?,
        };
        let mut blocks = Vec::with_capacity(config.layers_per_stage);
        for l in 0..config.layers_per_stage {
            blocks.push(DilatedBlock {
                dilation: 1usize << l,
                w_before: param(f, f, true, &mut next)?,
                w_center: param(f, f, true, &mut next)?,
                w_after: param(f, f, true, &mut next)?,
                b_conv: param(1, f, false, &mut next)?,
                w_point: param(f, f, true, &mut next)?,
                b_point: param(1, f, false, &mut next)?,
            });
        }
        let classifier = Conv1x1 {
            w: param(f, c, true, &mut next)?,
            b: param(1, c, false, &mut next)?,
        };
        stages.push(TcnStage { proj, blocks, classifier });
    }
    Ok(TcnParams { config, stages })
}

/// Seeded initialization: weights are fan-based uniform draws in canonical
/// order, biases start at zero and consume no randomness.
pub fn tcn_init(config: TcnConfig, seed: u64, learning_rate: Real) -> Result<TcnParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_params(config, learning_rate, |rows, cols, is_weight| {
        Ok(if is_weight {
            uniform_fan_init(&mut rng, rows, cols)
        } else {
            Matrix::zeros(rows, cols)
        })
    })
}

/// Dilated kernel-3 convolution with symmetric zero padding, as three GEMMs
/// over shifted row ranges: `z[t] = x[t-d] W_before + x[t] W_center
/// + x[t+d] W_after + b`, out-of-range frames contributing nothing.
fn dconv3(block: &DilatedBlock, x: &Matrix) -> Result<Matrix> {
    let n = x.rows();
    let d = block.dilation;
    let mut z = Matrix::zeros(n, block.w_center.value.cols());
    add_row_bias(&mut z, &block.b_conv.value)?;
    gemm_into(
        1.0,
        GemmOperand::full(x),
        GemmOperand::full(&block.w_center.value),
        1.0,
        &mut z,
        0..n,
    )?;
    if n > d {
        gemm_into(
            1.0,
            GemmOperand::rows(x, 0..n - d),
            GemmOperand::full(&block.w_before.value),
            1.0,
            &mut z,
            d..n,
        )?;
        gemm_into(
            1.0,
            GemmOperand::rows(x, d..n),
            GemmOperand::full(&block.w_after.value),
            1.0,
            &mut z,
            0..n - d,
        )?;
    }
    Ok(z)
}

/// One residual block: returns the conv pre-activation (needed for the
/// backward pass) and the block output `x + pointwise(relu(dconv3(x)))`.
pub fn dilated_residual_block(block: &DilatedBlock, input: &Matrix) -> Result<(Matrix, Matrix)> {
    let conv_pre = dconv3(block, input)?;
    let mut q = matmul(&relu(&conv_pre), &block.w_point.value)?;
    add_row_bias(&mut q, &block.b_point.value)?;
    let mut out = input.clone();
    out.add_scaled(&q, 1.0)?;
    Ok((conv_pre, out))
}

#[derive(Clone, Debug)]
pub struct TcnStageTrace {
    /// Stage input: raw features for the first stage, previous-stage softmax
    /// afterwards.
    pub input: Matrix,
    /// Residual-path activations `b_0..b_L` (projection output first).
    pub feats: Vec<Matrix>,
    /// Conv pre-activations `z_0..z_{L-1}`, one per block.
    pub conv_pre: Vec<Matrix>,
    pub logits: Matrix,
    pub probs: Matrix,
}

#[derive(Clone, Debug)]
pub struct TcnForwardTrace {
    pub stages: Vec<TcnStageTrace>,
}

impl TcnForwardTrace {
    /// Final stage's last residual-block output (`T x F`), the framewise
    /// embedding handed to the label-propagation network.
    pub fn penultimate(&self) -> &Matrix {
        self.stages
            .last()
            .and_then(|s| s.feats.last())
            .expect("trace holds at least one stage")
    }

    pub fn final_probs(&self) -> &Matrix {
        &self.stages.last().expect("trace holds at least one stage").probs
    }

    pub fn stage_log_probs(&self) -> Vec<Matrix> {
        self.stages.iter().map(|s| log_row_softmax(&s.logits)).collect()
    }
}

fn stage_forward(stage: &TcnStage, input: Matrix) -> Result<TcnStageTrace> {
    let mut b0 = matmul(&input, &stage.proj.w.value)?;
    add_row_bias(&mut b0, &stage.proj.b.value)?;
    let mut feats = Vec::with_capacity(stage.blocks.len() + 1);
    let mut conv_pre = Vec::with_capacity(stage.blocks.len());
    feats.push(b0);
    for block in &stage.blocks {
        let (z, next) = dilated_residual_block(block, feats.last().expect("non-empty"))?;
        conv_pre.push(z);
        feats.push(next);
    }
    let mut logits = matmul(feats.last().expect("non-empty"), &stage.classifier.w.value)?;
    add_row_bias(&mut logits, &stage.classifier.b.value)?;
    let probs = row_softmax(&logits);
    Ok(TcnStageTrace { input, feats, conv_pre, logits, probs })
}

pub fn tcn_forward(params: &TcnParams, features: &Matrix) -> Result<TcnForwardTrace> {
    if features.cols() != params.config.input_dim {
        return Err(Error::shape(
            "tcn_forward",
            features.shape(),
            (params.config.input_dim, params.config.num_feature_maps),
        ));
    }
    if features.rows() == 0 {
        return Err(Error::Config("tcn_forward needs at least one frame".into()));
    }
    let mut stages: Vec<TcnStageTrace> = Vec::with_capacity(params.stages.len());
    for (s, stage) in params.stages.iter().enumerate() {
        let input = if s == 0 {
            features.clone()
        } else {
            stages[s - 1].probs.clone()
        };
        stages.push(stage_forward(stage, input)?);
    }
    Ok(TcnForwardTrace { stages })
}

/// Flat gradient list in canonical parameter order.
#[derive(Clone, Debug)]
pub struct TcnGrads(pub Vec<Matrix>);

impl TcnGrads {
    pub fn zeros_like(params: &TcnParams) -> Self {
        TcnGrads(
            params
                .params()
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        )
    }

    pub fn add_scaled(&mut self, other: &TcnGrads, scale: Real) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(Error::Config(format!(
                "gradient lists differ in length: {} vs {}",
                self.0.len(),
                other.0.len()
            )));
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_scaled(b, scale)?;
        }
        Ok(())
    }
}

struct BlockGrads {
    w_before: Matrix,
    w_center: Matrix,
    w_after: Matrix,
    b_conv: Matrix,
    w_point: Matrix,
    b_point: Matrix,
}

struct StageGrads {
    proj_w: Matrix,
    proj_b: Matrix,
    blocks: Vec<BlockGrads>,
    cls_w: Matrix,
    cls_b: Matrix,
}

/// Backpropagates `dlogits` through one stage; returns the parameter
/// gradients and the gradient w.r.t. the stage input.
fn stage_backward(
    stage: &TcnStage,
    trace: &TcnStageTrace,
    dlogits: &Matrix,
) -> Result<(StageGrads, Matrix)> {
    let b_last = trace.feats.last().expect("non-empty");
    let cls_w = matmul_at_b(b_last, dlogits)?;
    let cls_b = dlogits.column_sums();
    let mut d_b = matmul_a_bt(dlogits, &stage.classifier.w.value)?;

    let mut blocks = Vec::with_capacity(stage.blocks.len());
    for (l, block) in stage.blocks.iter().enumerate().rev() {
        let b_l = &trace.feats[l];
        let z = &trace.conv_pre[l];
        // `d_b` is the gradient w.r.t. the block output; it reaches both the
        // pointwise conv input and, via the residual, the block input.
        let dq = d_b;
        let r = relu(z);
        let w_point = matmul_at_b(&r, &dq)?;
        let b_point = dq.column_sums();
        let mut dz = matmul_a_bt(&dq, &block.w_point.value)?;
        for (g, &pre) in dz.data_mut().iter_mut().zip(z.data()) {
            if pre <= 0.0 {
                *g = 0.0;
            }
        }
        let b_conv = dz.column_sums();
        let w_center = matmul_at_b(b_l, &dz)?;
        let n = dz.rows();
        let d = block.dilation;
        let f = b_l.cols();
        let mut w_before = Matrix::zeros(f, f);
        let mut w_after = Matrix::zeros(f, f);
        let mut dx = matmul_a_bt(&dz, &block.w_center.value)?;
        if n > d {
            gemm_into(
                1.0,
                GemmOperand::rows(b_l, 0..n - d).t(),
                GemmOperand::rows(&dz, d..n),
                0.0,
                &mut w_before,
                0..f,
            )?;
            gemm_into(
                1.0,
                GemmOperand::rows(b_l, d..n).t(),
                GemmOperand::rows(&dz, 0..n - d),
                0.0,
                &mut w_after,
                0..f,
            )?;
            gemm_into(
                1.0,
                GemmOperand::rows(&dz, d..n),
                GemmOperand::full(&block.w_before.value).t(),
                1.0,
                &mut dx,
                0..n - d,
            )?;
            gemm_into(
                1.0,
                GemmOperand::rows(&dz, 0..n - d),
                GemmOperand::full(&block.w_after.value).t(),
                1.0,
                &mut dx,
                d..n,
            )?;
        }
        let mut d_b_l = dq;
        d_b_l.add_scaled(&dx, 1.0)?;
        d_b = d_b_l;
        blocks.push(BlockGrads { w_before, w_center, w_after, b_conv, w_point, b_point });
    }
    blocks.reverse();

    let proj_w = matmul_at_b(&trace.input, &d_b)?;
    let proj_b = d_b.column_sums();
    let d_input = matmul_a_bt(&d_b, &stage.proj.w.value)?;
    Ok((StageGrads { proj_w, proj_b, blocks, cls_w, cls_b }, d_input))
}

/// Analytic gradients of the stage-averaged segmentation objective. The
/// per-stage logit gradients from the loss are chained backwards through each
/// stage and, via the softmax linking stages, into earlier stages.
pub fn tcn_backward(
    params: &TcnParams,
    trace: &TcnForwardTrace,
    labels: &[Option<usize>],
    timestamps: &TimestampAnnotation,
    weights: &LossWeights,
    conf_all_stages: bool,
) -> Result<(TcnGrads, Real)> {
    if trace.stages.len() != params.stages.len() {
        return Err(Error::Config(format!(
            "trace has {} stages for a {}-stage model",
            trace.stages.len(),
            params.stages.len()
        )));
    }
    let log_probs = trace.stage_log_probs();
    let (loss, mut dlogits) = seg_loss(&log_probs, labels, timestamps, weights, conf_all_stages)?;
    let mut rev = Vec::with_capacity(params.stages.len());
    for s in (0..params.stages.len()).rev() {
        let (grads, d_input) = stage_backward(&params.stages[s], &trace.stages[s], &dlogits[s])?;
        rev.push(grads);
        if s > 0 {
            let chained = softmax_vjp(&trace.stages[s - 1].probs, &d_input)?;
            dlogits[s - 1].add_scaled(&chained, 1.0)?;
        }
    }
    rev.reverse();
    let mut flat = Vec::new();
    for sg in rev {
        flat.push(sg.proj_w);
        flat.push(sg.proj_b);
        for bg in sg.blocks {
            flat.push(bg.w_before);
            flat.push(bg.w_center);
            flat.push(bg.w_after);
            flat.push(bg.b_conv);
            flat.push(bg.w_point);
            flat.push(bg.b_point);
        }
        flat.push(sg.cls_w);
        flat.push(sg.cls_b);
    }
    Ok((TcnGrads(flat), loss))
}

/// One video's inputs for a segmenter epoch. `labels` may be sparse
/// (timestamp-only) or dense; `timestamps` always carries the original
/// annotations for the confidence term.
#[derive(Clone, Copy)]
pub struct SegTrainItem<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [Option<usize>],
    pub timestamps: &'a TimestampAnnotation,
}

/// One epoch: per batch, per-video gradients run in parallel against a
/// parameter snapshot, then one averaged ADAM step. Returns mean per-video
/// loss.
pub fn train_seg_epoch(
    params: &mut TcnParams,
    items: &[SegTrainItem<'_>],
    weights: &LossWeights,
    batch_size: usize,
    conf_all_stages: bool,
) -> Result<Real> {
    if items.is_empty() {
        return Err(Error::Config("train_seg_epoch needs at least one video".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut total = 0.0;
    for chunk in items.chunks(batch_size) {
        let snapshot: &TcnParams = params;
        let results: Vec<(TcnGrads, Real)> = chunk
            .par_iter()
            .map(|item| {
                let trace = tcn_forward(snapshot, item.features)?;
                tcn_backward(
                    snapshot,
                    &trace,
                    item.labels,
                    item.timestamps,
                    weights,
                    conf_all_stages,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / results.len() as Real;
        let mut acc = TcnGrads::zeros_like(params);
        for (grads, loss) in &results {
            acc.add_scaled(grads, scale)?;
            total += loss;
        }
        params.apply_grads(&acc)?;
    }
    Ok(total / items.len() as Real)
}

/// Framewise argmax of the final stage's probabilities, ties toward the
/// lowest class index.
pub fn predict(params: &TcnParams, features: &Matrix) -> Result<Vec<usize>> {
    let trace = tcn_forward(params, features)?;
    let probs = trace.final_probs();
    Ok((0..probs.rows()).map(|t| argmax_row(probs.row(t))).collect())
}

/// Checkpoint layout: magic `TSTC`, u32 version, five u32s (stages, layers,
/// feature maps, input dim, classes), then every parameter in canonical order
/// as 8-byte little-endian floats.
pub fn save_tcn_checkpoint(params: &TcnParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TCN_MAGIC);
    buf.extend_from_slice(&TCN_VERSION.to_le_bytes());
    for field in [
        params.config.num_stages,
        params.config.layers_per_stage,
        params.config.num_feature_maps,
        params.config.input_dim,
        params.config.num_classes,
    ] {
        buf.extend_from_slice(&(field as u32).to_le_bytes());
    }
    for param in params.params() {
        push_f64_matrix(&mut buf, &param.value);
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Loads a checkpoint with fresh optimiser state at the given learning rate.
pub fn load_tcn_checkpoint(path: &Path, learning_rate: Real) -> Result<TcnParams> {
    let buf = std::fs::read(path)?;
    let mut off = 0usize;
    check_magic(&buf, &mut off, TCN_MAGIC, path)?;
    check_version(&buf, &mut off, TCN_VERSION, path)?;
    let mut fields = [0usize; 5];
    for field in &mut fields {
        *field = read_u32(&buf, &mut off, path)? as usize;
    }
    let config = TcnConfig {
        num_stages: fields[0],
        layers_per_stage: fields[1],
        num_feature_maps: fields[2],
        input_dim: fields[3],
        num_classes: fields[4],
    };
    if let Err(e) = config.validate() {
        return Err(Error::format(path, format!("header rejected: {e}")));
    }
    let params = build_params(config, learning_rate, |rows, cols, _| {
        read_f64_matrix(&buf, &mut off, rows, cols, path)
    })?;
    expect_eof(&buf, off, path)?;
    Ok(params)
}
