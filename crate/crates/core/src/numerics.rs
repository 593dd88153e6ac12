//! Dense row-major matrices and the small numeric kernel set the models need:
//! GEMM (backed by `matrixmultiply`), rowwise softmax, ReLU, ADAM updates and
//! central-difference gradients for checking the analytic ones.

use crate::error::{Error, Result};

/// Scalar type used for all in-memory model state. Defaults to `f64`; the
/// `f32` cargo feature switches every computation to single precision.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Width of [`Real`] in bytes, as reported to precision-compatibility checks.
pub const REAL_BITS: u32 = 8 * std::mem::size_of::<Real>() as u32;

#[cfg(not(feature = "f32"))]
use matrixmultiply::dgemm as gemm_raw;
#[cfg(feature = "f32")]
use matrixmultiply::sgemm as gemm_raw;

/// Dense row-major matrix. `data.len() == rows * cols` always holds; entry
/// `(i, j)` lives at `data[i * cols + j]`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<Real>,
}

impl std::fmt::Debug for Matrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.rows * self.cols <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Convenience constructor for tests and small literals.
    pub fn from_rows(rows: &[&[Real]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Config("ragged rows in matrix literal".into()));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Real {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Real) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[Real] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [Real] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&mut self, s: Real) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Matrix, s: Real) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_scaled", self.shape(), other.shape()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> Real {
        self.data.iter().fold(0.0, |acc, &x| acc.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sum of each column as a `1 x cols` matrix.
    pub fn column_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for i in 0..self.rows {
            let row = self.row(i);
            for (o, &x) in out.data.iter_mut().zip(row) {
                *o += x;
            }
        }
        out
    }
}

/// One operand of [`gemm_into`]: a contiguous row range of a matrix, applied
/// before the optional transpose.
#[derive(Clone, Copy)]
pub(crate) struct GemmOperand<'a> {
    mat: &'a Matrix,
    row_start: usize,
    row_len: usize,
    transpose: bool,
}

impl<'a> GemmOperand<'a> {
    pub(crate) fn full(mat: &'a Matrix) -> Self {
        GemmOperand {
            mat,
            row_start: 0,
            row_len: mat.rows,
            transpose: false,
        }
    }

    pub(crate) fn rows(mat: &'a Matrix, range: std::ops::Range<usize>) -> Self {
        debug_assert!(range.end <= mat.rows);
        GemmOperand {
            mat,
            row_start: range.start,
            row_len: range.end - range.start,
            transpose: false,
        }
    }

    pub(crate) fn t(mut self) -> Self {
        self.transpose = !self.transpose;
        self
    }

    fn dims(&self) -> (usize, usize) {
        if self.transpose {
            (self.mat.cols, self.row_len)
        } else {
            (self.row_len, self.mat.cols)
        }
    }

    fn ptr(&self) -> *const Real {
        self.mat.data[self.row_start * self.mat.cols..].as_ptr()
    }

    fn strides(&self) -> (isize, isize) {
        if self.transpose {
            (1, self.mat.cols as isize)
        } else {
            (self.mat.cols as isize, 1)
        }
    }
}

/// `c[c_rows] = alpha * a * b + beta * c[c_rows]` where `a` and `b` are row
/// slices with optional transposition. All model-sized products funnel through
/// here so the hot path is a single well-tested GEMM.
pub(crate) fn gemm_into(
    alpha: Real,
    a: GemmOperand<'_>,
    b: GemmOperand<'_>,
    beta: Real,
    c: &mut Matrix,
    c_rows: std::ops::Range<usize>,
) -> Result<()> {
    let (m, ka) = a.dims();
    let (kb, n) = b.dims();
    if ka != kb {
        return Err(Error::shape("gemm", (m, ka), (kb, n)));
    }
    if c_rows.end > c.rows || c_rows.end - c_rows.start != m || c.cols != n {
        return Err(Error::shape(
            "gemm output",
            (c_rows.end - c_rows.start, c.cols),
            (m, n),
        ));
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if ka == 0 {
        // matrixmultiply requires k >= 1; an empty inner dimension means the
        // product is all zeros.
        for i in c_rows {
            for x in c.row_mut(i) {
                *x *= beta;
            }
        }
        return Ok(());
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let rsc = c.cols as isize;
    let c_ptr = c.data[c_rows.start * c.cols..].as_mut_ptr();
    // SAFETY: dimensions and strides were validated against the backing
    // buffers above, and `c` is borrowed mutably so it aliases neither input.
    unsafe {
        gemm_raw(
            m,
            ka,
            n,
            alpha,
            a.ptr(),
            rsa,
            csa,
            b.ptr(),
            rsb,
            csb,
            beta,
            c_ptr,
            rsc,
            1,
        );
    }
    Ok(())
}

/// Matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm_into(
        1.0,
        GemmOperand::full(a),
        GemmOperand::full(b),
        0.0,
        &mut c,
        0..a.rows,
    )?;
    Ok(c)
}

/// `a^T * b`, without materialising the transpose.
pub fn matmul_at_b(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape("matmul_at_b", a.shape(), b.shape()));
    }
    let mut c = Matrix::zeros(a.cols, b.cols);
    gemm_into(
        1.0,
        GemmOperand::full(a).t(),
        GemmOperand::full(b),
        0.0,
        &mut c,
        0..a.cols,
    )?;
    Ok(c)
}

/// `a * b^T`, without materialising the transpose.
pub fn matmul_a_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_a_bt", a.shape(), b.shape()));
    }
    let mut c = Matrix::zeros(a.rows, b.rows);
    gemm_into(
        1.0,
        GemmOperand::full(a),
        GemmOperand::full(b).t(),
        0.0,
        &mut c,
        0..a.rows,
    )?;
    Ok(c)
}

/// Elementwise `max(x, 0)`.
pub fn relu(m: &Matrix) -> Matrix {
    m.map(|x| x.max(0.0))
}

/// Rowwise softmax with the max-subtraction trick, so large logits do not
/// overflow.
pub fn row_softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row.iter().fold(Real::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// Rowwise log-softmax: `x - max - ln(sum(exp(x - max)))`.
pub fn log_row_softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row.iter().fold(Real::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for x in row.iter() {
            sum += (*x - max).exp();
        }
        let log_sum = sum.ln();
        for x in row.iter_mut() {
            *x = *x - max - log_sum;
        }
    }
    out
}

/// Vector-Jacobian product of rowwise softmax: given `probs = row_softmax(z)`
/// and a gradient w.r.t. `probs`, returns the gradient w.r.t. `z`:
/// `g_z = p .* (g_p - rowsum(g_p .* p))`.
pub fn softmax_vjp(probs: &Matrix, grad_probs: &Matrix) -> Result<Matrix> {
    if probs.shape() != grad_probs.shape() {
        return Err(Error::shape("softmax_vjp", probs.shape(), grad_probs.shape()));
    }
    let mut out = Matrix::zeros(probs.rows, probs.cols);
    for i in 0..probs.rows {
        let p = probs.row(i);
        let g = grad_probs.row(i);
        let dot: Real = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (o, (&pc, &gc)) in out.row_mut(i).iter_mut().zip(p.iter().zip(g)) {
            *o = pc * (gc - dot);
        }
    }
    Ok(out)
}

/// Adds a `1 x C` bias row to every row of `m`.
pub fn add_row_bias(m: &mut Matrix, bias: &Matrix) -> Result<()> {
    if bias.rows != 1 || bias.cols != m.cols {
        return Err(Error::shape("add_row_bias", m.shape(), bias.shape()));
    }
    for i in 0..m.rows {
        for (x, &b) in m.row_mut(i).iter_mut().zip(bias.row(0)) {
            *x += b;
        }
    }
    Ok(())
}

/// Converts a gradient taken w.r.t. log-probabilities into one w.r.t. the
/// logits that produced them: `g_logit = g_logp - p * rowsum(g_logp)`.
pub fn logp_grad_to_logit_grad(log_probs: &Matrix, grad_logp: &Matrix) -> Result<Matrix> {
    if log_probs.shape() != grad_logp.shape() {
        return Err(Error::shape(
            "logp_grad_to_logit_grad",
            log_probs.shape(),
            grad_logp.shape(),
        ));
    }
    let mut out = grad_logp.clone();
    for i in 0..out.rows {
        let row_sum: Real = grad_logp.row(i).iter().sum();
        let lp = log_probs.row(i);
        for (o, &l) in out.row_mut(i).iter_mut().zip(lp) {
            *o -= l.exp() * row_sum;
        }
    }
    Ok(out)
}

/// Per-parameter ADAM state with bias correction folded into the step size.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub step_count: u64,
    pub learning_rate: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
    pub weight_decay: Real,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, learning_rate: Real, weight_decay: Real) -> Self {
        AdamState {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }
}

/// One ADAM update. Weight decay is applied as L2 regularisation folded into
/// the gradient (`g += wd * param`) before the moment updates, and bias
/// correction uses the step-size form `lr_t = lr * sqrt(1 - b2^t) / (1 - b1^t)`.
pub fn adam_step(param: &mut Matrix, grad: &Matrix, state: &mut AdamState) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape("adam_step", param.shape(), grad.shape()));
    }
    if param.shape() != state.m.shape() {
        return Err(Error::shape("adam_step state", param.shape(), state.m.shape()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let lr_t = state.learning_rate * (1.0 - state.beta2.powi(t)).sqrt()
        / (1.0 - state.beta1.powi(t));
    let (b1, b2) = (state.beta1, state.beta2);
    for i in 0..param.data.len() {
        let g = grad.data[i] + state.weight_decay * param.data[i];
        let m = b1 * state.m.data[i] + (1.0 - b1) * g;
        let v = b2 * state.v.data[i] + (1.0 - b2) * g * g;
        state.m.data[i] = m;
        state.v.data[i] = v;
        param.data[i] -= lr_t * m / (v.sqrt() + state.epsilon);
    }
    Ok(())
}

/// A weight matrix together with its optimiser state.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Matrix,
    pub adam: AdamState,
}

impl Param {
    pub fn new(value: Matrix, learning_rate: Real, weight_decay: Real) -> Self {
        let adam = AdamState::new(value.rows(), value.cols(), learning_rate, weight_decay);
        Param { value, adam }
    }

    pub fn apply_grad(&mut self, grad: &Matrix) -> Result<()> {
        adam_step(&mut self.value, grad, &mut self.adam)
    }
}

/// Derives an independent RNG seed from a base seed and a stream tag
/// (splitmix-style golden-ratio mixing), so subsystems sharing one run seed
/// do not consume from each other's streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Central-difference gradient of a scalar function of a matrix:
/// `g_ij = (f(x + h e_ij) - f(x - h e_ij)) / (2h)`.
pub fn finite_diff_grad<F: FnMut(&Matrix) -> Real>(mut f: F, x: &Matrix, h: Real) -> Matrix {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = f(&probe);
        probe.data[i] = orig - h;
        let minus = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative error between an analytic gradient and a reference, as used by the
/// gradient checks: `max_i |a_i - r_i| / max(1, max_i |r_i|)`.
pub fn grad_rel_error(analytic: &Matrix, reference: &Matrix) -> Real {
    let mut max_diff: Real = 0.0;
    for (a, r) in analytic.data.iter().zip(&reference.data) {
        max_diff = max_diff.max((a - r).abs());
    }
    max_diff / reference.max_abs().max(1.0)
}
