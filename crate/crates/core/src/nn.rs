//! Hand-written forward/backward kernels for the fixed operator set used by
//! the model, plus parameter storage and a finite-difference checker.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sigma must be strictly positive (index {index}, value {value})")]
    NonPositiveSigma { index: usize, value: f64 },
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("corrupt parameter blob: {0}")]
    CorruptBlob(String),
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Dense n-dimensional array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::ShapeMismatch(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Row-major 2-D matrix: one example per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NnError> {
        if data.len() != rows * cols {
            return Err(NnError::ShapeMismatch(format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, all row-major; `ta`/`tb`
/// read the stored operand transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked by callers to cover m*k, k*n and m*n
    // elements under the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y = x W + b` with `W` stored `(in, out)` row-major.
pub fn linear_forward(x: &Matrix, w: &[f64], b: &[f64]) -> Result<Matrix, NnError> {
    let n_out = b.len();
    if w.len() != x.cols * n_out {
        return Err(NnError::ShapeMismatch(format!(
            "input width {} and bias width {} do not fit weight of {} values",
            x.cols,
            n_out,
            w.len()
        )));
    }
    let mut y = Matrix::zeros(x.rows, n_out);
    for r in 0..x.rows {
        y.row_mut(r).copy_from_slice(b);
    }
    gemm(x.rows, x.cols, n_out, &x.data, false, w, false, &mut y.data, 1.0);
    Ok(y)
}

/// Accumulates `dW += x^T dy`, `db += sum_rows dy` and returns `dx = dy W^T`
/// when requested.
pub fn linear_backward_accumulate(
    x: &Matrix,
    w: &[f64],
    dy: &Matrix,
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Matrix> {
    let (n_in, n_out) = (x.cols, dy.cols);
    debug_assert_eq!(w.len(), n_in * n_out);
    debug_assert_eq!(dy.rows, x.rows);
    gemm(n_in, x.rows, n_out, &x.data, true, &dy.data, false, dw, 1.0);
    for r in 0..dy.rows {
        for (acc, g) in db.iter_mut().zip(dy.row(r)) {
            *acc += g;
        }
    }
    want_dx.then(|| {
        let mut dx = Matrix::zeros(x.rows, n_in);
        gemm(x.rows, n_out, n_in, &dy.data, false, w, true, &mut dx.data, 0.0);
        dx
    })
}

/// Gradients of `linear_forward` for upstream `dy`: `(dx, dW, db)`.
pub fn linear_backward(x: &Matrix, w: &[f64], dy: &Matrix) -> Result<(Matrix, Vec<f64>, Vec<f64>), NnError> {
    if dy.rows != x.rows || w.len() != x.cols * dy.cols {
        return Err(NnError::ShapeMismatch("linear backward operands".into()));
    }
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; dy.cols];
    let dx = linear_backward_accumulate(x, w, dy, &mut dw, &mut db, true).expect("dx requested");
    Ok((dx, dw, db))
}

/// Output of [`layer_norm_forward`] with what the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormOut {
    pub y: Matrix,
    pub inv_std: Vec<f64>,
}

/// Per-row standardization with `eps` added to the variance.
pub fn layer_norm_forward(x: &Matrix) -> LayerNormOut {
    let d = x.cols as f64;
    let mut y = Matrix::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (o, v) in y.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    LayerNormOut { y, inv_std }
}

pub fn layer_norm_backward(out: &LayerNormOut, dy: &Matrix) -> Matrix {
    let d = dy.cols as f64;
    let mut dx = Matrix::zeros(dy.rows, dy.cols);
    for r in 0..dy.rows {
        let (yr, gr) = (out.y.row(r), dy.row(r));
        let mean_g = gr.iter().sum::<f64>() / d;
        let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / d;
        let is = out.inv_std[r];
        for ((o, g), y) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
            *o = is * (g - mean_g - y * mean_gy);
        }
    }
    dx
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// `log(1 + e^x)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of softplus: the logistic sigmoid.
pub fn softplus_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies `f` elementwise and returns the result.
pub fn map(x: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

/// `dy * f'(x)` elementwise, where `x` is the activation input.
pub fn map_backward(x: &Matrix, dy: &Matrix, fprime: impl Fn(f64) -> f64) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().zip(&dy.data).map(|(&v, g)| g * fprime(v)).collect(),
    }
}

/// Factorized normal posterior over one latent block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self, NnError> {
        if mu.len() != sigma.len() {
            return Err(NnError::ShapeMismatch(format!("mu {} vs sigma {}", mu.len(), sigma.len())));
        }
        if let Some((index, &value)) = sigma.iter().enumerate().find(|(_, s)| !(**s > 0.0)) {
            return Err(NnError::NonPositiveSigma { index, value });
        }
        Ok(Self { mu, sigma })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            sigma: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `z = mu + sigma * eps`.
pub fn sample_reparameterized(q: &DiagonalGaussian, noise: &[f64]) -> Result<Vec<f64>, NnError> {
    if noise.len() != q.dim() {
        return Err(NnError::ShapeMismatch(format!("noise {} vs latent {}", noise.len(), q.dim())));
    }
    Ok(q.mu.iter().zip(&q.sigma).zip(noise).map(|((m, s), e)| m + s * e).collect())
}

/// Pullback of [`sample_reparameterized`]: `(dmu, dsigma) = (dz, dz * eps)`.
pub fn sample_reparameterized_backward(noise: &[f64], dz: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (dz.to_vec(), dz.iter().zip(noise).map(|(g, e)| g * e).collect())
}

/// `KL(q || N(0, I)) = sum_i (sigma^2 + mu^2 - 1 - 2 ln sigma) / 2`.
pub fn kl_to_standard_normal(q: &DiagonalGaussian) -> Result<f64, NnError> {
    let mut kl = 0.0;
    for (i, (m, s)) in q.mu.iter().zip(&q.sigma).enumerate() {
        if !(*s > 0.0) {
            return Err(NnError::NonPositiveSigma { index: i, value: *s });
        }
        kl += 0.5 * (s * s + m * m - 1.0 - 2.0 * s.ln());
    }
    Ok(kl)
}

/// Gradient of the KL with respect to `(mu, sigma)`.
pub fn kl_backward(q: &DiagonalGaussian) -> (Vec<f64>, Vec<f64>) {
    (q.mu.clone(), q.sigma.iter().map(|s| s - 1.0 / s).collect())
}

/// Standard deviation of a unit normal truncated to `[-2, 2]`.
pub const TRUNCATED_NORMAL_STD: f64 = 0.879_625_661_034_239_8;

/// Normal samples truncated at two standard deviations, rescaled to unit
/// variance and then by `1/sqrt(fan_in)`.
pub fn truncated_normal_init(n: usize, fan_in: usize, rng: &mut impl Rng) -> Vec<f64> {
    assert!(fan_in >= 1, "fan_in must be at least 1");
    let scale = 1.0 / (TRUNCATED_NORMAL_STD * (fan_in as f64).sqrt());
    (0..n)
        .map(|_| loop {
            let v: f64 = rng.sample(StandardNormal);
            if v.abs() <= 2.0 {
                break v * scale;
            }
        })
        .collect()
}

/// Generator for one `(seed, a, b, c)` coordinate of the training stream,
/// independent of evaluation order.
pub fn counter_rng(seed: u64, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut key = [0u8; 32];
    for (i, v) in [seed, a, b, c].iter().enumerate() {
        key[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

pub fn standard_normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Handle to a parameter inside a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// One named tensor with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Optimizer steps applied to this tensor.
    pub step: u64,
}

/// Manifest row locating one parameter inside a checkpoint blob (offsets in
/// f64 elements).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub m_offset: usize,
    pub v_offset: usize,
    pub step: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, value: Vec<f64>) -> Result<ParamId, NnError> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateName(name.to_string()));
        }
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(NnError::ShapeMismatch(format!("{name}: shape {shape:?} vs {} values", value.len())));
        }
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            shape,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            value,
            step: 0,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].grad
    }

    /// Value and gradient of one parameter, borrowed together.
    pub fn value_grad(&mut self, id: ParamId) -> (&[f64], &mut [f64]) {
        let p = &mut self.params[id.0];
        (&p.value, &mut p.grad)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds another store's gradients (same layout) into this one.
    pub fn accumulate_grads(&mut self, other: &ParameterStore) {
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            for (a, b) in p.grad.iter_mut().zip(&q.grad) {
                *a += b;
            }
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }

    /// Copy with zeroed gradients and no optimizer state, for per-worker
    /// accumulation.
    pub fn grad_buffer(&self) -> GradBuffer {
        GradBuffer {
            grads: self.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn add_grad_buffer(&mut self, buf: &GradBuffer) {
        for (p, g) in self.params.iter_mut().zip(&buf.grads) {
            for (a, b) in p.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    /// Flattened values of every parameter in registration order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.grad.iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Serializes values and optimizer moments as little-endian f64 and
    /// returns the blob with its manifest.
    pub fn to_blob(&self) -> (Vec<u8>, Vec<ParamEntry>) {
        let mut bytes = Vec::with_capacity(self.n_values() * 24);
        let mut entries = Vec::with_capacity(self.params.len());
        let mut off = 0;
        for p in &self.params {
            let n = p.value.len();
            entries.push(ParamEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                offset: off,
                m_offset: off + n,
                v_offset: off + 2 * n,
                step: p.step,
            });
            for arr in [&p.value, &p.m, &p.v] {
                for x in arr.iter() {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
            }
            off += 3 * n;
        }
        (bytes, entries)
    }

    /// Restores a store written by [`ParameterStore::to_blob`]. Gradients
    /// start at zero.
    pub fn from_blob(bytes: &[u8], entries: &[ParamEntry]) -> Result<Self, NnError> {
        if bytes.len() % 8 != 0 {
            return Err(NnError::CorruptBlob(format!("length {} is not a multiple of 8", bytes.len())));
        }
        let total = bytes.len() / 8;
        let read = |off: usize, n: usize| -> Result<Vec<f64>, NnError> {
            if off + n > total {
                return Err(NnError::CorruptBlob(format!("range {off}..{} exceeds {total} values", off + n)));
            }
            Ok(bytes[off * 8..(off + n) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let mut store = Self::new();
        for e in entries {
            let n: usize = e.shape.iter().product();
            let id = store.add(&e.name, e.shape.clone(), read(e.offset, n)?)?;
            let p = store.param_mut(id);
            p.m = read(e.m_offset, n)?;
            p.v = read(e.v_offset, n)?;
            p.step = e.step;
        }
        Ok(store)
    }
}

/// Gradient accumulator with the same layout as a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn add(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Largest relative discrepancy between `analytic` and central differences
/// of `f` at `x` with step `h`.
///
/// Each coordinate's error is `|a - n| / max(|a|, |n|, floor)`, where the
/// floor is `1e-4 * max_j |n_j| + 1e-12`; coordinates whose true derivative
/// is tiny compared with the largest one are judged on an absolute scale so
/// difference-quotient roundoff does not dominate.
pub fn grad_check(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut xs = x.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        numeric.push((fp - fm) / (2.0 * h));
    }
    relative_error(analytic, &numeric)
}

/// The error measure used by [`grad_check`].
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-4 * scale + 1e-12;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, standard_normal_vec(r, rows * cols)).unwrap()
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(NnError::ShapeMismatch(_))));
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut r = rng(0);
        let x = rand_matrix(&mut r, 3, 4);
        let mut w = vec![0.0; 16];
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        assert_eq!(linear_forward(&x, &w, &[0.0; 4]).unwrap(), x);
        let b = [1.0, -2.0, 0.5];
        let y = linear_forward(&Matrix::zeros(2, 4), &[0.3; 12], &b).unwrap();
        assert_eq!(y.row(0), &b);
        assert_eq!(y.row(1), &b);
        assert!(matches!(
            linear_forward(&x, &[0.0; 10], &[0.0; 3]),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn linear_matches_naive_product() {
        let mut r = rng(1);
        let x = rand_matrix(&mut r, 5, 7);
        let w = standard_normal_vec(&mut r, 7 * 3);
        let b = standard_normal_vec(&mut r, 3);
        let y = linear_forward(&x, &w, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let want: f64 = b[j] + (0..7).map(|k| x.data[i * 7 + k] * w[k * 3 + j]).sum::<f64>();
                assert!((y.data[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_gradients() {
        let mut r = rng(2);
        let x = rand_matrix(&mut r, 4, 5);
        let w = standard_normal_vec(&mut r, 15);
        let b = standard_normal_vec(&mut r, 3);
        let up = rand_matrix(&mut r, 4, 3);
        let loss = |x: &Matrix, w: &[f64], b: &[f64]| {
            linear_forward(x, w, b).unwrap().data.iter().zip(&up.data).map(|(a, c)| a * c).sum::<f64>()
        };
        let (dx, dw, db) = linear_backward(&x, &w, &up).unwrap();
        let ex = grad_check(|v| loss(&Matrix::from_vec(4, 5, v.to_vec()).unwrap(), &w, &b), &x.data, &dx.data, 1e-5);
        let ew = grad_check(|v| loss(&x, v, &b), &w, &dw, 1e-5);
        let eb = grad_check(|v| loss(&x, &w, v), &b, &db, 1e-5);
        assert!(ex < 1e-6 && ew < 1e-6 && eb < 1e-6, "{ex} {ew} {eb}");
    }

    #[test]
    fn layer_norm_properties() {
        let c = Matrix::from_vec(1, 5, vec![3.0; 5]).unwrap();
        assert!(layer_norm_forward(&c).y.data.iter().all(|&v| v == 0.0));
        let mut r = rng(3);
        let x = rand_matrix(&mut r, 6, 64);
        let y = layer_norm_forward(&x).y;
        for i in 0..6 {
            let row = y.row(i);
            let mean = row.iter().sum::<f64>() / 64.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-6);
            // eps in the denominator shrinks the variance by var/(var+eps)
            assert!((var - 1.0).abs() < 1e-4);
        }
        let x = Matrix::from_vec(6, 64, x.data.iter().map(|v| v * 50.0).collect()).unwrap();
        let y = layer_norm_forward(&x).y;
        let var = y.row(0).iter().map(|v| v * v).sum::<f64>() / 64.0;
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_gradient() {
        let mut r = rng(4);
        let x = rand_matrix(&mut r, 3, 6);
        let up = rand_matrix(&mut r, 3, 6);
        let out = layer_norm_forward(&x);
        let dx = layer_norm_backward(&out, &up);
        let e = grad_check(
            |v| {
                let y = layer_norm_forward(&Matrix::from_vec(3, 6, v.to_vec()).unwrap()).y;
                y.data.iter().zip(&up.data).map(|(a, b)| a * b).sum()
            },
            &x.data,
            &dx.data,
            1e-5,
        );
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn activations() {
        assert_eq!(relu(-1.0), 0.0);
        assert_eq!(relu(2.0), 2.0);
        assert_eq!(leaky_relu(-1.0), -0.01);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(0.0) - 0.6931).abs() < 1e-4);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        for x in [-800.0, -30.0, -1.0, 0.0, 1.0, 30.0] {
            assert!(softplus(x) > 0.0 || x < -700.0);
            assert!(softplus(x).is_finite());
        }
        for x in [-3.0, -0.2, 0.4, 5.0] {
            let h = 1e-6;
            let fd = |f: fn(f64) -> f64| (f(x + h) - f(x - h)) / (2.0 * h);
            assert!((fd(softplus) - softplus_grad(x)).abs() < 1e-8);
            assert!((fd(relu) - relu_grad(x)).abs() < 1e-8);
            assert!((fd(leaky_relu) - leaky_relu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn reparameterized_sampling() {
        let q = DiagonalGaussian::new(vec![1.5, -2.0], vec![1e-12, 1e-12]).unwrap();
        let z = sample_reparameterized(&q, &[0.7, -1.3]).unwrap();
        assert!((z[0] - 1.5).abs() < 1e-10 && (z[1] + 2.0).abs() < 1e-10);

        let q = DiagonalGaussian::new(vec![0.3, -1.0, 2.0], vec![0.5, 1.5, 2.0]).unwrap();
        let mut r = rng(5);
        let n = 100_000;
        let mut sums = [0.0; 3];
        for _ in 0..n {
            let z = sample_reparameterized(&q, &standard_normal_vec(&mut r, 3)).unwrap();
            for k in 0..3 {
                sums[k] += z[k];
            }
        }
        for k in 0..3 {
            let se = q.sigma[k] / (n as f64).sqrt();
            assert!((sums[k] / n as f64 - q.mu[k]).abs() < 4.0 * se);
        }

        let eps = [0.4, -0.9, 1.1];
        let up = [1.0, 2.0, -0.5];
        let (dmu, dsig) = sample_reparameterized_backward(&eps, &up);
        let mut flat = q.mu.clone();
        flat.extend(&q.sigma);
        let mut an = dmu.clone();
        an.extend(&dsig);
        let e = grad_check(
            |v| {
                let q = DiagonalGaussian::new(v[..3].to_vec(), v[3..].to_vec()).unwrap();
                sample_reparameterized(&q, &eps).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
            },
            &flat,
            &an,
            1e-5,
        );
        assert!(e < 1e-4);
        assert!(matches!(
            sample_reparameterized(&q, &[0.0; 2]),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_to_standard_normal(&DiagonalGaussian::standard(4)).unwrap(), 0.0);
        let q = DiagonalGaussian {
            mu: vec![1.0],
            sigma: vec![1.0],
        };
        assert!((kl_to_standard_normal(&q).unwrap() - 0.5).abs() < 1e-15);
        let bad = DiagonalGaussian {
            mu: vec![0.0],
            sigma: vec![0.0],
        };
        assert!(matches!(kl_to_standard_normal(&bad), Err(NnError::NonPositiveSigma { .. })));
        assert!(DiagonalGaussian::new(vec![0.0], vec![-1.0]).is_err());

        let q = DiagonalGaussian::new(vec![0.4, -1.2], vec![0.6, 1.7]).unwrap();
        let (dm, ds) = kl_backward(&q);
        let mut x = q.mu.clone();
        x.extend(&q.sigma);
        let mut an = dm;
        an.extend(ds);
        let e = grad_check(
            |v| kl_to_standard_normal(&DiagonalGaussian::new(v[..2].to_vec(), v[2..].to_vec()).unwrap()).unwrap(),
            &x,
            &an,
            1e-5,
        );
        assert!(e < 1e-6);
    }

    #[test]
    fn truncated_normal_statistics() {
        let mut r = rng(6);
        let fan_in = 16;
        let v = truncated_normal_init(1_000_000, fan_in, &mut r);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        let want = 1.0 / (fan_in as f64).sqrt();
        assert!((std - want).abs() / want < 0.02);
        let bound = 2.0 / TRUNCATED_NORMAL_STD / (fan_in as f64).sqrt();
        assert!(v.iter().all(|x| x.abs() <= bound));
        assert_eq!(truncated_normal_init(10, 3, &mut rng(9)), truncated_normal_init(10, 3, &mut rng(9)));
    }

    #[test]
    fn truncated_normal_constant() {
        // variance of N(0,1) truncated to [-2,2]: 1 - 2*2*phi(2)/(2*Phi(2)-1)
        let phi = (-2.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mass = libm::erf(2.0 / std::f64::consts::SQRT_2);
        let var = 1.0 - 4.0 * phi / mass;
        assert!((var.sqrt() - TRUNCATED_NORMAL_STD).abs() < 1e-12);
    }

    #[test]
    fn grad_check_detects_broken_backward() {
        let mut r = rng(7);
        let x = rand_matrix(&mut r, 2, 3);
        let w = standard_normal_vec(&mut r, 6);
        let b = [0.0, 0.0];
        let (_, mut dw, _) = linear_backward(&x, &w, &Matrix::from_vec(2, 2, vec![1.0; 4]).unwrap()).unwrap();
        let f = |v: &[f64]| linear_forward(&x, v, &b).unwrap().data.iter().sum::<f64>();
        assert!(grad_check(f, &w, &dw, 1e-5) < 1e-6);
        dw[2] *= 1.5;
        assert!(grad_check(f, &w, &dw, 1e-5) > 1e-2);
    }

    #[test]
    fn counter_rng_is_keyed() {
        let a: f64 = counter_rng(1, 2, 3, 4).gen();
        let b: f64 = counter_rng(1, 2, 3, 4).gen();
        let c: f64 = counter_rng(1, 2, 3, 5).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn store_blob_roundtrip_is_bit_exact() {
        let mut s = ParameterStore::new();
        let mut r = rng(8);
        let a = s.add("enc.w", vec![3, 2], standard_normal_vec(&mut r, 6)).unwrap();
        s.add("enc.b", vec![2], vec![f64::MIN_POSITIVE, -0.0]).unwrap();
        s.param_mut(a).m = standard_normal_vec(&mut r, 6);
        s.param_mut(a).v = vec![1e-300; 6];
        s.param_mut(a).step = 17;
        assert!(matches!(s.add("enc.b", vec![1], vec![0.0]), Err(NnError::DuplicateName(_))));
        let (bytes, entries) = s.to_blob();
        let back = ParameterStore::from_blob(&bytes, &entries).unwrap();
        for (p, q) in s.params().iter().zip(back.params()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.step, q.step);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&p.value), bits(&q.value));
            assert_eq!(bits(&p.m), bits(&q.m));
            assert_eq!(bits(&p.v), bits(&q.v));
        }
        assert!(ParameterStore::from_blob(&bytes[..bytes.len() - 8], &entries).is_err());
    }
}
