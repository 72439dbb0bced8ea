//! Small dense-network toolkit: row-major matrices, fully connected layers
//! with hand-written gradients, row softmax and Adam.
//!
//! Everything is `f64` and single-threaded so gradient checks and repeated
//! runs are bit-reproducible.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("checkpoint has {found} tensors, model expects {expected}")]
    TensorCount { found: usize, expected: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NnError> {
        if data.len() != rows * cols {
            return Err(NnError::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NnError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NnError::Dimension("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    /// Glorot-uniform entries in +-sqrt(6 / (rows + cols)).
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, NnError> {
        if self.cols != other.rows {
            return Err(NnError::Dimension(format!(
                "{}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            vec_mat_acc(self.row(r), other, out.row_mut(r));
        }
        Ok(out)
    }

    /// `self^T * other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix, NnError> {
        if self.rows != other.rows {
            return Err(NnError::Dimension(format!(
                "({}x{})^T * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &bj) in dst.iter_mut().zip(b) {
                    *d += ai * bj;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix, NnError> {
        if self.cols != other.cols {
            return Err(NnError::Dimension(format!(
                "{}x{} * ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            for c in 0..other.rows {
                out.data[r * other.rows + c] = dot(self.row(r), other.row(c));
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// out += x * m, where x is a row vector.
fn vec_mat_acc(x: &[f64], m: &Matrix, out: &mut [f64]) {
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = m.row(i);
        for (o, &w) in out.iter_mut().zip(row) {
            *o += xi * w;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Anything holding trainable tensors in a fixed order.
pub trait Params {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.fill(0.0);
        }
    }

    /// self += scale * other; both must share a layout.
    fn axpy(&mut self, scale: f64, other: &Self)
    where
        Self: Sized,
    {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }
}

/// Fully connected layer `y = act(x W + b)` with `W: in x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Matrix,
    /// 1 x out.
    pub b: Matrix,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        Self {
            w: Matrix::glorot(inputs, outputs, rng),
            b: Matrix::zeros(1, outputs),
            activation,
        }
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self { w: Matrix::zeros(inputs, outputs), b: Matrix::zeros(1, outputs), activation }
    }

    pub fn inputs(&self) -> usize {
        self.w.rows
    }

    pub fn outputs(&self) -> usize {
        self.w.cols
    }

    /// Single-row forward; `out` must have `outputs()` entries.
    pub fn forward_row(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inputs());
        out.copy_from_slice(&self.b.data);
        vec_mat_acc(x, &self.w, out);
        for o in out.iter_mut() {
            *o = self.activation.apply(*o);
        }
    }

    pub fn forward_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.outputs()];
        self.forward_row(x, &mut out);
        out
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix, NnError> {
        if x.cols != self.inputs() {
            return Err(NnError::Dimension(format!(
                "layer expects {} inputs, got {}",
                self.inputs(),
                x.cols
            )));
        }
        let mut y = Matrix::zeros(x.rows, self.outputs());
        for r in 0..x.rows {
            self.forward_row(x.row(r), y.row_mut(r));
        }
        Ok(y)
    }

    /// Backward for one row given the row's input `x`, output `y` and upstream
    /// gradient `dy`. Parameter gradients accumulate into `grad`; the input
    /// gradient accumulates into `dx`.
    pub fn backward_row(&self, x: &[f64], y: &[f64], dy: &[f64], dx: &mut [f64], grad: &mut DenseLayer) {
        let out = self.outputs();
        let mut dz = [0.0f64; 128];
        let dz: &mut [f64] = if out <= 128 { &mut dz[..out] } else { &mut vec![0.0; out][..] };
        let mut any = false;
        for j in 0..out {
            dz[j] = dy[j] * self.activation.grad_from_output(y[j]);
            any |= dz[j] != 0.0;
        }
        if !any {
            return;
        }
        for (g, &d) in grad.b.data.iter_mut().zip(dz.iter()) {
            *g += d;
        }
        for (i, &xi) in x.iter().enumerate() {
            let wrow = self.w.row(i);
            dx[i] += dot(wrow, dz);
            if xi != 0.0 {
                let grow = grad.w.row_mut(i);
                for (g, &d) in grow.iter_mut().zip(dz.iter()) {
                    *g += xi * d;
                }
            }
        }
    }

    /// Batch backward returning `(dx, grads)`.
    pub fn backward(&self, x: &Matrix, y: &Matrix, dy: &Matrix) -> Result<(Matrix, DenseLayer), NnError> {
        if x.cols != self.inputs() || y.cols != self.outputs() || dy.rows != y.rows || dy.cols != y.cols || x.rows != y.rows {
            return Err(NnError::Dimension("backward operand shapes disagree".into()));
        }
        let mut grad = DenseLayer::zeros(self.inputs(), self.outputs(), self.activation);
        let mut dx = Matrix::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            self.backward_row(x.row(r), y.row(r), dy.row(r), dx.row_mut(r), &mut grad);
        }
        Ok((dx, grad))
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs(), self.outputs(), self.activation)
    }
}

impl Params for DenseLayer {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w, &self.b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows {
        out.row_mut(r).copy_from_slice(&softmax(m.row(r)));
    }
    out
}

/// log(sum(exp(x))) with max subtraction.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Params + ?Sized>(params: &P) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam descent step: `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step<P: Params + ?Sized>(params: &mut P, grads: &P, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Copies tensors out of a model for serialization.
pub fn export_tensors<P: Params + ?Sized>(params: &P) -> Vec<Matrix> {
    params.tensors().into_iter().cloned().collect()
}

/// Loads tensors exported by [`export_tensors`] into a model of the same layout.
pub fn import_tensors<P: Params + ?Sized>(params: &mut P, tensors: &[Matrix]) -> Result<(), NnError> {
    let mut dst = params.tensors_mut();
    if dst.len() != tensors.len() {
        return Err(NnError::TensorCount { found: tensors.len(), expected: dst.len() });
    }
    for (i, (d, s)) in dst.iter_mut().zip(tensors).enumerate() {
        if (d.rows, d.cols) != (s.rows, s.cols) || s.data.len() != s.rows * s.cols {
            return Err(NnError::Dimension(format!(
                "tensor {i}: checkpoint {}x{}, model {}x{}",
                s.rows, s.cols, d.rows, d.cols
            )));
        }
        d.data.copy_from_slice(&s.data);
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite differences used as an independent oracle for every
    //! hand-written backward pass.

    use super::Params;

    pub const H: f64 = 1e-5;
    pub const TOL: f64 = 1e-4;

    /// Relative error with an absolute floor so near-zero gradients compare sanely.
    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    /// Checks every parameter of `model` against `loss` by central differences.
    pub fn check_params<P: Params + Clone>(model: &P, analytic: &P, loss: impl Fn(&P) -> f64) -> f64 {
        let mut worst: f64 = 0.0;
        let n_tensors = model.tensors().len();
        for t in 0..n_tensors {
            let len = model.tensors()[t].len();
            for i in 0..len {
                let mut plus = model.clone();
                plus.tensors_mut()[t].data[i] += H;
                let mut minus = model.clone();
                minus.tensors_mut()[t].data[i] -= H;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * H);
                let err = rel_err(numeric, analytic.tensors()[t].data[i]);
                worst = worst.max(err);
            }
        }
        worst
    }

    pub fn check_inputs(x: &[f64], analytic: &[f64], loss: impl Fn(&[f64]) -> f64) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let mut p = x.to_vec();
            p[i] += H;
            let mut m = x.to_vec();
            m[i] -= H;
            let numeric = (loss(&p) - loss(&m)) / (2.0 * H);
            worst = worst.max(rel_err(numeric, analytic[i]));
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut layer = DenseLayer::zeros(3, 3, Activation::Identity);
        layer.w = Matrix::identity(3);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.5]]).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), x);
    }

    #[test]
    fn relu_on_negative_preactivations_is_dead() {
        let mut layer = DenseLayer::zeros(2, 2, Activation::Relu);
        layer.w = Matrix::identity(2);
        let x = Matrix::from_rows(&[vec![-1.0, -3.0]]).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.data, vec![0.0, 0.0]);
        let dy = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let (dx, _) = layer.backward(&x, &y, &dy).unwrap();
        assert_eq!(dx.data, vec![0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let layer = DenseLayer::zeros(3, 2, Activation::Tanh);
        assert!(matches!(layer.forward(&Matrix::zeros(1, 4)), Err(NnError::Dimension(_))));
        assert!(Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut r = rng(1);
        for act in [Activation::Tanh, Activation::Relu, Activation::Identity] {
            for (rows, inp, out) in [(1, 4, 3), (3, 4, 3), (2, 8, 8), (5, 2, 7)] {
                let layer = DenseLayer::new(inp, out, act, &mut r);
                let x = random_matrix(rows, inp, &mut r);
                let probe = random_matrix(rows, out, &mut r);
                let loss = |l: &DenseLayer, x: &Matrix| -> f64 {
                    dot(&l.forward(x).unwrap().data, &probe.data)
                };
                let y = layer.forward(&x).unwrap();
                let (dx, grad) = layer.backward(&x, &y, &probe).unwrap();
                assert!(check_params(&layer, &grad, |l| loss(l, &x)) < TOL);
                let err = check_inputs(&x.data, &dx.data, |xd| {
                    loss(&layer, &Matrix::from_vec(rows, inp, xd.to_vec()).unwrap())
                });
                assert!(err < TOL, "{act:?} input grad err {err}");
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]).unwrap();
        let s = softmax_rows(&m);
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.get(1, 0) - 1.0).abs() < 1e-12 && s.get(1, 1) < 1e-300 + 1e-12);
        assert!(s.is_finite());
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let mut r = rng(4);
        for _ in 0..50 {
            let row: Vec<f64> = (0..6).map(|_| r.gen_range(-30.0..30.0)).collect();
            let shifted: Vec<f64> = row.iter().map(|v| v + 17.25).collect();
            let a = softmax(&row);
            let b = softmax(&shifted);
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (x, y) in a.iter().zip(&b) {
                assert!(*x >= 0.0);
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut r = rng(2);
        let mut layer = DenseLayer::new(3, 2, Activation::Tanh, &mut r);
        let before = layer.clone();
        let grads = layer.zeros_like();
        let mut st = AdamState::new(&layer);
        adam_step(&mut layer, &grads, &mut st, 1e-3);
        assert_eq!(layer, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut layer = DenseLayer::zeros(2, 2, Activation::Identity);
        let mut grads = layer.zeros_like();
        grads.w.data.fill(0.37);
        grads.b.data.fill(-5.0);
        let mut st = AdamState::new(&layer);
        adam_step(&mut layer, &grads, &mut st, 1e-3);
        for &w in &layer.w.data {
            assert!((w + 1e-3).abs() < 1e-9);
        }
        for &b in &layer.b.data {
            assert!((b - 1e-3).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // f(w) = (w - 3)^2 with the scalar held in a 1x1 bias.
        let mut p = DenseLayer::zeros(1, 1, Activation::Identity);
        let mut st = AdamState::new(&p);
        for _ in 0..200 {
            let mut g = p.zeros_like();
            g.b.data[0] = 2.0 * (p.b.data[0] - 3.0);
            adam_step(&mut p, &g, &mut st, 0.05);
        }
        assert!((p.b.data[0] - 3.0).abs() < 0.1, "w = {}", p.b.data[0]);
    }

    #[test]
    fn tensor_export_import_round_trip() {
        let mut r = rng(9);
        let layer = DenseLayer::new(4, 3, Activation::Relu, &mut r);
        let exported = export_tensors(&layer);
        let json = serde_json::to_string(&exported).unwrap();
        let back: Vec<Matrix> = serde_json::from_str(&json).unwrap();
        let mut other = DenseLayer::zeros(4, 3, Activation::Relu);
        import_tensors(&mut other, &back).unwrap();
        assert_eq!(other, layer);
        let mut wrong = DenseLayer::zeros(3, 3, Activation::Relu);
        assert!(import_tensors(&mut wrong, &back).is_err());
    }

    #[test]
    fn glorot_respects_limit() {
        let m = Matrix::glorot(10, 6, &mut rng(3));
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(m.data.iter().all(|x| x.abs() <= limit));
    }
}
