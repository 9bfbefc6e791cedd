//! Loss layers over a batch score matrix `F[j, y] = f_y(x_j; w)`.
//!
//! Both losses are log-likelihoods to be *maximized*, reported as batch sums,
//! and each returns its gradient with respect to every score. That gradient
//! is the only thing that differs between discriminative and generative
//! training; it is handed unchanged to the network's parameter backward pass.
//!
//! * Discriminative: `l_D = Σ_j [F[j,y_j] − logsumexp_y F[j,y]]`. The
//!   expectation runs over classes with the image fixed, so every row of the
//!   gradient sums to zero.
//! * Generative: the batch stands in for the reference distribution `q(x)`,
//!   so `Z_y ≈ (1/n) Σ_k exp(F[k,y])` and
//!   `l_G = Σ_i [F[i,y_i] − log((1/n) Σ_k exp(F[k,y_i]))]`. The expectation
//!   runs over the batch with the class fixed, weighting image `j` by
//!   `W_j ∝ exp(F[j,y_i])`, so every column of the gradient sums to zero.

use std::cell::Cell;
use std::fmt;

use crate::error::{Error, Result};

/// Row-major `rows x cols` matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Batch scores, `[n, C]`.
pub type ScoreMatrix = Matrix;
/// Gradient of a batch log-likelihood with respect to each score, `[n, C]`.
pub type LossGrad = Matrix;

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }

    /// Index of the largest entry in row `r`; ties go to the lowest index.
    pub fn row_argmax(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = i;
            }
        }
        best
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

thread_local! {
    static LOSS_OPS: Cell<u64> = const { Cell::new(0) };
}

/// Elementary operations issued by the loss layers on this thread, for
/// comparing loss-layer cost against the network passes.
pub fn loss_op_count() -> u64 {
    LOSS_OPS.with(|c| c.get())
}

fn add_loss_ops(n: usize) {
    LOSS_OPS.with(|c| c.set(c.get() + n as u64));
}

fn validate(scores: &ScoreMatrix, labels: &[usize]) -> Result<()> {
    if labels.len() != scores.rows {
        return Err(Error::shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            scores.rows
        )));
    }
    if scores.rows == 0 || scores.cols < 2 {
        return Err(Error::shape(format!(
            "score matrix must be n>=1 by C>=2, got {}x{}",
            scores.rows, scores.cols
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= scores.cols) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            scores.cols
        )));
    }
    if let Some(pos) = scores.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "score [{}, {}] = {}",
            pos / scores.cols,
            pos % scores.cols,
            scores.data[pos]
        )));
    }
    Ok(())
}

/// Max-shifted log-sum-exp.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.into_iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Discriminative batch log-likelihood and its score gradient
/// `G[j,y] = 1{y = y_j} − softmax_y(F[j,·])`.
pub fn disc_loss_and_grad(scores: &ScoreMatrix, labels: &[usize]) -> Result<(f64, LossGrad)> {
    validate(scores, labels)?;
    let (n, c) = (scores.rows, scores.cols);
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    for (j, &label) in labels.iter().enumerate() {
        let row = scores.row(j);
        let p = softmax(row);
        loss += row[label] - log_sum_exp(row.iter().copied());
        for (y, py) in p.into_iter().enumerate() {
            grad.set(j, y, if y == label { 1.0 - py } else { -py });
        }
    }
    add_loss_ops(4 * n * c);
    Ok((loss, grad))
}

/// Generative batch log-likelihood and its score gradient.
///
/// Summing the per-example layer `∂ log p_{y_i}(x_i) / ∂ F[j,y]` over `i`
/// collapses to `G[j,y] = 1{y_j = y} − n_y · W^y_j`, where `W^y` is the
/// softmax of column `y` over the batch and `n_y` counts label `y`.
pub fn gen_loss_and_grad(scores: &ScoreMatrix, labels: &[usize]) -> Result<(f64, LossGrad)> {
    validate(scores, labels)?;
    let (n, c) = (scores.rows, scores.cols);
    if n < 2 {
        return Err(Error::invalid(
            "generative loss needs a batch of at least 2 to stand in for q(x)",
        ));
    }
    let mut counts = vec![0usize; c];
    for &y in labels {
        counts[y] += 1;
    }
    let ln_n = (n as f64).ln();
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    for (y, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let column = scores.column(y);
        let log_z = log_sum_exp(column.iter().copied()) - ln_n;
        for (j, w) in softmax(&column).into_iter().enumerate() {
            grad.set(j, y, -(count as f64) * w);
        }
        for (i, &label) in labels.iter().enumerate() {
            if label == y {
                loss += column[i] - log_z;
            }
        }
    }
    for (j, &label) in labels.iter().enumerate() {
        let g = grad.get(j, label);
        grad.set(j, label, g + 1.0);
    }
    add_loss_ops(4 * n * c);
    Ok((loss, grad))
}

/// Normalized importance weights of the batch for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceWeights {
    pub class: usize,
    pub weights: Vec<f64>,
    pub ess: f64,
}

/// `W_j ∝ exp(F[j,class])`, normalized over the batch.
pub fn importance_weights(scores: &ScoreMatrix, class: usize) -> Result<ImportanceWeights> {
    if class >= scores.cols {
        return Err(Error::invalid(format!(
            "class {class} out of range for {} classes",
            scores.cols
        )));
    }
    let column = scores.column(class);
    if let Some(v) = column.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score {v} in class {class}")));
    }
    let weights = softmax(&column);
    let ess = effective_sample_size(&weights)?;
    Ok(ImportanceWeights {
        class,
        weights,
        ess,
    })
}

/// `1 / Σ W_j²` for weights summing to one; lies in `[1, n]`.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || (total - 1.0).abs() > 1e-12 || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::invalid(format!(
            "importance weights must be non-negative and sum to 1 (sum = {total})"
        )));
    }
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    Ok(ess.clamp(1.0, weights.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn assert_matrix_close(a: &Matrix, b: &[f64], tol: f64) {
        assert_eq!(a.data().len(), b.len());
        for (x, y) in a.data().iter().zip(b) {
            assert_close(*x, *y, tol);
        }
    }

    #[test]
    fn disc_uniform_scores() {
        let f = Matrix::zeros(3, 10);
        let labels = [0, 4, 9];
        let (l, g) = disc_loss_and_grad(&f, &labels).unwrap();
        assert_close(l, -3.0 * 10f64.ln(), 1e-12);
        assert_close(l, -6.907755, 1e-6);
        for (j, &y) in labels.iter().enumerate() {
            for c in 0..10 {
                let want = if c == y { 0.9 } else { -0.1 };
                assert_close(g.get(j, c), want, 1e-15);
            }
        }
    }

    #[test]
    fn disc_two_by_two() {
        let f = Matrix::from_rows(&[vec![3f64.ln(), 0.0], vec![0.0, 0.0]]).unwrap();
        let (l, g) = disc_loss_and_grad(&f, &[0, 1]).unwrap();
        assert_close(l, (0.75f64).ln() + (0.5f64).ln(), 1e-14);
        assert_close(l, -0.980829, 1e-6);
        assert_matrix_close(&g, &[0.25, -0.25, -0.5, 0.5], 1e-14);
    }

    #[test]
    fn gen_uniform_scores() {
        let f = Matrix::zeros(2, 2);
        let (l, g) = gen_loss_and_grad(&f, &[0, 1]).unwrap();
        assert_close(l, 0.0, 1e-15);
        assert_matrix_close(&g, &[0.5, -0.5, -0.5, 0.5], 1e-15);
    }

    #[test]
    fn gen_two_by_two() {
        let f = Matrix::from_rows(&[vec![3f64.ln(), 0.0], vec![0.0, 0.0]]).unwrap();
        let (l, g) = gen_loss_and_grad(&f, &[0, 1]).unwrap();
        assert_close(l, 1.5f64.ln(), 1e-14);
        assert_close(l, 0.405465, 1e-6);
        assert_matrix_close(&g, &[0.25, -0.5, -0.25, 0.5], 1e-14);

        let w0 = importance_weights(&f, 0).unwrap();
        assert_matrix_close(&Matrix::new(1, 2, w0.weights).unwrap(), &[0.75, 0.25], 1e-15);
        let w1 = importance_weights(&f, 1).unwrap();
        assert_matrix_close(&Matrix::new(1, 2, w1.weights).unwrap(), &[0.5, 0.5], 1e-15);
    }

    #[test]
    fn gen_absent_class_column_is_zero() {
        let f = Matrix::from_fn(4, 3, |r, c| (r * 3 + c) as f64 * 0.3 - 1.0);
        let (_, g) = gen_loss_and_grad(&f, &[0, 2, 2, 0]).unwrap();
        assert!(g.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gen_needs_two_examples() {
        let f = Matrix::zeros(1, 3);
        assert!(matches!(gen_loss_and_grad(&f, &[0]), Err(Error::InvalidArgument(_))));
        assert!(disc_loss_and_grad(&f, &[0]).is_ok());
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut f = Matrix::zeros(2, 3);
        assert!(disc_loss_and_grad(&f, &[0, 3]).is_err());
        assert!(disc_loss_and_grad(&f, &[0]).is_err());
        assert!(disc_loss_and_grad(&Matrix::zeros(2, 1), &[0, 0]).is_err());
        f.set(1, 2, f64::NAN);
        assert!(matches!(disc_loss_and_grad(&f, &[0, 1]), Err(Error::NonFinite(_))));
        assert!(matches!(gen_loss_and_grad(&f, &[0, 1]), Err(Error::NonFinite(_))));
        assert!(importance_weights(&f, 2).is_err());
        assert!(importance_weights(&f, 3).is_err());
    }

    #[test]
    fn large_scores_do_not_overflow() {
        let f = Matrix::from_rows(&[vec![1000.0, 0.0], vec![-1000.0, 900.0]]).unwrap();
        let (ld, gd) = disc_loss_and_grad(&f, &[0, 1]).unwrap();
        let (lg, gg) = gen_loss_and_grad(&f, &[0, 1]).unwrap();
        assert!(ld.is_finite() && lg.is_finite());
        assert!(gd.data().iter().chain(gg.data()).all(|v| v.is_finite()));
    }

    #[test]
    fn importance_weight_cases() {
        let f = Matrix::zeros(5, 2);
        let w = importance_weights(&f, 1).unwrap();
        assert!(w.weights.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert_close(w.ess, 5.0, 1e-12);

        let mut f = Matrix::zeros(4, 2);
        f.set(2, 0, 100.0);
        let w = importance_weights(&f, 0).unwrap();
        assert!(w.weights[2] >= 1.0 - 1e-15);
        assert!(w.weights[0] < 1e-40);
        assert_close(w.ess, 1.0, 1e-12);
    }

    #[test]
    fn ess_cases() {
        assert_close(effective_sample_size(&[1.0 / 64.0; 64]).unwrap(), 64.0, 1e-9);
        assert_close(effective_sample_size(&[0.0, 1.0, 0.0]).unwrap(), 1.0, 0.0);
        assert_close(effective_sample_size(&[0.5, 0.25, 0.25]).unwrap(), 1.0 / 0.375, 1e-12);
        assert_close(effective_sample_size(&[0.5, 0.25, 0.25]).unwrap(), 2.6667, 1e-4);
        assert!(effective_sample_size(&[0.5, 0.4]).is_err());
        assert!(effective_sample_size(&[]).is_err());
    }

    #[test]
    fn row_argmax_ties_to_lowest() {
        let m = Matrix::from_rows(&[vec![1.0, 3.0, 3.0], vec![2.0, 2.0, 2.0]]).unwrap();
        assert_eq!(m.row_argmax(0), 1);
        assert_eq!(m.row_argmax(1), 0);
    }

    #[test]
    fn op_counter_scales_with_matrix_size() {
        let f = Matrix::zeros(8, 5);
        let labels = [0, 1, 2, 3, 4, 0, 1, 2];
        let before = loss_op_count();
        disc_loss_and_grad(&f, &labels).unwrap();
        let disc = loss_op_count() - before;
        let before = loss_op_count();
        gen_loss_and_grad(&f, &labels).unwrap();
        let gen = loss_op_count() - before;
        assert_eq!(disc, 160);
        assert_eq!(gen, 160);
    }
}
