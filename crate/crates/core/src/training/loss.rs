//! In-batch softmax cross-entropy and the distillation divergence, each
//! returning the loss together with its gradient with respect to the student
//! score matrix.

use crate::error::{Error, Result};
use crate::linalg::{log_softmax, softmax, Matrix};

/// Mean over rows of `-log softmax(S[i])[i]` for a square score matrix whose
/// diagonal holds the gold pairs.
pub fn inbatch_ce_loss(scores: &Matrix) -> Result<(f64, Matrix)> {
    if !scores.is_square() {
        return Err(Error::Shape(format!("in-batch loss needs a square matrix, got {}x{}", scores.rows, scores.cols)));
    }
    inbatch_ce_loss_with_extra(scores)
}

/// Same loss when extra negative candidates are appended as columns beyond the
/// diagonal block (`cols >= rows`).
pub fn inbatch_ce_loss_with_extra(scores: &Matrix) -> Result<(f64, Matrix)> {
    let (b, c) = (scores.rows, scores.cols);
    if b == 0 || c < b {
        return Err(Error::Shape(format!("score matrix {b}x{c} has fewer candidates than anchors")));
    }
    let mut grad = Matrix::zeros(b, c);
    let mut loss = 0.0;
    for i in 0..b {
        let row = scores.row(i);
        loss -= log_softmax(row)[i];
        let probs = softmax(row);
        let g = grad.row_mut(i);
        for (j, p) in probs.into_iter().enumerate() {
            g[j] = (p - if i == j { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

/// Mean over rows of `KL(softmax(T[i]/τ) ‖ softmax(S[i]/τ))` and its gradient
/// with respect to the student scores `S`.
pub fn distill_loss(student: &Matrix, teacher: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    if student.rows != teacher.rows || student.cols != teacher.cols {
        return Err(Error::Shape(format!(
            "student {}x{} vs teacher {}x{}",
            student.rows, student.cols, teacher.rows, teacher.cols
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let b = student.rows;
    let mut grad = Matrix::zeros(b, student.cols);
    let mut loss = 0.0;
    for i in 0..b {
        let s: Vec<f64> = student.row(i).iter().map(|x| x / temperature).collect();
        let t: Vec<f64> = teacher.row(i).iter().map(|x| x / temperature).collect();
        let (log_ps, log_pt) = (log_softmax(&s), log_softmax(&t));
        let mut kl = 0.0;
        for j in 0..s.len() {
            let pt = log_pt[j].exp();
            if pt > 0.0 {
                kl += pt * (log_pt[j] - log_ps[j]);
            }
            grad.set(i, j, (log_ps[j].exp() - pt) / (temperature * b as f64));
        }
        loss += kl.max(0.0);
    }
    Ok((loss / b.max(1) as f64, grad))
}
