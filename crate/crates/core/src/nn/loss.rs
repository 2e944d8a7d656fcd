use super::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    /// dL/d(input), same shape as the predictions or logits.
    pub grad: Matrix,
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Mean over rows of `-log softmax(logits)[target]`.
pub fn softmax_cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<LossOutput> {
    if targets.len() != logits.rows() {
        return Err(Error::shape("softmax_cross_entropy", logits.rows(), targets.len()));
    }
    let k = logits.cols();
    let n = logits.rows().max(1) as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::InvalidArgument(format!("class {t} out of range for {k} classes")));
        }
        let row = grad.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        for v in row.iter_mut() {
            *v = (*v - lse).exp() / n;
        }
        row[t] -= 1.0 / n;
    }
    Ok(LossOutput { loss: loss / n, grad })
}

/// Mean squared error over every entry.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<LossOutput> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("{:?}", pred.shape()),
            format!("{:?}", target.shape()),
        ));
    }
    let n = pred.as_slice().len().max(1) as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for ((g, p), t) in grad.as_mut_slice().iter_mut().zip(pred.as_slice()).zip(target.as_slice()) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok(LossOutput { loss: loss / n, grad })
}
