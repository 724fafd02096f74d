use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

fn check(logits: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if logits.nrows() != labels.len() {
        return Err(Error::Input(format!(
            "{} logit rows but {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.ncols()) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {} classes",
            logits.ncols()
        )));
    }
    Ok(())
}

fn log_softmax_row(row: ndarray::ArrayView1<f64>) -> (f64, f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    (max, lse)
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy_loss(logits: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    check(logits, labels)?;
    let total: f64 = logits
        .axis_iter(Axis(0))
        .zip(labels)
        .map(|(row, &y)| log_softmax_row(row).1 - row[y])
        .sum();
    Ok(total / labels.len() as f64)
}

/// Gradient of [`cross_entropy_loss`] w.r.t. the logits: `(softmax - onehot) / batch`.
pub fn cross_entropy_grad(logits: ArrayView2<f64>, labels: &[usize]) -> Result<Array2<f64>> {
    check(logits, labels)?;
    let n = labels.len() as f64;
    let mut g = logits.to_owned();
    for (mut row, &y) in g.axis_iter_mut(Axis(0)).zip(labels) {
        let (_, lse) = log_softmax_row(row.view());
        row.mapv_inplace(|v| (v - lse).exp() / n);
        row[y] -= 1.0 / n;
    }
    Ok(g)
}
