use ndarray::Array2;

use crate::error::{Error, Result};

/// `counts[[truth, pred]]` pixel tallies.
pub type ConfusionMatrix = Array2<u64>;

pub fn confusion_accumulate(
    pred: &Array2<usize>,
    truth: &Array2<usize>,
    counts: &mut ConfusionMatrix,
) -> Result<()> {
    if pred.dim() != truth.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let c = counts.nrows();
    if counts.ncols() != c {
        return Err(Error::Shape(format!(
            "confusion matrix {:?} is not square",
            counts.dim()
        )));
    }
    if let Some(&bad) = pred.iter().chain(truth.iter()).find(|&&k| k >= c) {
        return Err(Error::Shape(format!(
            "class {bad} outside a {c}-class confusion matrix"
        )));
    }
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        counts[[t, p]] += 1;
    }
    Ok(())
}

/// IoU of every class, `None` where the class appears in neither the
/// prediction nor the truth.
pub fn iou_per_class(counts: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..counts.nrows())
        .map(|k| {
            let tp = counts[[k, k]];
            let fn_ = counts.row(k).sum() - tp;
            let fp = counts.column(k).sum() - tp;
            let den = tp + fn_ + fp;
            (den > 0).then(|| tp as f64 / den as f64)
        })
        .collect()
}

/// Mean IoU over `subset`, skipping classes with a zero denominator.
pub fn miou(counts: &ConfusionMatrix, subset: &[usize]) -> Result<f64> {
    let ious = iou_per_class(counts);
    let mut sum = 0.0;
    let mut n = 0usize;
    for &k in subset {
        let iou = ious.get(k).ok_or_else(|| {
            Error::Shape(format!(
                "class {k} outside a {}-class confusion matrix",
                ious.len()
            ))
        })?;
        if let Some(v) = iou {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Invalid("mIoU over an empty class set".into()));
    }
    Ok(sum / n as f64)
}

pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    if a < 0.0 || b < 0.0 || !(a + b > 0.0) {
        return Err(Error::Invalid(format!("harmonic mean of {a} and {b}")));
    }
    Ok(2.0 * a * b / (a + b))
}

/// Signed percentage change of `ours` over `baseline`.
pub fn relative_gain(ours: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::Invalid(format!(
            "relative gain over baseline {baseline}"
        )));
    }
    Ok(100.0 * (ours - baseline) / baseline)
}
