use ndarray::{Array3, Zip};

use crate::error::{Error, Result};
use crate::simprior::SimilarityStack;
use crate::tensor::{bce_with_logits, sigmoid, ScoreTensor};

/// Encoder features laid out as `height × width × channels`.
pub type FeatureTensor = Array3<f64>;

/// Mean BCE of `targets` against `sigmoid(logits)` over every entry, with
/// its gradient with respect to the logits.
fn mean_bce(logits: &Array3<f64>, targets: &Array3<f64>) -> (f64, Array3<f64>) {
    let n = logits.len() as f64;
    let mut sum = 0.0;
    for (&x, &t) in logits.iter().zip(targets.iter()) {
        sum += bce_with_logits(t, x);
    }
    let mut grad = Array3::zeros(logits.raw_dim());
    Zip::from(&mut grad)
        .and(logits)
        .and(targets)
        .for_each(|g, &x, &t| *g = (sigmoid(x) - t) / n);
    (sum / n, grad)
}

fn check_unit_interval(targets: &Array3<f64>, what: &str) -> Result<()> {
    if targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Invalid(format!("{what} targets must lie in [0, 1]")));
    }
    Ok(())
}

fn rasp_targets(z: &ScoreTensor, s: &SimilarityStack) -> Result<Array3<f64>> {
    if s.classes().is_empty() {
        return Err(Error::Invalid(
            "semantic prior needs at least one present class".into(),
        ));
    }
    if z.classes() != s.classes().len() || (z.height(), z.width()) != s.dim() {
        return Err(Error::Shape(format!(
            "localizer scores {:?} vs {} similarity maps of {:?}",
            z.shape(),
            s.classes().len(),
            s.dim()
        )));
    }
    let mut targets = Array3::zeros(z.values().raw_dim());
    for (c, map) in s.maps().iter().enumerate() {
        Zip::from(targets.index_axis_mut(ndarray::Axis(2), c))
            .and(map)
            .for_each(|t, &v| *t = sigmoid(v));
    }
    Ok(targets)
}

/// BCE between `sigmoid(s)` and `sigmoid(z)` averaged over the present
/// classes and all pixels. `z` holds only the present classes' channels, in
/// the stack's class order.
pub fn rasp_loss(z: &ScoreTensor, s: &SimilarityStack) -> Result<f64> {
    rasp_loss_grad(z, s).map(|(l, _)| l)
}

pub fn rasp_loss_grad(z: &ScoreTensor, s: &SimilarityStack) -> Result<(f64, Array3<f64>)> {
    let targets = rasp_targets(z, s)?;
    Ok(mean_bce(z.values(), &targets))
}

/// Multi-label soft-margin loss over the classes in `y_hat`.
pub fn cls_loss(y_hat: &[f64], labels: &[f64]) -> Result<f64> {
    cls_loss_grad(y_hat, labels).map(|(l, _)| l)
}

pub fn cls_loss_grad(y_hat: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if y_hat.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} image scores vs {} labels",
            y_hat.len(),
            labels.len()
        )));
    }
    if y_hat.is_empty() {
        return Err(Error::Shape("classification loss over zero classes".into()));
    }
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::Invalid("image labels must be 0 or 1".into()));
    }
    let n = y_hat.len() as f64;
    let loss = y_hat
        .iter()
        .zip(labels)
        .map(|(&y, &l)| bce_with_logits(l, y))
        .sum::<f64>()
        / n;
    let grad = y_hat
        .iter()
        .zip(labels)
        .map(|(&y, &l)| (sigmoid(y) - l) / n)
        .collect();
    Ok((loss, grad))
}

/// Mean over pixels of the (squared, by default) distance between current
/// and previous encoder features.
pub fn kde_loss(feat_now: &FeatureTensor, feat_old: &FeatureTensor, squared: bool) -> Result<f64> {
    kde_loss_grad(feat_now, feat_old, squared).map(|(l, _)| l)
}

pub fn kde_loss_grad(
    feat_now: &FeatureTensor,
    feat_old: &FeatureTensor,
    squared: bool,
) -> Result<(f64, FeatureTensor)> {
    if feat_now.dim() != feat_old.dim() {
        return Err(Error::Shape(format!(
            "features {:?} vs {:?}",
            feat_now.dim(),
            feat_old.dim()
        )));
    }
    let (h, w, _) = feat_now.dim();
    let pixels = (h * w) as f64;
    let mut grad = feat_now - feat_old;
    let mut total = 0.0;
    for mut px in grad.lanes_mut(ndarray::Axis(2)) {
        let sq: f64 = px.iter().map(|d| d * d).sum();
        if squared {
            total += sq;
            px.mapv_inplace(|d| 2.0 * d / pixels);
        } else {
            let norm = sq.sqrt();
            total += norm;
            if norm > 0.0 {
                px.mapv_inplace(|d| d / norm / pixels);
            }
        }
    }
    Ok((total / pixels, grad))
}

/// BCE between the previous model's scores (already in `[0, 1]`) and the
/// localizer's logits on the same channels.
pub fn kdl_loss(z: &ScoreTensor, y_old: &ScoreTensor) -> Result<f64> {
    kdl_loss_grad(z, y_old).map(|(l, _)| l)
}

pub fn kdl_loss_grad(z: &ScoreTensor, y_old: &ScoreTensor) -> Result<(f64, Array3<f64>)> {
    z.check_same_shape(y_old, "localizer vs previous-model scores")?;
    check_unit_interval(y_old.values(), "distillation")?;
    Ok(mean_bce(z.values(), y_old.values()))
}

/// BCE between fused pseudo-supervision and the main head's logits.
pub fn seg_loss(p_hat: &ScoreTensor, q_tilde: &ScoreTensor) -> Result<f64> {
    seg_loss_grad(p_hat, q_tilde).map(|(l, _)| l)
}

pub fn seg_loss_grad(p_hat: &ScoreTensor, q_tilde: &ScoreTensor) -> Result<(f64, Array3<f64>)> {
    p_hat.check_same_shape(q_tilde, "head logits vs pseudo-labels")?;
    check_unit_interval(q_tilde.values(), "segmentation")?;
    Ok(mean_bce(p_hat.values(), q_tilde.values()))
}
