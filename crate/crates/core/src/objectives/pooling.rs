//! Softmax-weighted spatial pooling of localizer scores into image-level
//! class scores, plus the focal penalty against tiny masks.

use ndarray::{Array3, Axis};

use super::LossConfig;
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, ScoreTensor};

/// Softmax across the class axis at every pixel.
pub fn pixel_softmax(z: &ScoreTensor) -> Array3<f64> {
    let mut m = z.values().to_owned();
    for mut px in m.lanes_mut(Axis(2)) {
        softmax_in_place(px.as_slice_mut().expect("class axis is contiguous"));
    }
    m
}

fn check_pooling_input(z: &ScoreTensor) -> Result<()> {
    if z.classes() < 2 {
        return Err(Error::Shape(
            "pooling needs at least two classes for the softmax".into(),
        ));
    }
    if z.pixels() == 0 {
        return Err(Error::Shape("pooling over an empty image".into()));
    }
    Ok(())
}

/// Per-class softmax mass `Σ_i m^c_i` and weighted sum `Σ_i m^c_i z^c_i`.
fn class_sums(z: &ScoreTensor, m: &Array3<f64>) -> (Vec<f64>, Vec<f64>) {
    let c = z.classes();
    let mut mass = vec![0.0; c];
    let mut weighted = vec![0.0; c];
    for (zp, mp) in z.values().lanes(Axis(2)).into_iter().zip(m.lanes(Axis(2))) {
        for k in 0..c {
            mass[k] += mp[k];
            weighted[k] += mp[k] * zp[k];
        }
    }
    (mass, weighted)
}

/// `y^c = Σ_i m^c_i z^c_i / (ε + Σ_i m^c_i)`.
pub fn ngwp_aggregate(z: &ScoreTensor, epsilon: f64) -> Result<Vec<f64>> {
    check_pooling_input(z)?;
    if !(epsilon > 0.0) {
        return Err(Error::Invalid(format!(
            "pooling epsilon must be > 0, got {epsilon}"
        )));
    }
    let m = pixel_softmax(z);
    let (mass, weighted) = class_sums(z, &m);
    Ok(weighted
        .iter()
        .zip(&mass)
        .map(|(a, s)| a / (epsilon + s))
        .collect())
}

fn focal_value(u: f64, gamma: f64, lambda: f64) -> f64 {
    (1.0 - u).powf(gamma) * (lambda + u).ln()
}

fn focal_derivative(u: f64, gamma: f64, lambda: f64) -> f64 {
    let decay = if gamma == 0.0 {
        0.0
    } else {
        -gamma * (1.0 - u).powf(gamma - 1.0) * (lambda + u).ln()
    };
    decay + (1.0 - u).powf(gamma) / (lambda + u)
}

/// `(1 - ū^c)^γ · ln(λ + ū^c)` with `ū^c` the mean softmax mass of class `c`.
pub fn focal_penalty(z: &ScoreTensor, gamma: f64, lambda_focal: f64) -> Result<Vec<f64>> {
    check_pooling_input(z)?;
    if !(lambda_focal > 0.0) {
        return Err(Error::Invalid(format!(
            "lambda_focal must be > 0, got {lambda_focal}"
        )));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Invalid(format!(
            "gamma_focal must be >= 0, got {gamma}"
        )));
    }
    let m = pixel_softmax(z);
    let pixels = z.pixels() as f64;
    let (mass, _) = class_sums(z, &m);
    Ok(mass
        .iter()
        .map(|s| focal_value(s / pixels, gamma, lambda_focal))
        .collect())
}

/// Pooled score plus focal penalty, per class.
pub fn image_scores(z: &ScoreTensor, cfg: &LossConfig) -> Result<Vec<f64>> {
    let pooled = ngwp_aggregate(z, cfg.epsilon_ngwp)?;
    let focal = focal_penalty(z, cfg.gamma_focal, cfg.lambda_focal)?;
    Ok(pooled.iter().zip(&focal).map(|(a, b)| a + b).collect())
}

/// Back-propagates `d_scores = ∂L/∂ŷ` through [`image_scores`] to the
/// localizer logits.
pub fn image_scores_backward(
    z: &ScoreTensor,
    cfg: &LossConfig,
    d_scores: &[f64],
) -> Result<Array3<f64>> {
    check_pooling_input(z)?;
    let c = z.classes();
    if d_scores.len() != c {
        return Err(Error::Shape(format!(
            "{} score gradients for {c} classes",
            d_scores.len()
        )));
    }
    let m = pixel_softmax(z);
    let pixels = z.pixels() as f64;
    let (mass, weighted) = class_sums(z, &m);
    let eps = cfg.epsilon_ngwp;

    // gradients with respect to the weighted sum A_c and the mass M_c
    let d_weighted: Vec<f64> = (0..c).map(|k| d_scores[k] / (eps + mass[k])).collect();
    let d_mass: Vec<f64> = (0..c)
        .map(|k| {
            let den = eps + mass[k];
            -d_scores[k] * weighted[k] / (den * den)
                + d_scores[k]
                    * focal_derivative(mass[k] / pixels, cfg.gamma_focal, cfg.lambda_focal)
                    / pixels
        })
        .collect();

    let mut grad = Array3::zeros(z.values().raw_dim());
    let mut d_m = vec![0.0; c];
    for ((zp, mp), mut gp) in z
        .values()
        .lanes(Axis(2))
        .into_iter()
        .zip(m.lanes(Axis(2)))
        .zip(grad.lanes_mut(Axis(2)))
    {
        let mut dot = 0.0;
        for k in 0..c {
            d_m[k] = d_weighted[k] * zp[k] + d_mass[k];
            dot += mp[k] * d_m[k];
        }
        for k in 0..c {
            gp[k] = mp[k] * (d_m[k] - dot) + d_weighted[k] * mp[k];
        }
    }
    Ok(grad)
}
