use ndarray::{Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, ScoreTensor};

/// Channel layout at step t: background at channel 0, then the remaining
/// previously seen classes, then the classes added at this step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPartition {
    /// Channels of the previous model, background included.
    pub previous: usize,
    /// Channels added at the current step.
    pub current: usize,
}

impl ChannelPartition {
    pub fn total(&self) -> usize {
        self.previous + self.current
    }
}

/// `q = α·onehot(argmax m) + (1 - α)·m` per pixel.
pub fn smooth_pseudo_labels(m: &ScoreTensor, alpha: f64) -> Result<ScoreTensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let mut q = m.values().to_owned();
    for mut px in q.lanes_mut(Axis(2)) {
        let sum: f64 = px.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!(
                "softmax scores must sum to 1 per pixel, found {sum}"
            )));
        }
        let best = argmax(px.iter().copied());
        for (k, v) in px.iter_mut().enumerate() {
            let hard = if k == best { 1.0 } else { 0.0 };
            *v = alpha * hard + (1.0 - alpha) * *v;
        }
    }
    Ok(ScoreTensor::from_array_unchecked(q))
}

/// Pseudo-supervision for the main head: background takes the minimum of
/// the previous model and the localizer, earlier classes trust the previous
/// model, current classes take the localizer.
pub fn fuse_supervision(
    q: &ScoreTensor,
    y_old: &ScoreTensor,
    partition: ChannelPartition,
) -> Result<ScoreTensor> {
    if q.classes() != partition.total()
        || y_old.classes() != partition.previous
        || partition.previous == 0
    {
        return Err(Error::Shape(format!(
            "pseudo-labels with {} channels and previous scores with {} channels do not fit partition {:?}",
            q.classes(),
            y_old.classes(),
            partition
        )));
    }
    if (q.height(), q.width()) != (y_old.height(), y_old.width()) {
        return Err(Error::Shape(format!(
            "pseudo-labels {:?} vs previous scores {:?}",
            q.shape(),
            y_old.shape()
        )));
    }
    let mut fused: Array3<f64> = q.values().to_owned();
    Zip::from(fused.lanes_mut(Axis(2)))
        .and(y_old.values().lanes(Axis(2)))
        .for_each(|mut out, old| {
            out[0] = old[0].min(out[0]);
            for k in 1..partition.previous {
                out[k] = old[k];
            }
        });
    Ok(ScoreTensor::from_array_unchecked(fused))
}
