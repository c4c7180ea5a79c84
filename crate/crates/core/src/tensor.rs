use ndarray::{Array3, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Dense per-pixel scores laid out as `height × width × classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTensor {
    values: Array3<f64>,
}

impl ScoreTensor {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.len_of(Axis(2)) == 0 {
            return Err(Error::Shape(
                "score tensor needs at least one class channel".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score tensor".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(height: usize, width: usize, classes: usize) -> Result<Self> {
        Self::new(Array3::zeros((height, width, classes)))
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        classes: usize,
        f: impl FnMut((usize, usize, usize)) -> f64,
    ) -> Result<Self> {
        Self::new(Array3::from_shape_fn((height, width, classes), f))
    }

    pub(crate) fn from_array_unchecked(values: Array3<f64>) -> Self {
        Self { values }
    }

    pub fn height(&self) -> usize {
        self.values.len_of(Axis(0))
    }

    pub fn width(&self) -> usize {
        self.values.len_of(Axis(1))
    }

    pub fn classes(&self) -> usize {
        self.values.len_of(Axis(2))
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), self.classes())
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    pub fn at(&self, row: usize, col: usize, class: usize) -> f64 {
        self.values[[row, col, class]]
    }

    /// Class scores at one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> ArrayView1<'_, f64> {
        self.values.slice(ndarray::s![row, col, ..])
    }

    /// Keeps only the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Shape("channel selection is empty".into()));
        }
        if let Some(&bad) = channels.iter().find(|&&c| c >= self.classes()) {
            return Err(Error::Shape(format!(
                "channel {bad} out of range for {} classes",
                self.classes()
            )));
        }
        Ok(Self {
            values: self.values.select(Axis(2), channels),
        })
    }

    pub(crate) fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `target` against `sigmoid(logit)`, evaluated
/// without forming the sigmoid explicitly.
pub(crate) fn bce_with_logits(target: f64, logit: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// In-place softmax over a slice.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Index of the maximum; ties go to the lowest index.
pub(crate) fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}
