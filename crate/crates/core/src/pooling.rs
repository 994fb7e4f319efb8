//! Flat (single-structure) pooling of frame probabilities into clip probabilities.
//!
//! Every pooling function is a weighted average `y = Σ wᵢxᵢ / Σ wᵢ` taken per
//! class; the functions differ only in how the weights are obtained.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-frame, per-class probabilities for one clip (`N` frames × `C` classes).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameScores<T> {
    values: Array2<T>,
    frame_rate_hz: f64,
}

impl<T: Scalar> FrameScores<T> {
    pub fn new(values: Array2<T>, frame_rate_hz: f64) -> Result<Self> {
        let (n, c) = values.dim();
        if n == 0 || c == 0 {
            return Err(Error::Shape(format!("frame scores must be non-empty, got {n}x{c}")));
        }
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(Error::InvalidValue(format!("frame rate {frame_rate_hz} must be positive")));
        }
        let (zero, one) = (T::zero(), T::one());
        if let Some(bad) = values.iter().find(|v| !(**v >= zero && **v <= one)) {
            return Err(Error::InvalidValue(format!("frame score {bad:?} outside [0, 1]")));
        }
        Ok(Self { values, frame_rate_hz })
    }

    /// Single-class scores from a slice of frame probabilities.
    pub fn from_frames(frames: &[T], frame_rate_hz: f64) -> Result<Self> {
        let values = Array2::from_shape_vec((frames.len(), 1), frames.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(values, frame_rate_hz)
    }
}

impl<T> FrameScores<T> {
    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn into_values(self) -> Array2<T> {
        self.values
    }
}

/// Nonnegative pooling weights with the same shape as their scores.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWeights<T> {
    values: Array2<T>,
}

impl<T: Scalar> FrameWeights<T> {
    pub fn new(values: Array2<T>) -> Result<Self> {
        let zero = T::zero();
        if let Some(bad) = values.iter().find(|v| !(**v >= zero)) {
            return Err(Error::InvalidValue(format!("negative pooling weight {bad:?}")));
        }
        Ok(Self { values })
    }

    pub fn from_frames(frames: &[T]) -> Result<Self> {
        let values = Array2::from_shape_vec((frames.len(), 1), frames.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(values)
    }
}

impl<T> FrameWeights<T> {
    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn into_values(self) -> Array2<T> {
        self.values
    }
}

/// The five weighting schemes of multi-instance pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingFunction {
    Max,
    Average,
    LinearSoftmax,
    ExponentialSoftmax,
    Attention,
}

impl PoolingFunction {
    pub const ALL: [PoolingFunction; 5] = [
        PoolingFunction::Max,
        PoolingFunction::Average,
        PoolingFunction::LinearSoftmax,
        PoolingFunction::ExponentialSoftmax,
        PoolingFunction::Attention,
    ];

    /// Short lowercase name used on the command line and in reports.
    pub fn name(self) -> &'static str {
        match self {
            PoolingFunction::Max => "max",
            PoolingFunction::Average => "average",
            PoolingFunction::LinearSoftmax => "linear",
            PoolingFunction::ExponentialSoftmax => "exp",
            PoolingFunction::Attention => "attention",
        }
    }

    /// `∂wᵢ/∂xᵢ` for weights derived from the scores themselves.
    /// Exp-softmax uses `d exp(x)/dx = w`; max and average weights are held
    /// fixed and attention weights do not depend on the scores.
    pub(crate) fn weight_slope<T: Scalar>(self, w: &T) -> T {
        match self {
            PoolingFunction::LinearSoftmax => T::one(),
            PoolingFunction::ExponentialSoftmax => w.clone(),
            _ => T::zero(),
        }
    }
}

impl fmt::Display for PoolingFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolingFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(PoolingFunction::Max),
            "average" | "avg" | "mean" => Ok(PoolingFunction::Average),
            "linear" | "linear_softmax" | "linear-softmax" => Ok(PoolingFunction::LinearSoftmax),
            "exp" | "exponential" | "exp_softmax" | "exponential_softmax" => {
                Ok(PoolingFunction::ExponentialSoftmax)
            }
            "attention" | "att" => Ok(PoolingFunction::Attention),
            other => Err(Error::Config(format!("unknown pooling function `{other}`"))),
        }
    }
}

/// Clip-level probability per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipProbability<T> {
    values: Array1<T>,
}

impl<T> ClipProbability<T> {
    pub fn new(values: Array1<T>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Array1<T> {
        &self.values
    }

    pub fn into_values(self) -> Array1<T> {
        self.values
    }
}

/// Derives the pooling weights implied by `function` from the scores.
pub fn compute_weights<T: Scalar>(
    scores: &FrameScores<T>,
    function: PoolingFunction,
) -> Result<FrameWeights<T>> {
    derive_weights(scores.values().view(), function).map(|values| FrameWeights { values })
}

/// Weight derivation on a raw score matrix; no range validation.
pub(crate) fn derive_weights<T: Scalar>(
    scores: ArrayView2<'_, T>,
    function: PoolingFunction,
) -> Result<Array2<T>> {
    let (n, c) = scores.dim();
    match function {
        PoolingFunction::Attention => Err(Error::AttentionWeights),
        PoolingFunction::Average => {
            let w = T::one() / T::from_usize_lossy(n);
            Ok(Array2::from_elem((n, c), w))
        }
        PoolingFunction::LinearSoftmax => Ok(scores.to_owned()),
        PoolingFunction::ExponentialSoftmax => {
            let mut out = Array2::from_elem((n, c), T::zero());
            for (dst, x) in out.iter_mut().zip(scores.iter()) {
                *dst = x.checked_exp().ok_or(Error::ExpUnsupported)?;
            }
            Ok(out)
        }
        PoolingFunction::Max => {
            let mut out = Array2::from_elem((n, c), T::zero());
            for (class, column) in scores.axis_iter(Axis(1)).enumerate() {
                out[[argmax(column.iter()), class]] = T::one();
            }
            Ok(out)
        }
    }
}

/// Index of the largest element; the lowest index wins ties.
pub(crate) fn argmax<'a, T: PartialOrd + 'a>(values: impl Iterator<Item = &'a T>) -> usize {
    let mut best: Option<(usize, &T)> = None;
    for (i, v) in values.enumerate() {
        match best {
            Some((_, b)) if !(v > b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// Flat weighted-average pooling.
pub fn pool_single<T: Scalar>(
    scores: &FrameScores<T>,
    weights: &FrameWeights<T>,
) -> Result<ClipProbability<T>> {
    check_same_shape(scores.values().view(), weights.values().view())?;
    Ok(ClipProbability::new(weighted_mean(
        scores.values().view(),
        weights.values().view(),
    )))
}

pub(crate) fn check_same_shape<T>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "scores are {:?} but weights are {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Column-wise `Σ wx / Σ w`, with 0 for columns whose weights sum to zero.
pub(crate) fn weighted_mean<T: Scalar>(x: ArrayView2<'_, T>, w: ArrayView2<'_, T>) -> Array1<T> {
    let (n, c) = x.dim();
    Array1::from_shape_fn(c, |class| {
        let mut num = T::zero();
        let mut den = T::zero();
        for i in 0..n {
            let wi = &w[[i, class]];
            num = num + wi.clone() * x[[i, class]].clone();
            den = den + wi.clone();
        }
        if den == T::zero() {
            T::zero()
        } else {
            num / den
        }
    })
}
