//! Hierarchical pooling: frames are grouped into segments, each segment gets a
//! weighted-average prediction and a self-weighted weight, and the procedure
//! repeats until a final weighted average produces the clip probability.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pooling::{
    check_same_shape, derive_weights, weighted_mean, ClipProbability, FrameScores, FrameWeights,
    PoolingFunction,
};
use crate::scalar::Scalar;

/// Segment lengths applied in order, e.g. `[5, 5, 5]` for 125 → 25 → 5 → 1.
/// An empty plan is flat pooling.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StagePlan {
    factors: Vec<usize>,
}

impl StagePlan {
    pub fn flat() -> Self {
        Self::default()
    }

    pub fn new(factors: Vec<usize>) -> Result<Self> {
        if factors.contains(&0) {
            return Err(Error::Config(format!("stage factors must be positive, got {factors:?}")));
        }
        Ok(Self { factors })
    }

    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    pub fn is_flat(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn validate(&self, n_frames: usize) -> Result<()> {
        let product = self
            .factors
            .iter()
            .try_fold(1usize, |acc, &m| acc.checked_mul(m))
            .unwrap_or(usize::MAX);
        if n_frames == 0 || n_frames % product != 0 {
            return Err(Error::InvalidPlan { factors: self.factors.clone(), frames: n_frames });
        }
        Ok(())
    }

    /// Plan with the first stage removed.
    pub fn tail(&self) -> StagePlan {
        StagePlan { factors: self.factors.iter().skip(1).copied().collect() }
    }
}

impl fmt::Display for StagePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.factors.is_empty() {
            return f.write_str("flat");
        }
        let parts: Vec<String> = self.factors.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("x"))
    }
}

impl FromStr for StagePlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("flat") || s.eq_ignore_ascii_case("single") {
            return Ok(StagePlan::flat());
        }
        let factors = s
            .split(|c: char| c == 'x' || c == ',' || c == '*')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad stage factor `{p}` in plan `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        StagePlan::new(factors)
    }
}

/// Greedy factorisation of `n_frames` into stage lengths of at most 5,
/// largest first; flat when no such factorisation exists.
pub fn default_plan(n_frames: usize) -> StagePlan {
    let mut rest = n_frames;
    let mut factors = Vec::new();
    while rest > 1 {
        match (2..=5).rev().find(|m| rest % m == 0) {
            Some(m) => {
                factors.push(m);
                rest /= m;
            }
            None => return StagePlan::flat(),
        }
    }
    StagePlan { factors }
}

/// How a segment's weight is formed from its member weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentWeightRule {
    /// `ŵ = Σw² / Σw`, the weights averaged with themselves as weights.
    #[default]
    SelfWeighted,
    /// `ŵ = Σw / M`. Kept only to reproduce the plain-average variant.
    Averaged,
}

/// Segment-level predictions and weights after one aggregation stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput<T> {
    pub predictions: Array2<T>,
    pub weights: Array2<T>,
}

pub fn aggregate_stage<T: Scalar>(
    predictions: ArrayView2<'_, T>,
    weights: ArrayView2<'_, T>,
    segment_len: usize,
) -> Result<StageOutput<T>> {
    aggregate_stage_with(predictions, weights, segment_len, SegmentWeightRule::default())
}

pub fn aggregate_stage_with<T: Scalar>(
    predictions: ArrayView2<'_, T>,
    weights: ArrayView2<'_, T>,
    segment_len: usize,
    rule: SegmentWeightRule,
) -> Result<StageOutput<T>> {
    check_same_shape(predictions, weights)?;
    let (n, c) = predictions.dim();
    if segment_len == 0 || n % segment_len != 0 {
        return Err(Error::InvalidPlan { factors: vec![segment_len], frames: n });
    }
    if let Some(bad) = weights.iter().find(|w| !(**w >= T::zero())) {
        return Err(Error::InvalidValue(format!("negative pooling weight {bad:?}")));
    }
    let segments = n / segment_len;
    let len = T::from_usize_lossy(segment_len);
    let mut out_x = Array2::from_elem((segments, c), T::zero());
    let mut out_w = Array2::from_elem((segments, c), T::zero());
    for class in 0..c {
        for j in 0..segments {
            let mut sum_w = T::zero();
            let mut sum_wx = T::zero();
            let mut sum_ww = T::zero();
            for i in j * segment_len..(j + 1) * segment_len {
                let w = weights[[i, class]].clone();
                sum_wx = sum_wx + w.clone() * predictions[[i, class]].clone();
                sum_ww = sum_ww + w.clone() * w.clone();
                sum_w = sum_w + w;
            }
            // zero-weight segments drop out of every later average
            if sum_w == T::zero() {
                continue;
            }
            out_x[[j, class]] = sum_wx / sum_w.clone();
            out_w[[j, class]] = match rule {
                SegmentWeightRule::SelfWeighted => sum_ww / sum_w,
                SegmentWeightRule::Averaged => sum_w / len.clone(),
            };
        }
    }
    Ok(StageOutput { predictions: out_x, weights: out_w })
}

pub fn pool_hierarchical<T: Scalar>(
    scores: &FrameScores<T>,
    weights: &FrameWeights<T>,
    plan: &StagePlan,
) -> Result<ClipProbability<T>> {
    pool_hierarchical_with(scores, weights, plan, SegmentWeightRule::default())
}

pub fn pool_hierarchical_with<T: Scalar>(
    scores: &FrameScores<T>,
    weights: &FrameWeights<T>,
    plan: &StagePlan,
    rule: SegmentWeightRule,
) -> Result<ClipProbability<T>> {
    pool_arrays(scores.values().view(), weights.values().view(), plan, rule)
        .map(ClipProbability::new)
}

/// Stage-by-stage aggregation followed by the final weighted average.
pub(crate) fn pool_arrays<T: Scalar>(
    x: ArrayView2<'_, T>,
    w: ArrayView2<'_, T>,
    plan: &StagePlan,
    rule: SegmentWeightRule,
) -> Result<ndarray::Array1<T>> {
    check_same_shape(x, w)?;
    plan.validate(x.nrows())?;
    let mut level = StageOutput { predictions: x.to_owned(), weights: w.to_owned() };
    for &m in plan.factors() {
        level = aggregate_stage_with(level.predictions.view(), level.weights.view(), m, rule)?;
    }
    Ok(weighted_mean(level.predictions.view(), level.weights.view()))
}

/// A pooling function together with the structure it is applied in.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolingSpec {
    pub function: PoolingFunction,
    #[serde(default)]
    pub plan: StagePlan,
    #[serde(default)]
    pub weight_rule: SegmentWeightRule,
}

impl PoolingSpec {
    pub fn new(function: PoolingFunction, plan: StagePlan) -> Self {
        Self { function, plan, weight_rule: SegmentWeightRule::default() }
    }

    pub fn flat(function: PoolingFunction) -> Self {
        Self::new(function, StagePlan::flat())
    }

    /// Clip probability from raw score and (attention) weight matrices.
    ///
    /// `attention` is required for attention pooling and ignored otherwise.
    pub fn pool<T: Scalar>(
        &self,
        scores: ArrayView2<'_, T>,
        attention: Option<ArrayView2<'_, T>>,
    ) -> Result<ndarray::Array1<T>> {
        let derived;
        let w = match (self.function, attention) {
            (PoolingFunction::Attention, Some(w)) => w,
            (PoolingFunction::Attention, None) => return Err(Error::AttentionWeights),
            (f, _) => {
                derived = derive_weights(scores, f)?;
                derived.view()
            }
        };
        pool_arrays(scores, w, &self.plan, self.weight_rule)
    }
}

impl fmt::Display for PoolingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.function, self.plan)
    }
}
