//! Analytic backward passes of the pooling layers and the clip-level loss.
//!
//! Notation follows the forward pass: frames `xᵢ` with weights `wᵢ`, segment
//! `j` of a stage with prediction `x̂ⱼ`, weight `ŵⱼ` and member weight sum
//! `Sⱼ = Σ wₙ`, and `W = Σ ŵₗ` over the segments fed into the final average.
//!
//! * flat pooling uses the closed forms per function (one-hot for max, `1/N`
//!   for average, `(2xᵢ − y)/Σx` for linear softmax, and the weighted-mean
//!   derivative otherwise);
//! * a single stage uses the summarised one-stage formula
//!   `[ŵⱼwᵢ + ((xᵢ − x̂ⱼ)ŵⱼ + (x̂ⱼ − y)(2wᵢ − ŵⱼ))·∂wᵢ/∂xᵢ] / (W·Sⱼ)`;
//! * deeper plans chain the per-stage Jacobians in reverse order.
//!
//! [`finite_difference_check`] verifies all three against central differences
//! of the forward pass evaluated in double-double precision.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use num_traits::Float;
use twofloat::TwoFloat;

use crate::error::{Error, Result};
use crate::hierarchical::{aggregate_stage_with, PoolingSpec, SegmentWeightRule, StagePlan};
use crate::pooling::{argmax, check_same_shape, ClipProbability, FrameScores, FrameWeights, PoolingFunction};
use crate::scalar::Scalar;

/// Clip probabilities are clamped to `[ε, 1 − ε]` before the loss and its derivative.
pub const PROBABILITY_CLAMP: f64 = 1e-7;

/// `∂y/∂xᵢ` for every frame and class, plus `∂y/∂wᵢ` for attention pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingGradients<T> {
    pub d_y_d_x: Array2<T>,
    pub d_y_d_w: Option<Array2<T>>,
}

/// `∂L/∂y` per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient<T> {
    pub d_l_d_y: Array1<T>,
}

fn clamp_probability<T: Scalar>(y: &T) -> T {
    let lo = T::from_f64_lossy(PROBABILITY_CLAMP);
    let hi = T::one() - lo.clone();
    if *y < lo {
        lo
    } else if *y > hi {
        hi
    } else {
        y.clone()
    }
}

fn check_targets<T>(y: &ClipProbability<T>, targets: &[bool]) -> Result<()> {
    if y.values().len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} clip probabilities but {} labels",
            y.values().len(),
            targets.len()
        )));
    }
    Ok(())
}

/// Binary cross-entropy summed over classes.
pub fn loss<T: Scalar + Float>(y: &ClipProbability<T>, targets: &[bool]) -> Result<T> {
    check_targets(y, targets)?;
    Ok(y.values().iter().zip(targets).fold(T::zero(), |acc, (y, &t)| {
        let y = clamp_probability(y);
        acc - if t { y.ln() } else { (T::one() - y).ln() }
    }))
}

pub fn loss_grad<T: Scalar>(y: &ClipProbability<T>, targets: &[bool]) -> Result<LossGradient<T>> {
    check_targets(y, targets)?;
    let d_l_d_y = y
        .values()
        .iter()
        .zip(targets)
        .map(|(y, &t)| {
            let y = clamp_probability(y);
            if t {
                T::zero() - T::one() / y
            } else {
                T::one() / (T::one() - y)
            }
        })
        .collect();
    Ok(LossGradient { d_l_d_y })
}

/// Gradients of flat pooling.
pub fn grad_single<T: Scalar>(
    scores: &FrameScores<T>,
    weights: &FrameWeights<T>,
    function: PoolingFunction,
) -> Result<PoolingGradients<T>> {
    let x = scores.values().view();
    let w = weights.values().view();
    check_same_shape(x, w)?;
    let (n, c) = x.dim();
    let mut d_x = Array2::from_elem((n, c), T::zero());
    let mut d_w = (function == PoolingFunction::Attention).then(|| d_x.clone());

    for class in 0..c {
        let xc = x.column(class);
        let wc = w.column(class);
        match function {
            PoolingFunction::Max => {
                d_x[[argmax(xc.iter()), class]] = T::one();
            }
            PoolingFunction::Average => {
                let v = T::one() / T::from_usize_lossy(n);
                d_x.column_mut(class).fill(v);
            }
            PoolingFunction::LinearSoftmax => {
                let sum = xc.iter().fold(T::zero(), |a, v| a + v.clone());
                if sum == T::zero() {
                    continue;
                }
                let y = xc.iter().fold(T::zero(), |a, v| a + v.clone() * v.clone()) / sum.clone();
                for i in 0..n {
                    d_x[[i, class]] = (T::two() * xc[i].clone() - y.clone()) / sum.clone();
                }
            }
            PoolingFunction::ExponentialSoftmax | PoolingFunction::Attention => {
                let sum = wc.iter().fold(T::zero(), |a, v| a + v.clone());
                if sum == T::zero() {
                    continue;
                }
                let y = xc
                    .iter()
                    .zip(wc.iter())
                    .fold(T::zero(), |a, (x, w)| a + x.clone() * w.clone())
                    / sum.clone();
                for i in 0..n {
                    let spread = xc[i].clone() - y.clone();
                    let slope = function.weight_slope(&wc[i]);
                    d_x[[i, class]] =
                        (wc[i].clone() + spread.clone() * slope) / sum.clone();
                    if let Some(d_w) = d_w.as_mut() {
                        d_w[[i, class]] = spread / sum.clone();
                    }
                }
            }
        }
    }
    Ok(PoolingGradients { d_y_d_x: d_x, d_y_d_w: d_w })
}

pub fn grad_hierarchical<T: Scalar>(
    scores: &FrameScores<T>,
    weights: &FrameWeights<T>,
    function: PoolingFunction,
    plan: &StagePlan,
) -> Result<PoolingGradients<T>> {
    grad_hierarchical_with(scores, weights, function, plan, SegmentWeightRule::default())
}

pub fn grad_hierarchical_with<T: Scalar>(
    scores: &FrameScores<T>,
    weights: &FrameWeights<T>,
    function: PoolingFunction,
    plan: &StagePlan,
    rule: SegmentWeightRule,
) -> Result<PoolingGradients<T>> {
    check_same_shape(scores.values().view(), weights.values().view())?;
    plan.validate(scores.n_frames())?;
    match (plan.factors(), rule) {
        ([], _) => grad_single(scores, weights, function),
        ([m], SegmentWeightRule::SelfWeighted) => {
            one_stage_closed_form(scores.values().view(), weights.values().view(), function, *m)
        }
        _ => grad_staged(scores.values().view(), weights.values().view(), function, plan, rule),
    }
}

/// One-stage closed form, per class and frame.
pub(crate) fn one_stage_closed_form<T: Scalar>(
    x: ArrayView2<'_, T>,
    w: ArrayView2<'_, T>,
    function: PoolingFunction,
    m: usize,
) -> Result<PoolingGradients<T>> {
    let stage = aggregate_stage_with(x, w, m, SegmentWeightRule::SelfWeighted)?;
    let (n, c) = x.dim();
    let segments = n / m;
    let mut d_x = Array2::from_elem((n, c), T::zero());
    let mut d_w = (function == PoolingFunction::Attention).then(|| d_x.clone());

    for class in 0..c {
        let seg_x = stage.predictions.column(class);
        let seg_w = stage.weights.column(class);
        let total_w = seg_w.iter().fold(T::zero(), |a, v| a + v.clone());
        if total_w == T::zero() {
            continue;
        }
        let y = seg_w
            .iter()
            .zip(seg_x.iter())
            .fold(T::zero(), |a, (w, x)| a + w.clone() * x.clone())
            / total_w.clone();
        for j in 0..segments {
            let rows = j * m..(j + 1) * m;
            let member_sum = rows.clone().fold(T::zero(), |a, i| a + w[[i, class]].clone());
            if member_sum == T::zero() {
                continue;
            }
            let denom = total_w.clone() * member_sum;
            let (xh, wh) = (seg_x[j].clone(), seg_w[j].clone());
            for i in rows {
                let (xi, wi) = (x[[i, class]].clone(), w[[i, class]].clone());
                let slope = function.weight_slope(&wi);
                let bracket = (xi.clone() - xh.clone()) * wh.clone()
                    + (xh.clone() - y.clone()) * (T::two() * wi.clone() - wh.clone());
                d_x[[i, class]] = (wh.clone() * wi.clone() + bracket * slope) / denom.clone();
                if let Some(d_w) = d_w.as_mut() {
                    d_w[[i, class]] = (T::two() * wi * (xh.clone() - y.clone())
                        + wh.clone() * (xi + y.clone() - T::two() * xh.clone()))
                        / denom.clone();
                }
            }
        }
    }
    Ok(PoolingGradients { d_y_d_x: d_x, d_y_d_w: d_w })
}

/// Reverse-mode chaining of the per-stage Jacobians for arbitrary plans.
pub(crate) fn grad_staged<T: Scalar>(
    x: ArrayView2<'_, T>,
    w: ArrayView2<'_, T>,
    function: PoolingFunction,
    plan: &StagePlan,
    rule: SegmentWeightRule,
) -> Result<PoolingGradients<T>> {
    let mut preds = vec![x.to_owned()];
    let mut weights = vec![w.to_owned()];
    for &m in plan.factors() {
        let last = preds.len() - 1;
        let out = aggregate_stage_with(preds[last].view(), weights[last].view(), m, rule)?;
        preds.push(out.predictions);
        weights.push(out.weights);
    }

    // final weighted average over the last level
    let top_x = preds.last().expect("at least the frame level");
    let top_w = weights.last().expect("at least the frame level");
    let mut g_x = Array2::from_elem(top_x.dim(), T::zero());
    let mut g_w = g_x.clone();
    for class in 0..top_x.ncols() {
        let total = top_w.column(class).iter().fold(T::zero(), |a, v| a + v.clone());
        if total == T::zero() {
            continue;
        }
        let y = top_w
            .column(class)
            .iter()
            .zip(top_x.column(class).iter())
            .fold(T::zero(), |a, (w, x)| a + w.clone() * x.clone())
            / total.clone();
        for j in 0..top_x.nrows() {
            g_x[[j, class]] = top_w[[j, class]].clone() / total.clone();
            g_w[[j, class]] = (top_x[[j, class]].clone() - y.clone()) / total.clone();
        }
    }

    for (stage, &m) in plan.factors().iter().enumerate().rev() {
        let (xs, ws) = (&preds[stage], &weights[stage]);
        let (xh, wh) = (&preds[stage + 1], &weights[stage + 1]);
        let len = T::from_usize_lossy(m);
        let mut next_x = Array2::from_elem(xs.dim(), T::zero());
        let mut next_w = next_x.clone();
        for class in 0..xs.ncols() {
            for j in 0..xh.nrows() {
                let rows = j * m..(j + 1) * m;
                let sum = rows.clone().fold(T::zero(), |a, i| a + ws[[i, class]].clone());
                if sum == T::zero() {
                    continue;
                }
                let (gx, gw) = (g_x[[j, class]].clone(), g_w[[j, class]].clone());
                for i in rows {
                    let wi = ws[[i, class]].clone();
                    next_x[[i, class]] = gx.clone() * wi.clone() / sum.clone();
                    let via_pred = gx.clone() * (xs[[i, class]].clone() - xh[[j, class]].clone());
                    next_w[[i, class]] = match rule {
                        SegmentWeightRule::SelfWeighted => {
                            (via_pred + gw.clone() * (T::two() * wi - wh[[j, class]].clone()))
                                / sum.clone()
                        }
                        SegmentWeightRule::Averaged => {
                            via_pred / sum.clone() + gw.clone() / len.clone()
                        }
                    };
                }
            }
        }
        g_x = next_x;
        g_w = next_w;
    }

    let mut d_x = g_x;
    for ((dx, gw), wi) in d_x.iter_mut().zip(g_w.iter()).zip(w.iter()) {
        *dx = dx.clone() + gw.clone() * function.weight_slope(wi);
    }
    let d_w = (function == PoolingFunction::Attention).then_some(g_w);
    Ok(PoolingGradients { d_y_d_x: d_x, d_y_d_w: d_w })
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDifferenceReport {
    /// Largest `|analytic − numeric| / max(|analytic|, 1e-8)` over `∂y/∂x`.
    pub max_rel_error_x: f64,
    /// Same for `∂y/∂w`, attention only.
    pub max_rel_error_w: Option<f64>,
    pub checked: usize,
    /// Max-pooling entries skipped because a perturbation moved the argmax.
    pub excluded: usize,
}

impl FiniteDifferenceReport {
    pub fn max_relative_error(&self) -> f64 {
        self.max_rel_error_x.max(self.max_rel_error_w.unwrap_or(0.0))
    }
}

/// Relative error with the `1e-8` floor on the analytic magnitude.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1e-8)
}

/// Offsets and coefficients of the fourth-order central stencil,
/// `f′(x) ≈ [f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)] / 12h`.
const STENCIL: [(f64, f64); 4] = [(-2.0, 1.0), (-1.0, -8.0), (1.0, 8.0), (2.0, -1.0)];

/// Double-double scalar for the finite-difference forward pass.
///
/// `TwoFloat` addition and multiplication carry ~106 bits, but its quotient of
/// two double-doubles is only f64-accurate; one residual correction restores
/// the missing low word.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct Dd(TwoFloat);

macro_rules! dd_op {
    ($($tr:ident $f:ident $op:tt),*) => {$(
        impl std::ops::$tr for Dd {
            type Output = Dd;
            fn $f(self, rhs: Dd) -> Dd {
                Dd(self.0 $op rhs.0)
            }
        }
    )*};
}

dd_op!(Add add +, Sub sub -, Mul mul *, Rem rem %);

impl std::ops::Div for Dd {
    type Output = Dd;
    fn div(self, rhs: Dd) -> Dd {
        let q = self.0 / rhs.0;
        let r = self.0 - q * rhs.0;
        Dd(q + r.hi() / rhs.0.hi())
    }
}

impl num_traits::Zero for Dd {
    fn zero() -> Self {
        Dd(TwoFloat::from(0.0))
    }
    fn is_zero(&self) -> bool {
        self.0 == TwoFloat::from(0.0)
    }
}

impl num_traits::One for Dd {
    fn one() -> Self {
        Dd(TwoFloat::from(1.0))
    }
}

impl num_traits::Num for Dd {
    type FromStrRadixErr = <f64 as num_traits::Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> std::result::Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(|v| Dd(TwoFloat::from(v)))
    }
}

impl num_traits::FromPrimitive for Dd {
    fn from_i64(n: i64) -> Option<Self> {
        Some(Dd(TwoFloat::from(n as f64)))
    }
    fn from_u64(n: u64) -> Option<Self> {
        Some(Dd(TwoFloat::from(n as f64)))
    }
    fn from_f64(v: f64) -> Option<Self> {
        Some(Dd(TwoFloat::from(v)))
    }
}

impl num_traits::ToPrimitive for Dd {
    fn to_i64(&self) -> Option<i64> {
        self.0.hi().to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.0.hi().to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.0.hi())
    }
}

impl Scalar for Dd {
    fn checked_exp(&self) -> Option<Self> {
        Some(Dd(self.0.exp()))
    }
}

impl Dd {
    fn of(v: f64) -> Self {
        Dd(TwoFloat::from(v))
    }

    /// `exp(self)` for `|self| ≲ 1e-4`, by Taylor series to double-double accuracy.
    fn exp_small(self) -> Self {
        let mut term = Dd::of(1.0);
        let mut sum = term;
        for k in 1..=6 {
            term = Dd(term.0 * self.0 / k as f64);
            sum = sum + term;
        }
        sum
    }
}

/// Forward pass of one class column, kept as the full stage pyramid so that a
/// single perturbed frame can be re-pooled along its own segment chain only.
struct Pyramid {
    /// `levels[k]` holds `(x, w)` fed into stage `k`; the last level feeds the
    /// final weighted average.
    levels: Vec<(Array2<Dd>, Array2<Dd>)>,
    factors: Vec<usize>,
    rule: SegmentWeightRule,
}

impl Pyramid {
    fn new(x: Array2<Dd>, w: Array2<Dd>, spec: &PoolingSpec) -> Result<Self> {
        let factors = spec.plan.factors().to_vec();
        let mut levels = vec![(x, w)];
        for &m in &factors {
            let (x, w) = levels.last().expect("at least one level");
            let out = aggregate_stage_with(x.view(), w.view(), m, spec.weight_rule)?;
            levels.push((out.predictions, out.weights));
        }
        Ok(Self { levels, factors, rule: spec.weight_rule })
    }

    /// Clip probability with frame `i` replaced by `(xi, wi)`.
    fn pool_with(&self, mut i: usize, mut xi: Dd, mut wi: Dd) -> Result<Dd> {
        for (k, &m) in self.factors.iter().enumerate() {
            let (x, w) = &self.levels[k];
            let j = i / m;
            let mut xs = x.slice(ndarray::s![j * m..(j + 1) * m, ..]).to_owned();
            let mut ws = w.slice(ndarray::s![j * m..(j + 1) * m, ..]).to_owned();
            xs[[i - j * m, 0]] = xi;
            ws[[i - j * m, 0]] = wi;
            let out = aggregate_stage_with(xs.view(), ws.view(), m, self.rule)?;
            (i, xi, wi) = (j, out.predictions[[0, 0]], out.weights[[0, 0]]);
        }
        let (x, w) = self.levels.last().expect("at least one level");
        let (mut num, mut den) = (Dd::of(0.0), Dd::of(0.0));
        for (n, (a, b)) in x.iter().zip(w.iter()).enumerate() {
            let (a, b) = if n == i { (xi, wi) } else { (*a, *b) };
            num = num + a * b;
            den = den + b;
        }
        Ok(if den == Dd::of(0.0) { den } else { num / den })
    }
}

/// Weight of frame with unperturbed score `x` and weight `base` after its score
/// moved by `delta`, for weights derived from scores.
fn rederived_weight(function: PoolingFunction, x: Dd, base: Dd, delta: Dd) -> Dd {
    match function {
        PoolingFunction::LinearSoftmax => x + delta,
        // exp(x + δ) = exp(x)·exp(δ): any error in exp(x) is common to every
        // stencil point and cancels from the difference quotient
        PoolingFunction::ExponentialSoftmax => base * delta.exp_small(),
        // uniform and one-hot weights do not move while the argmax is unchanged
        _ => base,
    }
}

/// Compares [`grad_hierarchical`] against central differences of the forward
/// pass with step `step`.
///
/// The difference quotient uses the fourth-order central stencil at offsets
/// `±h, ±2h`, and the forward pass is re-evaluated in double-double precision,
/// so the numeric derivative is accurate to far below the tolerances of
/// interest even where the true gradient is close to zero. Weights are
/// re-derived from the perturbed scores for every function except attention,
/// whose weights are perturbed separately.
pub fn finite_difference_check<T: Scalar>(
    scores: &FrameScores<T>,
    weights: &FrameWeights<T>,
    function: PoolingFunction,
    plan: &StagePlan,
    step: f64,
) -> Result<FiniteDifferenceReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("finite-difference step {step} must be positive")));
    }
    let analytic = grad_hierarchical(scores, weights, function, plan)?;
    let spec = PoolingSpec::new(function, plan.clone());
    let to_wide = |a: &Array2<T>| a.map(|v| Dd::of(v.to_f64_lossy()));
    let x = to_wide(scores.values());
    let w = match function {
        PoolingFunction::Attention => to_wide(weights.values()),
        f => crate::pooling::derive_weights(x.view(), f)?,
    };
    let h = step;

    let mut report = FiniteDifferenceReport {
        max_rel_error_x: 0.0,
        max_rel_error_w: analytic.d_y_d_w.as_ref().map(|_| 0.0),
        checked: 0,
        excluded: 0,
    };

    for class in 0..x.ncols() {
        let xc = x.column(class).insert_axis(Axis(1)).to_owned();
        let wc = w.column(class).insert_axis(Axis(1)).to_owned();
        let base_argmax = argmax(xc.iter());
        let pyramid = Pyramid::new(xc.clone(), wc.clone(), &spec)?;
        for i in 0..xc.nrows() {
            let (xi, wi) = (xc[[i, 0]], wc[[i, 0]]);
            if function == PoolingFunction::Max {
                let mut moved = xc.clone();
                let shifted = STENCIL.iter().any(|&(k, _)| {
                    moved[[i, 0]] = xi + Dd::of(k * h);
                    argmax(moved.iter()) != base_argmax
                });
                if shifted {
                    report.excluded += 1;
                    continue;
                }
            }
            let mut sum = Dd::of(0.0);
            for &(k, c) in &STENCIL {
                let delta = Dd::of(k * h);
                let wp = rederived_weight(function, xi, wi, delta);
                sum = sum + pyramid.pool_with(i, xi + delta, wp)? * Dd::of(c);
            }
            let numeric = (sum / Dd::of(12.0 * h)).0.hi();
            let a = analytic.d_y_d_x[[i, class]].to_f64_lossy();
            report.max_rel_error_x = report.max_rel_error_x.max(relative_error(a, numeric));
            report.checked += 1;

            if let Some(d_w) = analytic.d_y_d_w.as_ref() {
                let mut sum = Dd::of(0.0);
                for &(k, c) in &STENCIL {
                    sum = sum + pyramid.pool_with(i, xi, wi + Dd::of(k * h))? * Dd::of(c);
                }
                let numeric = (sum / Dd::of(12.0 * h)).0.hi();
                let a = d_w[[i, class]].to_f64_lossy();
                let err = report.max_rel_error_w.get_or_insert(0.0);
                *err = err.max(relative_error(a, numeric));
                report.checked += 1;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pooling::compute_weights;
    use num_rational::BigRational;
    use num_traits::{FromPrimitive, ToPrimitive};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inputs(frames: &[f64]) -> (FrameScores<f64>, FrameWeights<f64>) {
        let s = FrameScores::from_frames(frames, 12.5).unwrap();
        let w = FrameWeights::from_frames(frames).unwrap();
        (s, w)
    }

    fn derived(frames: &[f64], f: PoolingFunction) -> (FrameScores<f64>, FrameWeights<f64>) {
        let s = FrameScores::from_frames(frames, 12.5).unwrap();
        let w = compute_weights(&s, f).unwrap();
        (s, w)
    }

    fn plan(f: &[usize]) -> StagePlan {
        StagePlan::new(f.to_vec()).unwrap()
    }

    fn random_frames(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(0.05..0.95)).collect()
    }

    #[test]
    fn local_repool_matches_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (f, factors) in [
            (PoolingFunction::LinearSoftmax, vec![]),
            (PoolingFunction::ExponentialSoftmax, vec![2, 3]),
            (PoolingFunction::Attention, vec![3, 2]),
        ] {
            let spec = PoolingSpec::new(f, plan(&factors));
            let x = Array2::from_shape_fn((12, 1), |_| Dd::of(rng.random_range(0.05..0.95)));
            let w = match f {
                PoolingFunction::Attention => Array2::from_shape_fn((12, 1), |_| Dd::of(rng.random_range(0.05..0.95))),
                f => crate::pooling::derive_weights(x.view(), f).unwrap(),
            };
            let pyramid = Pyramid::new(x.clone(), w.clone(), &spec).unwrap();
            for i in [0, 5, 11] {
                let delta = Dd::of(0.01);
                let (mut xp, mut wp) = (x.clone(), w.clone());
                xp[[i, 0]] = x[[i, 0]] + delta;
                wp[[i, 0]] = match f {
                    PoolingFunction::Attention => w[[i, 0]] + delta,
                    f => rederived_weight(f, x[[i, 0]], w[[i, 0]], delta),
                };
                let full = spec.pool(xp.view(), Some(wp.view())).unwrap()[0];
                let local = pyramid.pool_with(i, xp[[i, 0]], wp[[i, 0]]).unwrap();
                // the full pass goes through the library exp, good to ~1e-19
                let tol = if f == PoolingFunction::ExponentialSoftmax { 1e-18 } else { 1e-28 };
                assert!((full - local).0.abs() < TwoFloat::from(tol), "{f} {factors:?} {i}");
            }
        }
    }

    #[test]
    fn double_double_division_and_exp_are_exact_enough() {
        let exact = |d: Dd| BigRational::from_f64(d.0.hi()).unwrap() + BigRational::from_f64(d.0.lo()).unwrap();
        let third = Dd::of(1.0) / Dd::of(3.0);
        let err = BigRational::new(1.into(), 3.into()) - exact(third);
        assert!(err.to_f64().unwrap().abs() < 1e-31);
        // exp(1e-5) = 1.00001000005000016666708333341666...
        let e = Dd::of(1e-5).exp_small();
        assert_eq!(e.0.hi(), 1.00001000005000016666708333341666_f64);
        let x = Dd::of(0.3);
        let q = (x * Dd::of(7.0) + Dd::of(1e-20)) / Dd::of(7.0);
        assert!(((q - x).0.hi() - 1e-20 / 7.0).abs() < 1e-31);
    }

    #[test]
    fn loss_values() {
        let half = ClipProbability::new(ndarray::arr1(&[0.5]));
        assert!((loss(&half, &[true]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((loss(&half, &[false]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let y = ClipProbability::new(ndarray::arr1(&[0.9]));
        assert!((loss(&y, &[true]).unwrap() - 0.105361).abs() < 1e-6);
        let two = ClipProbability::new(ndarray::arr1(&[0.5, 0.9]));
        assert!((loss(&two, &[true, true]).unwrap() - (std::f64::consts::LN_2 - 0.9f64.ln())).abs() < 1e-15);
        assert!(matches!(loss(&two, &[true]), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_grad_values() {
        let half = ClipProbability::new(ndarray::arr1(&[0.5, 0.5]));
        let g = loss_grad(&half, &[true, false]).unwrap();
        assert_eq!(g.d_l_d_y.to_vec(), vec![-2.0, 2.0]);
        let edge = ClipProbability::new(ndarray::arr1(&[0.0, 1.0]));
        let g = loss_grad(&edge, &[true, false]).unwrap();
        assert!((g.d_l_d_y[0] * PROBABILITY_CLAMP + 1.0).abs() < 1e-6);
        assert!((g.d_l_d_y[1] * PROBABILITY_CLAMP - 1.0).abs() < 1e-6);
        assert!(loss(&edge, &[true, false]).unwrap().is_finite());
    }

    #[test]
    fn linear_softmax_flat_gradient() {
        let (s, w) = inputs(&[0.2, 0.4, 0.6, 0.8]);
        let g = grad_single(&s, &w, PoolingFunction::LinearSoftmax).unwrap();
        for (a, b) in g.d_y_d_x.iter().zip([-0.1, 0.1, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!(g.d_y_d_w.is_none());
    }

    #[test]
    fn average_and_max_flat_gradients() {
        let (s, w) = derived(&[0.1, 0.2, 0.3, 0.4], PoolingFunction::Average);
        let g = grad_single(&s, &w, PoolingFunction::Average).unwrap();
        assert!(g.d_y_d_x.iter().all(|&v| v == 0.25));
        let (s, w) = derived(&[0.1, 0.9, 0.3], PoolingFunction::Max);
        let g = grad_single(&s, &w, PoolingFunction::Max).unwrap();
        assert_eq!(g.d_y_d_x.column(0).to_vec(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn average_and_max_gradients_ignore_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let frames = random_frames(&mut rng, 60);
            for p in [plan(&[5]), plan(&[3, 4]), plan(&[2, 5, 3]), plan(&[60])] {
                let (s, w) = derived(&frames, PoolingFunction::Average);
                let g = grad_hierarchical(&s, &w, PoolingFunction::Average, &p).unwrap();
                assert!(g.d_y_d_x.iter().all(|v| (v - 1.0 / 60.0).abs() < 1e-15));

                let (s, w) = derived(&frames, PoolingFunction::Max);
                let g = grad_hierarchical(&s, &w, PoolingFunction::Max, &p).unwrap();
                let flat = grad_single(&s, &w, PoolingFunction::Max).unwrap();
                assert_eq!(g.d_y_d_x, flat.d_y_d_x);
            }
        }
    }

    #[test]
    fn average_sum_rule_is_exact() {
        let frames: Vec<BigRational> =
            (1..=12).map(|k| BigRational::new((k * 7 % 13).into(), 13.into())).collect();
        let s = FrameScores::from_frames(&frames, 1.0).unwrap();
        let w = compute_weights(&s, PoolingFunction::Average).unwrap();
        for p in [plan(&[]), plan(&[3]), plan(&[2, 3]), plan(&[2, 2, 3])] {
            let g = grad_hierarchical(&s, &w, PoolingFunction::Average, &p).unwrap();
            let total = g.d_y_d_x.iter().fold(BigRational::from_usize_lossy(0), |a, v| a + v);
            assert_eq!(total, BigRational::from_usize_lossy(1), "plan {p}");
        }
    }

    #[test]
    fn exact_one_stage_matches_chained_jacobians() {
        let frames: Vec<BigRational> =
            (1..=12).map(|k| BigRational::new((k * 5 % 11 + 1).into(), 12.into())).collect();
        let s = FrameScores::from_frames(&frames, 1.0).unwrap();
        for f in [PoolingFunction::LinearSoftmax, PoolingFunction::Attention] {
            let w = if f == PoolingFunction::Attention {
                let ws: Vec<BigRational> =
                    (1..=12).map(|k| BigRational::new((k * 3 % 7 + 1).into(), 5.into())).collect();
                FrameWeights::from_frames(&ws).unwrap()
            } else {
                compute_weights(&s, f).unwrap()
            };
            for m in [1, 2, 3, 4, 6, 12] {
                let p = plan(&[m]);
                let closed = grad_hierarchical(&s, &w, f, &p).unwrap();
                let chained = grad_staged(
                    s.values().view(),
                    w.values().view(),
                    f,
                    &p,
                    SegmentWeightRule::SelfWeighted,
                )
                .unwrap();
                assert_eq!(closed, chained, "{f} m={m}");
            }
        }
    }

    #[test]
    fn linear_softmax_eq8_form() {
        // x_i(4x̂_j − 2y) − 2x̂_j² + y x̂_j over Σx̂ · Σ_segment x
        let frames = [0.2, 0.4, 0.6, 0.8];
        let (s, w) = inputs(&frames);
        let g = grad_hierarchical(&s, &w, PoolingFunction::LinearSoftmax, &plan(&[2])).unwrap();
        let seg = [(0.2 * 0.2 + 0.4 * 0.4) / 0.6, (0.6 * 0.6 + 0.8 * 0.8) / 1.4];
        let seg_sum = [0.6, 1.4];
        let y = (seg[0] * seg[0] + seg[1] * seg[1]) / (seg[0] + seg[1]);
        for (i, &xi) in frames.iter().enumerate() {
            let j = i / 2;
            let expect = (xi * (4.0 * seg[j] - 2.0 * y) - 2.0 * seg[j] * seg[j] + y * seg[j])
                / ((seg[0] + seg[1]) * seg_sum[j]);
            assert!((g.d_y_d_x[[i, 0]] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn flat_plan_is_grad_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames = random_frames(&mut rng, 20);
        let att = random_frames(&mut rng, 20);
        for f in PoolingFunction::ALL {
            let s = FrameScores::from_frames(&frames, 1.0).unwrap();
            let w = if f == PoolingFunction::Attention {
                FrameWeights::from_frames(&att).unwrap()
            } else {
                compute_weights(&s, f).unwrap()
            };
            let a = grad_hierarchical(&s, &w, f, &plan(&[])).unwrap();
            let b = grad_single(&s, &w, f).unwrap();
            assert_eq!(a, b);

            let unit = grad_hierarchical(&s, &w, f, &plan(&[1])).unwrap();
            for (u, v) in unit.d_y_d_x.iter().zip(b.d_y_d_x.iter()) {
                assert!((u - v).abs() <= 1e-12, "{f}: {u} vs {v}");
            }
            if let (Some(u), Some(v)) = (unit.d_y_d_w, b.d_y_d_w) {
                for (u, v) in u.iter().zip(v.iter()) {
                    assert!((u - v).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn finite_differences_small_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let frames = random_frames(&mut rng, 24);
            let att = random_frames(&mut rng, 24);
            for f in PoolingFunction::ALL {
                for p in [plan(&[]), plan(&[4]), plan(&[2, 3]), plan(&[2, 3, 2, 2])] {
                    let s = FrameScores::from_frames(&frames, 1.0).unwrap();
                    let w = if f == PoolingFunction::Attention {
                        FrameWeights::from_frames(&att).unwrap()
                    } else {
                        compute_weights(&s, f).unwrap()
                    };
                    let r = finite_difference_check(&s, &w, f, &p, 1e-5).unwrap();
                    assert!(r.max_relative_error() <= 1e-6, "{f} {p}: {r:?}");
                    if f == PoolingFunction::Attention {
                        assert!(r.max_rel_error_w.is_some());
                    }
                }
            }
        }
    }

    #[test]
    fn average_finite_differences_are_tight() {
        let (s, w) = derived(&[0.3, 0.5, 0.7, 0.2, 0.9, 0.4], PoolingFunction::Average);
        let r = finite_difference_check(&s, &w, PoolingFunction::Average, &plan(&[3]), 1e-5).unwrap();
        assert!(r.max_relative_error() <= 1e-10);
    }

    #[test]
    fn max_excludes_argmax_crossings() {
        let (s, w) = derived(&[0.5, 0.8, 0.8 - 5e-6, 0.1], PoolingFunction::Max);
        let r = finite_difference_check(&s, &w, PoolingFunction::Max, &plan(&[2]), 1e-5).unwrap();
        assert_eq!(r.excluded, 2);
        assert_eq!(r.checked, 2);
        assert!(r.max_relative_error() <= 1e-9);
    }

    #[test]
    fn averaged_rule_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frames = random_frames(&mut rng, 12);
        let s = FrameScores::from_frames(&frames, 1.0).unwrap();
        let w = compute_weights(&s, PoolingFunction::LinearSoftmax).unwrap();
        let p = plan(&[3, 2]);
        let g = grad_hierarchical_with(&s, &w, PoolingFunction::LinearSoftmax, &p, SegmentWeightRule::Averaged)
            .unwrap();
        let spec = PoolingSpec {
            function: PoolingFunction::LinearSoftmax,
            plan: p,
            weight_rule: SegmentWeightRule::Averaged,
        };
        let h = 1e-6;
        for i in 0..12 {
            let mut a = frames.clone();
            let mut b = frames.clone();
            a[i] += h;
            b[i] -= h;
            let col = |v: &[f64]| Array2::from_shape_vec((12, 1), v.to_vec()).unwrap();
            let fd = (spec.pool(col(&a).view(), None).unwrap()[0] - spec.pool(col(&b).view(), None).unwrap()[0])
                / (2.0 * h);
            assert!(relative_error(g.d_y_d_x[[i, 0]], fd) < 1e-6);
        }
    }

    #[test]
    fn hierarchical_gradient_couples_segment_members() {
        // Holding x_0 fixed, moving a neighbour in its segment changes ∂y/∂x_0
        // through x̂_j; in the flat form only y and Σx can carry that change.
        let base = [0.3, 0.5, 0.7, 0.2, 0.6, 0.4];
        let mut moved = base;
        moved[1] = 0.9;
        let (s0, w0) = inputs(&base);
        let (s1, w1) = inputs(&moved);
        let f = PoolingFunction::LinearSoftmax;
        let h0 = grad_hierarchical(&s0, &w0, f, &plan(&[3])).unwrap().d_y_d_x[[0, 0]];
        let h1 = grad_hierarchical(&s1, &w1, f, &plan(&[3])).unwrap().d_y_d_x[[0, 0]];
        assert!((h0 - h1).abs() > 1e-3);

        // flat derivative is reproduced from (x_0, y, Σx) alone
        for frames in [&base, &moved] {
            let (s, w) = inputs(frames);
            let g = grad_single(&s, &w, f).unwrap().d_y_d_x[[0, 0]];
            let sum: f64 = frames.iter().sum();
            let y = frames.iter().map(|v| v * v).sum::<f64>() / sum;
            assert!((g - (2.0 * frames[0] - y) / sum).abs() < 1e-15);
        }

        // two clips with equal (x_0, y, Σx) but different segment means
        // share the flat derivative and differ hierarchically
        let a = [0.4, 0.1, 0.7, 0.6, 0.5, 0.3];
        let b = [0.4, 0.7, 0.1, 0.6, 0.5, 0.3];
        let (sa, wa) = inputs(&a);
        let (sb, wb) = inputs(&b);
        let fa = grad_single(&sa, &wa, f).unwrap().d_y_d_x[[0, 0]];
        let fb = grad_single(&sb, &wb, f).unwrap().d_y_d_x[[0, 0]];
        assert!((fa - fb).abs() < 1e-15);
        let ha = grad_hierarchical(&sa, &wa, f, &plan(&[2])).unwrap().d_y_d_x[[0, 0]];
        let hb = grad_hierarchical(&sb, &wb, f, &plan(&[2])).unwrap().d_y_d_x[[0, 0]];
        assert!((ha - hb).abs() > 1e-3);
    }

    #[test]
    fn zero_weight_segments_get_zero_gradient() {
        let s = FrameScores::from_frames(&[0.2, 0.4, 0.6, 0.8], 1.0).unwrap();
        let w = FrameWeights::from_frames(&[0.0, 0.0, 0.5, 1.0]).unwrap();
        for p in [plan(&[2]), plan(&[2, 2])] {
            let g = grad_hierarchical(&s, &w, PoolingFunction::Attention, &p).unwrap();
            assert_eq!(g.d_y_d_x[[0, 0]], 0.0);
            assert_eq!(g.d_y_d_x[[1, 0]], 0.0);
            let dw = g.d_y_d_w.unwrap();
            assert_eq!(dw[[0, 0]], 0.0);
            assert_eq!(dw[[1, 0]], 0.0);
        }
    }

    #[test]
    fn rejects_bad_step_and_plan() {
        let (s, w) = inputs(&[0.2, 0.4, 0.6]);
        assert!(finite_difference_check(&s, &w, PoolingFunction::LinearSoftmax, &plan(&[]), 0.0).is_err());
        assert!(grad_hierarchical(&s, &w, PoolingFunction::LinearSoftmax, &plan(&[2])).is_err());
    }
}
