//! Economical prompting index: accuracy discounted by token consumption.
//!
//! The index for a technique with accuracy `A` and mean per-query token count
//! `T` under a cost-concern weight `c` is `A * exp(-c * T)`. Linear and
//! quadratic penalty variants are kept for comparison; the exponential form is
//! the one used everywhere else in the crate.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EpiError {
    #[error("accuracy {0} outside [0, 1]")]
    AccuracyOutOfRange(f64),
    #[error("cost concern {0} must be a finite nonnegative number")]
    InvalidConcern(f64),
    #[error("token count {0} must be a finite nonnegative number")]
    InvalidTokens(f64),
    #[error("sample count must be at least 1")]
    EmptySample,
    #[error("crossover undefined for zero accuracy")]
    ZeroAccuracy,
    #[error("baseline {0} is zero; relative change undefined")]
    ZeroBaseline(&'static str),
    #[error("slope needs at least two distinct cost-concern values")]
    DegenerateConcerns,
}

fn check_accuracy<S: Scalar>(a: S) -> Result<(), EpiError> {
    if a.is_finite() && a >= S::zero() && a <= S::one() {
        Ok(())
    } else {
        Err(EpiError::AccuracyOutOfRange(a.to_f64_lossy()))
    }
}

fn check_concern<S: Scalar>(c: S) -> Result<(), EpiError> {
    if c.is_finite() && c >= S::zero() {
        Ok(())
    } else {
        Err(EpiError::InvalidConcern(c.to_f64_lossy()))
    }
}

fn check_tokens<S: Scalar>(t: S) -> Result<(), EpiError> {
    if t.is_finite() && t >= S::zero() {
        Ok(())
    } else {
        Err(EpiError::InvalidTokens(t.to_f64_lossy()))
    }
}

/// Accuracy, mean total tokens per query and sample count for one
/// (technique, dataset, model) cell or an average of such cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TechniqueSummary<S> {
    accuracy: S,
    mean_tokens: S,
    n: usize,
}

impl<S: Scalar> TechniqueSummary<S> {
    pub fn new(accuracy: S, mean_tokens: S, n: usize) -> Result<Self, EpiError> {
        check_accuracy(accuracy)?;
        check_tokens(mean_tokens)?;
        if n == 0 {
            return Err(EpiError::EmptySample);
        }
        Ok(Self {
            accuracy,
            mean_tokens,
            n,
        })
    }

    pub fn accuracy(&self) -> S {
        self.accuracy
    }

    pub fn mean_tokens(&self) -> S {
        self.mean_tokens
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Exponential index of this summary at concern `c`.
    pub fn epi(&self, c: S) -> Result<S, EpiError> {
        epi_exponential(self.accuracy, c, self.mean_tokens)
    }
}

/// Named cost-concern levels. The five fixed levels carry fixed weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcernLabel {
    None,
    Slight,
    Moderate,
    Elevated,
    Major,
    Custom,
}

impl ConcernLabel {
    pub const CANONICAL: [ConcernLabel; 5] = [
        ConcernLabel::None,
        ConcernLabel::Slight,
        ConcernLabel::Moderate,
        ConcernLabel::Elevated,
        ConcernLabel::Major,
    ];

    /// Per-token weight of a fixed level; `None` for `Custom`.
    pub fn weight(self) -> Option<f64> {
        match self {
            ConcernLabel::None => Some(0.0),
            ConcernLabel::Slight => Some(0.00025),
            ConcernLabel::Moderate => Some(0.0005),
            ConcernLabel::Elevated => Some(0.001),
            ConcernLabel::Major => Some(0.002),
            ConcernLabel::Custom => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConcernLabel::None => "none",
            ConcernLabel::Slight => "slight",
            ConcernLabel::Moderate => "moderate",
            ConcernLabel::Elevated => "elevated",
            ConcernLabel::Major => "major",
            ConcernLabel::Custom => "custom",
        }
    }
}

impl fmt::Display for ConcernLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A labelled per-token weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostConcern<S> {
    label: ConcernLabel,
    c: S,
}

impl<S: Scalar> CostConcern<S> {
    /// One of the fixed levels. Panics on `Custom`, which has no fixed weight.
    pub fn level(label: ConcernLabel) -> Self {
        let w = label
            .weight()
            .expect("custom concern needs an explicit weight");
        Self {
            label,
            c: S::lit(w),
        }
    }

    pub fn custom(c: S) -> Result<Self, EpiError> {
        check_concern(c)?;
        Ok(Self {
            label: ConcernLabel::Custom,
            c,
        })
    }

    /// The five fixed levels in ascending order of weight.
    pub fn canonical() -> [Self; 5] {
        ConcernLabel::CANONICAL.map(Self::level)
    }

    pub fn label(&self) -> ConcernLabel {
        self.label
    }

    pub fn c(&self) -> S {
        self.c
    }
}

/// `A * exp(-c * T)`.
pub fn epi_exponential<S: Scalar>(accuracy: S, c: S, tokens: S) -> Result<S, EpiError> {
    check_accuracy(accuracy)?;
    check_concern(c)?;
    check_tokens(tokens)?;
    Ok(accuracy * (-(c * tokens)).exp())
}

/// `max(0, A - c * T)`.
pub fn epi_linear<S: Scalar>(accuracy: S, c: S, tokens: S) -> Result<S, EpiError> {
    check_accuracy(accuracy)?;
    check_concern(c)?;
    check_tokens(tokens)?;
    Ok((accuracy - c * tokens).max(S::zero()))
}

/// `max(0, A - c * T^2)`.
pub fn epi_quadratic<S: Scalar>(accuracy: S, c: S, tokens: S) -> Result<S, EpiError> {
    check_accuracy(accuracy)?;
    check_concern(c)?;
    check_tokens(tokens)?;
    Ok((accuracy - c * tokens * tokens).max(S::zero()))
}

/// Penalty shape selector for callers that want to switch variants at runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpiModel {
    Exponential,
    Linear,
    Quadratic,
}

impl EpiModel {
    pub fn eval<S: Scalar>(self, accuracy: S, c: S, tokens: S) -> Result<S, EpiError> {
        match self {
            EpiModel::Exponential => epi_exponential(accuracy, c, tokens),
            EpiModel::Linear => epi_linear(accuracy, c, tokens),
            EpiModel::Quadratic => epi_quadratic(accuracy, c, tokens),
        }
    }
}

/// Where two exponential index curves meet on `c >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "c", rename_all = "snake_case")]
pub enum Crossover<S> {
    /// The curves intersect at a strictly positive weight.
    At(S),
    /// Equal accuracy, different cost: the curves start together and diverge.
    Origin,
    /// One technique dominates for every `c >= 0`, or the curves coincide.
    Never,
}

impl<S: Scalar> Crossover<S> {
    /// The crossing weight, with `Origin` reported as zero.
    pub fn value(&self) -> Option<S> {
        match *self {
            Crossover::At(c) => Some(c),
            Crossover::Origin => Some(S::zero()),
            Crossover::Never => None,
        }
    }
}

/// Solves `A1 exp(-c T1) = A2 exp(-c T2)` for `c`, i.e. `ln(A1/A2) / (T1 - T2)`.
pub fn crossover_c<S: Scalar>(
    first: &TechniqueSummary<S>,
    second: &TechniqueSummary<S>,
) -> Result<Crossover<S>, EpiError> {
    let (a1, t1) = (first.accuracy, first.mean_tokens);
    let (a2, t2) = (second.accuracy, second.mean_tokens);
    if a1 == S::zero() || a2 == S::zero() {
        return Err(EpiError::ZeroAccuracy);
    }
    let dt = t1 - t2;
    if dt == S::zero() {
        return Ok(Crossover::Never);
    }
    if a1 == a2 {
        return Ok(Crossover::Origin);
    }
    let c = (a1 / a2).ln() / dt;
    if c > S::zero() && c.is_finite() {
        Ok(Crossover::At(c))
    } else {
        Ok(Crossover::Never)
    }
}

/// Ordinary least squares fit of `ys` on `xs`, returning `(slope, intercept)`.
pub fn ols_fit<S: Scalar>(xs: &[S], ys: &[S]) -> Result<(S, S), EpiError> {
    assert_eq!(xs.len(), ys.len(), "ols_fit: mismatched lengths");
    if xs.len() < 2 {
        return Err(EpiError::DegenerateConcerns);
    }
    let n = S::from_count(xs.len());
    let mean_x = xs.iter().fold(S::zero(), |acc, &x| acc + x) / n;
    let mean_y = ys.iter().fold(S::zero(), |acc, &y| acc + y) / n;
    let mut sxx = S::zero();
    let mut sxy = S::zero();
    for (&x, &y) in xs.iter().zip(ys) {
        let dx = x - mean_x;
        sxx += dx * dx;
        sxy += dx * (y - mean_y);
    }
    if sxx == S::zero() {
        return Err(EpiError::DegenerateConcerns);
    }
    let slope = sxy / sxx;
    Ok((slope, mean_y - slope * mean_x))
}

/// Slope of the exponential index against `c` across `concerns`.
pub fn ols_slope<S: Scalar>(
    accuracy: S,
    tokens: S,
    concerns: &[CostConcern<S>],
) -> Result<S, EpiError> {
    let xs: Vec<S> = concerns.iter().map(|k| k.c).collect();
    let ys = xs
        .iter()
        .map(|&c| epi_exponential(accuracy, c, tokens))
        .collect::<Result<Vec<_>, _>>()?;
    ols_fit(&xs, &ys).map(|(slope, _)| slope)
}

/// Index values of one technique across a set of concern levels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpiCurve<S> {
    pub technique: String,
    pub points: Vec<(CostConcern<S>, S)>,
    pub slope: S,
}

impl<S: Scalar> EpiCurve<S> {
    /// Builds the curve with points sorted by ascending weight.
    pub fn new(
        technique: impl Into<String>,
        summary: &TechniqueSummary<S>,
        concerns: &[CostConcern<S>],
    ) -> Result<Self, EpiError> {
        let mut sorted = concerns.to_vec();
        sorted.sort_by(|a, b| a.c.partial_cmp(&b.c).unwrap_or(Ordering::Equal));
        let points = sorted
            .iter()
            .map(|k| summary.epi(k.c).map(|v| (*k, v)))
            .collect::<Result<Vec<_>, _>>()?;
        let slope = ols_slope(summary.accuracy, summary.mean_tokens, &sorted)?;
        Ok(Self {
            technique: technique.into(),
            points,
            slope,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranked<S> {
    pub technique: String,
    pub score: S,
}

/// Orders techniques by exponential index at `c`, best first.
///
/// Ties go to the cheaper technique, then to the lexicographically smaller id.
pub fn rank_by_epi<S: Scalar, K: AsRef<str>>(
    entries: &[(K, TechniqueSummary<S>)],
    c: S,
) -> Result<Vec<Ranked<S>>, EpiError> {
    let mut scored = entries
        .iter()
        .map(|(id, s)| s.epi(c).map(|score| (id.as_ref(), s.mean_tokens, score)))
        .collect::<Result<Vec<_>, _>>()?;
    scored.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(Ordering::Equal)
            .then(a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal))
            .then(a.0.cmp(b.0))
    });
    Ok(scored
        .into_iter()
        .map(|(id, _, score)| Ranked {
            technique: id.to_owned(),
            score,
        })
        .collect())
}

/// Percent changes of a candidate relative to a named baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelativeDelta<S> {
    pub accuracy_pct: S,
    pub tokens_pct: S,
}

pub fn relative_delta<S: Scalar>(
    candidate: &TechniqueSummary<S>,
    baseline: &TechniqueSummary<S>,
) -> Result<RelativeDelta<S>, EpiError> {
    if baseline.accuracy == S::zero() {
        return Err(EpiError::ZeroBaseline("accuracy"));
    }
    if baseline.mean_tokens == S::zero() {
        return Err(EpiError::ZeroBaseline("token count"));
    }
    let hundred = S::lit(100.0);
    Ok(RelativeDelta {
        accuracy_pct: (candidate.accuracy / baseline.accuracy - S::one()) * hundred,
        tokens_pct: (candidate.mean_tokens / baseline.mean_tokens - S::one()) * hundred,
    })
}
