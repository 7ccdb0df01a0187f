//! Significance tests: pooled two-proportion z-test on accuracy, paired
//! t-test on per-question token cost, and the all-models conjunction rule.
//!
//! Tail probabilities come from the regularized incomplete gamma and beta
//! functions implemented here (series plus Lentz continued fractions).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Significance level used throughout reports.
pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("pooled proportion is {0}; the z statistic has zero variance")]
    DegenerateProportion(f64),
    #[error("paired test needs at least 2 observations, got {0}")]
    TooFewPairs(usize),
    #[error("paired differences have zero variance")]
    ZeroVariance,
    #[error("pairing mismatch: ids only on one side: {0:?}")]
    Pairing(Vec<String>),
    #[error("no per-model results to combine")]
    NoResults,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult<S> {
    pub statistic: S,
    pub p_value: S,
    pub alpha: S,
    pub significant: bool,
}

impl<S: Scalar> TestResult<S> {
    fn new(statistic: S, p_value: S) -> Self {
        let p_value = p_value.max(S::zero()).min(S::one());
        let alpha = S::lit(ALPHA);
        Self {
            statistic,
            p_value,
            alpha,
            significant: p_value < alpha,
        }
    }
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma<S: Scalar>(x: S) -> S {
    let half = S::lit(0.5);
    if x < half {
        // reflection
        let pi = S::PI();
        return (pi / (pi * x).sin()).ln() - ln_gamma(S::one() - x);
    }
    let x = x - S::one();
    let mut acc = S::lit(LANCZOS[0]);
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += S::lit(c) / (x + S::from_count(i));
    }
    let t = x + S::lit(LANCZOS_G) + half;
    S::lit(0.5 * (2.0 * std::f64::consts::PI).ln()) + (x + half) * t.ln() - t + acc.ln()
}

const MAX_ITER: usize = 500;

fn eps<S: Scalar>() -> S {
    S::epsilon() * S::lit(4.0)
}

fn tiny<S: Scalar>() -> S {
    S::min_positive_value() / S::epsilon()
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn gamma_q<S: Scalar>(a: S, x: S) -> S {
    if x <= S::zero() {
        return S::one();
    }
    let ln_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + S::one() {
        // series for P, then complement
        let mut sum = S::one() / a;
        let mut term = sum;
        let mut ap = a;
        for _ in 0..MAX_ITER {
            ap += S::one();
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * eps() {
                break;
            }
        }
        S::one() - sum * ln_prefix.exp()
    } else {
        // Lentz continued fraction for Q
        let mut b = x + S::one() - a;
        let mut c = S::one() / tiny::<S>();
        let mut d = S::one() / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let fi = S::from_count(i);
            let an = -fi * (fi - a);
            b += S::lit(2.0);
            d = an * d + b;
            if d.abs() < tiny() {
                d = tiny();
            }
            c = b + an / c;
            if c.abs() < tiny() {
                c = tiny();
            }
            d = S::one() / d;
            let delta = d * c;
            h *= delta;
            if (delta - S::one()).abs() < eps() {
                break;
            }
        }
        ln_prefix.exp() * h
    }
}

/// Complementary error function.
pub fn erfc<S: Scalar>(x: S) -> S {
    let q = gamma_q(S::lit(0.5), x * x);
    if x >= S::zero() {
        q
    } else {
        S::lit(2.0) - q
    }
}

fn beta_cf<S: Scalar>(a: S, b: S, x: S) -> S {
    let one = S::one();
    let qab = a + b;
    let qap = a + one;
    let qam = a - one;
    let mut c = one;
    let mut d = one - qab * x / qap;
    if d.abs() < tiny() {
        d = tiny();
    }
    d = one / d;
    let mut h = d;
    for m in 1..MAX_ITER {
        let m = S::from_count(m);
        let m2 = m + m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = one + aa * d;
        if d.abs() < tiny() {
            d = tiny();
        }
        c = one + aa / c;
        if c.abs() < tiny() {
            c = tiny();
        }
        d = one / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = one + aa * d;
        if d.abs() < tiny() {
            d = tiny();
        }
        c = one + aa / c;
        if c.abs() < tiny() {
            c = tiny();
        }
        d = one / d;
        let delta = d * c;
        h *= delta;
        if (delta - one).abs() < eps() {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn beta_inc<S: Scalar>(a: S, b: S, x: S) -> S {
    if x <= S::zero() {
        return S::zero();
    }
    if x >= S::one() {
        return S::one();
    }
    let one = S::one();
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (one - x).ln();
    let front = ln_front.exp();
    if x < (a + one) / (a + b + S::lit(2.0)) {
        front * beta_cf(a, b, x) / a
    } else {
        one - front * beta_cf(b, a, one - x) / b
    }
}

/// `P(|Z| >= |z|)` for a standard normal `Z`.
pub fn normal_two_tailed<S: Scalar>(z: S) -> S {
    erfc(z.abs() / S::SQRT_2())
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn t_two_tailed<S: Scalar>(t: S, df: S) -> S {
    beta_inc(df / S::lit(2.0), S::lit(0.5), df / (df + t * t))
}

/// Pooled two-proportion z-test of `x1/n1` against `x2/n2`, two-tailed.
pub fn two_proportion_z<S: Scalar>(
    x1: u64,
    n1: u64,
    x2: u64,
    n2: u64,
) -> Result<TestResult<S>, StatsError> {
    if n1 == 0 || n2 == 0 || x1 > n1 || x2 > n2 {
        return Err(StatsError::InvalidCounts(format!("{x1}/{n1} vs {x2}/{n2}")));
    }
    let f = |v: u64| S::lit(v as f64);
    let pooled = f(x1 + x2) / f(n1 + n2);
    if x1 + x2 == 0 || x1 + x2 == n1 + n2 {
        return Err(StatsError::DegenerateProportion(pooled.to_f64_lossy()));
    }
    let se = (pooled * (S::one() - pooled) * (S::one() / f(n1) + S::one() / f(n2))).sqrt();
    let z = (f(x1) / f(n1) - f(x2) / f(n2)) / se;
    Ok(TestResult::new(z, normal_two_tailed(z)))
}

/// Paired t-test on per-question differences, two-tailed with `n - 1`
/// degrees of freedom.
pub fn paired_t<S: Scalar>(diffs: &[S]) -> Result<TestResult<S>, StatsError> {
    let n = diffs.len();
    if n < 2 {
        return Err(StatsError::TooFewPairs(n));
    }
    let nf = S::from_count(n);
    let mean = diffs.iter().fold(S::zero(), |a, &d| a + d) / nf;
    let ss = diffs
        .iter()
        .fold(S::zero(), |a, &d| a + (d - mean) * (d - mean));
    let sd = (ss / (nf - S::one())).sqrt();
    if sd == S::zero() {
        return Err(StatsError::ZeroVariance);
    }
    let t = mean / (sd / nf.sqrt());
    Ok(TestResult::new(t, t_two_tailed(t, nf - S::one())))
}

/// Differences `first[id] - second[id]` over ids present in both maps, which
/// must share the same id set.
pub fn paired_differences<S: Scalar>(
    first: &BTreeMap<String, S>,
    second: &BTreeMap<String, S>,
) -> Result<Vec<S>, StatsError> {
    let unmatched: Vec<String> = first
        .keys()
        .filter(|k| !second.contains_key(*k))
        .chain(second.keys().filter(|k| !first.contains_key(*k)))
        .cloned()
        .collect();
    if !unmatched.is_empty() {
        return Err(StatsError::Pairing(unmatched));
    }
    Ok(first.iter().map(|(k, &v)| v - second[k]).collect())
}

/// Significant only when significant for every model.
pub fn all_models_significant<S: Scalar>(results: &[TestResult<S>]) -> Result<bool, StatsError> {
    if results.is_empty() {
        return Err(StatsError::NoResults);
    }
    Ok(results.iter().all(|r| r.significant))
}

/// The two entries with the largest values, ties broken by ascending key.
/// The flag is set when the runner-up tied with the next entry, i.e. the
/// pair was decided by the tie-break.
pub fn top_two<K: Ord + Clone, S: Scalar>(items: &[(K, S)]) -> Option<(K, K, bool)> {
    if items.len() < 2 {
        return None;
    }
    let mut sorted: Vec<&(K, S)> = items.iter().collect();
    sorted.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    let tie = sorted.len() > 2 && sorted[1].1 == sorted[2].1;
    Some((sorted[0].0.clone(), sorted[1].0.clone(), tie))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn special_functions_match_reference_values() {
        assert_abs_diff_eq!(ln_gamma(0.5f64), 0.5723649429247, epsilon = 1e-12);
        assert_abs_diff_eq!(ln_gamma(10.0f64), 12.801827480081469, epsilon = 1e-11);
        assert_abs_diff_eq!(
            beta_inc(2.5f64, 0.5, 0.3),
            0.018927124071945658,
            epsilon = 1e-13
        );
        assert_abs_diff_eq!(erfc(0.7f64), 0.3221988061625817, epsilon = 1e-14);
        assert_abs_diff_eq!(erfc(-0.7f64), 2.0 - 0.3221988061625817, epsilon = 1e-14);
        assert_abs_diff_eq!(
            t_two_tailed(2.0f64, 1.0),
            0.2951672353008664,
            epsilon = 1e-13
        );
        assert_abs_diff_eq!(
            t_two_tailed(0.5f64, 30.0),
            0.6207230048851273,
            epsilon = 1e-13
        );
        assert_abs_diff_eq!(
            normal_two_tailed(3.0f64),
            0.0026997960632601866,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            normal_two_tailed(8.0f64),
            1.244192114854348e-15,
            epsilon = 1e-20
        );
    }

    #[test]
    fn z_test_examples() {
        let r = two_proportion_z::<f64>(88, 100, 79, 100).unwrap();
        assert_abs_diff_eq!(r.statistic, 1.7145189980473277, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p_value, 0.08643345100755233, epsilon = 1e-12);
        assert!(!r.significant);

        let r = two_proportion_z::<f64>(50, 100, 50, 100).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));

        let r = two_proportion_z::<f64>(100, 100, 0, 100).unwrap();
        assert_abs_diff_eq!(r.statistic, 14.142135623730951, epsilon = 1e-12);
        assert!(r.p_value < 1e-40 && r.significant);

        let r = two_proportion_z::<f64>(30, 50, 10, 40).unwrap();
        assert_abs_diff_eq!(r.p_value, 0.0008989127881140897, epsilon = 1e-12);
    }

    #[test]
    fn z_test_errors() {
        assert_eq!(
            two_proportion_z::<f64>(0, 10, 0, 20),
            Err(StatsError::DegenerateProportion(0.0))
        );
        assert_eq!(
            two_proportion_z::<f64>(10, 10, 20, 20),
            Err(StatsError::DegenerateProportion(1.0))
        );
        assert!(matches!(
            two_proportion_z::<f64>(11, 10, 1, 20),
            Err(StatsError::InvalidCounts(_))
        ));
        assert!(two_proportion_z::<f64>(0, 0, 1, 20).is_err());
    }

    #[test]
    fn paired_t_examples() {
        let r = paired_t(&[10.0f64, 12.0, 8.0, 11.0, 9.0]).unwrap();
        assert_abs_diff_eq!(r.statistic, 14.142135623730951, epsilon = 1e-10);
        assert_abs_diff_eq!(r.p_value, 0.00014512817061319765, epsilon = 1e-12);
        assert!(r.significant);

        let r = paired_t(&[1.5f64, -0.3, 2.2, 0.4]).unwrap();
        assert_abs_diff_eq!(r.statistic, 1.7039616353344607, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p_value, 0.18693686416588273, epsilon = 1e-12);

        let r = paired_t(&[-5.0f64, 5.0, -5.0, 5.0]).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));

        assert_eq!(paired_t(&[0.0f64; 6]), Err(StatsError::ZeroVariance));
        assert_eq!(paired_t(&[3.0f64; 6]), Err(StatsError::ZeroVariance));
        assert_eq!(paired_t(&[1.0f64]), Err(StatsError::TooFewPairs(1)));
    }

    #[test]
    fn pairing_by_question_id() {
        let a: BTreeMap<String, f64> = [("q1", 10.0), ("q2", 7.0)]
            .map(|(k, v)| (k.into(), v))
            .into();
        let b: BTreeMap<String, f64> = [("q1", 4.0), ("q2", 9.0)]
            .map(|(k, v)| (k.into(), v))
            .into();
        assert_eq!(paired_differences(&a, &b).unwrap(), vec![6.0, -2.0]);
        let c: BTreeMap<String, f64> = [("q1", 4.0), ("q3", 9.0)]
            .map(|(k, v)| (k.into(), v))
            .into();
        assert_eq!(
            paired_differences(&a, &c),
            Err(StatsError::Pairing(vec!["q2".into(), "q3".into()]))
        );
    }

    #[test]
    fn conjunction_rule() {
        let sig = TestResult::new(2.5f64, 0.01);
        let not = TestResult::new(1.0f64, 0.3);
        assert!(all_models_significant(&[sig; 10]).unwrap());
        let mut nine = vec![sig; 9];
        nine.push(not);
        assert!(!all_models_significant(&nine).unwrap());
        assert!(all_models_significant(&[sig]).unwrap());
        assert_eq!(
            all_models_significant::<f64>(&[]),
            Err(StatsError::NoResults)
        );
        // boundary: p == alpha is not significant
        assert!(!TestResult::new(1.96f64, 0.05).significant);
    }

    #[test]
    fn top_two_selection() {
        let items = [("cot", 0.89), ("sc", 0.95), ("thot", 0.89), ("s2a", 0.68)];
        assert_eq!(top_two(&items), Some(("sc", "cot", true)));
        let items = [("a", 3.0), ("b", 2.0), ("c", 1.0)];
        assert_eq!(top_two(&items), Some(("a", "b", false)));
        assert_eq!(top_two(&[("a", 1.0)]), None);
    }

    #[test]
    fn single_precision_tails() {
        let p = normal_two_tailed(1.959964f32);
        assert!((p - 0.05).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn z_antisymmetric(n1 in 1u64..300, n2 in 1u64..300, f1 in 0.0f64..=1.0, f2 in 0.0f64..=1.0) {
            let x1 = (f1 * n1 as f64) as u64;
            let x2 = (f2 * n2 as f64) as u64;
            let (Ok(a), Ok(b)) = (two_proportion_z::<f64>(x1, n1, x2, n2), two_proportion_z::<f64>(x2, n2, x1, n1)) else {
                return Ok(());
            };
            prop_assert_eq!(a.statistic, -b.statistic);
            prop_assert_eq!(a.p_value, b.p_value);
            prop_assert!((0.0..=1.0).contains(&a.p_value));
        }

        #[test]
        fn t_sign_symmetric(diffs in proptest::collection::vec(-500.0f64..500.0, 2..40)) {
            let neg: Vec<f64> = diffs.iter().map(|d| -d).collect();
            if let (Ok(a), Ok(b)) = (paired_t(&diffs), paired_t(&neg)) {
                prop_assert!((a.statistic + b.statistic).abs() <= 1e-12 * a.statistic.abs().max(1.0));
                prop_assert!((a.p_value - b.p_value).abs() < 1e-15);
                prop_assert!((0.0..=1.0).contains(&a.p_value));
            }
        }
    }
}
