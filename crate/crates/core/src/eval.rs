//! Balanced accuracy and the one-sample one-sided t-test against chance.

use crate::error::{Error, Result};

/// Per-class hit and miss tallies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub hits: Vec<usize>,
    pub misses: Vec<usize>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        ConfusionCounts { hits: vec![0; classes], misses: vec![0; classes] }
    }

    pub fn from_predictions(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::shape(format!("{} predictions for {} labels", predictions.len(), labels.len())));
        }
        let mut c = ConfusionCounts::new(classes);
        for (&p, &y) in predictions.iter().zip(labels) {
            c.record(p, y)?;
        }
        Ok(c)
    }

    pub fn record(&mut self, prediction: usize, label: usize) -> Result<()> {
        let k = self.hits.len();
        if label >= k {
            return Err(Error::Index { index: label, size: k });
        }
        if prediction == label {
            self.hits[label] += 1;
        } else {
            self.misses[label] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (a, b) in self.hits.iter_mut().zip(&other.hits) {
            *a += b;
        }
        for (a, b) in self.misses.iter_mut().zip(&other.misses) {
            *a += b;
        }
    }

    pub fn total(&self) -> usize {
        self.hits.iter().sum::<usize>() + self.misses.iter().sum::<usize>()
    }

    /// Mean recall over the classes that occur.
    pub fn balanced_accuracy(&self) -> Result<f64> {
        let recalls: Vec<f64> = self
            .hits
            .iter()
            .zip(&self.misses)
            .filter(|(h, m)| **h + **m > 0)
            .map(|(&h, &m)| h as f64 / (h + m) as f64)
            .collect();
        if recalls.is_empty() {
            return Err(Error::Empty("no labels to score".into()));
        }
        Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
    }
}

pub fn balanced_accuracy(predictions: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    ConfusionCounts::from_predictions(predictions, labels, classes)?.balanced_accuracy()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub mean: f64,
    pub sem: f64,
    pub n: usize,
    pub t: f64,
    pub df: usize,
    /// Upper-tail probability of a t this large under the chance-level mean.
    pub p: f64,
}

/// One-sample one-sided test of `mean > chance` from summary statistics.
pub fn t_test_from_summary(mean: f64, sem: f64, n: usize, chance: f64) -> Result<TTestResult> {
    if n < 2 {
        return Err(Error::Empty(format!("t-test needs at least two samples, got {n}")));
    }
    if !(sem > 0.0) {
        return Err(Error::Degenerate { bad: Vec::new() });
    }
    let t = (mean - chance) / sem;
    let df = n - 1;
    Ok(TTestResult { mean, sem, n, t, df, p: student_t_upper(t, df as f64) })
}

/// One-sample one-sided t-test of per-seed accuracies against `chance`, with the n-1 standard deviation.
pub fn t_test_vs_chance(values: &[f64], chance: f64) -> Result<TTestResult> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Empty(format!("t-test needs at least two samples, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    t_test_from_summary(mean, var.sqrt() / (n as f64).sqrt(), n, chance)
}

/// `P(T > t)` for Student's t with `df` degrees of freedom.
pub fn student_t_upper(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return if t > 0.0 { 0.0 } else { 1.0 };
    }
    let tail = 0.5 * regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5);
    if t >= 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Closed form of [`student_t_upper`] for two degrees of freedom.
pub fn student_t_upper_df2(t: f64) -> f64 {
    0.5 * (1.0 - t / (2.0 + t * t).sqrt())
}

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

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + 7.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

const CF_EPS: f64 = 1e-12;
const CF_TINY: f64 = 1e-300;
const CF_MAX_ITER: usize = 10_000;

/// Continued fraction for `I_x(a, b)` by the modified Lentz method.
fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < CF_TINY {
        d = CF_TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        d = if d.abs() < CF_TINY { CF_TINY } else { d };
        c = 1.0 + aa / c;
        c = if c.abs() < CF_TINY { CF_TINY } else { c };
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        d = if d.abs() < CF_TINY { CF_TINY } else { d };
        c = 1.0 + aa / c;
        c = if c.abs() < CF_TINY { CF_TINY } else { c };
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < CF_EPS {
            break;
        }
    }
    h
}

/// Regularised incomplete beta `I_x(a, b)` for `x` in `[0, 1]`.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(x, a, b) / a
    } else {
        1.0 - front * beta_cf(1.0 - x, b, a) / b
    }
}

/// One row of a results table: accuracy ± sem with its test against chance.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub label: String,
    pub test: TTestResult,
}

pub const RESULTS_HEADER: &str = "label,mean,sem,n,t,p";

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = format!("{RESULTS_HEADER}\n");
    for r in rows {
        let t = &r.test;
        s.push_str(&format!("{},{:.6},{:.6},{},{:.4},{:.3e}\n", r.label, t.mean, t.sem, t.n, t.t, t.p));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    #[test]
    fn balanced_accuracy_cases() {
        let y = [0, 0, 1, 1, 1];
        assert_eq!(balanced_accuracy(&y, &y, 2).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[1; 5], &y, 2).unwrap(), 0.5);
        // recalls 9/10 and 7/10
        let labels: Vec<usize> = [vec![0; 10], vec![1; 10]].concat();
        let mut pred = labels.clone();
        pred[0] = 1;
        for p in pred.iter_mut().skip(10).take(3) {
            *p = 0;
        }
        assert!((balanced_accuracy(&pred, &labels, 2).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(balanced_accuracy(&[], &[], 2), Err(Error::Empty(_))));
        assert!(matches!(balanced_accuracy(&[0], &[2], 2), Err(Error::Index { .. })));
        // absent class 2 is excluded
        assert_eq!(balanced_accuracy(&[0, 1], &[0, 1], 3).unwrap(), 1.0);
    }

    #[test]
    fn table_rows_reproduce() {
        let all = t_test_from_summary(0.6011, 0.0018, 3, 0.5).unwrap();
        assert!((all.t - 56.0).abs() < 1.0, "{}", all.t);
        assert!((all.p - 2e-4).abs() < 1e-4, "{}", all.p);
        let band = t_test_from_summary(0.5941, 0.0024, 3, 0.5).unwrap();
        assert!((band.t - 39.0).abs() < 1.0, "{}", band.t);
        let even = t_test_from_summary(0.5, 0.01, 3, 0.5).unwrap();
        assert_eq!((even.t, even.p), (0.0, 0.5));
    }

    #[test]
    fn sample_tests_use_n_minus_one() {
        let r = t_test_vs_chance(&[0.6, 0.7, 0.8], 0.5).unwrap();
        assert!((r.mean - 0.7).abs() < 1e-15);
        assert!((r.sem - 0.1 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.df, 2);
        assert!(matches!(t_test_vs_chance(&[0.6, 0.6, 0.6], 0.5), Err(Error::Degenerate { .. })));
        assert!(matches!(t_test_vs_chance(&[0.6], 0.5), Err(Error::Empty(_))));
    }

    #[test]
    fn df2_closed_form_agrees() {
        for i in 0..=10_000 {
            let t = i as f64 * 0.01;
            let (a, b) = (student_t_upper(t, 2.0), student_t_upper_df2(t));
            assert!((a - b).abs() < 1e-10, "t = {t}: {a} vs {b}");
        }
    }

    #[test]
    fn matches_statrs_across_df() {
        for df in [1.0, 2.0, 3.0, 5.0, 9.0, 29.0, 200.0] {
            let d = StudentsT::new(0.0, 1.0, df).unwrap();
            for t in [-8.0, -2.5, -0.3, 0.0, 0.7, 1.9, 4.0, 12.0, 60.0] {
                let want = d.sf(t);
                let got = student_t_upper(t, df);
                assert!((got - want).abs() < 1e-10 * want.max(1e-3), "df {df} t {t}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
        assert!((ln_gamma(10.0) - 362_880f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let row = ResultRow { label: "all".into(), test: t_test_from_summary(0.6011, 0.0018, 3, 0.5).unwrap() };
        let csv = results_csv(&[row]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], RESULTS_HEADER);
        assert!(lines[1].starts_with("all,0.601100,0.001800,3,56.1667,"));
    }

    proptest! {
        #[test]
        fn duplicating_a_class_keeps_balanced_accuracy(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..60)) {
            let (pred, labels): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let base = balanced_accuracy(&pred, &labels, 3).unwrap();
            let (mut p2, mut l2) = (pred.clone(), labels.clone());
            for (p, l) in pairs.iter().filter(|(_, l)| *l == labels[0]) {
                p2.push(*p);
                l2.push(*l);
            }
            prop_assert!((balanced_accuracy(&p2, &l2, 3).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn t_is_antisymmetric(mean in 0.0f64..1.0, sem in 0.001f64..0.2, n in 2usize..12) {
            let up = t_test_from_summary(0.5 + mean, sem, n, 0.5).unwrap();
            let down = t_test_from_summary(0.5 - mean, sem, n, 0.5).unwrap();
            prop_assert!((up.t + down.t).abs() < 1e-12);
            prop_assert!((up.p - (1.0 - down.p)).abs() < 1e-12);
        }
    }
}
