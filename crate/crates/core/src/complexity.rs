//! Counting model for the combinatorial growth of candidate correspondences
//! in registration versus label configurations in segmentation.
//!
//! All counts are carried as base-10 logarithms; exact integers come only
//! from [`enumerate_small`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which candidate-set size is used per feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CandidateForm {
    /// `c = αN − 1` (a feature never pairs with itself).
    #[default]
    ExcludeSelf,
    /// `c = αN`, the form used in the longer appendix derivation.
    IncludeSelf,
}

impl FromStr for CandidateForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclude-self" => Ok(CandidateForm::ExcludeSelf),
            "include-self" => Ok(CandidateForm::IncludeSelf),
            other => Err(Error::invalid(format!(
                "unknown candidate form '{other}' (expected exclude-self or include-self)"
            ))),
        }
    }
}

impl fmt::Display for CandidateForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CandidateForm::ExcludeSelf => "exclude-self",
            CandidateForm::IncludeSelf => "include-self",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityScenario {
    pub h: usize,
    pub w: usize,
    /// Mean number of relationships per feature pair.
    pub alpha: f64,
    /// Label count for the segmentation comparison.
    pub labels: u32,
    pub form: CandidateForm,
}

impl ComplexityScenario {
    pub fn new(h: usize, w: usize, alpha: f64, labels: u32) -> Self {
        ComplexityScenario { h, w, alpha, labels, form: CandidateForm::ExcludeSelf }
    }

    /// A scenario with `n` features laid out as a single row.
    pub fn with_n(n: usize, alpha: f64, labels: u32) -> Self {
        Self::new(1, n, alpha, labels)
    }

    pub fn n(&self) -> usize {
        self.h * self.w
    }

    /// Candidate matches per feature.
    pub fn candidates(&self) -> f64 {
        let n = self.n() as f64;
        match self.form {
            CandidateForm::ExcludeSelf => self.alpha * n - 1.0,
            CandidateForm::IncludeSelf => self.alpha * n,
        }
    }

    fn check_alpha(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be positive and finite, got {}", self.alpha)));
        }
        Ok(())
    }

    fn checked_candidates(&self) -> Result<f64> {
        self.check_alpha()?;
        let c = self.candidates();
        if c < 1.0 {
            return Err(Error::invalid(format!(
                "candidate count {c} is below 1 for N={} and alpha={}; the count is undefined",
                self.n(),
                self.alpha
            )));
        }
        Ok(c)
    }

    fn checked_labels(&self) -> Result<u32> {
        if self.labels < 2 {
            return Err(Error::invalid(format!("need at least 2 labels, got {}", self.labels)));
        }
        Ok(self.labels)
    }
}

/// `log10 |H| = N·log10(c)`.
pub fn log_registration_complexity(s: &ComplexityScenario) -> Result<f64> {
    let c = s.checked_candidates()?;
    Ok(s.n() as f64 * c.log10())
}

/// `log10 |C| = N·log10(L)`.
pub fn log_segmentation_complexity(s: &ComplexityScenario) -> Result<f64> {
    let l = s.checked_labels()?;
    Ok(s.n() as f64 * (l as f64).log10())
}

/// `R = log(c) / log(L)`; the factor `N` cancels.
pub fn complexity_ratio(s: &ComplexityScenario) -> Result<f64> {
    let c = s.checked_candidates()?;
    let l = s.checked_labels()?;
    Ok(c.ln() / (l as f64).ln())
}

/// What to enumerate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Enumerated {
    /// One of `c` candidates per feature.
    Registration,
    /// One of `L` labels per feature.
    Segmentation,
}

/// Exhaustively walks every joint assignment of independent per-feature
/// choices and counts them. Rejected when the closed-form count exceeds
/// `max_count`.
pub fn enumerate_small(s: &ComplexityScenario, what: Enumerated, max_count: u64) -> Result<u64> {
    let n = s.n();
    let (choices, log10_count) = match what {
        Enumerated::Registration => {
            if n == 0 {
                s.check_alpha()?;
                return Ok(1);
            }
            let c = s.checked_candidates()?;
            if c.fract() != 0.0 {
                return Err(Error::invalid(format!("candidate count {c} is not an integer")));
            }
            (c as u64, n as f64 * c.log10())
        }
        Enumerated::Segmentation => {
            let l = s.checked_labels()?;
            (l as u64, n as f64 * (l as f64).log10())
        }
    };
    let exact = (choices as u128).checked_pow(n as u32);
    if exact.is_none_or(|v| v > max_count as u128) {
        return Err(Error::GuardExceeded { log10_count, max_count });
    }
    // odometer over n digits in 0..choices
    let mut digits = vec![0u64; n];
    let mut count = 0u64;
    loop {
        count += 1;
        let mut i = 0;
        loop {
            if i == n {
                return Ok(count);
            }
            digits[i] += 1;
            if digits[i] < choices {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
    }
}

/// Smallest `N ≥ 1` whose candidate count exceeds `L`, i.e. from which the
/// registration count is strictly larger than the segmentation count.
pub fn crossover_n(alpha: f64, labels: u32, form: CandidateForm) -> Result<usize> {
    let probe = ComplexityScenario { h: 1, w: 1, alpha, labels, form };
    probe.check_alpha()?;
    probe.checked_labels()?;
    let offset = match form {
        CandidateForm::ExcludeSelf => 1.0,
        CandidateForm::IncludeSelf => 0.0,
    };
    // αN − offset > L  ⇔  N > (L + offset)/α
    let mut n = (((labels as f64 + offset) / alpha).floor() as usize).max(1);
    let cands = |n: usize| ComplexityScenario { w: n, ..probe }.candidates();
    while cands(n) <= labels as f64 {
        n += 1;
    }
    while n > 1 && cands(n - 1) > labels as f64 {
        n -= 1;
    }
    Ok(n)
}

/// One row of the `analyze-complexity` sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub log10_h: f64,
    pub log10_c: f64,
    pub ratio: f64,
}

pub fn sweep(ns: &[usize], alpha: f64, labels: u32, form: CandidateForm) -> Result<Vec<SweepRow>> {
    ns.iter()
        .map(|&n| {
            let s = ComplexityScenario { form, ..ComplexityScenario::with_n(n, alpha, labels) };
            Ok(SweepRow {
                n,
                log10_h: log_registration_complexity(&s)?,
                log10_c: log_segmentation_complexity(&s)?,
                ratio: complexity_ratio(&s)?,
            })
        })
        .collect()
}

/// Relationship counts with and without the dynamic mechanisms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReductionReport {
    /// `|D|·|A|`.
    pub dynamic: f64,
    /// `|U|·|W|`.
    pub static_: f64,
    pub ratio: f64,
    /// Whether the dynamic count is strictly smaller.
    pub reduced: bool,
}

impl fmt::Display for ReductionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "dynamic {} vs static {} (ratio {:.3}){}",
            self.dynamic,
            self.static_,
            self.ratio,
            if self.reduced { "" } else { " - no strict reduction" }
        )
    }
}

pub fn dynamic_reduction_report(
    static_taps: u64,
    effective_taps: f64,
    static_relations: u64,
    effective_relations: f64,
) -> Result<ReductionReport> {
    for (name, v) in [("effective taps", effective_taps), ("effective relations", effective_relations)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
        }
    }
    if effective_taps > static_taps as f64 || effective_relations > static_relations as f64 {
        return Err(Error::invalid(format!(
            "effective counts ({effective_taps}, {effective_relations}) exceed static ones ({static_taps}, {static_relations})"
        )));
    }
    let static_ = (static_taps * static_relations) as f64;
    if static_ == 0.0 {
        return Err(Error::invalid("static relationship count is zero"));
    }
    let dynamic = effective_taps * effective_relations;
    Ok(ReductionReport { dynamic, static_, ratio: dynamic / static_, reduced: dynamic < static_ })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_values() {
        let s = ComplexityScenario::new(2, 2, 1.0, 2);
        assert!((log_registration_complexity(&s).unwrap() - 81f64.log10()).abs() < 1e-12);
        let s = ComplexityScenario::new(2, 3, 2.0, 2);
        assert!((log_registration_complexity(&s).unwrap() - 6.0 * 11f64.log10()).abs() < 1e-12);
        assert!(log_registration_complexity(&ComplexityScenario::new(1, 1, 1.0, 2)).is_err());
        let sup = ComplexityScenario { form: CandidateForm::IncludeSelf, ..ComplexityScenario::new(1, 1, 1.0, 2) };
        assert_eq!(log_registration_complexity(&sup).unwrap(), 0.0);
    }

    #[test]
    fn segmentation_values() {
        let s = ComplexityScenario::new(2, 2, 1.0, 2);
        assert!((log_segmentation_complexity(&s).unwrap() - 16f64.log10()).abs() < 1e-12);
        assert_eq!(log_segmentation_complexity(&ComplexityScenario::new(1, 1, 1.0, 10)).unwrap(), 1.0);
        let s = ComplexityScenario::new(3, 3, 1.0, 3);
        assert!((log_segmentation_complexity(&s).unwrap() - 9.0 * 3f64.log10()).abs() < 1e-12);
        assert!(log_segmentation_complexity(&ComplexityScenario::new(2, 2, 1.0, 1)).is_err());
    }

    #[test]
    fn ratio_values() {
        assert!((complexity_ratio(&ComplexityScenario::with_n(5, 1.0, 2)).unwrap() - 2.0).abs() < 1e-15);
        assert!((complexity_ratio(&ComplexityScenario::with_n(8, 1.0, 7)).unwrap() - 1.0).abs() < 1e-15);
        let r10 = complexity_ratio(&ComplexityScenario::with_n(10, 1.0, 4)).unwrap();
        let r100 = complexity_ratio(&ComplexityScenario::with_n(100, 1.0, 4)).unwrap();
        assert!(r100 > r10);
    }

    #[test]
    fn enumeration_counts() {
        let s = ComplexityScenario::new(2, 2, 1.0, 2);
        assert_eq!(enumerate_small(&s, Enumerated::Registration, 1_000).unwrap(), 81);
        assert_eq!(enumerate_small(&ComplexityScenario::with_n(3, 1.0, 2), Enumerated::Segmentation, 100).unwrap(), 8);
        assert_eq!(enumerate_small(&ComplexityScenario::new(0, 0, 1.0, 2), Enumerated::Registration, 1).unwrap(), 1);
        assert_eq!(enumerate_small(&ComplexityScenario::new(0, 3, 1.0, 5), Enumerated::Segmentation, 1).unwrap(), 1);
    }

    #[test]
    fn enumeration_guard_reports_closed_form() {
        let s = ComplexityScenario::new(3, 3, 1.0, 2);
        match enumerate_small(&s, Enumerated::Registration, 1_000_000) {
            Err(Error::GuardExceeded { log10_count, max_count }) => {
                assert!((log10_count - 9.0 * 8f64.log10()).abs() < 1e-12);
                assert_eq!(max_count, 1_000_000);
            }
            other => panic!("expected guard error, got {other:?}"),
        }
        let frac = ComplexityScenario::with_n(3, 0.5, 2);
        assert!(enumerate_small(&frac, Enumerated::Registration, 1_000).is_err());
    }

    #[test]
    fn crossover() {
        // α=1, L=4: c = N − 1 > 4 first at N = 6
        assert_eq!(crossover_n(1.0, 4, CandidateForm::ExcludeSelf).unwrap(), 6);
        assert_eq!(crossover_n(1.0, 4, CandidateForm::IncludeSelf).unwrap(), 5);
        assert_eq!(crossover_n(2.5, 2, CandidateForm::ExcludeSelf).unwrap(), 2);
        for (alpha, l) in [(1.0, 2), (0.3, 10), (4.0, 3)] {
            let n = crossover_n(alpha, l, CandidateForm::ExcludeSelf).unwrap();
            let above = ComplexityScenario::with_n(n, alpha, l);
            assert!(log_registration_complexity(&above).unwrap() > log_segmentation_complexity(&above).unwrap());
            if n > 1 {
                let below = ComplexityScenario::with_n(n - 1, alpha, l);
                let reg = log_registration_complexity(&below).map_or(f64::NEG_INFINITY, |v| v);
                assert!(reg <= log_segmentation_complexity(&below).unwrap());
            }
        }
    }

    #[test]
    fn reduction_reports() {
        let r = dynamic_reduction_report(9, 9.0, 9, 9.0).unwrap();
        assert_eq!(r.ratio, 1.0);
        assert!(!r.reduced);
        let r = dynamic_reduction_report(9, 4.0, 9, 3.0).unwrap();
        assert_eq!((r.dynamic, r.static_), (12.0, 81.0));
        assert!((r.ratio - 0.148).abs() < 1e-3);
        assert!(r.reduced);
        assert_eq!(dynamic_reduction_report(9, 0.0, 9, 0.0).unwrap().ratio, 0.0);
        assert!(dynamic_reduction_report(9, -1.0, 9, 3.0).is_err());
        assert!(dynamic_reduction_report(9, 10.0, 9, 3.0).is_err());
    }
}
