//! Annotation statistics: Fleiss' kappa over rater count matrices, the
//! pessimistic majority vote, and the paired two-sided Student test with a
//! continued-fraction t CDF good to 1e-8.

use serde::{Deserialize, Serialize};

use crate::corpus::pathology::PathologyLabel;
use crate::error::{Error, Result};

/// Coarse annotation verdict used by human-protocol analogs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Error,
    Hallucination,
}

impl From<PathologyLabel> for Verdict {
    fn from(label: PathologyLabel) -> Self {
        if label.is_hallucination() {
            Verdict::Hallucination
        } else if label == PathologyLabel::Correct {
            Verdict::Correct
        } else {
            Verdict::Error
        }
    }
}

/// Strict majority of three; a three-way split is pessimistically a
/// hallucination.
pub fn majority_vote(votes: [Verdict; 3]) -> Verdict {
    for v in votes {
        if votes.iter().filter(|&&x| x == v).count() >= 2 {
            return v;
        }
    }
    Verdict::Hallucination
}

/// Fleiss' kappa over an items x categories count matrix. Returns None when
/// expected agreement is 1 (every rating in one category), where kappa is
/// undefined.
pub fn fleiss_kappa(counts: &[Vec<usize>], raters: usize) -> Result<Option<f64>> {
    if counts.is_empty() || raters < 2 {
        return Err(Error::invalid("need at least one item and two raters"));
    }
    let cats = counts[0].len();
    if cats < 1 {
        return Err(Error::invalid("need at least one category"));
    }
    for (i, row) in counts.iter().enumerate() {
        if row.len() != cats {
            return Err(Error::Shape(format!("item {i} has {} categories, not {cats}", row.len())));
        }
        if row.iter().sum::<usize>() != raters {
            return Err(Error::invalid(format!(
                "item {i} has {} ratings, expected {raters}",
                row.iter().sum::<usize>()
            )));
        }
    }
    let n = counts.len() as f64;
    let r = raters as f64;
    let p_bar: f64 = counts
        .iter()
        .map(|row| {
            let sq: usize = row.iter().map(|&c| c * c).sum();
            (sq as f64 - r) / (r * (r - 1.0))
        })
        .sum::<f64>()
        / n;
    let pe: f64 = (0..cats)
        .map(|j| {
            let total: usize = counts.iter().map(|row| row[j]).sum();
            let share = total as f64 / (n * r);
            share * share
        })
        .sum();
    if (1.0 - pe).abs() < 1e-12 {
        return Ok(None);
    }
    Ok(Some((p_bar - pe) / (1.0 - pe)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub degrees: usize,
}

/// Paired two-sided Student test on the differences a - b.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Shape("paired samples differ in length".into()));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("need at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let degrees = n - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, degrees }
        } else {
            TTest { t: mean.signum() * f64::INFINITY, p: 0.0, degrees }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let p = student_two_sided_p(t, degrees as f64);
    Ok(TTest { t, p, degrees })
}

/// Two-sided p-value: I_{v/(v+t^2)}(v/2, 1/2).
pub fn student_two_sided_p(t: f64, df: f64) -> f64 {
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

/// Regularized incomplete beta I_x(a, b) via the Lentz continued fraction.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!((0.0..=1.0).contains(&x), "x out of range");
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let front =
        (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    // The continued fraction converges fast for x < (a+1)/(a+b+2); use the
    // symmetry I_x(a,b) = 1 - I_{1-x}(b,a) otherwise.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - incomplete_beta(b, a, 1.0 - x)
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-14;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..300 {
        let m = m as f64;
        // Even step.
        let num = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
        d = 1.0 + num * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + num / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // Odd step.
        let num = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
        d = 1.0 + num * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + num / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation, g = 7.
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_vote_rules() {
        use Verdict::*;
        assert_eq!(majority_vote([Correct, Correct, Error]), Correct);
        assert_eq!(majority_vote([Correct, Error, Hallucination]), Hallucination);
        assert_eq!(majority_vote([Hallucination, Hallucination, Correct]), Hallucination);
        assert_eq!(majority_vote([Error, Error, Error]), Error);
    }

    #[test]
    fn verdict_coarsening() {
        use PathologyLabel::*;
        assert_eq!(Verdict::from(Correct), Verdict::Correct);
        assert_eq!(Verdict::from(Error), Verdict::Error);
        assert_eq!(Verdict::from(Undertranslation), Verdict::Error);
        assert_eq!(Verdict::from(StronglyDetached), Verdict::Hallucination);
        assert_eq!(Verdict::from(Oscillatory), Verdict::Hallucination);
        assert_eq!(Verdict::from(FullyDetached), Verdict::Hallucination);
    }

    #[test]
    fn fleiss_perfect_agreement() {
        let k = fleiss_kappa(&[vec![2, 0], vec![0, 2]], 2).unwrap();
        assert!((k.unwrap() - 1.0).abs() < 1e-12);
        let k = fleiss_kappa(&[vec![3, 0, 0], vec![0, 3, 0], vec![0, 0, 3]], 3).unwrap();
        assert!((k.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fleiss_matches_direct_formula() {
        // Independent recomputation of the textbook quantities.
        let counts = vec![vec![1, 2, 0], vec![0, 1, 2], vec![3, 0, 0]];
        let raters = 3usize;
        let got = fleiss_kappa(&counts, raters).unwrap().unwrap();
        let n = counts.len() as f64;
        let r = raters as f64;
        let mut p_bar = 0.0;
        for row in &counts {
            let mut agree = 0.0;
            for &c in row {
                agree += (c * c) as f64;
            }
            p_bar += (agree - r) / (r * (r - 1.0));
        }
        p_bar /= n;
        let mut pe = 0.0;
        for j in 0..3 {
            let col: usize = counts.iter().map(|row| row[j]).sum();
            pe += (col as f64 / (n * r)).powi(2);
        }
        let want = (p_bar - pe) / (1.0 - pe);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn fleiss_degenerate_and_invalid() {
        assert_eq!(fleiss_kappa(&[vec![2, 0], vec![2, 0]], 2).unwrap(), None);
        assert!(fleiss_kappa(&[vec![1, 0]], 2).is_err());
        assert!(fleiss_kappa(&[], 2).is_err());
    }

    #[test]
    fn fleiss_invariant_under_category_permutation() {
        let counts = vec![vec![1, 2, 0], vec![0, 1, 2], vec![2, 1, 0], vec![1, 1, 1]];
        let permuted: Vec<Vec<usize>> =
            counts.iter().map(|r| vec![r[2], r[0], r[1]]).collect();
        let a = fleiss_kappa(&counts, 3).unwrap().unwrap();
        let b = fleiss_kappa(&permuted, 3).unwrap().unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn t_test_trivial_cases() {
        let r = paired_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
        let r = paired_t_test(&[2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(r.t.is_infinite() && r.t > 0.0);
        assert!(r.p < 1e-12);
    }

    #[test]
    fn t_test_antisymmetry() {
        let a = [1.3, -0.2, 2.5, 0.8, 1.1];
        let b = [0.9, 0.4, 1.5, 0.2, 0.8];
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        assert!((ab.t + ba.t).abs() < 1e-12);
        assert!((ab.p - ba.p).abs() < 1e-12);
    }

    // Simpson integration of the t density, an implementation wholly
    // unrelated to the continued fraction above.
    fn p_by_quadrature(t: f64, df: f64) -> f64 {
        let norm = (ln_gamma((df + 1.0) / 2.0)
            - ln_gamma(df / 2.0)
            - 0.5 * (df * std::f64::consts::PI).ln())
        .exp();
        let density = |x: f64| norm * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
        let (lo, hi) = (t.abs(), t.abs() + 200.0);
        let steps = 4_000_000;
        let h = (hi - lo) / steps as f64;
        let mut acc = density(lo) + density(hi);
        for i in 1..steps {
            let x = lo + i as f64 * h;
            acc += density(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        2.0 * acc * h / 3.0
    }

    #[test]
    fn t_test_matches_independent_cdf() {
        let a = [1.0, -1.0, 2.0, 0.0, 1.0];
        let b = [0.0; 5];
        let r = paired_t_test(&a, &b).unwrap();
        let want = p_by_quadrature(r.t, 4.0);
        assert!((r.p - want).abs() < 1e-8, "{} vs {want}", r.p);
        assert_eq!(r.degrees, 4);
    }

    #[test]
    fn t_test_validation() {
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
    }
}
