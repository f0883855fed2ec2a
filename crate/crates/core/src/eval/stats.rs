//! Paired significance tests over per-run metric values.
//!
//! Both tests report through [`TestOutcome`]: statistically degenerate
//! inputs (zero-variance differences, too few non-zero pairs) yield a
//! flagged [`TestOutcome::Degenerate`], never a NaN and never a panic.
//! Malformed inputs (length mismatch, too few runs to pair) are ordinary
//! errors.
//!
//! The distribution functions are self-contained: Student's t through the
//! continued-fraction regularized incomplete beta, the normal through a
//! series/continued-fraction complementary error function. Both carry
//! absolute error well below 1e-10 over the ranges used here, so reported
//! p-values are reference-grade to 1e-6 and beyond.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Result of one significance test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TestOutcome {
    /// The test ran; `p_value` is two-sided.
    Valid { statistic: f64, p_value: f64 },
    /// The inputs cannot support the test (e.g. identical runs). Carries
    /// the reason instead of a made-up number.
    Degenerate { reason: String },
}

impl TestOutcome {
    pub fn is_significant(&self, alpha: f64) -> bool {
        match self {
            TestOutcome::Valid { p_value, .. } => *p_value < alpha,
            TestOutcome::Degenerate { .. } => false,
        }
    }

    pub fn p_value(&self) -> Option<f64> {
        match self {
            TestOutcome::Valid { p_value, .. } => Some(*p_value),
            TestOutcome::Degenerate { .. } => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Special functions
// ---------------------------------------------------------------------------

/// Natural log of the gamma function (Lanczos approximation, g = 7).
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x).
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut sum = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        sum += c / (x + i as f64);
    }
    let base = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * base.ln() - base + sum.ln()
}

/// Continued fraction for the incomplete beta (Lentz's algorithm).
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // Use the fraction on whichever tail converges fast.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// Two-sided p for a t statistic with `df` degrees of freedom:
/// `P(|T| >= |t|) = I_{df/(df+t^2)}(df/2, 1/2)`.
fn t_two_sided_p(t: f64, df: f64) -> f64 {
    reg_inc_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Complementary error function: Maclaurin series of erf for small
/// arguments, Lentz continued fraction for the tail.
fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.0 {
        // erf(x) = 2/sqrt(pi) * sum (-1)^n x^(2n+1) / (n! (2n+1)).
        let x2 = x * x;
        let mut term = x;
        let mut sum = x;
        for n in 1..200 {
            let n = n as f64;
            term *= -x2 / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() < 1e-18 * sum.abs().max(1e-300) {
                break;
            }
        }
        1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum
    } else {
        // sqrt(pi) e^{x^2} erfc(x) = 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))):
        // evaluate f = x + K((n/2)/x) with modified Lentz, then invert.
        const TINY: f64 = 1e-300;
        let mut f = x;
        let mut c = x;
        let mut d = 0.0;
        for n in 1..300 {
            let an = n as f64 / 2.0;
            d = x + an * d;
            if d.abs() < TINY {
                d = TINY;
            }
            d = 1.0 / d;
            c = x + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            let del = c * d;
            f *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (-x * x).exp() / (std::f64::consts::PI.sqrt() * f)
    }
}

/// Standard normal survival function `P(Z >= z)`.
fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

// ---------------------------------------------------------------------------
// Paired t-test
// ---------------------------------------------------------------------------

/// Paired two-sided t-test on per-run differences `a[i] - b[i]`, with
/// `n - 1` degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TestOutcome> {
    if a.len() != b.len() {
        return Err(Error::Parameter(format!(
            "paired test over {} vs {} runs",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Parameter("paired t-test needs at least 2 runs".into()));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        let reason = if mean == 0.0 {
            "all paired differences are zero"
        } else {
            "paired differences have zero variance (constant shift)"
        };
        return Ok(TestOutcome::Degenerate { reason: reason.into() });
    }
    let t = mean / (var / n).sqrt();
    Ok(TestOutcome::Valid { statistic: t, p_value: t_two_sided_p(t, n - 1.0) })
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test
// ---------------------------------------------------------------------------

/// Average ranks of `values` (1-based; tied values share the mean of the
/// positions they span). Every rank is an exact multiple of 0.5.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("no NaNs in ranks"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i+1 ..= j+1 tie; their mean is ((i+1) + (j+1)) / 2.
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Exact two-sided p for the signed-rank statistic, by dynamic programming
/// over doubled ranks (doubling turns the half-integer average ranks into
/// integers, so ties cost nothing). `counts[s]` ends up as the number of
/// sign assignments whose doubled statistic is `s`; 2^n fits f64 exactly
/// for the n <= 25 this is used at.
fn wilcoxon_exact_p(doubled_ranks: &[u64], doubled_w: u64) -> f64 {
    let total: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        reach += r;
        for s in (0..=reach).rev() {
            if s >= r {
                counts[s] += counts[s - r];
            }
        }
    }
    let all: f64 = counts.iter().sum();
    let below: f64 = counts[..=(doubled_w as usize)].iter().sum();
    let above: f64 = counts[(doubled_w as usize)..].iter().sum();
    (2.0 * (below / all).min(above / all)).min(1.0)
}

/// Largest n for which the exact signed-rank distribution is tabulated;
/// beyond it the normal approximation (tie-corrected, with continuity
/// correction) takes over.
pub const WILCOXON_EXACT_LIMIT: usize = 25;

/// Wilcoxon signed-rank test on paired runs. Zero differences are
/// dropped; the statistic is the sum of ranks of positive differences.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<TestOutcome> {
    if a.len() != b.len() {
        return Err(Error::Parameter(format!(
            "paired test over {} vs {} runs",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Parameter("signed-rank test needs paired runs".into()));
    }
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|&x| x != 0.0)
        .collect();
    let n = d.len();
    if n < 5 {
        return Ok(TestOutcome::Degenerate {
            reason: format!("only {n} non-zero paired differences; the test needs at least 5"),
        });
    }
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks = average_ranks(&abs);
    // Work in doubled-rank integers so the statistic is exact.
    let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
    let doubled_w: u64 = doubled
        .iter()
        .zip(&d)
        .filter(|(_, &di)| di > 0.0)
        .map(|(&r, _)| r)
        .sum();
    let w = doubled_w as f64 / 2.0;

    let p = if n <= WILCOXON_EXACT_LIMIT {
        wilcoxon_exact_p(&doubled, doubled_w)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        // Tie-corrected variance: subtract half the sum of (t^3 - t) over
        // tie groups before the /24.
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).expect("no NaNs"));
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * (t * t - 1.0);
            i = j + 1;
        }
        let var = (nf * (nf + 1.0) * (2.0 * nf + 1.0) - 0.5 * tie_term) / 24.0;
        if var <= 0.0 {
            return Ok(TestOutcome::Degenerate {
                reason: "rank variance vanished (all differences tie)".into(),
            });
        }
        // Continuity correction pulls the statistic half a step toward
        // the mean.
        let z = (w - mean - 0.5 * (w - mean).signum()) / var.sqrt();
        (2.0 * normal_sf(z.abs())).min(1.0)
    };
    Ok(TestOutcome::Valid { statistic: w, p_value: p })
}
