//! Kuiper and log-rank tests between survival samples, plus the Bonferroni
//! threshold used to gate splits.
//!
//! The Kuiper statistic is computed on Kaplan-Meier curves over the union of
//! both curves' event times, so censoring is absorbed by the estimator. Its
//! asymptotic p-value uses the effective sample size
//! `n_a * n_b / (n_a + n_b)` built from *event* counts and Stephens'
//! correction `sqrt(N) + 0.155 + 0.24 / sqrt(N)`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::kaplan_meier::SurvivalCurve;
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Sample-size proxy fed into the p-value transform.
    pub effective_n: f64,
}

/// Below this argument the Kuiper tail series is 1 to within 1e-3.
const KUIPER_LAMBDA_FLOOR: f64 = 0.4;
const SERIES_EPS: f64 = 1e-12;
const SERIES_MAX_TERMS: u32 = 100;

/// Kuiper statistic `V = D+ + D-` between two survival curves.
pub fn kuiper_statistic(a: &SurvivalCurve, b: &SurvivalCurve) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (mut sa, mut sb) = (1.0_f64, 1.0_f64);
    let (mut d_plus, mut d_minus) = (0.0_f64, 0.0_f64);
    let (ta, tb) = (&a.event_times, &b.event_times);
    while i < ta.len() || j < tb.len() {
        let t = match (ta.get(i), tb.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        if i < ta.len() && ta[i] == t {
            sa = a.survival[i];
            i += 1;
        }
        if j < tb.len() && tb[j] == t {
            sb = b.survival[j];
            j += 1;
        }
        d_plus = d_plus.max(sa - sb);
        d_minus = d_minus.max(sb - sa);
    }
    d_plus + d_minus
}

fn effective_n(n_a: usize, n_b: usize) -> Result<f64> {
    if n_a == 0 || n_b == 0 {
        return Err(Error::InvalidEventCount { n_a, n_b });
    }
    let (a, b) = (n_a as f64, n_b as f64);
    Ok(a * b / (a + b))
}

fn kuiper_lambda(v: f64, ne: f64) -> f64 {
    let root = ne.sqrt();
    (root + 0.155 + 0.24 / root) * v
}

/// Kuiper tail probability `Q(λ) = 2 Σ_{j≥1} (4j²λ² − 1) exp(−2j²λ²)`.
pub fn kuiper_tail(lambda: f64) -> f64 {
    if lambda < KUIPER_LAMBDA_FLOOR {
        return 1.0;
    }
    let l2 = lambda * lambda;
    let mut sum = 0.0;
    for j in 1..=SERIES_MAX_TERMS {
        let jj = (j * j) as f64;
        let term = (4.0 * jj * l2 - 1.0) * (-2.0 * jj * l2).exp();
        sum += term;
        // the j = 1 term vanishes near λ = 0.5, so never stop there
        if j > 1 && term.abs() < SERIES_EPS {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Natural log of [`kuiper_tail`], accurate far into the tail where the
/// plain value underflows to zero.
pub fn kuiper_ln_tail(lambda: f64) -> f64 {
    if lambda < 1.0 {
        return kuiper_tail(lambda).ln();
    }
    // factor exp(-2λ²) out of every term
    let l2 = lambda * lambda;
    let mut sum = 0.0;
    for j in 1..=SERIES_MAX_TERMS {
        let jj = (j * j) as f64;
        let term = (4.0 * jj * l2 - 1.0) * (-2.0 * (jj - 1.0) * l2).exp();
        sum += term;
        if j > 1 && term.abs() < SERIES_EPS * sum {
            break;
        }
    }
    (std::f64::consts::LN_2 + sum.ln() - 2.0 * l2).min(0.0)
}

/// Asymptotic p-value of Kuiper statistic `v` for samples with `n_a` and
/// `n_b` observed events.
pub fn kuiper_pvalue(v: f64, n_a: usize, n_b: usize) -> Result<TestResult> {
    let ne = effective_n(n_a, n_b)?;
    Ok(TestResult {
        statistic: v,
        p_value: kuiper_tail(kuiper_lambda(v, ne)),
        effective_n: ne,
    })
}

/// Log of the [`kuiper_pvalue`] p-value. Used wherever p-values are ranked,
/// since strongly separated samples all underflow to `p = 0`.
pub fn kuiper_ln_pvalue(v: f64, n_a: usize, n_b: usize) -> Result<f64> {
    let ne = effective_n(n_a, n_b)?;
    Ok(kuiper_ln_tail(kuiper_lambda(v, ne)))
}

/// Kuiper test between two fitted curves, using their event counts.
pub fn kuiper_test(a: &SurvivalCurve, b: &SurvivalCurve) -> Result<TestResult> {
    kuiper_pvalue(kuiper_statistic(a, b), a.n_events, b.n_events)
}

/// Log-rank test output. `observed` and `expected` hold per-group death
/// counts; the chi-square statistic uses the first `g - 1` groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    pub test: TestResult,
    pub df: usize,
    pub observed: Vec<f64>,
    pub expected: Vec<f64>,
    /// Set when the covariance was singular and the statistic was reported as 0.
    pub degenerate: bool,
}

/// Log-rank test across `groups` of `(time, event)` observations.
pub fn logrank_test(groups: &[Vec<(f64, bool)>]) -> Result<LogRankResult> {
    let g = groups.len();
    if g < 2 {
        return Err(Error::TooFewGroups(g));
    }
    if let Some(empty) = groups.iter().position(Vec::is_empty) {
        return Err(Error::EmptyGroup(empty));
    }

    let mut pooled: Vec<(f64, bool, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(k, obs)| obs.iter().map(move |&(t, e)| (t, e, k)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total_deaths = pooled.iter().filter(|o| o.1).count();
    if total_deaths == 0 {
        return Err(Error::NoEvents);
    }

    let mut at_risk: Vec<f64> = groups.iter().map(|obs| obs.len() as f64).collect();
    let mut observed = vec![0.0; g];
    let mut expected = vec![0.0; g];
    let mut cov = vec![vec![0.0; g]; g];

    let mut start = 0;
    while start < pooled.len() {
        let t = pooled[start].0;
        let end = start + pooled[start..].partition_point(|o| o.0 == t);
        let mut deaths = vec![0.0; g];
        for o in &pooled[start..end] {
            if o.1 {
                deaths[o.2] += 1.0;
            }
        }
        let d: f64 = deaths.iter().sum();
        if d > 0.0 {
            let n: f64 = at_risk.iter().sum();
            for k in 0..g {
                observed[k] += deaths[k];
                expected[k] += d * at_risk[k] / n;
            }
            if n > 1.0 {
                let spread = d * (n - d) / (n - 1.0);
                for a in 0..g {
                    for b in 0..g {
                        let delta = if a == b { 1.0 } else { 0.0 };
                        cov[a][b] += spread * at_risk[a] / n * (delta - at_risk[b] / n);
                    }
                }
            }
        }
        for o in &pooled[start..end] {
            at_risk[o.2] -= 1.0;
        }
        start = end;
    }

    let df = g - 1;
    let diff: Vec<f64> = (0..df).map(|k| observed[k] - expected[k]).collect();
    let reduced: Vec<Vec<f64>> = cov[..df].iter().map(|row| row[..df].to_vec()).collect();
    let solved = linalg::solve(reduced, diff.clone(), 1e-12);

    let (statistic, p_value, degenerate) = match solved {
        Some(x) => {
            let chi2 = diff.iter().zip(&x).map(|(d, x)| d * x).sum::<f64>().max(0.0);
            (chi2, chi_square_sf(chi2, df), false)
        }
        None => (0.0, 1.0, true),
    };

    Ok(LogRankResult {
        test: TestResult {
            statistic,
            p_value,
            effective_n: total_deaths as f64,
        },
        df,
        observed,
        expected,
        degenerate,
    })
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df as f64).expect("df >= 1");
    dist.sf(x).clamp(0.0, 1.0)
}

/// Per-test significance level after a Bonferroni correction for `m` tests.
pub fn bonferroni_threshold(alpha: f64, m: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    if m == 0 {
        return Err(Error::InvalidCount);
    }
    Ok(alpha / m as f64)
}
