//! Evaluation of a clustering: log-rank test across clusters, Cox hazard
//! ratio between two clusters, and a classification task that predicts
//! whether a subject alive at `t0` is still alive at `t1` from its cluster
//! label alone.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterModel;
use crate::dataset::SurvivalDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::two_sample::logrank_test;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazardRatioResult {
    /// Log hazard ratio of group 1 relative to group 0.
    pub beta: f64,
    pub hazard_ratio: f64,
    pub std_err: f64,
    pub ci95: (f64, f64),
    pub iterations: usize,
    /// Newton iterations pushed `|beta|` past [`DIVERGENCE_BOUND`]; the
    /// groups are (quasi-)separated and the estimate is not finite.
    pub diverged: bool,
}

pub const DIVERGENCE_BOUND: f64 = 20.0;
const COX_TOL: f64 = 1e-10;
const COX_MAX_ITER: usize = 50;

struct PartialLikelihood {
    loglik: f64,
    score: f64,
    info: f64,
}

/// Breslow partial likelihood of a binary covariate. `sorted` is ascending
/// in time.
fn partial_likelihood(sorted: &[(f64, bool, bool)], beta: f64) -> PartialLikelihood {
    let n = sorted.len();
    // suffix sums over the risk set {time >= t}
    let mut s0 = vec![0.0; n + 1];
    let mut s1 = vec![0.0; n + 1];
    for i in (0..n).rev() {
        let x = sorted[i].2 as u8 as f64;
        let r = (beta * x).exp();
        s0[i] = s0[i + 1] + r;
        s1[i] = s1[i + 1] + x * r;
    }
    let (mut loglik, mut score, mut info) = (0.0, 0.0, 0.0);
    let mut start = 0;
    while start < n {
        let t = sorted[start].0;
        let end = start + sorted[start..].partition_point(|o| o.0 == t);
        let (mut d, mut xsum) = (0.0, 0.0);
        for o in &sorted[start..end] {
            if o.1 {
                d += 1.0;
                xsum += o.2 as u8 as f64;
            }
        }
        if d > 0.0 {
            let mean = s1[start] / s0[start];
            loglik += beta * xsum - d * s0[start].ln();
            score += xsum - d * mean;
            // x is binary, so S2 = S1
            info += d * (mean - mean * mean);
        }
        start = end;
    }
    PartialLikelihood { loglik, score, info }
}

/// Hazard ratio of group 1 against group 0 from a one-covariate Cox model,
/// fitted by Newton-Raphson with Breslow ties starting at `beta = 0`.
pub fn cox_hazard_ratio(samples: &[(f64, bool, bool)]) -> Result<HazardRatioResult> {
    if !samples.iter().any(|s| s.1) {
        return Err(Error::NoEvents);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut beta = 0.0;
    let mut current = partial_likelihood(&sorted, beta);
    let mut iterations = 0;
    let mut diverged = false;
    while iterations < COX_MAX_ITER {
        iterations += 1;
        if current.info <= 0.0 {
            break;
        }
        let mut step = current.score / current.info;
        let mut next = partial_likelihood(&sorted, beta + step);
        let mut halvings = 0;
        // halve only on a real decrease, not rounding noise near the optimum
        let slack = 1e-9 * (1.0 + current.loglik.abs());
        while next.loglik < current.loglik - slack && halvings < 30 {
            step /= 2.0;
            next = partial_likelihood(&sorted, beta + step);
            halvings += 1;
        }
        beta += step;
        current = next;
        if beta.abs() > DIVERGENCE_BOUND {
            diverged = true;
            break;
        }
        if step.abs() < COX_TOL {
            break;
        }
    }
    let std_err = if current.info > 0.0 {
        1.0 / current.info.sqrt()
    } else {
        f64::INFINITY
    };
    Ok(HazardRatioResult {
        beta,
        hazard_ratio: beta.exp(),
        std_err,
        ci95: ((beta - 1.96 * std_err).exp(), (beta + 1.96 * std_err).exp()),
        iterations,
        diverged,
    })
}

/// Eligible subject for the classification task and its outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    /// Index into `dataset.subjects`.
    pub index: usize,
    pub alive_at_t1: bool,
}

/// Labels subjects alive at `t0` (observed time strictly after `t0`) by
/// whether they are still alive at `t1`. Subjects censored inside
/// `(t0, t1)` have no determinable outcome and are left out.
pub fn survival_labels(dataset: &SurvivalDataset, t0: f64, t1: f64) -> Result<Vec<SurvivalLabel>> {
    if !(t0 > 0.0 && t1 > t0 && t1.is_finite()) {
        return Err(Error::InvalidHorizons { t0, t1 });
    }
    Ok(dataset
        .subjects
        .iter()
        .enumerate()
        .filter(|(_, s)| s.time > t0)
        .filter_map(|(index, s)| {
            let alive_at_t1 = if s.time >= t1 {
                true
            } else if s.event {
                false
            } else {
                return None;
            };
            Some(SurvivalLabel { index, alive_at_t1 })
        })
        .collect())
}

/// One-hot rows for cluster labels `0..k`.
pub fn one_hot(labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|&c| (0..k).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// Intercept first, then one weight per feature column.
    pub weights: Vec<f64>,
    pub iterations: usize,
}

pub const LOGISTIC_RIDGE: f64 = 1e-6;
const LOGISTIC_TOL: f64 = 1e-8;
const LOGISTIC_MAX_ITER: usize = 100;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl LogisticModel {
    fn linear(&self, x: &[f64]) -> f64 {
        self.weights[0] + x.iter().zip(&self.weights[1..]).map(|(a, w)| a * w).sum::<f64>()
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(self.linear(x))
    }

    fn penalized_loglik(&self, x: &[Vec<f64>], y: &[bool]) -> f64 {
        let ll: f64 = x
            .iter()
            .zip(y)
            .map(|(row, &label)| {
                let z = self.linear(row);
                if label {
                    -softplus(-z)
                } else {
                    -softplus(z)
                }
            })
            .sum();
        ll - 0.5 * LOGISTIC_RIDGE * self.weights[1..].iter().map(|w| w * w).sum::<f64>()
    }
}

/// Fits an intercept plus one weight per column of `x` by iteratively
/// reweighted least squares on the ridge-penalized log-likelihood.
pub fn logistic_fit(x: &[Vec<f64>], y: &[bool]) -> Result<LogisticModel> {
    if x.len() != y.len() {
        return Err(Error::InvalidConfig(format!(
            "{} feature rows but {} labels",
            x.len(),
            y.len()
        )));
    }
    if !y.iter().any(|&v| v) || !y.iter().any(|&v| !v) {
        return Err(Error::SingleClass);
    }
    let p = x.first().map_or(0, Vec::len) + 1;
    if x.iter().any(|row| row.len() + 1 != p) {
        return Err(Error::InvalidConfig("feature rows differ in length".into()));
    }

    let mut model = LogisticModel {
        weights: vec![0.0; p],
        iterations: 0,
    };
    let mut ll = model.penalized_loglik(x, y);
    for it in 1..=LOGISTIC_MAX_ITER {
        model.iterations = it;
        let mut grad = vec![0.0; p];
        let mut hess = vec![vec![0.0; p]; p];
        for (row, &label) in x.iter().zip(y) {
            let prob = model.predict_proba(row);
            let resid = label as u8 as f64 - prob;
            let w = prob * (1.0 - prob);
            let xi = |j: usize| if j == 0 { 1.0 } else { row[j - 1] };
            for a in 0..p {
                grad[a] += resid * xi(a);
                for b in a..p {
                    hess[a][b] += w * xi(a) * xi(b);
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                hess[a][b] = hess[b][a];
            }
            if a > 0 {
                grad[a] -= LOGISTIC_RIDGE * model.weights[a];
                hess[a][a] += LOGISTIC_RIDGE;
            }
        }
        let Some(step) = linalg::solve(hess, grad, 1e-300) else {
            break;
        };

        let mut scale = 1.0;
        let mut candidate = model.clone();
        loop {
            for (w, (s, base)) in candidate.weights.iter_mut().zip(step.iter().zip(&model.weights)) {
                *w = base + scale * s;
            }
            let next = candidate.penalized_loglik(x, y);
            if next >= ll || scale < 1e-10 {
                let gain = next - ll;
                model.weights = candidate.weights.clone();
                ll = next;
                if gain.abs() < LOGISTIC_TOL {
                    return Ok(model);
                }
                break;
            }
            scale /= 2.0;
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub accuracy: f64,
    pub fpr: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ClassificationReport {
    /// Metrics from confusion counts; an empty denominator gives 0.
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self {
            precision,
            recall,
            f_measure: f_measure(precision, recall),
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            fpr: ratio(fp, fp + tn),
            tp,
            fp,
            tn,
            fn_,
        }
    }
}

/// Harmonic mean of precision and recall.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Predicts positive when the fitted probability is at least `threshold`
/// and scores the predictions.
pub fn classify_and_score(
    model: &LogisticModel,
    x: &[Vec<f64>],
    y: &[bool],
    threshold: f64,
) -> ClassificationReport {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (row, &label) in x.iter().zip(y) {
        match (model.predict_proba(row) >= threshold, label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    ClassificationReport::from_counts(tp, fp, tn, fn_)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub t0: f64,
    pub t1: f64,
    /// Fraction of eligible subjects used to train the logistic model.
    pub split: f64,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            t0: 1.0,
            t1: 2.0,
            split: 0.7,
            seed: 0,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRankBlock {
    pub chi2: f64,
    pub p: f64,
    pub df: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRow {
    pub k: usize,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(flatten)]
    pub metrics: ClassificationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub k: usize,
    pub n_subjects: usize,
    pub cluster_sizes: Vec<usize>,
    pub logrank: Option<LogRankBlock>,
    pub hazard_ratio: Option<HazardRatioResult>,
    pub classification: Vec<ClassificationRow>,
    pub notes: Vec<String>,
}

/// Runs the log-rank test, the hazard ratio (two clusters only) and the
/// classification task for `model` on `data`.
pub fn evaluate(model: &ClusterModel, data: &SurvivalDataset, config: &EvalConfig) -> Result<EvaluationReport> {
    if !(config.split > 0.0 && config.split < 1.0) {
        return Err(Error::InvalidConfig(format!("split must be in (0, 1), got {}", config.split)));
    }
    let labels: Vec<usize> = data
        .subjects
        .iter()
        .map(|s| model.cluster_assign(s))
        .collect::<Result<_>>()?;
    let k = model.k;
    let mut notes = Vec::new();

    let mut groups: Vec<Vec<(f64, bool)>> = vec![Vec::new(); k];
    for (s, &c) in data.subjects.iter().zip(&labels) {
        groups[c].push(s.observation());
    }
    let cluster_sizes = groups.iter().map(Vec::len).collect();

    let logrank = if k < 2 {
        notes.push("log-rank test skipped: k<2".to_string());
        None
    } else {
        let present: Vec<Vec<(f64, bool)>> = groups.iter().filter(|g| !g.is_empty()).cloned().collect();
        match logrank_test(&present) {
            Ok(r) => Some(LogRankBlock {
                chi2: r.test.statistic,
                p: r.test.p_value,
                df: r.df,
            }),
            Err(e) => {
                notes.push(format!("log-rank test skipped: {e}"));
                None
            }
        }
    };

    let hazard_ratio = if k == 2 {
        let samples: Vec<(f64, bool, bool)> = data
            .subjects
            .iter()
            .zip(&labels)
            .map(|(s, &c)| (s.time, s.event, c == 1))
            .collect();
        match cox_hazard_ratio(&samples) {
            Ok(hr) => Some(hr),
            Err(e) => {
                notes.push(format!("hazard ratio skipped: {e}"));
                None
            }
        }
    } else {
        notes.push("hazard ratio reported for k = 2 only".to_string());
        None
    };

    let mut eligible = survival_labels(data, config.t0, config.t1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    eligible.shuffle(&mut rng);
    let n_train = ((eligible.len() as f64) * config.split).round() as usize;
    let (train, test) = eligible.split_at(n_train);
    let encode = |set: &[SurvivalLabel]| -> (Vec<Vec<f64>>, Vec<bool>) {
        let x = one_hot(&set.iter().map(|l| labels[l.index]).collect::<Vec<_>>(), k);
        (x, set.iter().map(|l| l.alive_at_t1).collect())
    };
    let mut classification = Vec::new();
    let (x_train, y_train) = encode(train);
    let (x_test, y_test) = encode(test);
    match logistic_fit(&x_train, &y_train) {
        Ok(lr) if !test.is_empty() => classification.push(ClassificationRow {
            k,
            n_train: train.len(),
            n_test: test.len(),
            metrics: classify_and_score(&lr, &x_test, &y_test, config.threshold),
        }),
        Ok(_) => notes.push("classification skipped: empty test split".to_string()),
        Err(e) => notes.push(format!("classification skipped: {e}")),
    }

    Ok(EvaluationReport {
        k,
        n_subjects: data.len(),
        cluster_sizes,
        logrank,
        hazard_ratio,
        classification,
        notes,
    })
}

/// Plain-text rendering: hazard/log-rank block, then one metrics row per k.
pub fn render_table(report: &EvaluationReport) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(out, "clusters: {}  subjects: {}  sizes: {:?}", report.k, report.n_subjects, report.cluster_sizes);
    match &report.logrank {
        Some(lr) => {
            let _ = writeln!(out, "log-rank chi2 = {:.3}  df = {}  p = {:.3e}", lr.chi2, lr.df, lr.p);
        }
        None => {
            let _ = writeln!(out, "log-rank: n/a");
        }
    }
    if let Some(hr) = &report.hazard_ratio {
        let _ = writeln!(
            out,
            "hazard ratio = {:.3}  95% CI [{:.3}, {:.3}]{}",
            hr.hazard_ratio,
            hr.ci95.0,
            hr.ci95.1,
            if hr.diverged { "  (diverged)" } else { "" }
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<24} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "Method", "Precision", "Recall", "F-measure", "Accuracy", "FPR"
    );
    for row in &report.classification {
        let m = &row.metrics;
        let _ = writeln!(
            out,
            "{:<24} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
            format!("Proposed Method (k = {})", row.k),
            m.precision,
            m.recall,
            m.f_measure,
            m.accuracy,
            m.fpr
        );
    }
    for note in &report.notes {
        let _ = writeln!(out, "note: {note}");
    }
    out
}
