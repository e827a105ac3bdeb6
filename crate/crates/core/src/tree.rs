//! Decision tree whose splits maximize the Kuiper divergence between the two
//! children's survival curves.
//!
//! At every node each attribute-value test is scored by the Kuiper p-value
//! between the Kaplan-Meier curves of the subjects it sends left and right.
//! The lowest p-value wins, but only if it clears the Bonferroni-corrected
//! level `alpha / m`, where `m` is the number of tests scored at that node.
//! Candidates are ranked by the log p-value so that splits whose p-values
//! underflow to zero still order correctly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetView, FeatureKind, FeatureSchema, FeatureValue, Subject, SurvivalDataset};
use crate::error::{Error, Result};
use crate::kaplan_meier::{km_fit_sorted_iter, SurvivalCurve};
use crate::two_sample::{bonferroni_threshold, kuiper_ln_pvalue, kuiper_pvalue, kuiper_statistic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub alpha: f64,
    pub min_leaf_subjects: usize,
    pub min_leaf_events: usize,
    pub max_depth: usize,
    pub max_numeric_thresholds: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            min_leaf_subjects: 50,
            min_leaf_events: 5,
            max_depth: 12,
            max_numeric_thresholds: 32,
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        for (name, v) in [
            ("min_leaf_subjects", self.min_leaf_subjects),
            ("min_leaf_events", self.min_leaf_events),
            ("max_depth", self.max_depth),
            ("max_numeric_thresholds", self.max_numeric_thresholds),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Attribute-value test. Subjects passing the test go to the left child.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SplitTest {
    /// `value < threshold`; equality goes right.
    LessThan { threshold: f64 },
    /// `value == category` (one level against the rest).
    Equals { category: usize },
}

impl SplitTest {
    /// `None` when the value has the wrong type or is missing.
    pub fn evaluate(&self, value: FeatureValue) -> Option<bool> {
        match (self, value) {
            (SplitTest::LessThan { threshold }, FeatureValue::Numeric(v)) => Some(v < *threshold),
            (SplitTest::Equals { category }, FeatureValue::Category(c)) => Some(c == *category),
            _ => None,
        }
    }

    fn order_key(&self) -> f64 {
        match self {
            SplitTest::LessThan { threshold } => *threshold,
            SplitTest::Equals { category } => *category as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCandidate {
    pub feature: usize,
    pub test: SplitTest,
}

impl SplitCandidate {
    fn goes_left(&self, subject: &Subject) -> bool {
        self.test.evaluate(subject.values[self.feature]).unwrap_or(false)
    }
}

/// A candidate together with its Kuiper score at a node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSplit {
    pub candidate: SplitCandidate,
    pub statistic: f64,
    pub p_value: f64,
    pub ln_p_value: f64,
    /// Number of candidates scored at the node (the Bonferroni family size).
    pub n_candidates: usize,
    pub corrected_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NodeKind {
    Internal {
        feature: String,
        feature_index: usize,
        test: SplitTest,
        statistic: f64,
        p_value: f64,
        ln_p_value: f64,
        n_candidates: usize,
        corrected_alpha: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        leaf_id: usize,
        curve: SurvivalCurve,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub depth: usize,
    pub n_subjects: usize,
    pub n_events: usize,
    #[serde(flatten)]
    pub kind: NodeKind,
}

/// Fitted tree. Node 0 is the root; node ids follow a left-first preorder
/// and `leaves[leaf_id]` is the node id of that leaf, left to right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalTree {
    pub schema: FeatureSchema,
    pub config: TreeConfig,
    pub nodes: Vec<TreeNode>,
    pub leaves: Vec<usize>,
}

/// Midpoint thresholds for one numeric feature, at most `max` of them.
fn numeric_thresholds(mut values: Vec<f64>, max: usize) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let mut distinct = values.clone();
    distinct.dedup();
    if distinct.len() < 2 {
        return Vec::new();
    }
    let midpoint = |lo: f64, hi: f64| lo + (hi - lo) / 2.0;
    if distinct.len() - 1 <= max {
        return distinct.windows(2).map(|w| midpoint(w[0], w[1])).collect();
    }
    // cut at equally spaced quantile positions, snapped to the gap just
    // below the value found there
    let mut out: Vec<f64> = Vec::with_capacity(max);
    for q in 1..=max {
        let pos = q * n / (max + 1);
        let x = values[pos.min(n - 1)];
        let below = distinct.partition_point(|&d| d < x);
        if below == 0 {
            continue;
        }
        let t = midpoint(distinct[below - 1], x);
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    out
}

/// Lists the attribute-value tests for a node, already filtered by the
/// leaf-size minima, in schema order then ascending threshold or category.
pub fn enumerate_splits(
    data: &DatasetView<'_>,
    schema: &FeatureSchema,
    config: &TreeConfig,
) -> Vec<SplitCandidate> {
    let n = data.len();
    let events = data.n_events();
    let mut out = Vec::new();
    for (feature, spec) in schema.features.iter().enumerate() {
        let tests: Vec<SplitTest> = match &spec.kind {
            FeatureKind::Numeric => {
                let values = data
                    .subjects
                    .iter()
                    .filter_map(|s| s.values[feature].as_numeric())
                    .collect();
                numeric_thresholds(values, config.max_numeric_thresholds)
                    .into_iter()
                    .map(|threshold| SplitTest::LessThan { threshold })
                    .collect()
            }
            FeatureKind::Categorical { categories } => {
                let mut present = vec![false; categories.len()];
                for s in &data.subjects {
                    if let Some(c) = s.values[feature].as_category() {
                        if let Some(p) = present.get_mut(c) {
                            *p = true;
                        }
                    }
                }
                if present.iter().filter(|&&p| p).count() < 2 {
                    Vec::new()
                } else {
                    (0..categories.len())
                        .filter(|&c| present[c])
                        .map(|category| SplitTest::Equals { category })
                        .collect()
                }
            }
        };
        for test in tests {
            let candidate = SplitCandidate { feature, test };
            let (mut left_n, mut left_events) = (0, 0);
            for s in &data.subjects {
                if candidate.goes_left(s) {
                    left_n += 1;
                    left_events += s.event as usize;
                }
            }
            let (right_n, right_events) = (n - left_n, events - left_events);
            if left_n >= config.min_leaf_subjects
                && right_n >= config.min_leaf_subjects
                && left_events >= config.min_leaf_events
                && right_events >= config.min_leaf_events
            {
                out.push(candidate);
            }
        }
    }
    out
}

fn sorted_by_time<'a>(data: &DatasetView<'a>) -> Vec<&'a Subject> {
    let mut subjects = data.subjects.clone();
    subjects.sort_by(|a, b| a.time.total_cmp(&b.time));
    subjects
}

fn score(sorted: &[&Subject], candidate: &SplitCandidate) -> Option<(f64, f64, f64)> {
    let left = km_fit_sorted_iter(
        sorted
            .iter()
            .filter(|s| candidate.goes_left(s))
            .map(|s| s.observation()),
    )
    .ok()?;
    let right = km_fit_sorted_iter(
        sorted
            .iter()
            .filter(|s| !candidate.goes_left(s))
            .map(|s| s.observation()),
    )
    .ok()?;
    let v = kuiper_statistic(&left, &right);
    let p = kuiper_pvalue(v, left.n_events, right.n_events).ok()?.p_value;
    let ln_p = kuiper_ln_pvalue(v, left.n_events, right.n_events).ok()?;
    Some((v, p, ln_p))
}

/// Scores every candidate and returns the most significant one if it
/// clears `alpha / m`. Ties keep the earliest candidate in enumeration order.
pub fn best_split(
    data: &DatasetView<'_>,
    candidates: &[SplitCandidate],
    config: &TreeConfig,
) -> Option<ScoredSplit> {
    if candidates.is_empty() {
        return None;
    }
    let corrected_alpha = bonferroni_threshold(config.alpha, candidates.len()).ok()?;
    let sorted = sorted_by_time(data);
    let scores: Vec<Option<(f64, f64, f64)>> =
        candidates.par_iter().map(|c| score(&sorted, c)).collect();

    let mut best: Option<(usize, (f64, f64, f64))> = None;
    for (i, s) in scores.into_iter().enumerate() {
        let Some(s) = s else { continue };
        let better = match &best {
            None => true,
            Some((j, b)) => {
                s.2 < b.2
                    || (s.2 == b.2 && tie_key(&candidates[i]) < tie_key(&candidates[*j]))
            }
        };
        if better {
            best = Some((i, s));
        }
    }
    let (i, (statistic, p_value, ln_p_value)) = best?;
    if ln_p_value < corrected_alpha.ln() {
        Some(ScoredSplit {
            candidate: candidates[i],
            statistic,
            p_value,
            ln_p_value,
            n_candidates: candidates.len(),
            corrected_alpha,
        })
    } else {
        None
    }
}

fn tie_key(c: &SplitCandidate) -> (usize, f64) {
    (c.feature, c.test.order_key())
}

/// Grows a tree on a validated dataset.
pub fn grow_tree(data: &SurvivalDataset, config: &TreeConfig) -> Result<SurvivalTree> {
    config.validate()?;
    if data.n_events() == 0 {
        return Err(Error::NoEventsAtRoot);
    }
    crate::dataset::validate_dataset(data).into_result()?;

    let mut builder = Builder {
        schema: &data.schema,
        config,
        nodes: Vec::new(),
        leaves: Vec::new(),
    };
    builder.grow(data.view(), 0)?;
    Ok(SurvivalTree {
        schema: (*data.schema).clone(),
        config: config.clone(),
        nodes: builder.nodes,
        leaves: builder.leaves,
    })
}

struct Builder<'s> {
    schema: &'s FeatureSchema,
    config: &'s TreeConfig,
    nodes: Vec<TreeNode>,
    leaves: Vec<usize>,
}

impl Builder<'_> {
    fn grow(&mut self, data: DatasetView<'_>, depth: usize) -> Result<usize> {
        let id = self.nodes.len();
        let n_subjects = data.len();
        let n_events = data.n_events();
        let cfg = self.config;

        let split = if depth >= cfg.max_depth
            || n_subjects < 2 * cfg.min_leaf_subjects
            || n_events < 2 * cfg.min_leaf_events
        {
            None
        } else {
            let candidates = enumerate_splits(&data, self.schema, cfg);
            best_split(&data, &candidates, cfg)
        };

        let Some(split) = split else {
            let leaf_id = self.leaves.len();
            let curve = km_fit_sorted_iter(sorted_by_time(&data).iter().map(|s| s.observation()))?;
            self.leaves.push(id);
            self.nodes.push(TreeNode {
                id,
                depth,
                n_subjects,
                n_events,
                kind: NodeKind::Leaf { leaf_id, curve },
            });
            return Ok(id);
        };

        // placeholder children, patched once the subtrees exist
        let candidate = split.candidate;
        self.nodes.push(TreeNode {
            id,
            depth,
            n_subjects,
            n_events,
            kind: NodeKind::Internal {
                feature: self.schema.features[candidate.feature].name.clone(),
                feature_index: candidate.feature,
                test: candidate.test,
                statistic: split.statistic,
                p_value: split.p_value,
                ln_p_value: split.ln_p_value,
                n_candidates: split.n_candidates,
                corrected_alpha: split.corrected_alpha,
                left: 0,
                right: 0,
            },
        });
        let left_data = data.subset(|s| candidate.goes_left(s));
        let right_data = data.subset(|s| !candidate.goes_left(s));
        let left_id = self.grow(left_data, depth + 1)?;
        let right_id = self.grow(right_data, depth + 1)?;
        if let NodeKind::Internal { left, right, .. } = &mut self.nodes[id].kind {
            *left = left_id;
            *right = right_id;
        }
        Ok(id)
    }
}

/// How [`SurvivalTree::route`] treats a value a node cannot test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    /// Fail with [`Error::SchemaMismatch`].
    Strict,
    /// Send the subject to whichever child held more training subjects.
    MajorityChild,
}

impl SurvivalTree {
    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn n_internal(&self) -> usize {
        self.nodes.len() - self.leaves.len()
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn leaf(&self, leaf_id: usize) -> &TreeNode {
        &self.nodes[self.leaves[leaf_id]]
    }

    pub fn leaf_curve(&self, leaf_id: usize) -> &SurvivalCurve {
        match &self.leaf(leaf_id).kind {
            NodeKind::Leaf { curve, .. } => curve,
            NodeKind::Internal { .. } => unreachable!("leaf index points at an internal node"),
        }
    }

    /// Leaf id for `subject`; values a node cannot test are errors.
    pub fn assign_leaf(&self, subject: &Subject) -> Result<usize> {
        self.route(&subject.values, Routing::Strict)
    }

    pub fn route(&self, values: &[FeatureValue], routing: Routing) -> Result<usize> {
        if values.len() != self.schema.len() {
            return Err(Error::SchemaMismatch(format!(
                "expected {} feature values, got {}",
                self.schema.len(),
                values.len()
            )));
        }
        let mut node = &self.nodes[0];
        loop {
            match &node.kind {
                NodeKind::Leaf { leaf_id, .. } => return Ok(*leaf_id),
                NodeKind::Internal {
                    feature,
                    feature_index,
                    test,
                    left,
                    right,
                    ..
                } => {
                    let value = values[*feature_index];
                    let goes_left = match (test.evaluate(value), routing) {
                        (Some(b), _) => b,
                        (None, Routing::MajorityChild) if value == FeatureValue::Missing => {
                            self.nodes[*left].n_subjects >= self.nodes[*right].n_subjects
                        }
                        (None, _) => {
                            return Err(Error::SchemaMismatch(format!(
                                "feature `{feature}` has value {value:?} that cannot be tested by {test:?}"
                            )))
                        }
                    };
                    node = &self.nodes[if goes_left { *left } else { *right }];
                }
            }
        }
    }

    /// Routes every subject and groups their observations by leaf.
    pub fn leaf_observations(&self, data: &SurvivalDataset) -> Result<Vec<Vec<(f64, bool)>>> {
        let mut out = vec![Vec::new(); self.n_leaves()];
        for s in &data.subjects {
            out[self.assign_leaf(s)?].push(s.observation());
        }
        Ok(out)
    }
}
