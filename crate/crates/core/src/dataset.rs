//! Subjects, feature schemas and censored-lifetime datasets.
//!
//! A [`SurvivalDataset`] pairs a [`FeatureSchema`] with a list of [`Subject`]s.
//! Each subject carries one [`FeatureValue`] per schema feature, an observed
//! time and an event flag (`true` = death observed, `false` = right-censored).
//! Datasets are immutable once built; [`SurvivalDataset::subset`] returns a
//! borrowed [`DatasetView`] rather than copying subjects.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether a feature holds real numbers or one of a fixed list of levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl Feature {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Numeric,
        }
    }

    pub fn categorical<S: Into<String>>(
        name: impl Into<String>,
        categories: impl IntoIterator<Item = S>,
    ) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical {
                categories: categories.into_iter().map(Into::into).collect(),
            },
        }
    }

    pub fn categories(&self) -> Option<&[String]> {
        match &self.kind {
            FeatureKind::Numeric => None,
            FeatureKind::Categorical { categories } => Some(categories),
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.kind, FeatureKind::Numeric)
    }
}

/// Ordered feature declarations. Category order is significant: category
/// indices are what split tests and the serialized model refer to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<Feature>,
}

impl FeatureSchema {
    /// Builds a schema, rejecting duplicate or empty names and empty or
    /// duplicated category lists.
    pub fn new(features: Vec<Feature>) -> Result<Self> {
        let schema = Self { features };
        schema.check()?;
        Ok(schema)
    }

    pub fn check(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for f in &self.features {
            if f.name.is_empty() {
                return Err(Error::Schema("feature name is empty".into()));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name `{}`", f.name)));
            }
            if let Some(cats) = f.categories() {
                if cats.is_empty() {
                    return Err(Error::Schema(format!(
                        "categorical feature `{}` declares no categories",
                        f.name
                    )));
                }
                let mut levels = HashSet::new();
                for c in cats {
                    if !levels.insert(c.as_str()) {
                        return Err(Error::Schema(format!(
                            "feature `{}` repeats category `{c}`",
                            f.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Parses a raw cell into a value for feature `index`. Empty cells become
    /// [`FeatureValue::Missing`]; unknown levels and unparsable numbers are
    /// errors.
    pub fn parse_value(&self, index: usize, raw: &str) -> Result<FeatureValue> {
        let feature = &self.features[index];
        let raw = raw.trim();
        if raw.is_empty() {
            return Ok(FeatureValue::Missing);
        }
        match &feature.kind {
            FeatureKind::Numeric => raw
                .parse::<f64>()
                .map(FeatureValue::Numeric)
                .map_err(|_| Error::Value {
                    column: feature.name.clone(),
                    reason: format!("`{raw}` is not a number"),
                }),
            FeatureKind::Categorical { categories } => categories
                .iter()
                .position(|c| c == raw)
                .map(FeatureValue::Category)
                .ok_or_else(|| Error::Value {
                    column: feature.name.clone(),
                    reason: format!("unknown category `{raw}`"),
                }),
        }
    }
}

/// One feature value of one subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FeatureValue {
    Numeric(f64),
    Category(usize),
    Missing,
}

impl FeatureValue {
    pub fn as_numeric(self) -> Option<f64> {
        match self {
            FeatureValue::Numeric(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_category(self) -> Option<usize> {
        match self {
            FeatureValue::Category(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub values: Vec<FeatureValue>,
    pub time: f64,
    pub event: bool,
}

impl Subject {
    pub fn new(id: impl Into<String>, values: Vec<FeatureValue>, time: f64, event: bool) -> Self {
        Self {
            id: id.into(),
            values,
            time,
            event,
        }
    }

    pub fn observation(&self) -> (f64, bool) {
        (self.time, self.event)
    }
}

/// A single broken invariant found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// `None` for dataset-level violations.
    pub subject: Option<String>,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.subject {
            Some(id) => write!(f, "subject `{id}`: {}", self.reason),
            None => f.write_str(&self.reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::Invalid(self.violations))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    pub schema: Arc<FeatureSchema>,
    pub subjects: Vec<Subject>,
}

impl SurvivalDataset {
    /// Wraps subjects without checking them; see [`validate_dataset`].
    pub fn new(schema: impl Into<Arc<FeatureSchema>>, subjects: Vec<Subject>) -> Self {
        Self {
            schema: schema.into(),
            subjects,
        }
    }

    /// Builds a dataset and fails with every violation when any invariant is broken.
    pub fn validated(schema: impl Into<Arc<FeatureSchema>>, subjects: Vec<Subject>) -> Result<Self> {
        let ds = Self::new(schema, subjects);
        validate_dataset(&ds).into_result()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn view(&self) -> DatasetView<'_> {
        DatasetView {
            schema: &self.schema,
            subjects: self.subjects.iter().collect(),
        }
    }

    pub fn subset<P>(&self, predicate: P) -> DatasetView<'_>
    where
        P: Fn(&Subject) -> bool,
    {
        self.view().subset(predicate)
    }

    pub fn observations(&self) -> Vec<(f64, bool)> {
        self.subjects.iter().map(Subject::observation).collect()
    }

    pub fn n_events(&self) -> usize {
        self.subjects.iter().filter(|s| s.event).count()
    }
}

/// Borrowed selection of a dataset's subjects, in original order.
#[derive(Debug, Clone)]
pub struct DatasetView<'a> {
    pub schema: &'a FeatureSchema,
    pub subjects: Vec<&'a Subject>,
}

impl<'a> DatasetView<'a> {
    pub fn subset<P>(&self, predicate: P) -> DatasetView<'a>
    where
        P: Fn(&Subject) -> bool,
    {
        DatasetView {
            schema: self.schema,
            subjects: self.subjects.iter().copied().filter(|s| predicate(s)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.subjects.iter().filter(|s| s.event).count()
    }

    pub fn observations(&self) -> Vec<(f64, bool)> {
        self.subjects.iter().map(|s| s.observation()).collect()
    }

    pub fn ids(&self) -> Vec<&'a str> {
        self.subjects.iter().map(|s| s.id.as_str()).collect()
    }
}

/// Checks every dataset invariant and reports all violations found.
pub fn validate_dataset(dataset: &SurvivalDataset) -> ValidationReport {
    let mut violations = Vec::new();
    let schema = &dataset.schema;

    if let Err(e) = schema.check() {
        violations.push(Violation {
            subject: None,
            reason: e.to_string(),
        });
    }

    let mut ids = HashSet::new();
    for s in &dataset.subjects {
        let mut flag = |reason: String| {
            violations.push(Violation {
                subject: Some(s.id.clone()),
                reason,
            })
        };
        if !ids.insert(s.id.as_str()) {
            flag("duplicate id".into());
        }
        if !s.time.is_finite() {
            flag("non-finite time".into());
        } else if s.time < 0.0 {
            flag("negative time".into());
        }
        if s.values.len() != schema.len() {
            flag(format!(
                "has {} feature values, schema declares {}",
                s.values.len(),
                schema.len()
            ));
            continue;
        }
        for (value, feature) in s.values.iter().zip(&schema.features) {
            match (value, &feature.kind) {
                (FeatureValue::Missing, _) => flag(format!("missing value for `{}`", feature.name)),
                (FeatureValue::Numeric(v), FeatureKind::Numeric) => {
                    if !v.is_finite() {
                        flag(format!("non-finite value for `{}`", feature.name));
                    }
                }
                (FeatureValue::Category(c), FeatureKind::Categorical { categories }) => {
                    if *c >= categories.len() {
                        flag(format!(
                            "category index {c} out of range for `{}`",
                            feature.name
                        ));
                    }
                }
                (FeatureValue::Numeric(_), FeatureKind::Categorical { .. }) => {
                    flag(format!("numeric value for categorical `{}`", feature.name))
                }
                (FeatureValue::Category(_), FeatureKind::Numeric) => {
                    flag(format!("category value for numeric `{}`", feature.name))
                }
            }
        }
    }

    if !dataset.subjects.iter().any(|s| s.event) {
        violations.push(Violation {
            subject: None,
            reason: "no observed events".into(),
        });
    }

    ValidationReport { violations }
}
