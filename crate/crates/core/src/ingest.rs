//! Derivation of censored lifetimes from activity logs.
//!
//! A user counts as gone once they have been inactive for `cutoff` time
//! units. Their lifetime runs from joining to their last activity. Users
//! still active within `cutoff` of the study end are right-censored at the
//! study end. Users who joined less than `cutoff` before the study end can
//! never be declared gone and are discarded, as are users who left with a
//! zero lifetime.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{Feature, FeatureSchema, FeatureValue, Subject, SurvivalDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    pub timestamp: f64,
    pub direction: Direction,
    pub partner: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub join_time: f64,
    /// Ascending by timestamp.
    pub activity: Vec<Activity>,
}

impl UserRecord {
    /// Last activity time, or the join time for users who never acted.
    pub fn last_activity(&self) -> f64 {
        self.activity.last().map_or(self.join_time, |a| a.timestamp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityLog {
    pub users: Vec<UserRecord>,
    pub study_end: f64,
}

impl ActivityLog {
    /// Groups flat `(user, activity)` rows under their users and sorts each
    /// user's activity by time. Activity for unknown users is an error.
    pub fn assemble(
        joins: impl IntoIterator<Item = (String, f64)>,
        activity: impl IntoIterator<Item = (String, Activity)>,
        study_end: f64,
    ) -> Result<Self> {
        let mut users: Vec<UserRecord> = Vec::new();
        let mut index = HashMap::new();
        for (user_id, join_time) in joins {
            if index.insert(user_id.clone(), users.len()).is_some() {
                return Err(Error::Value {
                    column: "user_id".into(),
                    reason: format!("user `{user_id}` listed twice"),
                });
            }
            users.push(UserRecord {
                user_id,
                join_time,
                activity: Vec::new(),
            });
        }
        for (user_id, a) in activity {
            let Some(&i) = index.get(&user_id) else {
                return Err(Error::Value {
                    column: "user_id".into(),
                    reason: format!("activity for unknown user `{user_id}`"),
                });
            };
            users[i].activity.push(a);
        }
        for u in &mut users {
            u.activity.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        }
        let log = Self { users, study_end };
        log.validate()?;
        Ok(log)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.study_end.is_finite() {
            return Err(Error::InvalidConfig("study end must be finite".into()));
        }
        for u in &self.users {
            let bad = |reason: String| Error::Value {
                column: "timestamp".into(),
                reason: format!("user `{}`: {reason}", u.user_id),
            };
            if !u.join_time.is_finite() || u.join_time > self.study_end {
                return Err(bad(format!("join time {} is not within the study", u.join_time)));
            }
            if u.activity.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
                return Err(bad("activity is not in ascending time order".into()));
            }
            if let Some(a) = u.activity.iter().find(|a| !(a.timestamp >= u.join_time && a.timestamp <= self.study_end)) {
                return Err(bad(format!("activity at {} outside [join, study end]", a.timestamp)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    /// Joined less than `cutoff` before the study end; departure undeterminable.
    ShortWindow,
    /// Declared gone without any time in the system.
    ZeroLifetime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discard {
    pub user_id: String,
    pub reason: DiscardReason,
}

/// Lifetime outcome of one user under the inactivity rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    Observed { time: f64, event: bool },
    Discarded(DiscardReason),
}

pub fn user_outcome(user: &UserRecord, study_end: f64, cutoff: f64) -> Outcome {
    let last = user.last_activity();
    if study_end - last >= cutoff {
        let time = last - user.join_time;
        if time > 0.0 {
            Outcome::Observed { time, event: true }
        } else {
            Outcome::Discarded(DiscardReason::ZeroLifetime)
        }
    } else if study_end - user.join_time < cutoff {
        Outcome::Discarded(DiscardReason::ShortWindow)
    } else {
        Outcome::Observed {
            time: study_end - user.join_time,
            event: false,
        }
    }
}

/// Builds a survival dataset from an activity log. `profiles` maps each user
/// id to its values under `schema`; output is ordered by user id.
pub fn activity_to_survival(
    log: &ActivityLog,
    cutoff: f64,
    schema: Arc<FeatureSchema>,
    profiles: &HashMap<String, Vec<FeatureValue>>,
) -> Result<(SurvivalDataset, Vec<Discard>)> {
    if !(cutoff > 0.0 && cutoff.is_finite()) {
        return Err(Error::InvalidCutoff(cutoff));
    }
    let mut users: Vec<&UserRecord> = log.users.iter().collect();
    users.sort_by(|a, b| a.user_id.cmp(&b.user_id));

    let mut subjects = Vec::new();
    let mut discards = Vec::new();
    for u in users {
        match user_outcome(u, log.study_end, cutoff) {
            Outcome::Observed { time, event } => {
                let values = profiles.get(&u.user_id).ok_or_else(|| Error::Value {
                    column: "user_id".into(),
                    reason: format!("no profile for user `{}`", u.user_id),
                })?;
                subjects.push(Subject::new(u.user_id.clone(), values.clone(), time, event));
            }
            Outcome::Discarded(reason) => discards.push(Discard {
                user_id: u.user_id.clone(),
                reason,
            }),
        }
    }
    Ok((SurvivalDataset::new(schema, subjects), discards))
}

/// Early-activity counts for one user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActivityFeatures {
    pub sent: usize,
    pub received: usize,
    pub partners: usize,
    /// Distinct whole time units (`floor(timestamp)`) with any activity.
    pub active_days: usize,
}

impl ActivityFeatures {
    pub const NAMES: [&'static str; 4] = ["comments_sent", "comments_received", "partners", "active_days"];

    pub fn values(&self) -> [FeatureValue; 4] {
        [self.sent, self.received, self.partners, self.active_days].map(|v| FeatureValue::Numeric(v as f64))
    }
}

/// Counts activity in `[join_time, join_time + window)` per user, keyed by user id.
pub fn early_window_features(log: &ActivityLog, window: f64) -> Result<HashMap<String, ActivityFeatures>> {
    if !(window > 0.0) {
        return Err(Error::InvalidConfig(format!("window must be positive, got {window}")));
    }
    Ok(log
        .users
        .iter()
        .map(|u| {
            let end = u.join_time + window;
            let mut f = ActivityFeatures::default();
            let mut partners = BTreeSet::new();
            let mut days = BTreeSet::new();
            for a in u.activity.iter().filter(|a| a.timestamp >= u.join_time && a.timestamp < end) {
                match a.direction {
                    Direction::Sent => f.sent += 1,
                    Direction::Received => f.received += 1,
                }
                partners.insert(a.partner.as_str());
                days.insert(a.timestamp.floor() as i64);
            }
            f.partners = partners.len();
            f.active_days = days.len();
            (u.user_id.clone(), f)
        })
        .collect())
}

/// Profile schema followed by the numeric early-activity features.
pub fn schema_with_activity(profile: &FeatureSchema) -> Result<FeatureSchema> {
    let mut features = profile.features.clone();
    features.extend(ActivityFeatures::NAMES.iter().map(|n| Feature::numeric(*n)));
    FeatureSchema::new(features)
}

/// Dataset whose features are the profile values plus early-window activity
/// counts, with lifetimes from the inactivity rule.
pub fn build_dataset(
    log: &ActivityLog,
    cutoff: f64,
    window: f64,
    profile_schema: &FeatureSchema,
    profiles: &HashMap<String, Vec<FeatureValue>>,
) -> Result<(SurvivalDataset, Vec<Discard>)> {
    let schema = Arc::new(schema_with_activity(profile_schema)?);
    let activity = early_window_features(log, window)?;
    let merged: HashMap<String, Vec<FeatureValue>> = profiles
        .iter()
        .filter_map(|(id, values)| {
            let f = activity.get(id)?;
            let mut v = values.clone();
            v.extend(f.values());
            Some((id.clone(), v))
        })
        .collect();
    activity_to_survival(log, cutoff, schema, &merged)
}
