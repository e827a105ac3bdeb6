//! Product-limit (Kaplan-Meier) survival curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Right-continuous step function estimated from a censored sample.
///
/// `survival[i]` is the estimate on `[event_times[i], event_times[i + 1])`;
/// the curve is 1 before the first event time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    #[serde(rename = "t")]
    pub event_times: Vec<f64>,
    #[serde(rename = "s")]
    pub survival: Vec<f64>,
    pub n_events: usize,
    pub n_subjects: usize,
}

impl SurvivalCurve {
    /// Survival probability at `t`.
    pub fn eval(&self, t: f64) -> f64 {
        let idx = self.event_times.partition_point(|&e| e <= t);
        if idx == 0 {
            1.0
        } else {
            self.survival[idx - 1]
        }
    }

    pub fn len(&self) -> usize {
        self.event_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.event_times.is_empty()
    }
}

/// Fits the product-limit estimator to `(time, event)` pairs.
///
/// A subject censored exactly at a death time is still at risk at that time.
pub fn km_fit(observations: &[(f64, bool)]) -> Result<SurvivalCurve> {
    let mut sorted = observations.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    km_fit_sorted(&sorted)
}

/// [`km_fit`] for input already sorted by ascending time.
pub fn km_fit_sorted(sorted: &[(f64, bool)]) -> Result<SurvivalCurve> {
    km_fit_sorted_iter(sorted.iter().copied())
}

/// [`km_fit`] over an iterator that yields observations in ascending time.
///
/// Between censoring times the product telescopes, so the estimate is kept as
/// `base * remaining / block_start` where `base` only changes when censored
/// subjects leave the risk set. Without censoring this is exactly
/// `#{time > t} / n`.
pub fn km_fit_sorted_iter<I>(observations: I) -> Result<SurvivalCurve>
where
    I: IntoIterator<Item = (f64, bool)>,
{
    // (time, deaths, censored) per distinct time
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    let mut n = 0usize;
    for (time, event) in observations {
        n += 1;
        match groups.last_mut() {
            Some(last) if last.0 == time => {
                if event {
                    last.1 += 1;
                } else {
                    last.2 += 1;
                }
            }
            _ => {
                debug_assert!(
                    groups.last().is_none_or(|g| g.0 < time),
                    "observations must be sorted by time"
                );
                groups.push((time, event as usize, (!event) as usize));
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptySample);
    }

    let mut event_times = Vec::new();
    let mut survival = Vec::new();
    let mut n_events = 0;
    let mut at_risk = n;
    let mut base = 1.0_f64;
    let mut block_start = n;

    for (time, deaths, censored) in groups {
        let remaining = at_risk - deaths;
        if deaths > 0 {
            n_events += deaths;
            event_times.push(time);
            survival.push(base * remaining as f64 / block_start as f64);
        }
        if censored > 0 && remaining > 0 {
            base *= remaining as f64 / block_start as f64;
            block_start = remaining - censored;
        }
        at_risk = remaining - censored;
    }

    if n_events == 0 {
        return Err(Error::NoEvents);
    }
    Ok(SurvivalCurve {
        event_times,
        survival,
        n_events,
        n_subjects: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct evaluation of the product over death times `t_j <= t` of
    /// `(n_j - d_j) / n_j`.
    fn product_limit_brute(obs: &[(f64, bool)], t: f64) -> f64 {
        let mut death_times: Vec<f64> = obs.iter().filter(|o| o.1).map(|o| o.0).collect();
        death_times.sort_by(f64::total_cmp);
        death_times.dedup();
        death_times
            .iter()
            .filter(|&&tj| tj <= t)
            .map(|&tj| {
                let n_j = obs.iter().filter(|o| o.0 >= tj).count() as f64;
                let d_j = obs.iter().filter(|o| o.1 && o.0 == tj).count() as f64;
                (n_j - d_j) / n_j
            })
            .product()
    }

    #[test]
    fn uncensored_three_deaths() {
        let c = km_fit(&[(1.0, true), (2.0, true), (3.0, true)]).unwrap();
        assert_eq!(c.event_times, vec![1.0, 2.0, 3.0]);
        assert_eq!(c.survival, vec![2.0 / 3.0, 1.0 / 3.0, 0.0]);
        assert_eq!(c.eval(3.0), 0.0);
    }

    #[test]
    fn censored_middle_subject() {
        let c = km_fit(&[(1.0, true), (2.0, false), (3.0, true)]).unwrap();
        assert_eq!(c.event_times, vec![1.0, 3.0]);
        assert!((c.survival[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.survival[1], 0.0);
        assert!((c.eval(2.5) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.eval(0.0), 1.0);
        assert_eq!((c.n_events, c.n_subjects), (2, 3));
    }

    #[test]
    fn mass_point() {
        let c = km_fit(&[(5.0, true); 4]).unwrap();
        assert_eq!(c.event_times, vec![5.0]);
        assert_eq!(c.survival, vec![0.0]);
    }

    #[test]
    fn censored_at_death_time_stays_at_risk() {
        // n_1 = 3 (the censored subject counts), d_1 = 1
        let c = km_fit(&[(1.0, true), (1.0, false), (2.0, true)]).unwrap();
        assert!((c.survival[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.survival[1], 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(km_fit(&[]), Err(Error::EmptySample)));
        assert!(matches!(km_fit(&[(1.0, false)]), Err(Error::NoEvents)));
    }

    #[test]
    fn curve_json_field_names() {
        let c = km_fit(&[(1.0, true), (2.0, true)]).unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(json, r#"{"t":[1.0,2.0],"s":[0.5,0.0],"n_events":2,"n_subjects":2}"#);
    }

    fn sample(max_n: usize) -> impl Strategy<Value = Vec<(f64, bool)>> {
        prop::collection::vec((0u32..30, any::<bool>()), 1..max_n)
            .prop_map(|v| v.into_iter().map(|(t, e)| (t as f64, e)).collect())
            .prop_filter("needs an event", |v: &Vec<(f64, bool)>| v.iter().any(|o| o.1))
    }

    proptest! {
        #[test]
        fn uncensored_equals_empirical_survival(times in prop::collection::vec(0u32..40, 1..50)) {
            let obs: Vec<(f64, bool)> = times.iter().map(|&t| (t as f64, true)).collect();
            let c = km_fit(&obs).unwrap();
            let n = obs.len();
            for t in 0..42 {
                let t = t as f64;
                let above = obs.iter().filter(|o| o.0 > t).count();
                prop_assert_eq!(c.eval(t), above as f64 / n as f64);
            }
        }

        #[test]
        fn matches_brute_force_product(obs in sample(20)) {
            let c = km_fit(&obs).unwrap();
            for t in 0..32 {
                let t = t as f64 + 0.5 * (t % 2) as f64;
                prop_assert!((c.eval(t) - product_limit_brute(&obs, t)).abs() < 1e-12);
            }
            prop_assert!(c.survival.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(c.survival.iter().all(|&s| (0.0..=1.0).contains(&s)));
        }

        #[test]
        fn invariant_under_increasing_transform(obs in sample(30)) {
            let a = km_fit(&obs).unwrap();
            let mapped: Vec<(f64, bool)> = obs.iter().map(|&(t, e)| ((t + 1.0).ln() * 3.0 + 2.0, e)).collect();
            let b = km_fit(&mapped).unwrap();
            prop_assert_eq!(a.survival, b.survival);
        }

        #[test]
        fn early_censoring_changes_nothing(obs in sample(30), extra in 1usize..5) {
            // censored before the first death: never in a risk set
            let a = km_fit(&obs).unwrap();
            let first = a.event_times[0];
            let mut more = obs.clone();
            more.extend(std::iter::repeat_n((first - 0.5, false), extra));
            let b = km_fit(&more).unwrap();
            prop_assert_eq!(&a.event_times, &b.event_times);
            for (x, y) in a.survival.iter().zip(&b.survival) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert_eq!(b.n_subjects, a.n_subjects + extra);
        }
    }
}
