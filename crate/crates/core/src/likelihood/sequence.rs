use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Whether each event carries exactly one mark or a non-empty set of marks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "multi-class")]
    MultiClass,
    #[serde(rename = "multi-label")]
    MultiLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    /// Sorted, non-empty mark ids.
    pub labels: Vec<usize>,
}

impl Event {
    pub fn new(time: f64, labels: Vec<usize>) -> Self {
        Self { time, labels }
    }
}

/// Timestamped events observed inside `window = [w-, w+]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    pub window: [f64; 2],
    pub events: Vec<Event>,
}

impl EventSequence {
    pub fn new(window: [f64; 2], events: Vec<Event>) -> Self {
        Self { window, events }
    }

    pub fn start(&self) -> f64 {
        self.window[0]
    }

    pub fn end(&self) -> f64 {
        self.window[1]
    }

    pub fn duration(&self) -> f64 {
        self.window[1] - self.window[0]
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.time).collect()
    }

    /// Checks window order, strictly increasing times inside the window,
    /// non-empty sorted labels below `num_marks`, and one label per event
    /// for multi-class data. `path` prefixes error locations.
    pub fn validate(&self, num_marks: usize, task: Task, path: &str) -> Result<()> {
        let [lo, hi] = self.window;
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::invalid(format!("{path}.window"), format!("invalid window [{lo}, {hi}]")));
        }
        let mut prev = f64::NEG_INFINITY;
        for (i, e) in self.events.iter().enumerate() {
            let at = format!("{path}.events[{i}]");
            if !e.time.is_finite() || e.time < lo || e.time > hi {
                return Err(Error::invalid(
                    format!("{at}.time"),
                    format!("time {} outside window [{lo}, {hi}]", e.time),
                ));
            }
            if e.time <= prev {
                return Err(Error::invalid(format!("{at}.time"), "times must be strictly increasing"));
            }
            prev = e.time;
            if e.labels.is_empty() {
                return Err(Error::invalid(format!("{at}.labels"), "event has no labels"));
            }
            if task == Task::MultiClass && e.labels.len() != 1 {
                return Err(Error::invalid(
                    format!("{at}.labels"),
                    "multi-class events carry exactly one label",
                ));
            }
            if e.labels.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!("{at}.labels"), "labels must be sorted and distinct"));
            }
            if let Some(&bad) = e.labels.iter().find(|&&m| m >= num_marks) {
                return Err(Error::invalid(
                    format!("{at}.labels"),
                    format!("label {bad} >= num_marks {num_marks}"),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(events: Vec<(f64, Vec<usize>)>) -> EventSequence {
        EventSequence::new([0.0, 10.0], events.into_iter().map(|(t, l)| Event::new(t, l)).collect())
    }

    #[test]
    fn validation() {
        assert!(seq(vec![(1.0, vec![0]), (2.0, vec![1])]).validate(2, Task::MultiClass, "s").is_ok());
        assert!(seq(vec![]).validate(1, Task::MultiClass, "s").is_ok());
        let err = seq(vec![(11.0, vec![0])]).validate(2, Task::MultiClass, "s").unwrap_err();
        assert!(err.to_string().contains("s.events[0].time"));
        assert!(seq(vec![(1.0, vec![2])]).validate(2, Task::MultiClass, "s").is_err());
        assert!(seq(vec![(1.0, vec![0, 1])]).validate(2, Task::MultiClass, "s").is_err());
        assert!(seq(vec![(1.0, vec![0, 1])]).validate(2, Task::MultiLabel, "s").is_ok());
        assert!(seq(vec![(1.0, vec![1, 0])]).validate(2, Task::MultiLabel, "s").is_err());
        assert!(seq(vec![(1.0, vec![0]), (1.0, vec![1])]).validate(2, Task::MultiClass, "s").is_err());
        assert!(seq(vec![(1.0, vec![])]).validate(2, Task::MultiLabel, "s").is_err());
    }
}
