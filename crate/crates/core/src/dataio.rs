//! Dataset files: loading, validation, canonical saving, splits,
//! truncation and summary statistics.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::estimate_beta;
use crate::likelihood::{EventSequence, Task};
use crate::{Error, Result};

/// File extension of dataset files.
pub const EXTENSION: &str = "tpp.json";

/// Default cap on events per sequence.
pub const DEFAULT_MAX_LEN: usize = 400;

/// Number of folds accepted by [`Dataset::make_splits`].
pub const NUM_FOLDS: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub num_marks: usize,
    pub task: Task,
    pub sequences: Vec<EventSequence>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub beta_hat: f64,
    pub num_sequences: usize,
    pub num_events: usize,
    pub mark_counts: Vec<usize>,
    /// Number of sequences of each length.
    pub length_histogram: BTreeMap<usize, usize>,
}

impl Dataset {
    pub fn new(num_marks: usize, task: Task, sequences: Vec<EventSequence>) -> Result<Self> {
        let d = Self {
            num_marks,
            task,
            sequences,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_marks == 0 {
            return Err(Error::invalid("num_marks", "must be positive"));
        }
        for (i, s) in self.sequences.iter().enumerate() {
            s.validate(self.num_marks, self.task, &format!("sequences[{i}]"))?;
        }
        Ok(())
    }

    /// Parses and validates; `origin` names the source in errors.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            path: origin.to_string(),
            source,
        })?;
        d.validate().map_err(|e| match e {
            Error::InvalidData { path, msg } => Error::invalid(format!("{origin}: {path}"), msg),
            other => other,
        })?;
        Ok(d)
    }

    /// Canonical text: compact, fields in declaration order, shortest
    /// round-trip float formatting, trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("datasets always serialize");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_events(&self) -> usize {
        self.sequences.iter().map(EventSequence::len).sum()
    }

    fn with_sequences(&self, sequences: Vec<EventSequence>) -> Self {
        Self {
            num_marks: self.num_marks,
            task: self.task,
            sequences,
        }
    }

    /// Shuffles by `seed + fold` and cuts 80/10/10 by sequence. Validation
    /// and test each get `round(n / 10)` sequences.
    pub fn make_splits(&self, fold: u64, seed: u64) -> Result<Splits> {
        if fold >= NUM_FOLDS {
            return Err(Error::Config(format!("fold must be below {NUM_FOLDS}, got {fold}")));
        }
        let n = self.len();
        if n < 10 {
            return Err(Error::invalid("sequences", format!("need at least 10 sequences to split, got {n}")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(fold)));
        let held = (n as f64 / 10.0).round() as usize;
        let pick = |idx: &[usize]| self.with_sequences(idx.iter().map(|&i| self.sequences[i].clone()).collect());
        Ok(Splits {
            val: pick(&order[..held]),
            test: pick(&order[held..2 * held]),
            train: pick(&order[2 * held..]),
        })
    }

    /// Keeps the first `max_len` events of each sequence; a cut sequence
    /// ends at its last kept event.
    pub fn truncate(&self, max_len: usize) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        let sequences = self
            .sequences
            .iter()
            .map(|s| {
                if s.len() <= max_len {
                    return s.clone();
                }
                let events = s.events[..max_len].to_vec();
                let end = events[max_len - 1].time;
                EventSequence::new([s.start(), end], events)
            })
            .collect();
        Ok(self.with_sequences(sequences))
    }

    pub fn stats(&self) -> Result<DatasetStats> {
        let mut mark_counts = vec![0; self.num_marks];
        let mut length_histogram = BTreeMap::new();
        for s in &self.sequences {
            *length_histogram.entry(s.len()).or_insert(0) += 1;
            for e in &s.events {
                for &l in &e.labels {
                    mark_counts[l] += 1;
                }
            }
        }
        Ok(DatasetStats {
            beta_hat: estimate_beta(&self.sequences)?,
            num_sequences: self.len(),
            num_events: self.num_events(),
            mark_counts,
            length_histogram,
        })
    }
}
