use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdError, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub value: Tensor,
    /// Buffers such as running statistics are stored here too, untrainable.
    pub trainable: bool,
}

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    seed: u64,
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            entries: IndexMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), AdError> {
        self.insert_entry(name, value, true)
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor) -> Result<(), AdError> {
        self.insert_entry(name, value, false)
    }

    fn insert_entry(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<(), AdError> {
        if self.entries.contains_key(name) {
            return Err(AdError::DuplicateParam(name.to_string()));
        }
        self.entries
            .insert(name.to_string(), ParamEntry { value, trainable });
        Ok(())
    }

    /// Glorot-uniform initialisation, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot(&mut self, name: &str, rows: usize, cols: usize) -> Result<(), AdError> {
        let t = self.glorot(name, rows, cols);
        self.insert(name, t)
    }

    /// Draws a Glorot-uniform tensor from the stream belonging to `name`.
    pub fn glorot(&self, name: &str, rows: usize, cols: usize) -> Tensor {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let mut rng = self.rng_for(name);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Tensor::new([rows, cols], data).expect("sized by construction")
    }

    /// A generator that depends only on the store seed and `name`, so adding
    /// a parameter never shifts the draws of another.
    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        // FNV-1a over the name, mixed with the seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(h ^ self.seed.rotate_left(17))
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, AdError> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| AdError::MissingParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor, AdError> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| AdError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
