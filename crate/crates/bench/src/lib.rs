//! Shared fixtures for the benchmarks.

use tppkit::ad::ParamStore;
use tppkit::decoders::DecoderKind;
use tppkit::encoders::EncoderKind;
use tppkit::hawkes::{simulate_dataset, Preset};
use tppkit::model::{ModelConfig, TppModel};
use tppkit::{EventSequence, Task};

/// Dependent-preset sequences on `[0, 100]`.
pub fn hawkes_sequences(count: usize, seed: u64) -> Vec<EventSequence> {
    simulate_dataset(&Preset::Dependent.params(), count, [0.0, 100.0], seed).expect("preset parameters are valid")
}

/// A freshly initialised two-mark model.
pub fn model(encoder: EncoderKind, decoder: DecoderKind, hidden: usize) -> (TppModel, ParamStore) {
    let mut store = ParamStore::new(0);
    let m = TppModel::new(&mut store, ModelConfig::new(encoder, decoder, hidden), 2, Task::MultiClass, 4.9)
        .expect("valid configuration");
    (m, store)
}
