// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared inputs for the benchmarks.

use gim_core::data::{generate, DatasetRecord, Task};
use gim_core::model::plant::{plant_weights, PlantKind, PlantParams};
use gim_core::model::{ModelConfig, Weights};

/// A planted self-repair model at the default size with a copy-key batch.
pub struct Fixture {
    pub weights: Weights,
    pub records: Vec<DatasetRecord>,
}

impl Fixture {
    pub fn new(n: usize) -> Self {
        let config = ModelConfig::default();
        let (weights, _) = plant_weights(&config, PlantKind::SelfRepair, PlantParams::default(), 1)
            .expect("default config fits the plant");
        let records = generate(Task::CopyKey, n, 2, config.vocab_size, config.max_seq_len)
            .expect("valid task parameters");
        Self { weights, records }
    }

    /// A full-length input for scaling measurements.
    pub fn long_input(&self) -> Vec<usize> {
        let c = &self.weights.config;
        (0..c.max_seq_len)
            .map(|i| (i * 7 + 3) % c.vocab_size)
            .collect()
    }
}
