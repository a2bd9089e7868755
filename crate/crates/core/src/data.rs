// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic datasets and seed derivation.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GimError, Result};
use crate::model::plant::{ANSWER_TOKEN, FIRST_FILLER, KEY_TOKEN, SIGNAL_TOKEN};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Shortest and longest generated sequence.
pub const MIN_TASK_LEN: usize = 12;
pub const MAX_TASK_LEN: usize = 20;

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub format_version: u32,
    pub id: String,
    pub tokens: Vec<usize>,
    pub target_token: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_positions: Option<Vec<usize>>,
}

impl DatasetRecord {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.format_version != DATASET_FORMAT_VERSION {
            return Err(GimError::invalid(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        if self.tokens.is_empty() {
            return Err(GimError::invalid("tokens must be non-empty"));
        }
        if let Some((i, t)) = self
            .tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t >= vocab_size)
        {
            return Err(GimError::invalid(format!(
                "token id {t} at position {i} is outside the vocabulary of {vocab_size}"
            )));
        }
        if self.target_token >= vocab_size {
            return Err(GimError::invalid(format!(
                "target token {} is outside the vocabulary of {vocab_size}",
                self.target_token
            )));
        }
        if let Some(p) = self
            .ground_truth_positions
            .iter()
            .flatten()
            .find(|&&p| p >= self.tokens.len())
        {
            return Err(GimError::invalid(format!(
                "ground-truth position {p} beyond sequence length {}",
                self.tokens.len()
            )));
        }
        Ok(())
    }
}

/// Serializes records as JSON lines.
pub fn to_jsonl(records: &[DatasetRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records always serialize"));
        out.push('\n');
    }
    out
}

/// Parses JSON lines, skipping blank lines. Errors carry 1-based line numbers.
pub fn parse_jsonl(text: &str, vocab_size: usize) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| GimError::Parse {
            line: i + 1,
            message,
        };
        let record: DatasetRecord =
            serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        record
            .validate(vocab_size)
            .map_err(|e| parse_err(e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Two key tokens among fillers; the answer depends on either key.
    CopyKey,
    /// One signal token among fillers.
    PlantedSentiment,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CopyKey => "copy-key",
            Self::PlantedSentiment => "planted-sentiment",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = GimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy-key" => Ok(Self::CopyKey),
            "planted-sentiment" => Ok(Self::PlantedSentiment),
            other => Err(GimError::invalid(format!("unknown task `{other}`"))),
        }
    }
}

/// Generates `n` records of `task`. Special tokens sit in `1..len-1`, so
/// position 0 and the query position always hold fillers.
pub fn generate(
    task: Task,
    n: usize,
    seed: u64,
    vocab_size: usize,
    max_seq_len: usize,
) -> Result<Vec<DatasetRecord>> {
    if n == 0 {
        return Err(GimError::invalid("dataset size must be at least 1"));
    }
    if vocab_size <= FIRST_FILLER {
        return Err(GimError::invalid(format!(
            "vocab_size must exceed {FIRST_FILLER} to leave room for fillers"
        )));
    }
    if max_seq_len < MIN_TASK_LEN {
        return Err(GimError::invalid(format!(
            "max_seq_len must be at least {MIN_TASK_LEN}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let longest = MAX_TASK_LEN.min(max_seq_len);
    let records = (0..n)
        .map(|i| {
            let len = rng.random_range(MIN_TASK_LEN..=longest);
            let mut tokens: Vec<usize> = (0..len)
                .map(|_| rng.random_range(FIRST_FILLER..vocab_size))
                .collect();
            let (special, count) = match task {
                Task::CopyKey => (KEY_TOKEN, 2),
                Task::PlantedSentiment => (SIGNAL_TOKEN, 1),
            };
            let mut positions: Vec<usize> = sample(&mut rng, len - 2, count)
                .into_iter()
                .map(|p| p + 1)
                .collect();
            positions.sort_unstable();
            for &p in &positions {
                tokens[p] = special;
            }
            DatasetRecord {
                format_version: DATASET_FORMAT_VERSION,
                id: format!("{task}-{i:05}"),
                tokens,
                target_token: ANSWER_TOKEN,
                label: Some(task.to_string()),
                ground_truth_positions: Some(positions),
            }
        })
        .collect();
    Ok(records)
}

/// Derives an independent seed for a named component from a master seed.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}
