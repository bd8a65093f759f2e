use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Conversation, CorpusError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(CorpusError::Ratios(format!("ratios must be positive, got {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::Ratios(format!("ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<Conversation>,
    pub valid: Vec<Conversation>,
    pub test: Vec<Conversation>,
    /// Topics with fewer than three conversations; these went wholly to train.
    pub undersized_topics: Vec<String>,
}

/// Topic-stratified split. Conversations of each topic are shuffled with a
/// seeded generator and cut proportionally; topics are visited in sorted
/// order so the result depends only on `(convs, ratios, seed)`.
pub fn split_dataset(
    convs: &[Conversation],
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetSplits, CorpusError> {
    ratios.validate()?;
    let mut by_topic: BTreeMap<&str, Vec<&Conversation>> = BTreeMap::new();
    for c in convs {
        by_topic.entry(c.topic.as_str()).or_default().push(c);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DatasetSplits::default();
    for (topic, mut group) in by_topic {
        let n = group.len();
        if n < 3 {
            log::warn!("topic {topic:?} has {n} conversation(s); assigning all to train");
            out.undersized_topics.push(topic.to_string());
            out.train.extend(group.into_iter().cloned());
            continue;
        }
        group.shuffle(&mut rng);
        let (n_train, n_valid) = allocate(n, &ratios);
        let (train, rest) = group.split_at(n_train);
        let (valid, test) = rest.split_at(n_valid);
        out.train.extend(train.iter().map(|c| (*c).clone()));
        out.valid.extend(valid.iter().map(|c| (*c).clone()));
        out.test.extend(test.iter().map(|c| (*c).clone()));
    }
    Ok(out)
}

/// Returns `(n_train, n_valid)`; the remainder is test. Requires `n >= 3` and
/// guarantees at least one conversation in every split.
fn allocate(n: usize, r: &SplitRatios) -> (usize, usize) {
    let nf = n as f64;
    let mut valid = ((nf * r.valid).round() as usize).max(1);
    let mut test = ((nf * r.test).round() as usize).max(1);
    while valid + test > n - 1 {
        if valid >= test {
            valid -= 1;
        } else {
            test -= 1;
        }
    }
    (n - valid - test, valid)
}
