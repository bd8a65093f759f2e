//! Ensemble-dialogue corpus.
//!
//! A [`Conversation`] alternates between a user and the dialogue engine. Each
//! [`Turn`] carries the user's query, the human-written gold response, the
//! candidate responses returned by every agent in the ensemble and, for
//! evaluation data, the set of candidates an evaluator marked as correct.
//!
//! On disk a dataset is JSON Lines, one conversation per line:
//!
//! ```text
//! {"id":"c1","topic":"t0","engine_open":null,"turns":[{"user":"...","gold":"...",
//!   "candidates":[{"agent":"a1","text":"..."}],"labels":["a1"]}]}
//! ```
//!
//! `"labels": null` marks an unlabeled turn; `[]` means the evaluator found no
//! agent response acceptable.

mod split;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use split::{split_dataset, DatasetSplits, SplitRatios};
pub use synth::{generate_synthetic, AgentKind, AgentSpec, GeneratorConfig};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("conversation {conversation}: {field}: {detail}")]
    Invalid {
        conversation: String,
        field: String,
        detail: String,
    },
    #[error("line {line}: duplicate conversation id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("invalid split ratios: {0}")]
    Ratios(String),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Engine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(rename = "agent")]
    pub agent_id: String,
    pub text: String,
}

impl Candidate {
    pub fn new(agent_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            agent_id: agent_id.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    #[serde(rename = "user")]
    pub user_query: String,
    pub gold: String,
    pub candidates: Vec<Candidate>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
}

impl Turn {
    pub fn candidate(&self, agent_id: &str) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.agent_id == agent_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub topic: String,
    #[serde(default)]
    pub engine_open: Option<String>,
    pub turns: Vec<Turn>,
}

impl Conversation {
    /// Checks every structural invariant of a single conversation.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |field: String, detail: String| CorpusError::Invalid {
            conversation: self.id.clone(),
            field,
            detail,
        };
        if self.id.trim().is_empty() {
            return Err(invalid("id".into(), "empty id".into()));
        }
        if self.turns.is_empty() {
            return Err(invalid("turns".into(), "at least one turn is required".into()));
        }
        if let Some(open) = &self.engine_open {
            if open.trim().is_empty() {
                return Err(invalid("engine_open".into(), "empty utterance".into()));
            }
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.user_query.trim().is_empty() {
                return Err(invalid(format!("turns[{i}].user"), "empty utterance".into()));
            }
            if turn.gold.trim().is_empty() {
                return Err(invalid(format!("turns[{i}].gold"), "empty utterance".into()));
            }
            let mut seen = HashSet::new();
            for c in &turn.candidates {
                if !seen.insert(c.agent_id.as_str()) {
                    return Err(invalid(
                        format!("turns[{i}].candidates"),
                        format!("duplicate agent {:?}", c.agent_id),
                    ));
                }
            }
            if let Some(labels) = &turn.labels {
                if let Some(unknown) = labels.iter().find(|l| !seen.contains(l.as_str())) {
                    return Err(invalid(
                        format!("turns[{i}].labels"),
                        format!("references unknown agent {unknown:?}"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// The realized utterance sequence under gold history:
    /// `[engine_open?, q0, gold0, q1, gold1, ...]`.
    pub fn gold_sequence(&self) -> Vec<&str> {
        let mut seq = Vec::with_capacity(self.turns.len() * 2 + 1);
        if let Some(open) = &self.engine_open {
            seq.push(open.as_str());
        }
        for t in &self.turns {
            seq.push(t.user_query.as_str());
            seq.push(t.gold.as_str());
        }
        seq
    }
}

/// One scoring instance under gold history.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceInstance {
    pub turn: usize,
    /// At most `window` utterances, most recent last.
    pub context: Vec<String>,
    pub query: String,
    pub gold: String,
    pub candidates: Vec<Candidate>,
}

/// Builds one instance per turn whose context is the trailing `window`
/// utterances of the gold-realized sequence strictly before the query.
pub fn build_utterance_instances(conv: &Conversation, window: usize) -> Vec<UtteranceInstance> {
    let seq = conv.gold_sequence();
    let offset = usize::from(conv.engine_open.is_some());
    conv.turns
        .iter()
        .enumerate()
        .map(|(t, turn)| {
            let query_pos = offset + 2 * t;
            let start = query_pos.saturating_sub(window);
            UtteranceInstance {
                turn: t,
                context: seq[start..query_pos].iter().map(|s| s.to_string()).collect(),
                query: turn.user_query.clone(),
                gold: turn.gold.clone(),
                candidates: turn.candidates.clone(),
            }
        })
        .collect()
}

/// Realized utterance sequence of a conversation as it unfolds, whatever
/// source fills the engine slots.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RollingHistory {
    seq: Vec<String>,
}

impl RollingHistory {
    pub fn new(engine_open: Option<&str>) -> Self {
        Self {
            seq: engine_open.map(|s| vec![s.to_string()]).unwrap_or_default(),
        }
    }

    /// The trailing `window` utterances, most recent last.
    pub fn context(&self, window: usize) -> Vec<String> {
        self.seq[self.seq.len().saturating_sub(window)..].to_vec()
    }

    pub fn push_query(&mut self, query: &str) {
        self.seq.push(query.to_string());
    }

    pub fn push_engine(&mut self, response: &str) {
        self.seq.push(response.to_string());
    }

    pub fn utterances(&self) -> &[String] {
        &self.seq
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }
}

/// Parses and validates a JSONL dataset from any reader. Blank lines are skipped.
pub fn parse_dataset<R: BufRead>(reader: R) -> Result<Vec<Conversation>, CorpusError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let conv: Conversation = serde_json::from_str(&line)
            .map_err(|source| CorpusError::Parse { line: lineno, source })?;
        conv.validate()?;
        if !ids.insert(conv.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: lineno,
                id: conv.id,
            });
        }
        out.push(conv);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Conversation>, CorpusError> {
    let file = File::open(path)?;
    parse_dataset(BufReader::new(file))
}

pub fn write_dataset<W: Write>(mut writer: W, convs: &[Conversation]) -> Result<(), CorpusError> {
    for conv in convs {
        serde_json::to_writer(&mut writer, conv).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, convs: &[Conversation]) -> Result<(), CorpusError> {
    let file = File::create(path)?;
    write_dataset(BufWriter::new(file), convs)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentCounts {
    pub responses: usize,
    pub labeled_correct: usize,
}

/// Summary counts written next to generated datasets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub conversations: usize,
    pub turns: usize,
    /// Labeled turns where no agent response was marked correct.
    pub empty_label_turns: usize,
    pub topics: BTreeMap<String, usize>,
    pub agents: BTreeMap<String, AgentCounts>,
}

impl DatasetManifest {
    pub fn from_dataset(convs: &[Conversation]) -> Self {
        let mut m = Self {
            conversations: convs.len(),
            ..Default::default()
        };
        for c in convs {
            *m.topics.entry(c.topic.clone()).or_default() += 1;
            for t in &c.turns {
                m.turns += 1;
                if t.labels.as_ref().is_some_and(|l| l.is_empty()) {
                    m.empty_label_turns += 1;
                }
                for cand in &t.candidates {
                    let e = m.agents.entry(cand.agent_id.clone()).or_default();
                    e.responses += 1;
                    if t.labels.as_ref().is_some_and(|l| l.contains(&cand.agent_id)) {
                        e.labeled_correct += 1;
                    }
                }
            }
        }
        m
    }
}
