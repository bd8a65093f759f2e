//! Synthetic ensemble-dialogue generator.
//!
//! Every conversation sticks to one topic `t<i>`. Each turn asks about a slot
//! `s<j>`, either self-contained (`topic t3 ask s5`) or context-dependent
//! (`ask s5`, topic only recoverable from history). The single correct
//! content is `topic t3 answer s5 v<k>` where `v<k>` is a seeded hash of
//! (topic, slot). Correctness is pure token containment, so labels can be
//! re-derived from the text alone with [`contains_answer`].

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Candidate, Conversation, CorpusError, Turn};
use crate::hash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    /// Right answer with probability `p_correct`, tokens shuffled.
    Paraphrase,
    /// Sees only the query: right (with probability `p_correct`) when the
    /// query names its topic, a guessed wrong topic otherwise.
    ContextFree,
    /// Generic chit-chat drawn from a fixed pool.
    RandomCorpus,
    /// A well-formed answer about another topic and slot.
    OffTopic,
    /// Asks a question back about another slot of the current topic.
    FollowUp,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: String,
    pub kind: AgentKind,
    /// Only read by paraphrase and context-free agents.
    #[serde(default = "one")]
    pub p_correct: f64,
}

impl AgentSpec {
    pub fn new(id: impl Into<String>, kind: AgentKind, p_correct: f64) -> Self {
        Self {
            id: id.into(),
            kind,
            p_correct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub topics: usize,
    pub conversations_per_topic: usize,
    pub mean_turns: usize,
    pub slots: usize,
    pub values: usize,
    /// Probability that a query with recoverable topic omits it.
    pub context_dependent_rate: f64,
    /// Open each conversation with `topic <T> hello` from the engine.
    pub engine_open: bool,
    pub agents: Vec<AgentSpec>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            topics: 10,
            conversations_per_topic: 50,
            mean_turns: 6,
            slots: 8,
            values: 16,
            context_dependent_rate: 0.5,
            engine_open: true,
            agents: default_roster(),
        }
    }
}

pub fn default_roster() -> Vec<AgentSpec> {
    vec![
        AgentSpec::new("paraphrase", AgentKind::Paraphrase, 0.8),
        AgentSpec::new("context_free", AgentKind::ContextFree, 1.0),
        AgentSpec::new("random_corpus", AgentKind::RandomCorpus, 1.0),
        AgentSpec::new("off_topic", AgentKind::OffTopic, 1.0),
        AgentSpec::new("follow_up", AgentKind::FollowUp, 1.0),
    ]
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |m: String| Err(CorpusError::Config(m));
        for (name, v) in [
            ("topics", self.topics),
            ("conversations_per_topic", self.conversations_per_topic),
            ("mean_turns", self.mean_turns),
            ("slots", self.slots),
            ("values", self.values),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.context_dependent_rate) {
            return fail(format!(
                "context_dependent_rate {} outside [0, 1]",
                self.context_dependent_rate
            ));
        }
        if self.agents.is_empty() {
            return fail("agent roster is empty".into());
        }
        let mut ids = HashSet::new();
        for a in &self.agents {
            if a.id.trim().is_empty() || a.id.contains(char::is_whitespace) {
                return fail(format!("invalid agent id {:?}", a.id));
            }
            if !ids.insert(a.id.as_str()) {
                return fail(format!("duplicate agent id {:?}", a.id));
            }
            if !(0.0..=1.0).contains(&a.p_correct) {
                return fail(format!("agent {:?}: p_correct {} outside [0, 1]", a.id, a.p_correct));
            }
        }
        Ok(())
    }
}

const CHIT_CHAT: &[&str] = &[
    "that sounds great",
    "i am not sure about that",
    "tell me more please",
    "let us talk about something else",
    "really i did not know",
    "i see what you mean",
    "what do you think about it",
    "haha that is funny",
    "sorry i do not understand",
    "maybe another time",
];

pub fn topic_token(i: usize) -> String {
    format!("t{i}")
}

pub fn slot_token(i: usize) -> String {
    format!("s{i}")
}

pub fn value_token(i: usize) -> String {
    format!("v{i}")
}

/// The value index that answers `(topic, slot)` under a given seed.
pub fn oracle_value(topic: usize, slot: usize, values: usize, seed: u64) -> usize {
    let h = hash::combine(&[hash::fnv1a(b"oracle-value"), topic as u64, slot as u64, seed]);
    (h % values as u64) as usize
}

/// True iff the lowercased whitespace tokens of `text` include all three
/// required tokens.
pub fn contains_answer(text: &str, topic: &str, slot: &str, value: &str) -> bool {
    let toks: HashSet<String> = text.split_whitespace().map(str::to_lowercase).collect();
    toks.contains(topic) && toks.contains(slot) && toks.contains(value)
}

/// Queries that do not name a topic can only be answered from history.
pub fn is_context_dependent(query: &str) -> bool {
    !query.split_whitespace().any(|t| t.eq_ignore_ascii_case("topic"))
}

fn answer_text(topic: &str, slot: &str, value: &str) -> String {
    format!("topic {topic} answer {slot} {value}")
}

/// Uniform index in `0..n` different from `avoid`, or `None` when `n < 2`.
fn other_index(rng: &mut ChaCha8Rng, n: usize, avoid: usize) -> Option<usize> {
    if n < 2 {
        return None;
    }
    let i = rng.gen_range(0..n - 1);
    Some(if i >= avoid { i + 1 } else { i })
}

struct TurnFacts {
    topic: usize,
    slot: usize,
    value: usize,
    dependent: bool,
}

struct Generator<'a> {
    cfg: &'a GeneratorConfig,
    seed: u64,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn value(&self, topic: usize, slot: usize) -> usize {
        oracle_value(topic, slot, self.cfg.values, self.seed)
    }

    /// A value token that is wrong for `(topic, slot)`, falling back to the
    /// slot when only one value exists.
    fn wrong_answer(&mut self, f: &TurnFacts) -> Vec<String> {
        if let Some(v) = other_index(&mut self.rng, self.cfg.values, f.value) {
            return vec![topic_token(f.topic), slot_token(f.slot), value_token(v)];
        }
        let slot = other_index(&mut self.rng, self.cfg.slots, f.slot).unwrap_or(f.slot);
        let v = self.value(f.topic, slot);
        if slot == f.slot {
            // Nothing can be wrong in a one-slot, one-value world.
            return vec![topic_token(f.topic), slot_token(slot), "unknown".into()];
        }
        vec![topic_token(f.topic), slot_token(slot), value_token(v)]
    }

    fn respond(&mut self, agent: &AgentSpec, f: &TurnFacts) -> String {
        match agent.kind {
            AgentKind::Paraphrase => {
                let [t, s, v] = if self.rng.gen_bool(agent.p_correct) {
                    [topic_token(f.topic), slot_token(f.slot), value_token(f.value)]
                } else {
                    let w = self.wrong_answer(f);
                    [w[0].clone(), w[1].clone(), w[2].clone()]
                };
                let mut toks = vec!["topic".to_string(), t, "answer".into(), s, v];
                toks.shuffle(&mut self.rng);
                toks.join(" ")
            }
            AgentKind::ContextFree => {
                if f.dependent {
                    match other_index(&mut self.rng, self.cfg.topics, f.topic) {
                        Some(guess) => {
                            let v = self.value(guess, f.slot);
                            answer_text(&topic_token(guess), &slot_token(f.slot), &value_token(v))
                        }
                        None => format!("topic unknown answer {}", slot_token(f.slot)),
                    }
                } else if self.rng.gen_bool(agent.p_correct) {
                    answer_text(&topic_token(f.topic), &slot_token(f.slot), &value_token(f.value))
                } else {
                    let w = self.wrong_answer(f);
                    answer_text(&w[0], &w[1], &w[2])
                }
            }
            AgentKind::RandomCorpus => CHIT_CHAT[self.rng.gen_range(0..CHIT_CHAT.len())].to_string(),
            AgentKind::OffTopic => {
                let topic = other_index(&mut self.rng, self.cfg.topics, f.topic).unwrap_or(f.topic);
                let slot = if topic == f.topic {
                    other_index(&mut self.rng, self.cfg.slots, f.slot).unwrap_or(f.slot)
                } else {
                    self.rng.gen_range(0..self.cfg.slots)
                };
                let v = self.value(topic, slot);
                answer_text(&topic_token(topic), &slot_token(slot), &value_token(v))
            }
            AgentKind::FollowUp => {
                let slot = other_index(&mut self.rng, self.cfg.slots, f.slot).unwrap_or(f.slot);
                format!("topic {} ask {}", topic_token(f.topic), slot_token(slot))
            }
        }
    }

    fn turn_count(&mut self) -> usize {
        let m = self.cfg.mean_turns;
        let spread = (m - 1).min(2);
        self.rng.gen_range(m - spread..=m + spread)
    }

    fn conversation(&mut self, topic: usize, index: usize) -> Conversation {
        let n_turns = self.turn_count();
        let t_tok = topic_token(topic);
        let engine_open = self.cfg.engine_open.then(|| format!("topic {t_tok} hello"));
        let mut turns = Vec::with_capacity(n_turns);
        for t in 0..n_turns {
            let slot = self.rng.gen_range(0..self.cfg.slots);
            let value = self.value(topic, slot);
            let topic_in_history = t > 0 || engine_open.is_some();
            let dependent = topic_in_history && self.rng.gen_bool(self.cfg.context_dependent_rate);
            let facts = TurnFacts {
                topic,
                slot,
                value,
                dependent,
            };
            let s_tok = slot_token(slot);
            let user_query = if dependent {
                format!("ask {s_tok}")
            } else {
                format!("topic {t_tok} ask {s_tok}")
            };
            let gold = answer_text(&t_tok, &s_tok, &value_token(value));
            let agents = self.cfg.agents.clone();
            let candidates: Vec<Candidate> = agents
                .iter()
                .map(|a| Candidate::new(a.id.clone(), self.respond(a, &facts)))
                .collect();
            let v_tok = value_token(value);
            let labels = candidates
                .iter()
                .filter(|c| contains_answer(&c.text, &t_tok, &s_tok, &v_tok))
                .map(|c| c.agent_id.clone())
                .collect();
            turns.push(Turn {
                user_query,
                gold,
                candidates,
                labels: Some(labels),
            });
        }
        Conversation {
            id: format!("{t_tok}-c{index:04}"),
            topic: t_tok,
            engine_open,
            turns,
        }
    }
}

/// Generates `topics * conversations_per_topic` labeled conversations.
/// Output is a pure function of `(config, seed)`.
pub fn generate_synthetic(config: &GeneratorConfig, seed: u64) -> Result<Vec<Conversation>, CorpusError> {
    config.validate()?;
    let mut gen = Generator {
        cfg: config,
        seed,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut out = Vec::with_capacity(config.topics * config.conversations_per_topic);
    for topic in 0..config.topics {
        for i in 0..config.conversations_per_topic {
            out.push(gen.conversation(topic, i));
        }
    }
    Ok(out)
}
