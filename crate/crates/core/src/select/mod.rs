//! Response selection, cosine baselines and the oracle evaluation protocol.
//!
//! Evaluation follows the labeled-oracle protocol: a selection is correct
//! when it is one of the evaluator-labeled candidates. When the evaluator
//! labeled none, the gold response joins the candidates under the id
//! [`GOLD_ID`] and only choosing it counts as correct.

pub mod stats;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Candidate, Conversation, RollingHistory};
use crate::embed::{pooled_utterance, EmbedError, EmbeddingProvider, Featurizer, TokenPool};
use crate::model::{forward_into, ForwardTape, ModelError, ScorerParams};

pub use stats::{clopper_pearson, cohens_kappa, intervals_disjoint, StatsError};

pub const GOLD_ID: &str = "gold";

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("no candidates to select from")]
    NoCandidates,
    #[error("vectors have dimensions {0} and {1}")]
    Dimension(usize, usize),
    #[error("conversation {conversation} turn {turn} has no evaluator labels")]
    Unlabeled { conversation: String, turn: usize },
    #[error("featurizer input dimension {features} does not match model input {model}")]
    ModelInput { features: usize, model: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub scores: Vec<f64>,
}

/// Index of the first maximum.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

pub trait ResponseSelector: Sync {
    fn name(&self) -> String;

    fn scores(&self, context: &[String], query: &str, candidates: &[Candidate]) -> Result<Vec<f64>, SelectError>;

    /// Highest-scoring candidate; ties go to the lowest index.
    fn select(&self, context: &[String], query: &str, candidates: &[Candidate]) -> Result<Selection, SelectError> {
        if candidates.is_empty() {
            return Err(SelectError::NoCandidates);
        }
        let scores = self.scores(context, query, candidates)?;
        let index = argmax_first(&scores).expect("non-empty scores");
        Ok(Selection { index, scores })
    }
}

/// The trained scorer over a featurizer.
#[derive(Debug, Clone, Copy)]
pub struct NrsSelector<'a> {
    pub featurizer: &'a Featurizer,
    pub params: &'a ScorerParams,
}

impl<'a> NrsSelector<'a> {
    pub fn new(featurizer: &'a Featurizer, params: &'a ScorerParams) -> Result<Self, SelectError> {
        if featurizer.input_dim() != params.input_dim() {
            return Err(SelectError::ModelInput {
                features: featurizer.input_dim(),
                model: params.input_dim(),
            });
        }
        Ok(Self { featurizer, params })
    }
}

impl ResponseSelector for NrsSelector<'_> {
    fn name(&self) -> String {
        "nrs".into()
    }

    fn scores(&self, context: &[String], query: &str, candidates: &[Candidate]) -> Result<Vec<f64>, SelectError> {
        let mut tape = ForwardTape::default();
        candidates
            .iter()
            .map(|c| {
                let x = self.featurizer.features(context, query, &c.text)?;
                Ok(forward_into(self.params, &x, &mut tape)?)
            })
            .collect()
    }
}

/// Scores every candidate with the model and returns the best one.
pub fn select_best(
    params: &ScorerParams,
    featurizer: &Featurizer,
    context: &[String],
    query: &str,
    candidates: &[Candidate],
) -> Result<Selection, SelectError> {
    NrsSelector::new(featurizer, params)?.select(context, query, candidates)
}

/// `a . b / max(|a| |b|, 1e-8)`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, SelectError> {
    if a.len() != b.len() {
        return Err(SelectError::Dimension(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(dot / (na * nb).max(1e-8))
}

fn sentence(provider: &dyn EmbeddingProvider, text: &str) -> Result<Vec<f64>, SelectError> {
    Ok(pooled_utterance(provider, text, TokenPool::Avg)?)
}

fn cosine_scores(provider: &dyn EmbeddingProvider, reference: &[f64], candidates: &[Candidate]) -> Result<Vec<f64>, SelectError> {
    candidates
        .iter()
        .map(|c| cosine(reference, &sentence(provider, &c.text)?))
        .collect()
}

/// Cosine similarity between query and response sentence embeddings
/// (token vectors averaged).
#[derive(Clone)]
pub struct CosineQr {
    pub provider: Arc<dyn EmbeddingProvider>,
}

impl ResponseSelector for CosineQr {
    fn name(&self) -> String {
        "cosine_qr".into()
    }

    fn scores(&self, _context: &[String], query: &str, candidates: &[Candidate]) -> Result<Vec<f64>, SelectError> {
        let q = sentence(self.provider.as_ref(), query)?;
        cosine_scores(self.provider.as_ref(), &q, candidates)
    }
}

/// Like [`CosineQr`] but the reference vector is the mean of the history
/// and query sentence embeddings.
#[derive(Clone)]
pub struct CosineCqr {
    pub provider: Arc<dyn EmbeddingProvider>,
}

impl ResponseSelector for CosineCqr {
    fn name(&self) -> String {
        "cosine_cqr".into()
    }

    fn scores(&self, context: &[String], query: &str, candidates: &[Candidate]) -> Result<Vec<f64>, SelectError> {
        let p = self.provider.as_ref();
        let mut reference = sentence(p, query)?;
        for c in context {
            for (r, x) in reference.iter_mut().zip(sentence(p, c)?) {
                *r += x;
            }
        }
        let n = (context.len() + 1) as f64;
        reference.iter_mut().for_each(|r| *r /= n);
        cosine_scores(p, &reference, candidates)
    }
}

pub fn baseline_qr(provider: Arc<dyn EmbeddingProvider>, query: &str, candidates: &[Candidate]) -> Result<usize, SelectError> {
    Ok(CosineQr { provider }.select(&[], query, candidates)?.index)
}

pub fn baseline_cqr(
    provider: Arc<dyn EmbeddingProvider>,
    context: &[String],
    query: &str,
    candidates: &[Candidate],
) -> Result<usize, SelectError> {
    Ok(CosineCqr { provider }.select(context, query, candidates)?.index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub agent: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub conversation: String,
    pub turn: usize,
    pub chosen: String,
    pub scores: Vec<ScoredCandidate>,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    /// Past engine turns are the gold responses.
    Oracle,
    /// Past engine turns are the selector's own earlier choices.
    Rollout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub selector: String,
    pub history: HistoryMode,
    pub n: u64,
    pub correct: u64,
    pub accuracy: f64,
    pub confidence: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub records: Vec<SelectionRecord>,
}

impl EvalReport {
    pub fn interval(&self) -> (f64, f64) {
        (self.ci_lower, self.ci_upper)
    }

    /// Disjoint 95% intervals.
    pub fn significantly_differs(&self, other: &EvalReport) -> bool {
        intervals_disjoint(self.interval(), other.interval())
    }

    fn from_records(selector: String, history: HistoryMode, records: Vec<SelectionRecord>) -> Result<Self, SelectError> {
        let n = records.len() as u64;
        let correct = records.iter().filter(|r| r.correct).count() as u64;
        let (ci_lower, ci_upper) = if n == 0 { (0.0, 1.0) } else { clopper_pearson(correct, n, 0.05)? };
        Ok(Self {
            selector,
            history,
            n,
            correct,
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            confidence: 0.95,
            ci_lower,
            ci_upper,
            records,
        })
    }
}

/// Selects for one labeled turn. Returns the record and the chosen text.
fn judge_turn(
    selector: &dyn ResponseSelector,
    conv: &Conversation,
    turn_idx: usize,
    context: &[String],
) -> Result<(SelectionRecord, String), SelectError> {
    let turn = &conv.turns[turn_idx];
    let labels = turn.labels.as_ref().ok_or_else(|| SelectError::Unlabeled {
        conversation: conv.id.clone(),
        turn: turn_idx,
    })?;
    let mut pool = turn.candidates.clone();
    if labels.is_empty() {
        pool.push(Candidate::new(GOLD_ID, turn.gold.clone()));
    }
    let sel = selector.select(context, &turn.user_query, &pool)?;
    let chosen = &pool[sel.index];
    let correct = if labels.is_empty() {
        chosen.agent_id == GOLD_ID
    } else {
        labels.contains(&chosen.agent_id)
    };
    let record = SelectionRecord {
        conversation: conv.id.clone(),
        turn: turn_idx,
        chosen: chosen.agent_id.clone(),
        scores: pool
            .iter()
            .zip(&sel.scores)
            .map(|(c, &score)| ScoredCandidate {
                agent: c.agent_id.clone(),
                score,
            })
            .collect(),
        correct,
    };
    Ok((record, chosen.text.clone()))
}

fn evaluate(
    selector: &dyn ResponseSelector,
    convs: &[Conversation],
    window: usize,
    mode: HistoryMode,
) -> Result<EvalReport, SelectError> {
    // Fail before doing any work if a turn is unlabeled.
    for c in convs {
        if let Some(t) = c.turns.iter().position(|t| t.labels.is_none()) {
            return Err(SelectError::Unlabeled {
                conversation: c.id.clone(),
                turn: t,
            });
        }
    }
    let mut records = Vec::new();
    for conv in convs {
        let mut history = RollingHistory::new(conv.engine_open.as_deref());
        for (t, turn) in conv.turns.iter().enumerate() {
            let context = history.context(window);
            let (record, chosen_text) = judge_turn(selector, conv, t, &context)?;
            records.push(record);
            history.push_query(&turn.user_query);
            match mode {
                HistoryMode::Oracle => history.push_engine(&turn.gold),
                HistoryMode::Rollout => history.push_engine(&chosen_text),
            }
        }
    }
    EvalReport::from_records(selector.name(), mode, records)
}

/// Oracle-history evaluation over labeled conversations.
pub fn evaluate_oracle(selector: &dyn ResponseSelector, convs: &[Conversation], window: usize) -> Result<EvalReport, SelectError> {
    evaluate(selector, convs, window, HistoryMode::Oracle)
}

/// Same protocol, but each conversation's history is built from the
/// selector's own earlier choices.
pub fn evaluate_rollout(selector: &dyn ResponseSelector, convs: &[Conversation], window: usize) -> Result<EvalReport, SelectError> {
    evaluate(selector, convs, window, HistoryMode::Rollout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;
    use crate::embed::{FileEmbeddings, HashedEmbedder, PoolingSpec};

    /// Picks a fixed agent id when present, else the first candidate.
    struct Fixed(&'static str);

    impl ResponseSelector for Fixed {
        fn name(&self) -> String {
            format!("fixed:{}", self.0)
        }
        fn scores(&self, _: &[String], _: &str, cands: &[Candidate]) -> Result<Vec<f64>, SelectError> {
            Ok(cands.iter().map(|c| if c.agent_id == self.0 { 1.0 } else { 0.0 }).collect())
        }
    }

    fn hashed() -> Arc<dyn EmbeddingProvider> {
        Arc::new(HashedEmbedder::new(32, 3, 0.7).unwrap())
    }

    fn cands(texts: &[&str]) -> Vec<Candidate> {
        texts.iter().enumerate().map(|(i, t)| Candidate::new(format!("a{i}"), *t)).collect()
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax_first(&[0.0, 0.0]), Some(0));
        assert_eq!(argmax_first(&[]), None);
    }

    #[test]
    fn zero_model_picks_first() {
        let fz = Featurizer::new(hashed(), PoolingSpec::default(), 2);
        let p = ScorerParams::zeros(fz.input_dim(), 8, 3).unwrap();
        let sel = select_best(&p, &fz, &[], "hello", &cands(&["x", "y", "z"])).unwrap();
        assert_eq!(sel.index, 0);
        assert_eq!(sel.scores, vec![0.0; 3]);
        let one = select_best(&p, &fz, &[], "hello", &cands(&["only"])).unwrap();
        assert_eq!(one.index, 0);
        assert!(matches!(select_best(&p, &fz, &[], "q", &[]), Err(SelectError::NoCandidates)));
    }

    #[test]
    fn mismatched_model_rejected() {
        let fz = Featurizer::new(hashed(), PoolingSpec::default(), 2);
        let p = ScorerParams::zeros(7, 8, 3).unwrap();
        assert!(matches!(NrsSelector::new(&fz, &p), Err(SelectError::ModelInput { .. })));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[3.0, 1.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn qr_prefers_identical_text() {
        let c = cands(&["something else", "how is the weather", "no"]);
        assert_eq!(baseline_qr(hashed(), "how is the weather", &c).unwrap(), 1);
        assert_eq!(baseline_qr(hashed(), "q", &c[..1]).unwrap(), 0);
    }

    #[test]
    fn cqr_reduces_to_qr() {
        let c = cands(&["a b", "c d e", "f", "a b c"]);
        for q in ["a", "c d", "f e", "zzz"] {
            assert_eq!(
                baseline_cqr(hashed(), &[], q, &c).unwrap(),
                baseline_qr(hashed(), q, &c).unwrap()
            );
            assert_eq!(
                baseline_cqr(hashed(), &[q.to_string()], q, &c).unwrap(),
                baseline_qr(hashed(), q, &c).unwrap()
            );
        }
    }

    #[test]
    fn planted_vectors() {
        // Single-token utterances, so the avg-pooled embedding is the stored row.
        let data = [
            r#"{"key":"q","vectors":[[1,0,0]]}"#,
            r#"{"key":"h","vectors":[[0,1,0]]}"#,
            r#"{"key":"r0","vectors":[[0.9,0.1,0]]}"#,
            r#"{"key":"r1","vectors":[[0.5,0.5,0]]}"#,
            r#"{"key":"r2","vectors":[[0,0,1]]}"#,
        ]
        .join("\n");
        let p: Arc<dyn EmbeddingProvider> = Arc::new(FileEmbeddings::from_reader(data.as_bytes(), 3).unwrap());
        let c = cands(&["r0", "r1", "r2"]);
        // qr: cos(q, r0) = 0.9/sqrt(0.82) ~ 0.9939, cos(q, r1) = 0.5/sqrt(0.5) ~ 0.7071, cos(q, r2) = 0
        let s = CosineQr { provider: Arc::clone(&p) }.scores(&[], "q", &c).unwrap();
        assert!((s[0] - 0.9 / 0.82f64.sqrt()).abs() < 1e-12);
        assert!((s[1] - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[2], 0.0);
        assert_eq!(baseline_qr(Arc::clone(&p), "q", &c).unwrap(), 0);
        // cqr with history h: reference (0.5, 0.5, 0) -> r1 is exact match
        let s = CosineCqr { provider: Arc::clone(&p) }.scores(&["h".into()], "q", &c).unwrap();
        assert!((s[1] - 1.0).abs() < 1e-12);
        assert!((s[0] - 0.5 / (0.82f64.sqrt() * 0.5f64.sqrt())).abs() < 1e-12);
        assert_eq!(baseline_cqr(p, &["h".into()], "q", &c).unwrap(), 1);
    }

    fn turn(labels: Option<Vec<&str>>) -> Turn {
        Turn {
            user_query: "q".into(),
            gold: "g".into(),
            candidates: vec![Candidate::new("a1", "x"), Candidate::new("a2", "y")],
            labels: labels.map(|l| l.into_iter().map(String::from).collect()),
        }
    }

    fn conv(turns: Vec<Turn>) -> Conversation {
        Conversation {
            id: "c".into(),
            topic: "t".into(),
            engine_open: None,
            turns,
        }
    }

    #[test]
    fn single_correct_pick() {
        let r = evaluate_oracle(&Fixed("a2"), &[conv(vec![turn(Some(vec!["a2"]))])], 2).unwrap();
        assert_eq!((r.n, r.correct, r.accuracy), (1, 1, 1.0));
        assert!(r.ci_lower <= 1.0 && r.ci_upper == 1.0);
        assert!((r.ci_lower - 0.025).abs() < 1e-9);
    }

    #[test]
    fn empty_labels_need_gold() {
        let r = evaluate_oracle(&Fixed("a1"), &[conv(vec![turn(Some(vec![]))])], 2).unwrap();
        assert_eq!(r.accuracy, 0.0);
        let r = evaluate_oracle(&Fixed(GOLD_ID), &[conv(vec![turn(Some(vec![]))])], 2).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.records[0].scores.last().unwrap().agent, GOLD_ID);
    }

    #[test]
    fn unlabeled_turn_is_error() {
        let c = conv(vec![turn(Some(vec!["a1"])), turn(None)]);
        assert!(matches!(
            evaluate_oracle(&Fixed("a1"), &[c], 2),
            Err(SelectError::Unlabeled { turn: 1, .. })
        ));
    }

    #[test]
    fn rollout_history_uses_choices() {
        // A selector that records the context it saw via its score.
        struct EchoContext;
        impl ResponseSelector for EchoContext {
            fn name(&self) -> String {
                "echo".into()
            }
            fn scores(&self, ctx: &[String], _: &str, c: &[Candidate]) -> Result<Vec<f64>, SelectError> {
                let saw_y = ctx.iter().any(|s| s == "y");
                Ok(c.iter().map(|x| if (x.agent_id == "a2") != saw_y { 1.0 } else { 0.0 }).collect())
            }
        }
        let c = conv(vec![turn(Some(vec!["a2"])), turn(Some(vec!["a2"]))]);
        // Turn 0 picks a2 ("y"). Rollout: turn 1 sees "y" and flips to a1.
        let roll = evaluate_rollout(&EchoContext, std::slice::from_ref(&c), 2).unwrap();
        assert_eq!(roll.correct, 1);
        assert_eq!(roll.history, HistoryMode::Rollout);
        let oracle = evaluate_oracle(&EchoContext, &[c], 2).unwrap();
        assert_eq!(oracle.correct, 2);
    }
}
