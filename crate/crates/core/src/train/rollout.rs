use rand::Rng;

use super::TrainError;
use crate::corpus::{Conversation, RollingHistory};
use crate::select::ResponseSelector;

/// Who fills the engine slots of a rolled-out history.
pub enum HistoryPolicy<'a> {
    Gold,
    /// The named agent's own responses.
    Agent(&'a str),
    /// Per engine slot, the selector's choice with probability `p`, else gold.
    Mixed { p: f64, selector: &'a dyn ResponseSelector },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Context (trailing window) seen by each turn's query.
    pub contexts: Vec<Vec<String>>,
    /// Whether each turn's engine slot was filled by the selector.
    pub model_slots: Vec<bool>,
}

/// Uniform draw on `(0, 1]`, so `r <= 0` never fires and `r <= 1` always does.
pub fn draw_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.gen::<f64>()
}

pub fn rollout_history<R: Rng + ?Sized>(
    conv: &Conversation,
    policy: &HistoryPolicy<'_>,
    window: usize,
    rng: &mut R,
) -> Result<Rollout, TrainError> {
    let mut history = RollingHistory::new(conv.engine_open.as_deref());
    let mut out = Rollout {
        contexts: Vec::with_capacity(conv.turns.len()),
        model_slots: Vec::with_capacity(conv.turns.len()),
    };
    for (t, turn) in conv.turns.iter().enumerate() {
        let context = history.context(window);
        history.push_query(&turn.user_query);
        let (engine, by_model) = match policy {
            HistoryPolicy::Gold => (turn.gold.clone(), false),
            HistoryPolicy::Agent(agent) => {
                let c = turn.candidate(agent).ok_or_else(|| TrainError::MissingAgent {
                    conversation: conv.id.clone(),
                    turn: t,
                    agent: agent.to_string(),
                })?;
                (c.text.clone(), false)
            }
            HistoryPolicy::Mixed { p, selector } => {
                if draw_unit(rng) <= *p {
                    let sel = selector.select(&context, &turn.user_query, &turn.candidates)?;
                    (turn.candidates[sel.index].text.clone(), true)
                } else {
                    (turn.gold.clone(), false)
                }
            }
        };
        history.push_engine(&engine);
        out.contexts.push(context);
        out.model_slots.push(by_model);
    }
    Ok(out)
}
