//! Three-phase training curriculum.
//!
//! 1. Utterance phase: histories are built from gold responses.
//! 2. Conversation phase: agent `j` is trained on a history made of its own
//!    past responses.
//! 3. Scheduled sampling: each engine slot of the rolling history holds the
//!    model's own selection with probability `p`, otherwise the gold
//!    response; `p` grows linearly over the remaining epochs.
//!
//! Every (instance, candidate) pair contributes one hinge term against the
//! gold response, followed by one optimizer step (or one per `batch_size`
//! pairs when batching is enabled).

mod rollout;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{build_utterance_instances, Conversation, RollingHistory};
use crate::embed::{EmbedError, Featurizer};
use crate::model::{backward_into, forward_into, FreezeMask, ForwardTape, Gradients, ModelError, ScorerParams};
use crate::optim::{hinge_loss_oriented, AdamConfig, AdamState, LossOrientation, LrSchedule, OptimError, Phase};
use crate::select::{evaluate_oracle, NrsSelector, ResponseSelector, SelectError};

pub use crate::corpus::RollingHistory as History;
pub use rollout::{draw_unit, rollout_history, HistoryPolicy, Rollout};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("conversation {conversation} turn {turn} has no candidates")]
    NoCandidates { conversation: String, turn: usize },
    #[error("conversation {conversation} turn {turn} lacks a response from agent {agent:?}")]
    MissingAgent {
        conversation: String,
        turn: usize,
        agent: String,
    },
    #[error("invalid training plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Select(#[from] SelectError),
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub utterance_epochs: usize,
    /// Total epochs of the conversation + scheduled-sampling run.
    pub conversation_epochs: usize,
    /// Last conversation-phase epoch; scheduled sampling starts after it.
    pub cutoff: usize,
    pub window: usize,
    pub seed: u64,
    pub patience: usize,
    pub delta: f64,
    pub orientation: LossOrientation,
    /// Epoch (1-based, conversation/sampling counter) from which every layer trains.
    pub unfreeze_epoch: usize,
    #[serde(default = "one")]
    pub batch_size: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            utterance_epochs: 10,
            conversation_epochs: 20,
            cutoff: 10,
            window: 2,
            seed: 0,
            patience: 2,
            delta: 1.0,
            orientation: LossOrientation::GoldAbove,
            unfreeze_epoch: 4,
            batch_size: 1,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Plan(m));
        if self.cutoff == 0 || self.cutoff >= self.conversation_epochs {
            return fail(format!(
                "need 0 < cutoff ({}) < conversation_epochs ({})",
                self.cutoff, self.conversation_epochs
            ));
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return fail(format!("margin {} must be non-negative", self.delta));
        }
        Ok(())
    }
}

/// `p = (epoch - cutoff) / (total - cutoff)`, clamped to `[0, 1]`.
pub fn mixing_factor(epoch: usize, cutoff: usize, total: usize) -> f64 {
    if total <= cutoff {
        return 1.0;
    }
    ((epoch as f64 - cutoff as f64) / (total - cutoff) as f64).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub p: Option<f64>,
    pub lr: f64,
    pub steps: u64,
    pub mean_loss: f64,
    /// `None` when there is no validation data.
    pub valid_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub epochs_run: usize,
    pub steps: u64,
    pub stopped_early: bool,
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone)]
struct EarlyStop {
    best: f64,
    stale: usize,
    patience: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        Self {
            best: f64::NEG_INFINITY,
            stale: 0,
            patience,
        }
    }

    fn should_stop(&mut self, acc: Option<f64>) -> bool {
        let Some(acc) = acc else { return false };
        if acc > self.best {
            self.best = acc;
            self.stale = 0;
            false
        } else {
            self.stale += 1;
            self.stale >= self.patience
        }
    }
}

#[derive(Debug, Default)]
struct EpochStats {
    steps: u64,
    pairs: u64,
    loss: f64,
}

/// Gold-history validation accuracy. Uses the labeled oracle protocol when
/// every turn is labeled, otherwise the fraction of turns whose gold response
/// outscores every candidate. `None` for an empty validation set.
pub fn validation_accuracy(
    featurizer: &Featurizer,
    params: &ScorerParams,
    valid: &[Conversation],
) -> Result<Option<f64>, TrainError> {
    if valid.iter().all(|c| c.turns.is_empty()) {
        return Ok(None);
    }
    let selector = NrsSelector::new(featurizer, params)?;
    let labeled = valid.iter().flat_map(|c| &c.turns).all(|t| t.labels.is_some());
    if labeled {
        return Ok(Some(evaluate_oracle(&selector, valid, featurizer.window())?.accuracy));
    }
    let (mut hit, mut n) = (0usize, 0usize);
    for conv in valid {
        for inst in build_utterance_instances(conv, featurizer.window()) {
            if inst.candidates.is_empty() {
                continue;
            }
            let gold = selector.scores(&inst.context, &inst.query, &[crate::corpus::Candidate::new("gold", inst.gold.clone())])?[0];
            let others = selector.scores(&inst.context, &inst.query, &inst.candidates)?;
            n += 1;
            if others.iter().all(|&s| gold > s) {
                hit += 1;
            }
        }
    }
    Ok((n > 0).then(|| hit as f64 / n as f64))
}

/// Owns the optimizer state and RNG across phases; parameters are passed in
/// so callers can snapshot them between phases.
pub struct Trainer<'a> {
    featurizer: &'a Featurizer,
    plan: TrainPlan,
    schedule: LrSchedule,
    adam: AdamState,
    rng: ChaCha8Rng,
    logs: Vec<EpochLog>,
    tape_gold: ForwardTape,
    tape_agent: ForwardTape,
    grads: Gradients,
    pending: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        featurizer: &'a Featurizer,
        params: &ScorerParams,
        plan: TrainPlan,
        schedule: LrSchedule,
        adam: AdamConfig,
    ) -> Result<Self, TrainError> {
        plan.validate()?;
        schedule.validate()?;
        if featurizer.input_dim() != params.input_dim() {
            return Err(TrainError::Plan(format!(
                "feature dimension {} does not match model input {}",
                featurizer.input_dim(),
                params.input_dim()
            )));
        }
        if featurizer.window() != plan.window {
            return Err(TrainError::Plan(format!(
                "featurizer window {} differs from plan window {}",
                featurizer.window(),
                plan.window
            )));
        }
        Ok(Self {
            featurizer,
            rng: ChaCha8Rng::seed_from_u64(plan.seed),
            plan,
            schedule,
            adam: AdamState::new(params, adam)?,
            logs: Vec::new(),
            tape_gold: ForwardTape::default(),
            tape_agent: ForwardTape::default(),
            grads: params.zeros_like(),
            pending: 0,
        })
    }

    pub fn logs(&self) -> &[EpochLog] {
        &self.logs
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// One hinge term (gold vs. one response); steps the optimizer when a
    /// batch is complete.
    fn pair_update(
        &mut self,
        params: &mut ScorerParams,
        gold_x: &[f64],
        agent_x: &[f64],
        mask: &FreezeMask,
        stats: &mut EpochStats,
    ) -> Result<(), TrainError> {
        let s_gold = forward_into(params, gold_x, &mut self.tape_gold)?;
        let s_agent = forward_into(params, agent_x, &mut self.tape_agent)?;
        let h = hinge_loss_oriented(s_gold, s_agent, self.plan.delta, self.plan.orientation);
        backward_into(params, &self.tape_gold, h.d_gold, &mut self.grads)?;
        backward_into(params, &self.tape_agent, h.d_agent, &mut self.grads)?;
        stats.loss += h.loss;
        stats.pairs += 1;
        self.pending += 1;
        if self.pending == self.plan.batch_size {
            self.flush(params, mask, stats)?;
        }
        Ok(())
    }

    fn flush(&mut self, params: &mut ScorerParams, mask: &FreezeMask, stats: &mut EpochStats) -> Result<(), TrainError> {
        if self.pending == 0 {
            return Ok(());
        }
        if self.pending > 1 {
            self.grads.scale(1.0 / self.pending as f64);
        }
        self.adam.step(params, &self.grads, mask)?;
        self.grads.fill(0.0);
        self.pending = 0;
        stats.steps += 1;
        Ok(())
    }

    fn finish_epoch(
        &mut self,
        params: &mut ScorerParams,
        mask: &FreezeMask,
        mut stats: EpochStats,
        phase: Phase,
        epoch: usize,
        p: Option<f64>,
        valid: &[Conversation],
    ) -> Result<EpochLog, TrainError> {
        self.flush(params, mask, &mut stats)?;
        let log = EpochLog {
            phase,
            epoch,
            p,
            lr: self.adam.config.lr,
            steps: stats.steps,
            mean_loss: if stats.pairs == 0 { 0.0 } else { stats.loss / stats.pairs as f64 },
            valid_accuracy: validation_accuracy(self.featurizer, params, valid)?,
        };
        log::info!(
            "{} epoch {epoch}: steps={} loss={:.4} valid={:?}",
            phase.as_str(),
            log.steps,
            log.mean_loss,
            log.valid_accuracy
        );
        self.logs.push(log.clone());
        Ok(log)
    }

    fn check_trainable(train: &[Conversation]) -> Result<(), TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyTrainSet);
        }
        for c in train {
            if let Some(t) = c.turns.iter().position(|t| t.candidates.is_empty()) {
                return Err(TrainError::NoCandidates {
                    conversation: c.id.clone(),
                    turn: t,
                });
            }
        }
        Ok(())
    }

    /// Gold-history training with every layer trainable.
    pub fn train_utterance_phase(
        &mut self,
        params: &mut ScorerParams,
        train: &[Conversation],
        valid: &[Conversation],
    ) -> Result<PhaseSummary, TrainError> {
        Self::check_trainable(train)?;
        let mask = FreezeMask::all_trainable(params.num_blocks());
        let fz = self.featurizer;
        let mut instances = Vec::new();
        for conv in train {
            for inst in build_utterance_instances(conv, self.plan.window) {
                let gold_x = fz.features(&inst.context, &inst.query, &inst.gold)?;
                let agent_x = inst
                    .candidates
                    .iter()
                    .map(|c| fz.features(&inst.context, &inst.query, &c.text))
                    .collect::<Result<Vec<_>, _>>()?;
                instances.push((gold_x, agent_x));
            }
        }

        let mut stop = EarlyStop::new(self.plan.patience);
        let mut summary = PhaseSummary {
            phase: Phase::Utterance,
            epochs_run: 0,
            steps: 0,
            stopped_early: false,
        };
        let mut order: Vec<usize> = (0..instances.len()).collect();
        for epoch in 1..=self.plan.utterance_epochs {
            self.adam.set_lr(self.schedule.lr_for(Phase::Utterance, epoch))?;
            order.shuffle(&mut self.rng);
            let mut stats = EpochStats::default();
            for &i in &order {
                let (gold_x, agents) = &instances[i];
                for agent_x in agents {
                    self.pair_update(params, gold_x, agent_x, &mask, &mut stats)?;
                }
            }
            let log = self.finish_epoch(params, &mask, stats, Phase::Utterance, epoch, None, valid)?;
            summary.epochs_run = epoch;
            summary.steps += log.steps;
            if stop.should_stop(log.valid_accuracy) {
                summary.stopped_early = epoch < self.plan.utterance_epochs;
                break;
            }
        }
        Ok(summary)
    }

    fn conv_mask_and_lr(&mut self, params: &ScorerParams, epoch: usize, phase: Phase) -> Result<FreezeMask, TrainError> {
        self.adam.set_lr(self.schedule.lr_for(phase, epoch))?;
        Ok(if epoch < self.plan.unfreeze_epoch {
            FreezeMask::top_only(params.num_blocks())
        } else {
            FreezeMask::all_trainable(params.num_blocks())
        })
    }

    /// Conversation-phase epochs `1..=cutoff`: each agent's own past
    /// responses form its history.
    pub fn train_conversation_phase(
        &mut self,
        params: &mut ScorerParams,
        train: &[Conversation],
        valid: &[Conversation],
    ) -> Result<PhaseSummary, TrainError> {
        Self::check_trainable(train)?;
        let fz = self.featurizer;
        let window = self.plan.window;
        // Per conversation, per turn: gold features and one feature vector per
        // agent, each under that agent's own history.
        let mut convs = Vec::with_capacity(train.len());
        for conv in train {
            let agents: Vec<String> = conv.turns[0].candidates.iter().map(|c| c.agent_id.clone()).collect();
            let mut per_agent = Vec::with_capacity(agents.len());
            for a in &agents {
                per_agent.push(rollout_history(conv, &HistoryPolicy::Agent(a), window, &mut self.rng)?.contexts);
            }
            let mut turns = Vec::with_capacity(conv.turns.len());
            for (t, turn) in conv.turns.iter().enumerate() {
                let mut pairs = Vec::with_capacity(agents.len());
                for (j, a) in agents.iter().enumerate() {
                    let ctx = &per_agent[j][t];
                    let cand = turn.candidate(a).expect("rollout checked agent presence");
                    pairs.push((
                        fz.features(ctx, &turn.user_query, &turn.gold)?,
                        fz.features(ctx, &turn.user_query, &cand.text)?,
                    ));
                }
                turns.push(pairs);
            }
            convs.push(turns);
        }

        let mut stop = EarlyStop::new(self.plan.patience);
        let mut summary = PhaseSummary {
            phase: Phase::Conversation,
            epochs_run: 0,
            steps: 0,
            stopped_early: false,
        };
        let mut order: Vec<usize> = (0..convs.len()).collect();
        for epoch in 1..=self.plan.cutoff {
            let mask = self.conv_mask_and_lr(params, epoch, Phase::Conversation)?;
            order.shuffle(&mut self.rng);
            let mut stats = EpochStats::default();
            for &c in &order {
                for pairs in &convs[c] {
                    for (gold_x, agent_x) in pairs {
                        self.pair_update(params, gold_x, agent_x, &mask, &mut stats)?;
                    }
                }
            }
            let log = self.finish_epoch(params, &mask, stats, Phase::Conversation, epoch, None, valid)?;
            summary.epochs_run += 1;
            summary.steps += log.steps;
            if stop.should_stop(log.valid_accuracy) {
                summary.stopped_early = epoch < self.plan.cutoff;
                break;
            }
        }
        Ok(summary)
    }

    /// Scheduled-sampling epochs `cutoff+1..=conversation_epochs`.
    pub fn train_scheduled_sampling_phase(
        &mut self,
        params: &mut ScorerParams,
        train: &[Conversation],
        valid: &[Conversation],
    ) -> Result<PhaseSummary, TrainError> {
        Self::check_trainable(train)?;
        let fz = self.featurizer;
        let window = self.plan.window;
        let (cutoff, total) = (self.plan.cutoff, self.plan.conversation_epochs);
        let mut stop = EarlyStop::new(self.plan.patience);
        let mut summary = PhaseSummary {
            phase: Phase::ScheduledSampling,
            epochs_run: 0,
            steps: 0,
            stopped_early: false,
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in cutoff + 1..=total {
            let p = mixing_factor(epoch, cutoff, total);
            let mask = self.conv_mask_and_lr(params, epoch, Phase::ScheduledSampling)?;
            order.shuffle(&mut self.rng);
            let mut stats = EpochStats::default();
            for &c in &order {
                let conv = &train[c];
                let mut history = RollingHistory::new(conv.engine_open.as_deref());
                for turn in &conv.turns {
                    let ctx = history.context(window);
                    let gold_x = fz.features(&ctx, &turn.user_query, &turn.gold)?;
                    for cand in &turn.candidates {
                        let agent_x = fz.features(&ctx, &turn.user_query, &cand.text)?;
                        self.pair_update(params, &gold_x, &agent_x, &mask, &mut stats)?;
                    }
                    history.push_query(&turn.user_query);
                    let engine = if draw_unit(&mut self.rng) <= p {
                        let sel = NrsSelector::new(fz, params)?.select(&ctx, &turn.user_query, &turn.candidates)?;
                        turn.candidates[sel.index].text.as_str()
                    } else {
                        turn.gold.as_str()
                    };
                    history.push_engine(engine);
                }
            }
            let log = self.finish_epoch(params, &mask, stats, Phase::ScheduledSampling, epoch, Some(p), valid)?;
            summary.epochs_run += 1;
            summary.steps += log.steps;
            if stop.should_stop(log.valid_accuracy) {
                summary.stopped_early = epoch < total;
                break;
            }
        }
        Ok(summary)
    }

    /// Conversation phase followed by scheduled sampling.
    pub fn train_conversation_ss(
        &mut self,
        params: &mut ScorerParams,
        train: &[Conversation],
        valid: &[Conversation],
    ) -> Result<(PhaseSummary, PhaseSummary), TrainError> {
        let conv = self.train_conversation_phase(params, train, valid)?;
        let ss = self.train_scheduled_sampling_phase(params, train, valid)?;
        Ok((conv, ss))
    }
}
