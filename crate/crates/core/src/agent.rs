//! Advantage actor-critic learner with separate policy and value networks.

use std::io::Write;
use std::ops::Range;

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::AlignedSeries;
use crate::env::{run_episode, Action, EnvConfig, EnvError, Episode, MarketState, TradingEnv};
use crate::nn::{
    apply_update, entropy, glorot_bound, softmax, softmax_sample, Activation, Direction,
    Gradients, Mlp, NnError, OptimizerKind, OptimizerState,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("{what} has {got} entries, batch has {expected}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
}

pub type Result<T, E = AgentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvantageMode {
    /// `R + gamma * V(s') - V(s)` per transition.
    #[default]
    OneStep,
    /// Discounted returns over the batch, bootstrapped from its last state.
    NStep,
}

/// How the sentiment columns of both networks' first layer are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SentimentInit {
    #[default]
    Glorot,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct A2cConfig {
    pub gamma: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub n_steps: usize,
    pub episodes: usize,
    pub entropy_coef: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub optimizer: OptimizerKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    pub advantage: AdvantageMode,
    pub sentiment_init: SentimentInit,
}

impl Default for A2cConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr_actor: 7e-4,
            lr_critic: 7e-4,
            n_steps: 5,
            episodes: 100,
            entropy_coef: 0.0,
            seed: 0,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            optimizer: OptimizerKind::Sgd,
            clip_norm: None,
            advantage: AdvantageMode::OneStep,
            sentiment_init: SentimentInit::Glorot,
        }
    }
}

impl A2cConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.lr_actor > 0.0 && self.lr_critic > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.n_steps < 1 {
            return bad("n_steps must be at least 1");
        }
        if self.episodes < 1 {
            return bad("episodes must be at least 1");
        }
        if !(self.entropy_coef >= 0.0) {
            return bad("entropy_coef must be non-negative");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    /// `None` for terminal transitions.
    pub next_state: Option<Vec<f64>>,
    pub done: bool,
    pub log_prob: f64,
}

fn value_of(net: &Mlp, state: &[f64]) -> Result<f64> {
    Ok(net.predict(state)?[0])
}

/// One-step advantage `R + gamma * V(s') - V(s)`, bootstrapping 0 past a terminal step.
pub fn advantage(transition: &Transition, value_net: &Mlp, gamma: f64) -> Result<f64> {
    Ok(td_target(transition, value_net, gamma)? - value_of(value_net, &transition.state)?)
}

fn td_target(transition: &Transition, value_net: &Mlp, gamma: f64) -> Result<f64> {
    let bootstrap = match (&transition.next_state, transition.done) {
        (Some(next), false) => value_of(value_net, next)?,
        _ => 0.0,
    };
    Ok(transition.reward + gamma * bootstrap)
}

/// Discounted returns for a contiguous batch, bootstrapped from the value of its final next-state.
pub fn n_step_returns(batch: &[Transition], value_net: &Mlp, gamma: f64) -> Result<Vec<f64>> {
    let last = batch.last().ok_or(AgentError::EmptyBatch)?;
    let mut running = match (&last.next_state, last.done) {
        (Some(next), false) => value_of(value_net, next)?,
        _ => 0.0,
    };
    let mut out = vec![0.0; batch.len()];
    for (i, tr) in batch.iter().enumerate().rev() {
        if tr.done {
            running = 0.0;
        }
        running = tr.reward + gamma * running;
        out[i] = running;
    }
    Ok(out)
}

/// One descent step on the mean squared error between `V(s_i)` and fixed `targets`.
/// Returns the loss measured before the step.
pub fn critic_step(
    states: &[&[f64]],
    targets: &[f64],
    value_net: &mut Mlp,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<f64> {
    if states.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    if targets.len() != states.len() {
        return Err(AgentError::LengthMismatch {
            what: "targets",
            expected: states.len(),
            got: targets.len(),
        });
    }
    let n = states.len() as f64;
    let mut grads = Gradients::zeros_like(value_net);
    let mut loss = 0.0;
    for (s, y) in states.iter().zip(targets) {
        let (v, cache) = value_net.forward(s)?;
        let residual = y - v[0];
        loss += residual * residual / n;
        let g = value_net.backward(&cache, &[-2.0 * residual / n])?;
        grads.add_scaled(&g, 1.0)?;
    }
    if !loss.is_finite() {
        return Err(AgentError::NonFinite("critic loss"));
    }
    apply_update(value_net, &grads, opt, lr, Direction::Descent)?;
    Ok(loss)
}

/// Critic update with one-step TD targets computed from the pre-update parameters.
pub fn critic_update(
    batch: &[Transition],
    value_net: &mut Mlp,
    opt: &mut OptimizerState,
    gamma: f64,
    lr: f64,
) -> Result<f64> {
    let targets = batch
        .iter()
        .map(|tr| td_target(tr, value_net, gamma))
        .collect::<Result<Vec<_>>>()?;
    let states: Vec<&[f64]> = batch.iter().map(|t| t.state.as_slice()).collect();
    critic_step(&states, &targets, value_net, opt, lr)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorStats {
    /// Negated objective before the step.
    pub loss: f64,
    /// Mean policy entropy over the batch before the step.
    pub entropy: f64,
}

/// One ascent step on `mean(A_i * ln pi(a_i | s_i)) + entropy_coef * mean(H(pi(. | s_i)))`.
/// Advantages are constants.
pub fn actor_update(
    batch: &[Transition],
    policy_net: &mut Mlp,
    advantages: &[f64],
    opt: &mut OptimizerState,
    lr: f64,
    entropy_coef: f64,
) -> Result<ActorStats> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    if advantages.len() != batch.len() {
        return Err(AgentError::LengthMismatch {
            what: "advantages",
            expected: batch.len(),
            got: advantages.len(),
        });
    }
    let n = batch.len() as f64;
    let mut grads = Gradients::zeros_like(policy_net);
    let (mut objective, mut mean_entropy) = (0.0, 0.0);
    for (tr, &adv) in batch.iter().zip(advantages) {
        let (logits, cache) = policy_net.forward(&tr.state)?;
        let probs = softmax(&logits);
        let a = tr.action.index();
        let h = entropy(&probs);
        objective += (adv * probs[a].ln() + entropy_coef * h) / n;
        mean_entropy += h / n;
        let dlogits: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                let onehot = if j == a { 1.0 } else { 0.0 };
                let d_logp = onehot - p;
                let d_entropy = if p > 0.0 { -p * (p.ln() + h) } else { 0.0 };
                (adv * d_logp + entropy_coef * d_entropy) / n
            })
            .collect();
        let g = policy_net.backward(&cache, &dlogits)?;
        grads.add_scaled(&g, 1.0)?;
    }
    if !objective.is_finite() {
        return Err(AgentError::NonFinite("actor objective"));
    }
    apply_update(policy_net, &grads, opt, lr, Direction::Ascent)?;
    Ok(ActorStats {
        loss: -objective,
        entropy: mean_entropy,
    })
}

/// Greedy choice over logits; ties resolve Neutral, then Long, then Short.
pub fn greedy_action(logits: &[f64]) -> Action {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [Action::Neutral, Action::Long, Action::Short]
        .into_iter()
        .find(|a| logits[a.index()] == max)
        .unwrap_or(Action::Neutral)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateReport {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub entropy: f64,
}

// Independent generator streams under one trial seed.
const STREAM_POLICY_INIT: u64 = 0;
const STREAM_VALUE_INIT: u64 = 1;
const STREAM_POLICY_SENTIMENT: u64 = 2;
const STREAM_VALUE_SENTIMENT: u64 = 3;
const STREAM_ACTIONS: u64 = 4;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone)]
pub struct A2cAgent {
    pub policy: Mlp,
    pub value: Mlp,
    policy_opt: OptimizerState,
    value_opt: OptimizerState,
    config: A2cConfig,
}

impl A2cAgent {
    /// Builds both networks for `env`'s state layout.
    ///
    /// Weights for the price/hour/last-action inputs come from the seed alone,
    /// so agents with and without the sentiment block share them; the sentiment
    /// columns are drawn from their own stream or zeroed.
    pub fn new(env: &EnvConfig, config: &A2cConfig) -> Result<Self> {
        config.validate()?;
        let base_dim = env.state_dim() - env.sentiment_len();
        let build = |outputs: usize, init_stream: u64, sentiment_stream: u64| -> Result<Mlp> {
            let mut sizes = vec![base_dim];
            sizes.extend(&config.hidden);
            sizes.push(outputs);
            let mut net = Mlp::new(&sizes, config.activation, &mut stream(config.seed, init_stream))?;
            let l = env.sentiment_len();
            if l > 0 {
                let bound = glorot_bound(base_dim, sizes[1]);
                let mut rng = stream(config.seed, sentiment_stream);
                match config.sentiment_init {
                    SentimentInit::Zero => net.insert_inputs(0, l, || 0.0),
                    SentimentInit::Glorot => net.insert_inputs(0, l, || rng.gen_range(-bound..=bound)),
                }
            }
            Ok(net)
        };
        let policy = build(Action::ALL.len(), STREAM_POLICY_INIT, STREAM_POLICY_SENTIMENT)?;
        let value = build(1, STREAM_VALUE_INIT, STREAM_VALUE_SENTIMENT)?;
        Ok(Self {
            policy,
            value,
            policy_opt: OptimizerState::new(config.optimizer, config.clip_norm),
            value_opt: OptimizerState::new(config.optimizer, config.clip_norm),
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &A2cConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.policy.input_dim()
    }

    pub fn act_greedy(&self, state: &MarketState) -> Result<Action> {
        Ok(greedy_action(&self.policy.predict(&state.flatten())?))
    }

    pub fn act_sample(&self, state: &MarketState, rng: &mut impl Rng) -> Result<(Action, f64)> {
        let logits = self.policy.predict(&state.flatten())?;
        let s = softmax_sample(&logits, rng)?;
        Ok((Action::ALL[s.index], s.log_prob))
    }

    /// One critic step then one actor step on `batch`.
    pub fn update(&mut self, batch: &[Transition]) -> Result<UpdateReport> {
        let gamma = self.config.gamma;
        let states: Vec<&[f64]> = batch.iter().map(|t| t.state.as_slice()).collect();
        let targets = match self.config.advantage {
            AdvantageMode::OneStep => batch
                .iter()
                .map(|tr| td_target(tr, &self.value, gamma))
                .collect::<Result<Vec<_>>>()?,
            AdvantageMode::NStep => n_step_returns(batch, &self.value, gamma)?,
        };
        let advantages = states
            .iter()
            .zip(&targets)
            .map(|(s, y)| Ok(y - value_of(&self.value, s)?))
            .collect::<Result<Vec<_>>>()?;
        let critic_loss = critic_step(&states, &targets, &mut self.value, &mut self.value_opt, self.config.lr_critic)?;
        let actor = actor_update(
            batch,
            &mut self.policy,
            &advantages,
            &mut self.policy_opt,
            self.config.lr_actor,
            self.config.entropy_coef,
        )?;
        Ok(UpdateReport {
            critic_loss,
            actor_loss: actor.loss,
            entropy: actor.entropy,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub train_tr: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub policy_entropy: f64,
    pub updates: usize,
}

pub fn write_training_log(log: &[EpisodeLog], out: impl Write) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode", "train_tr", "actor_loss", "critic_loss", "policy_entropy"])?;
    for e in log {
        w.write_record([
            e.episode.to_string(),
            e.train_tr.to_string(),
            e.actor_loss.to_string(),
            e.critic_loss.to_string(),
            e.policy_entropy.to_string(),
        ])?;
    }
    w.flush()
}

pub struct Training {
    pub agent: A2cAgent,
    pub log: Vec<EpisodeLog>,
}

impl Training {
    pub fn total_updates(&self) -> usize {
        self.log.iter().map(|e| e.updates).sum()
    }
}

/// Trains a fresh agent for `config.episodes` passes over `segment`, sampling
/// actions from the policy and updating every `n_steps` transitions. The last
/// partial batch of each episode is flushed at the episode end.
pub fn train(
    series: &AlignedSeries,
    segment: Range<usize>,
    env_config: &EnvConfig,
    config: &A2cConfig,
) -> Result<Training> {
    let mut agent = A2cAgent::new(env_config, config)?;
    let log = train_agent(&mut agent, series, segment, env_config)?;
    Ok(Training { agent, log })
}

/// Continues training an existing agent.
pub fn train_agent(
    agent: &mut A2cAgent,
    series: &AlignedSeries,
    segment: Range<usize>,
    env_config: &EnvConfig,
) -> Result<Vec<EpisodeLog>> {
    let mut env = TradingEnv::new(series, segment, env_config.clone())?;
    let config = agent.config.clone();
    let mut rng = stream(config.seed, STREAM_ACTIONS);
    let mut log = Vec::with_capacity(config.episodes);
    let mut batch: Vec<Transition> = Vec::with_capacity(config.n_steps);
    for episode in 0..config.episodes {
        let mut state = env.reset().flatten();
        let (mut total, mut steps, mut entropy_sum) = (0.0, 0usize, 0.0);
        let (mut actor_sum, mut critic_sum, mut updates) = (0.0, 0.0, 0usize);
        loop {
            let logits = agent.policy.predict(&state)?;
            let sample = softmax_sample(&logits, &mut rng)?;
            entropy_sum += entropy(&sample.probs);
            let action = Action::ALL[sample.index];
            let out = env.step(action)?;
            total += out.reward;
            steps += 1;
            let next_state = out.next_state.map(|s| s.flatten());
            batch.push(Transition {
                state: std::mem::take(&mut state),
                action,
                reward: out.reward,
                next_state: next_state.clone(),
                done: out.done,
                log_prob: sample.log_prob,
            });
            if batch.len() == config.n_steps || out.done {
                let report = agent.update(&batch)?;
                actor_sum += report.actor_loss;
                critic_sum += report.critic_loss;
                updates += 1;
                batch.clear();
            }
            match next_state {
                Some(s) => state = s,
                None => break,
            }
        }
        let entry = EpisodeLog {
            episode,
            train_tr: total / env.psi(),
            actor_loss: actor_sum / updates as f64,
            critic_loss: critic_sum / updates as f64,
            policy_entropy: entropy_sum / steps as f64,
            updates,
        };
        log::trace!(
            "episode {episode}: tr {:.5} critic {:.5} entropy {:.4}",
            entry.train_tr,
            entry.critic_loss,
            entry.policy_entropy
        );
        log.push(entry);
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalMode {
    #[default]
    Greedy,
    Sample(u64),
}

/// Runs the agent over `segment` without learning.
pub fn evaluate(
    agent: &A2cAgent,
    series: &AlignedSeries,
    segment: Range<usize>,
    env_config: &EnvConfig,
    mode: EvalMode,
) -> Result<Episode> {
    let mut env = TradingEnv::new(series, segment, env_config.clone())?;
    if env.state_dim() != agent.input_dim() {
        return Err(NnError::DimensionMismatch {
            expected: agent.input_dim(),
            got: env.state_dim(),
        }
        .into());
    }
    let episode = match mode {
        EvalMode::Greedy => {
            let mut policy = |s: &MarketState| agent.act_greedy(s).expect("dimensions checked above");
            run_episode(&mut env, &mut policy)?
        }
        EvalMode::Sample(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut policy = |s: &MarketState| agent.act_sample(s, &mut rng).expect("dimensions checked above").0;
            run_episode(&mut env, &mut policy)?
        }
    };
    Ok(episode)
}
