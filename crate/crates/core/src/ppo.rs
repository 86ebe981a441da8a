//! Reinforcement-learning baseline: a voltage-adjustment environment and a
//! clipped-surrogate PPO agent with GAE.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffengine::{
    adam_step, mlp_backward_batch, mlp_forward, mlp_forward_batch, mlp_init, Activation, AdamState,
    Conv2dSpec, LayerSpec, MlpParams,
};
use crate::error::{QocError, Result};
use crate::hwmodel::{V_MAX, V_MIN};
use crate::qsim::Simulator;
use crate::report::{Budget, OptimizerReport, PhaseSummary, Termination, TracePoint};
use crate::schedule::ControlSchedule;

/// Reward coefficients `(a, b, p)` used while the fidelity is below `below`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardBand {
    pub below: f64,
    pub a: f64,
    pub b: f64,
    pub p: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Extractor {
    #[default]
    Flatten,
    /// Two 3x3 convolutions (32 and 64 filters) over the history image.
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub lr: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub gamma: f64,
    pub clip_eps: f64,
    pub gae_lambda: f64,
    pub max_grad_norm: f64,
    pub epochs: usize,
    pub minibatch: usize,
    /// Environment steps per worker between updates.
    pub rollout: usize,
    pub episodes: usize,
    pub episode_len: usize,
    /// Volts added per unit action.
    pub step_size: f64,
    /// Past schedules kept in the observation.
    pub history: usize,
    pub n_segments: usize,
    pub hidden: Vec<usize>,
    pub extractor: Extractor,
    pub log_std_init: f64,
    /// Checked in order; the last band applies above every threshold.
    pub reward_bands: Vec<RewardBand>,
    pub stop_fidelity: f64,
    /// Episodes without improvement that end training once the best fidelity is in the band.
    pub stagnation_episodes: usize,
    pub stagnation_floor: f64,
    pub workers: usize,
    /// Simulator passes allowed in total.
    pub eval_budget: Option<u64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            entropy_coef: 0.1,
            value_coef: 0.5,
            gamma: 0.99,
            clip_eps: 0.2,
            gae_lambda: 0.95,
            max_grad_norm: 0.5,
            epochs: 10,
            minibatch: 64,
            rollout: 2048,
            episodes: 10_000,
            episode_len: 32,
            step_size: 0.5,
            history: 2,
            n_segments: 20,
            hidden: vec![256, 256],
            extractor: Extractor::default(),
            log_std_init: -0.5,
            reward_bands: vec![
                RewardBand {
                    below: 0.9,
                    a: 1.0,
                    b: 10.0,
                    p: 1.0,
                },
                RewardBand {
                    below: 0.99,
                    a: 2.0,
                    b: 20.0,
                    p: 2.0,
                },
                RewardBand {
                    below: f64::INFINITY,
                    a: 4.0,
                    b: 40.0,
                    p: 3.0,
                },
            ],
            stop_fidelity: 0.999,
            stagnation_episodes: 1000,
            stagnation_floor: 0.99,
            workers: 1,
            eval_budget: None,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(QocError::Schema {
                field: format!("optimizer.ppo.{field}"),
                reason: reason.into(),
            })
        };
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must lie in (0, 1]");
        }
        if !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            return bad("gae_lambda", "must lie in (0, 1]");
        }
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps", "must be > 0");
        }
        if self.history == 0
            || self.episode_len == 0
            || self.rollout == 0
            || self.minibatch == 0
            || self.workers == 0
        {
            return bad(
                "rollout",
                "history, episode_len, rollout, minibatch and workers must be >= 1",
            );
        }
        if self.reward_bands.is_empty() {
            return bad("reward_bands", "needs at least one band");
        }
        if !(self.step_size > 0.0) {
            return bad("step_size", "must be > 0");
        }
        Ok(())
    }

    pub fn band(&self, fidelity: f64) -> RewardBand {
        *self
            .reward_bands
            .iter()
            .find(|b| fidelity < b.below)
            .unwrap_or_else(|| self.reward_bands.last().expect("validated nonempty"))
    }
}

/// `a F^p + b dF`.
pub fn reward_fn(fidelity: f64, delta: f64, a: f64, b: f64, p: f64) -> f64 {
    a * fidelity.powf(p) + b * delta
}

/// Schedule-adjustment environment. The observation holds the last
/// `history` schedules (scaled to [-1, 1]) followed by the current
/// fidelity, the best fidelity and the episode progress.
#[derive(Clone, Debug)]
pub struct QocEnv<'a> {
    sim: &'a Simulator,
    cfg: &'a PpoConfig,
    pub schedule: ControlSchedule,
    history: VecDeque<Vec<f64>>,
    pub fidelity: f64,
    pub best_fidelity: f64,
    pub step: usize,
}

impl<'a> QocEnv<'a> {
    pub fn new(sim: &'a Simulator, cfg: &'a PpoConfig) -> Result<Self> {
        let schedule = ControlSchedule::zeros(sim.n_channels(), cfg.n_segments);
        schedule.validate(sim.n_channels(), sim.t_steps())?;
        Ok(Self {
            sim,
            cfg,
            schedule,
            history: VecDeque::new(),
            fidelity: 0.0,
            best_fidelity: 0.0,
            step: 0,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.schedule.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.cfg.history * self.action_dim() + 3
    }

    /// Zero schedule, cleared history. The environment itself is deterministic,
    /// so the seed only names the episode.
    pub fn reset(&mut self, _seed: u64) -> Result<Vec<f64>> {
        self.schedule = ControlSchedule::zeros(self.sim.n_channels(), self.cfg.n_segments);
        self.history.clear();
        self.fidelity = self.sim.fidelity(&self.schedule)?;
        self.best_fidelity = self.fidelity;
        self.step = 0;
        Ok(self.observation())
    }

    pub fn observation(&self) -> Vec<f64> {
        let dim = self.action_dim();
        let mut obs = Vec::with_capacity(self.obs_dim());
        let pad = self.cfg.history.saturating_sub(self.history.len());
        obs.extend(std::iter::repeat_n(0.0, pad * dim));
        for h in &self.history {
            obs.extend_from_slice(h);
        }
        obs.push(self.fidelity);
        obs.push(self.best_fidelity);
        obs.push(self.step as f64 / self.cfg.episode_len as f64);
        obs
    }

    /// Returns `(observation, reward, done)`.
    pub fn step(&mut self, action: &[f64]) -> Result<(Vec<f64>, f64, bool)> {
        if action.len() != self.action_dim() {
            return Err(QocError::DimensionMismatch {
                what: "action",
                expected: self.action_dim(),
                found: action.len(),
            });
        }
        for (v, a) in self.schedule.as_mut_slice().iter_mut().zip(action) {
            let a = if a.is_finite() {
                a.clamp(-1.0, 1.0)
            } else {
                0.0
            };
            *v = (*v + self.cfg.step_size * a).clamp(V_MIN, V_MAX);
        }
        let f = self.sim.fidelity(&self.schedule)?;
        let delta = f - self.fidelity;
        self.fidelity = f;
        self.best_fidelity = self.best_fidelity.max(f);
        self.step += 1;
        let band = self.cfg.band(f);
        let reward = reward_fn(f, delta, band.a, band.b, band.p);
        if self.history.len() == self.cfg.history {
            self.history.pop_front();
        }
        self.history
            .push_back(self.schedule.as_slice().iter().map(|v| v / V_MAX).collect());
        let done = self.step >= self.cfg.episode_len || f >= self.cfg.stop_fidelity;
        Ok((self.observation(), reward, done))
    }
}

/// Raw GAE advantages and returns (`advantage + value`).
///
/// `dones[t]` marks the last step of an episode; `last_value` bootstraps
/// the step after the final one when it is not terminal.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let (next_value, next_nonterminal) = if dones[t] {
            (0.0, 0.0)
        } else if t + 1 < n {
            (values[t + 1], 1.0)
        } else {
            (last_value, 1.0)
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * next_nonterminal * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shift to zero mean and scale to unit variance; a (near) constant batch is only centred.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a -= mean;
        if std > 1e-8 {
            *a /= std;
        }
    }
}

/// Separate actor and critic networks plus a state-independent log-std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoAgent {
    pub actor: MlpParams,
    pub critic: MlpParams,
    pub log_std: Vec<f64>,
    pub adam: AdamState,
}

fn extractor_layers(cfg: &PpoConfig, obs_dim: usize, action_dim: usize) -> (Vec<LayerSpec>, usize) {
    match cfg.extractor {
        Extractor::Flatten => (Vec::new(), obs_dim),
        Extractor::Conv => {
            let (h, w) = (cfg.history + 1, action_dim);
            let c1 = Conv2dSpec {
                in_channels: 1,
                out_channels: 32,
                height: h,
                width: w,
                kernel: 3,
                padding: 1,
            };
            let c2 = Conv2dSpec {
                in_channels: 32,
                out_channels: 64,
                height: h,
                width: w,
                kernel: 3,
                padding: 1,
            };
            let layers = vec![
                LayerSpec::Conv2d {
                    conv: c1,
                    activation: Activation::Relu,
                },
                LayerSpec::Conv2d {
                    conv: c2,
                    activation: Activation::Relu,
                },
            ];
            (layers, 64 * h * w)
        }
    }
}

impl PpoAgent {
    pub fn new(cfg: &PpoConfig, obs_dim: usize, action_dim: usize, seed: u64) -> Result<Self> {
        let build = |out: usize, seed: u64| {
            let (mut layers, mut width) = extractor_layers(cfg, obs_dim, action_dim);
            for h in &cfg.hidden {
                layers.push(LayerSpec::dense(width, *h, Activation::Tanh));
                width = *h;
            }
            layers.push(LayerSpec::dense(width, out, Activation::Identity));
            mlp_init(layers, seed)
        };
        let mut actor = build(action_dim, seed)?;
        let last = actor.layers.len() - 1;
        actor.scale_layer(last, 0.01);
        let critic = build(1, seed ^ 0x9E37_79B9_7F4A_7C15)?;
        let n = actor.n_params() + critic.n_params() + action_dim;
        Ok(Self {
            actor,
            critic,
            log_std: vec![cfg.log_std_init; action_dim],
            adam: AdamState::new(n),
        })
    }

    /// Maps an observation to the network input (the conv extractor sees an image).
    fn input(&self, obs: &[f64]) -> Vec<f64> {
        match self.actor.layers.first() {
            Some(LayerSpec::Conv2d { conv, .. }) => {
                let mut img = vec![0.0; conv.height * conv.width];
                let body = obs.len() - 3;
                img[..body].copy_from_slice(&obs[..body]);
                img[body..body + 3].copy_from_slice(&obs[body..]);
                img
            }
            _ => obs.to_vec(),
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.adam.m.len());
        p.extend_from_slice(&self.actor.params);
        p.extend_from_slice(&self.critic.params);
        p.extend_from_slice(&self.log_std);
        p
    }

    pub fn set_flat_params(&mut self, p: &[f64]) {
        let (na, nc) = (self.actor.n_params(), self.critic.n_params());
        self.actor.params.copy_from_slice(&p[..na]);
        self.critic.params.copy_from_slice(&p[na..na + nc]);
        self.log_std.copy_from_slice(&p[na + nc..]);
    }

    pub fn mean(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(mlp_forward(&self.actor, &self.input(obs))?.output)
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(mlp_forward(&self.critic, &self.input(obs))?.output[0])
    }

    pub fn log_prob(&self, mean: &[f64], action: &[f64]) -> f64 {
        mean.iter()
            .zip(action)
            .zip(&self.log_std)
            .map(|((m, a), ls)| {
                let z = (a - m) / ls.exp();
                -0.5 * z * z - ls - 0.5 * (2.0 * std::f64::consts::PI).ln()
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.log_std
            .iter()
            .map(|ls| ls + 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln()))
            .sum()
    }

    pub fn sample(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, f64)> {
        let mean = self.mean(obs)?;
        let action: Vec<f64> = mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| {
                let e: f64 = StandardNormal.sample(rng);
                m + ls.exp() * e
            })
            .collect();
        let lp = self.log_prob(&mean, &action);
        Ok((action, lp))
    }
}

/// One transition as stored in the rollout buffer.
#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// Clipped-surrogate gradient factor for one sample: `d objective / d log pi`.
pub fn surrogate_weight(ratio: f64, advantage: f64, eps: f64) -> (f64, bool) {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    let unclipped_min = ratio * advantage <= clipped * advantage;
    let active = unclipped_min || (ratio - clipped).abs() == 0.0;
    (if active { advantage * ratio } else { 0.0 }, !active)
}

/// Minibatch loss (clipped surrogate + value MSE - entropy bonus) and its
/// gradient over `[actor params, critic params, log_std]`.
pub fn ppo_loss_and_grad(
    agent: &PpoAgent,
    rollout: &Rollout,
    advantages: &[f64],
    batch: &[usize],
    cfg: &PpoConfig,
) -> Result<(f64, Vec<f64>, UpdateStats)> {
    let m = batch.len() as f64;
    let inputs: Vec<Vec<f64>> = batch
        .iter()
        .map(|&i| agent.input(&rollout.transitions[i].obs))
        .collect();
    let x = DMatrix::from_fn(inputs[0].len(), batch.len(), |r, c| inputs[c][r]);
    let actor_tape = mlp_forward_batch(&agent.actor, x.clone())?;
    let critic_tape = mlp_forward_batch(&agent.critic, x)?;
    let action_dim = agent.log_std.len();
    let mut g_mean = DMatrix::zeros(action_dim, batch.len());
    let mut g_value = DMatrix::zeros(1, batch.len());
    let mut g_log_std = vec![-cfg.entropy_coef; action_dim];
    let mut stats = UpdateStats::default();
    let mut clipped = 0usize;
    for (col, &i) in batch.iter().enumerate() {
        let t = &rollout.transitions[i];
        let mean = actor_tape.output.column(col);
        let lp = agent.log_prob(mean.as_slice(), &t.action);
        let ratio = (lp - t.log_prob).exp();
        let a = advantages[i];
        let (w, was_clipped) = surrogate_weight(ratio, a, cfg.clip_eps);
        clipped += usize::from(was_clipped);
        stats.policy_loss -=
            (ratio * a).min(ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * a) / m;
        // d loss / d log pi
        let dlp = -w / m;
        for k in 0..action_dim {
            let var = (2.0 * agent.log_std[k]).exp();
            let d = t.action[k] - mean[k];
            g_mean[(k, col)] = dlp * d / var;
            g_log_std[k] += dlp * (d * d / var - 1.0);
        }
        let diff = critic_tape.output[(0, col)] - rollout.returns[i];
        stats.value_loss += diff * diff / m;
        g_value[(0, col)] = 2.0 * cfg.value_coef * diff / m;
    }
    let (ga, _) = mlp_backward_batch(&agent.actor, &actor_tape, &g_mean)?;
    let (gc, _) = mlp_backward_batch(&agent.critic, &critic_tape, &g_value)?;
    let mut grad = ga;
    grad.extend(gc);
    grad.extend(g_log_std);
    stats.entropy = agent.entropy();
    stats.clip_fraction = clipped as f64 / m;
    let loss =
        stats.policy_loss + cfg.value_coef * stats.value_loss - cfg.entropy_coef * stats.entropy;
    Ok((loss, grad, stats))
}

/// K epochs of minibatch updates on a finished rollout.
pub fn ppo_update(
    agent: &mut PpoAgent,
    rollout: &Rollout,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    use rand::seq::SliceRandom;
    let mut adv = rollout.advantages.clone();
    normalize_advantages(&mut adv);
    let n_actor = agent.actor.n_params();
    let n_critic = agent.critic.n_params();
    let mut stats = UpdateStats::default();
    let mut batches = 0usize;
    let mut idx: Vec<usize> = (0..rollout.transitions.len()).collect();
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.minibatch) {
            let (_, grad, s) = ppo_loss_and_grad(agent, rollout, &adv, chunk, cfg)?;
            let mut params = agent.flat_params();
            let norm = adam_step(
                &mut params,
                &grad,
                &mut agent.adam,
                cfg.lr,
                Some(cfg.max_grad_norm),
            )?;
            agent.actor.params.copy_from_slice(&params[..n_actor]);
            agent
                .critic
                .params
                .copy_from_slice(&params[n_actor..n_actor + n_critic]);
            agent.log_std.copy_from_slice(&params[n_actor + n_critic..]);
            stats.policy_loss += s.policy_loss;
            stats.value_loss += s.value_loss;
            stats.clip_fraction += s.clip_fraction;
            stats.grad_norm += norm;
            batches += 1;
        }
    }
    let b = batches.max(1) as f64;
    stats.policy_loss /= b;
    stats.value_loss /= b;
    stats.clip_fraction /= b;
    stats.grad_norm /= b;
    stats.entropy = agent.entropy();
    Ok(stats)
}

struct Worker<'a> {
    env: QocEnv<'a>,
    obs: Vec<f64>,
    rng: ChaCha8Rng,
    buffer: Vec<Transition>,
    episodes_done: usize,
}

pub fn train_ppo(sim: &Simulator, cfg: &PpoConfig, seed: u64) -> Result<OptimizerReport> {
    cfg.validate()?;
    let budget = Budget::new(cfg.eval_budget);
    let mut workers: Vec<Worker> = (0..cfg.workers)
        .map(|w| {
            let mut env = QocEnv::new(sim, cfg)?;
            let obs = env.reset(seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(w as u64 + 1);
            Ok(Worker {
                env,
                obs,
                rng,
                buffer: Vec::new(),
                episodes_done: 0,
            })
        })
        .collect::<Result<_>>()?;
    budget.charge(cfg.workers as u64);
    let obs_dim = workers[0].env.obs_dim();
    let action_dim = workers[0].env.action_dim();
    let mut agent = PpoAgent::new(cfg, obs_dim, action_dim, seed)?;
    let mut update_rng = ChaCha8Rng::seed_from_u64(seed);
    update_rng.set_stream(0);

    let mut best_f = workers[0].env.fidelity;
    let mut best_schedule = workers[0].env.schedule.clone();
    let mut trace = Vec::new();
    let mut episodes = 0usize;
    let mut last_improvement_episode = 0usize;
    let termination = 'outer: loop {
        for w in workers.iter_mut() {
            w.buffer.clear();
        }
        // Collect `rollout` steps per worker.
        for _ in 0..cfg.rollout {
            if !budget.allows(cfg.workers as u64) {
                break 'outer Termination::BudgetExhausted;
            }
            let steps: Vec<Result<(f64, ControlSchedule, bool)>> = workers
                .par_iter_mut()
                .map(|w| {
                    let value = agent.value(&w.obs)?;
                    let (action, log_prob) = agent.sample(&w.obs, &mut w.rng)?;
                    let (next, reward, done) = w.env.step(&action)?;
                    let f = w.env.fidelity;
                    let sched = w.env.schedule.clone();
                    w.buffer.push(Transition {
                        obs: std::mem::replace(&mut w.obs, next),
                        action,
                        log_prob,
                        value,
                        reward,
                        done,
                    });
                    if done {
                        w.obs = w.env.reset(seed)?;
                        w.episodes_done += 1;
                    }
                    Ok((f, sched, done))
                })
                .collect();
            budget.charge(cfg.workers as u64);
            for (w, s) in steps.into_iter().enumerate() {
                let (f, sched, done) = s?;
                if f > best_f {
                    best_f = f;
                    best_schedule = sched;
                    last_improvement_episode = episodes;
                }
                if done {
                    episodes += 1;
                    budget.charge(1);
                    trace.push(TracePoint {
                        iteration: episodes as u64,
                        best_cost: 1.0 - best_f,
                        fidelity: f,
                        wall_ms: budget.elapsed_ms(),
                    });
                    log::trace!("ppo worker {w} episode {episodes}: F = {f:.6}");
                }
            }
            if best_f >= cfg.stop_fidelity {
                break 'outer Termination::TargetReached;
            }
            if episodes >= cfg.episodes {
                break 'outer Termination::MaxIterations;
            }
            if best_f >= cfg.stagnation_floor
                && episodes - last_improvement_episode >= cfg.stagnation_episodes
            {
                break 'outer Termination::Stagnation;
            }
        }
        let mut rollout = Rollout::default();
        for w in &workers {
            let rewards: Vec<f64> = w.buffer.iter().map(|t| t.reward).collect();
            let values: Vec<f64> = w.buffer.iter().map(|t| t.value).collect();
            let dones: Vec<bool> = w.buffer.iter().map(|t| t.done).collect();
            let last_value = agent.value(&w.obs)?;
            let (adv, ret) = gae(
                &rewards,
                &values,
                &dones,
                last_value,
                cfg.gamma,
                cfg.gae_lambda,
            );
            rollout.transitions.extend(w.buffer.iter().cloned());
            rollout.advantages.extend(adv);
            rollout.returns.extend(ret);
        }
        let stats = ppo_update(&mut agent, &rollout, cfg, &mut update_rng)?;
        if !stats.grad_norm.is_finite() || agent.log_std.iter().any(|v| !v.is_finite()) {
            return Err(QocError::InvalidParameter(
                "PPO update produced non-finite parameters".into(),
            ));
        }
        log::debug!("ppo update after {episodes} episodes: best F {best_f:.6}, {stats:?}");
    };
    let final_fidelity = sim.fidelity(&best_schedule)?;
    Ok(OptimizerReport {
        method: "ppo".into(),
        seed,
        phases: vec![PhaseSummary {
            name: "ppo".into(),
            trace_start: 0,
            trace_end: trace.len(),
            termination,
            best_cost: 1.0 - best_f,
        }],
        trace,
        best_schedule,
        final_fidelity,
        final_error: 1.0 - final_fidelity,
        termination,
        evaluations: budget.used(),
        switch_generation: None,
        wall_ms: budget.elapsed_ms(),
        config_hash: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hwmodel::HardwareModel;
    use crate::qsim::{PhysicalConstants, QuantumTask};

    fn small_sim() -> Simulator {
        let mut hw = HardwareModel::default();
        hw.resolve(2).unwrap();
        let task = QuantumTask {
            t_steps: 20,
            ..QuantumTask::new(&["X", "H"])
        };
        Simulator::new(&hw, &task, &PhysicalConstants::default()).unwrap()
    }

    fn small_cfg() -> PpoConfig {
        PpoConfig {
            n_segments: 4,
            hidden: vec![16, 16],
            rollout: 64,
            minibatch: 16,
            epochs: 2,
            episode_len: 8,
            ..PpoConfig::default()
        }
    }

    #[test]
    fn reward_examples() {
        assert_eq!(reward_fn(1.0, 0.0, 1.0, 1.0, 1.0), 1.0);
        assert_eq!(reward_fn(0.5, 0.0, 4.0, 0.0, 2.0), 1.0);
        let r0 = reward_fn(0.7, 0.0, 1.0, 3.0, 1.0);
        assert!((reward_fn(0.7, -0.1, 1.0, 3.0, 1.0) - (r0 - 0.3)).abs() < 1e-15);
    }

    #[test]
    fn env_reset_and_step() {
        let sim = small_sim();
        let cfg = small_cfg();
        let mut env = QocEnv::new(&sim, &cfg).unwrap();
        let obs = env.reset(1).unwrap();
        assert_eq!(obs.len(), cfg.history * 16 + 3);
        assert!(obs.iter().all(|v| v.is_finite()));
        assert_eq!(
            env.fidelity,
            sim.fidelity(&ControlSchedule::zeros(2, 4)).unwrap()
        );
        let f0 = env.fidelity;
        let (_, r, _) = env.step(&[0.0; 16]).unwrap();
        assert_eq!(env.fidelity, f0);
        let band = cfg.band(f0);
        assert_eq!(r, reward_fn(f0, 0.0, band.a, band.b, band.p));
        for _ in 0..5 {
            env.step(&[50.0; 16]).unwrap();
        }
        assert!(env.schedule.within_bounds());
        let mut env2 = QocEnv::new(&sim, &cfg).unwrap();
        assert_eq!(env2.reset(1).unwrap(), obs);
    }

    #[test]
    fn gae_examples() {
        let (a, r) = gae(&[1.0], &[0.5], &[false], 2.0, 0.9, 0.95);
        assert!((a[0] - (1.0 + 0.9 * 2.0 - 0.5)).abs() < 1e-15);
        assert!((r[0] - (a[0] + 0.5)).abs() < 1e-15);
        // lambda = 0 gives one-step TD errors.
        let (a, _) = gae(
            &[1.0, 2.0, 3.0],
            &[0.1, 0.2, 0.3],
            &[false, false, true],
            0.0,
            0.9,
            1e-300,
        );
        assert!((a[0] - (1.0 + 0.9 * 0.2 - 0.1)).abs() < 1e-12);
        assert!((a[2] - (3.0 - 0.3)).abs() < 1e-12);
        // V = r / (1 - gamma) with bootstrap makes every TD error vanish.
        let g = 0.99;
        let v = 1.0 / (1.0 - g);
        let (mut a, _) = gae(&[1.0; 3], &[v; 3], &[false; 3], v, g, 0.95);
        assert!(a.iter().all(|x| x.abs() < 1e-12));
        normalize_advantages(&mut a);
        assert!(a.iter().all(|x| x.abs() < 1e-12 && x.is_finite()));
    }

    #[test]
    fn surrogate_clipping() {
        let eps = 0.2;
        for (ratio, adv, clipped) in [
            (1.0, 1.0, false),
            (1.1, 1.0, false),
            (1.3, 1.0, true),
            (1.3, -1.0, false),
            (0.7, -1.0, true),
            (0.7, 1.0, false),
        ] {
            let (w, c) = surrogate_weight(ratio, adv, eps);
            assert_eq!(c, clipped, "ratio {ratio} adv {adv}");
            assert_eq!(w == 0.0, clipped);
        }
        assert_eq!(surrogate_weight(1.0, 0.0, eps).0, 0.0);
    }

    #[test]
    fn training_is_deterministic_and_bounded() {
        let sim = small_sim();
        let cfg = PpoConfig {
            episodes: 24,
            ..small_cfg()
        };
        let a = train_ppo(&sim, &cfg, 4).unwrap();
        let b = train_ppo(&sim, &cfg, 4).unwrap();
        assert_eq!(a.trace_without_time(), b.trace_without_time());
        assert!(a.best_schedule.within_bounds());
        assert!((sim.fidelity(&a.best_schedule).unwrap() - a.final_fidelity).abs() < 1e-12);
        assert!(a.trace.windows(2).all(|w| w[1].best_cost <= w[0].best_cost));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use crate::diffengine::finite_diff;
        let cfg = PpoConfig {
            hidden: vec![5],
            ..small_cfg()
        };
        let mut agent = PpoAgent::new(&cfg, 7, 3, 2).unwrap();
        let last = agent.actor.layers.len() - 1;
        agent.actor.scale_layer(last, 50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let transitions: Vec<Transition> = (0..6)
            .map(|k| {
                let obs: Vec<f64> = (0..7)
                    .map(|i| ((i * 3 + k) % 5) as f64 / 5.0 - 0.4)
                    .collect();
                let (action, lp) = agent.sample(&obs, &mut rng).unwrap();
                Transition {
                    obs,
                    action,
                    // Spread the stored log-probs so some ratios leave the clip range.
                    log_prob: lp + 0.3 * (k as f64 - 2.5),
                    value: 0.0,
                    reward: 0.0,
                    done: false,
                }
            })
            .collect();
        let rollout = Rollout {
            transitions,
            advantages: vec![0.5, -1.0, 1.5, -0.2, 0.8, -0.7],
            returns: vec![0.3, -0.1, 0.9, 0.0, 1.2, -0.5],
        };
        let batch: Vec<usize> = (0..6).collect();
        let (_, grad, stats) =
            ppo_loss_and_grad(&agent, &rollout, &rollout.advantages, &batch, &cfg).unwrap();
        assert!(stats.clip_fraction > 0.0 && stats.clip_fraction < 1.0);
        let loss = |p: &[f64]| {
            let mut a = agent.clone();
            a.set_flat_params(p);
            ppo_loss_and_grad(&a, &rollout, &rollout.advantages, &batch, &cfg)
                .unwrap()
                .0
        };
        let fd = finite_diff(loss, &agent.flat_params(), 1e-6).unwrap();
        for (a, b) in grad.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-2), "{a} vs {b}");
        }
    }

    #[test]
    fn unchanged_policy_has_unit_ratios() {
        let cfg = small_cfg();
        let agent = PpoAgent::new(&cfg, 5, 2, 0).unwrap();
        let obs = vec![0.1; 5];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (action, lp) = agent.sample(&obs, &mut rng).unwrap();
        let lp2 = agent.log_prob(&agent.mean(&obs).unwrap(), &action);
        assert!((lp2 - lp).exp() - 1.0 < 1e-14);
        let rollout = Rollout {
            transitions: vec![Transition {
                obs,
                action,
                log_prob: lp,
                value: 0.0,
                reward: 0.0,
                done: true,
            }],
            advantages: vec![0.0],
            returns: vec![0.0],
        };
        let (_, _, stats) = ppo_loss_and_grad(&agent, &rollout, &[0.0], &[0], &cfg).unwrap();
        assert_eq!(stats.policy_loss, 0.0);
    }
}
