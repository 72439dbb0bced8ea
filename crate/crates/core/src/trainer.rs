//! REINFORCE training of a [`PolicyNet`].
//!
//! Each iteration draws an action budget `l ~ Exp(mean = l_mean)` and a
//! contiguous window of training jobs, rolls `N` sampled episodes on that
//! window, and takes one Adam step on the baseline-corrected policy gradient.
//! The per-step baseline is the mean return over the episodes that reached
//! that step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Job;
use crate::nn::{adam_step, AdamState, Params};
use crate::policy::{
    plackett_luce_grad, priorities, score_backward, score_candidates, PolicyAgent, PolicyConfig, PolicyError,
    PolicyNet, Step,
};
use crate::sim::{run_simulation, JobRow, Scheduler, SimConfig, SimError, SimReport};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least two episodes for a baseline, got {0}")]
    DegenerateBaseline(usize),
    #[error("training workload is empty")]
    EmptyWorkload,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// `-(t1 - t0) * (resident weight)`, integrated exactly over the interval.
    /// Summed over an episode this is minus the total weighted time in system.
    Resident,
    /// `-(resident weight) / (t1 - t0)`, kept for comparison only.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub episodes_per_iter: usize,
    pub l_mean_init: f64,
    pub l_mean_increment: f64,
    pub iterations: usize,
    pub seed: u64,
    pub validation_every: usize,
    /// Jobs per training window; the whole training set if larger.
    pub window_jobs: usize,
    pub reward: RewardKind,
    pub policy: PolicyConfig,
    pub port_count: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            episodes_per_iter: 8,
            l_mean_init: 50.0,
            l_mean_increment: 1.0,
            iterations: 2000,
            seed: 0,
            validation_every: 50,
            window_jobs: 20,
            reward: RewardKind::Resident,
            policy: PolicyConfig::default(),
            port_count: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.episodes_per_iter < 2 {
            return bad("episodes_per_iter must be at least 2");
        }
        if !(self.l_mean_init > 0.0) || self.l_mean_increment < 0.0 {
            return bad("episode length mean must be positive and nondecreasing");
        }
        if self.validation_every == 0 || self.window_jobs == 0 {
            return bad("validation_every and window_jobs must be positive");
        }
        Ok(())
    }

    fn sim_config(&self) -> SimConfig {
        SimConfig { port_count: self.port_count, record_events: false, ..SimConfig::default() }
    }
}

/// Weighted overlap of each job's residence `[a, J)` with `[t0, t1)`.
/// Unfinished jobs are resident until `end`.
pub fn resident_weight_time(rows: &[JobRow], t0: f64, t1: f64, end: f64) -> f64 {
    rows.iter()
        .map(|r| {
            let leave = r.completion.unwrap_or(end);
            let overlap = leave.min(t1) - r.arrival.max(t0);
            if overlap > 0.0 {
                r.weight * overlap
            } else {
                0.0
            }
        })
        .sum()
}

/// Reward for the interval `[t0, t1)` between two actions.
pub fn reward(rows: &[JobRow], t0: f64, t1: f64, end: f64, kind: RewardKind) -> f64 {
    match kind {
        RewardKind::Resident => -resident_weight_time(rows, t0, t1, end),
        RewardKind::Literal => {
            let dt = t1 - t0;
            if dt <= 0.0 {
                return 0.0;
            }
            let resident: f64 = rows
                .iter()
                .filter(|r| r.arrival < t1 && r.completion.unwrap_or(end) > t0)
                .map(|r| r.weight)
                .sum();
            -resident / dt
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeTrace {
    pub steps: Vec<Step>,
    pub rewards: Vec<f64>,
    pub report: SimReport,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn returns(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rewards.len()];
        let mut acc = 0.0;
        for k in (0..self.rewards.len()).rev() {
            acc += self.rewards[k];
            out[k] = acc;
        }
        out
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Rewards for actions at `times`, the last interval closing at `end`.
pub fn step_rewards(rows: &[JobRow], times: &[f64], end: f64, kind: RewardKind) -> Vec<f64> {
    (0..times.len())
        .map(|k| {
            let t1 = times.get(k + 1).copied().unwrap_or(end);
            reward(rows, times[k], t1, end, kind)
        })
        .collect()
}

/// Rolls one episode with the sampling policy, stopping after `budget`
/// actions or when every job has finished.
pub fn run_episode(
    jobs: &[Job],
    net: &PolicyNet,
    budget: usize,
    seed: u64,
    config: &TrainConfig,
) -> Result<EpisodeTrace, TrainError> {
    let mut agent = PolicyAgent::sampling(net, seed).recording();
    let sim = SimConfig { max_orderings: Some(budget.max(1)), ..config.sim_config() };
    let run = run_simulation(jobs, &mut agent, &sim)?;
    let steps = agent.into_steps();
    let times: Vec<f64> = steps.iter().map(|s| s.time).collect();
    let rewards = step_rewards(&run.report.rows, &times, run.report.end_time, config.reward);
    Ok(EpisodeTrace { steps, rewards, report: run.report })
}

/// Per-step baseline: mean return over the episodes that reached each step.
pub fn baselines(returns: &[Vec<f64>]) -> Vec<f64> {
    let longest = returns.iter().map(Vec::len).max().unwrap_or(0);
    (0..longest)
        .map(|k| {
            let reached: Vec<f64> = returns.iter().filter_map(|r| r.get(k).copied()).collect();
            reached.iter().sum::<f64>() / reached.len() as f64
        })
        .collect()
}

/// Advantages `R_k^i - b_k`, one vector per episode.
pub fn advantages(traces: &[EpisodeTrace]) -> Result<Vec<Vec<f64>>, TrainError> {
    if traces.len() < 2 {
        return Err(TrainError::DegenerateBaseline(traces.len()));
    }
    let returns: Vec<Vec<f64>> = traces.iter().map(EpisodeTrace::returns).collect();
    let base = baselines(&returns);
    Ok(returns.iter().map(|r| r.iter().zip(&base).map(|(x, b)| x - b).collect()).collect())
}

/// Gradient of the surrogate `sum_{i,k} A_k^i log pi(a_k^i | s_k^i)` with the
/// advantages held fixed, accumulated in episode then step order.
pub fn surrogate_gradient(net: &PolicyNet, traces: &[EpisodeTrace], adv: &[Vec<f64>]) -> Result<(PolicyNet, f64), TrainError> {
    let mut grads = net.zeros_like();
    let mut value = 0.0;
    for (trace, adv) in traces.iter().zip(adv) {
        for (step, &a) in trace.steps.iter().zip(adv) {
            if a == 0.0 {
                continue;
            }
            let dec = &step.decision;
            let (q, cache) = score_candidates(net, dec)?;
            let p = priorities(&q, &dec.weights);
            value += a * crate::policy::plackett_luce_log_prob(&p, &step.order);
            let dp = plackett_luce_grad(&p, &step.order);
            let dq: Vec<f64> = dp.iter().zip(&dec.weights).map(|(g, w)| a * g * w).collect();
            score_backward(net, dec, &cache, &dq, &mut grads);
        }
    }
    Ok((grads, value))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub surrogate: f64,
    pub mean_return: f64,
    pub grad_norm: f64,
}

/// One REINFORCE step: ascend the surrogate with Adam.
pub fn reinforce_update(
    traces: &[EpisodeTrace],
    net: &mut PolicyNet,
    adam: &mut AdamState,
    lr: f64,
) -> Result<UpdateStats, TrainError> {
    let adv = advantages(traces)?;
    let (mut grads, surrogate) = surrogate_gradient(net, traces, &adv)?;
    // Adam descends; scale so that it ascends the per-episode mean surrogate.
    let scale = -1.0 / traces.len() as f64;
    let mut sq = 0.0;
    for t in grads.tensors_mut() {
        for x in t.data.iter_mut() {
            *x *= scale;
            sq += *x * *x;
        }
    }
    adam_step(net, &grads, adam, lr);
    Ok(UpdateStats {
        surrogate,
        mean_return: traces.iter().map(EpisodeTrace::total_reward).sum::<f64>() / traces.len() as f64,
        grad_norm: sq.sqrt(),
    })
}

/// Runs `scheduler` to completion on `jobs`.
pub fn evaluate<S: Scheduler + ?Sized>(jobs: &[Job], scheduler: &mut S, port_count: Option<usize>) -> Result<SimReport, TrainError> {
    let cfg = SimConfig { port_count, record_events: false, ..SimConfig::default() };
    Ok(run_simulation(jobs, scheduler, &cfg)?.report)
}

/// Greedy-policy average weighted JCT.
pub fn evaluate_policy(net: &PolicyNet, jobs: &[Job], port_count: Option<usize>) -> Result<f64, TrainError> {
    Ok(evaluate(jobs, &mut PolicyAgent::greedy(net), port_count)?.avg_weighted_jct)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub avg_weighted_jct: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation score seen, initial ones included.
    pub best: PolicyNet,
    pub best_score: f64,
    pub last: PolicyNet,
    pub initial_score: f64,
    pub curve: Vec<CurvePoint>,
    pub final_l_mean: f64,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("iteration,avg_weighted_jct\n");
    for p in curve {
        out.push_str(&format!("{},{}\n", p.iteration, p.avg_weighted_jct));
    }
    out
}

/// Samples an action budget `ceil(Exp(mean))`, at least one.
pub fn sample_budget<R: Rng + ?Sized>(l_mean: f64, rng: &mut R) -> usize {
    let exp = Exp::new(1.0 / l_mean).expect("positive mean");
    (exp.sample(rng).ceil() as usize).max(1)
}

pub fn train(config: &TrainConfig, train_jobs: &[Job], val_jobs: &[Job]) -> Result<TrainOutcome, TrainError> {
    train_with(config, train_jobs, val_jobs, |_, _| {})
}

/// [`train`] with a callback invoked after every iteration with the
/// iteration number and update statistics.
pub fn train_with(
    config: &TrainConfig,
    train_jobs: &[Job],
    val_jobs: &[Job],
    mut on_iteration: impl FnMut(usize, &UpdateStats),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_jobs.is_empty() {
        return Err(TrainError::EmptyWorkload);
    }
    let mut net = PolicyNet::new(config.policy, config.seed);
    let mut adam = AdamState::new(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e);
    let score = |n: &PolicyNet| -> Result<f64, TrainError> {
        if val_jobs.is_empty() {
            Ok(f64::NAN)
        } else {
            evaluate_policy(n, val_jobs, config.port_count)
        }
    };
    let initial_score = score(&net)?;
    let mut best = net.clone();
    let mut best_score = initial_score;
    let mut curve = Vec::new();
    let mut l_mean = config.l_mean_init;
    let window = config.window_jobs.min(train_jobs.len());

    for it in 1..=config.iterations {
        let budget = sample_budget(l_mean, &mut rng);
        let start = rng.gen_range(0..=train_jobs.len() - window);
        let jobs = &train_jobs[start..start + window];
        let seeds: Vec<u64> = (0..config.episodes_per_iter).map(|_| rng.gen()).collect();
        let traces = seeds
            .iter()
            .map(|&s| run_episode(jobs, &net, budget, s, config))
            .collect::<Result<Vec<_>, _>>()?;
        let stats = reinforce_update(&traces, &mut net, &mut adam, config.lr)?;
        l_mean += config.l_mean_increment;
        on_iteration(it, &stats);

        if it % config.validation_every == 0 {
            let s = score(&net)?;
            curve.push(CurvePoint { iteration: it, avg_weighted_jct: s });
            if s < best_score || best_score.is_nan() {
                best_score = s;
                best = net.clone();
            }
        }
    }
    Ok(TrainOutcome { best, best_score, last: net, initial_score, curve, final_l_mean: l_mean })
}
