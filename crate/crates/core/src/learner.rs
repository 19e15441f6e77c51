//! The DTE update and its ablations.
//!
//! Each episode is played by one sampled head. On replay, the acting head
//! regresses toward a lambda-return while (for DTE) the sum of every other
//! head's value on the same state-action regresses toward zero:
//!
//! `L = (Q_i - G)^2 + (sum_{j != i} Q_j)^2`
//!
//! The multi-head baseline keeps only the first term; single-head DQN is the
//! `N = 1` case, where both coincide.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::env::{Action, Observation, Policy, Trajectory};
use crate::valuenet::{sync_target, Adam, Features, HeadSel, Memory, MemoryState, NetError, Sequence, TargetSync, ValueNet};

#[derive(Debug, Error, PartialEq)]
pub enum LearnerError {
    #[error("head weights must be finite, non-negative and not all zero")]
    BadWeights,
    #[error("cannot pick an action from an empty Q row")]
    EmptyRow,
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("batch of {requested} exceeds the {available} stored episodes")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("trajectory acted by head {head} but the network has {heads} heads")]
    HeadOutOfRange { head: usize, heads: usize },
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error("unknown agent variant `{0}` (expected dte, multihead or dqn1)")]
    UnknownVariant(String),
    #[error("network: {0}")]
    Net(String),
}

impl From<NetError> for LearnerError {
    fn from(e: NetError) -> Self {
        LearnerError::Net(e.to_string())
    }
}

/// Chooses the acting head of each episode with probability proportional to
/// its weight.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSampler {
    weights: Vec<f64>,
    total: f64,
}

impl HeadSampler {
    pub fn new(weights: Vec<f64>) -> Result<Self, LearnerError> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LearnerError::BadWeights);
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(LearnerError::BadWeights);
        }
        Ok(HeadSampler { weights, total })
    }

    pub fn uniform(heads: usize) -> Self {
        HeadSampler::new(vec![1.0; heads.max(1)]).expect("uniform weights are valid")
    }

    pub fn heads(&self) -> usize {
        self.weights.len()
    }

    pub fn probability(&self, head: usize) -> f64 {
        self.weights.get(head).map_or(0.0, |w| w / self.total)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.weights.len() == 1 {
            return 0;
        }
        let mut u = rng.random::<f64>() * self.total;
        for (i, &w) in self.weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        // Rounding can leave u just above the last positive weight.
        self.weights.iter().rposition(|&w| w > 0.0).expect("some weight is positive")
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in row.iter().enumerate() {
        if best.is_none_or(|b| v > row[b]) {
            best = Some(i);
        }
    }
    best
}

/// With probability `epsilon` a uniformly random action, otherwise the argmax.
pub fn epsilon_greedy<T: PartialOrd + Copy, R: Rng + ?Sized>(row: &[T], epsilon: f64, rng: &mut R) -> Result<usize, LearnerError> {
    if row.is_empty() {
        return Err(LearnerError::EmptyRow);
    }
    if rng.random::<f64>() < epsilon {
        Ok(rng.random_range(0..row.len()))
    } else {
        Ok(argmax(row).expect("non-empty row"))
    }
}

/// Per-head greedy actions; for an additive joint value this is the joint argmax.
pub fn vdn_joint_argmax(q_heads: &[Vec<f64>]) -> Vec<usize> {
    q_heads.iter().map(|q| argmax(q).unwrap_or(0)).collect()
}

/// FIFO store of whole episodes, sampled uniformly.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Arc<Trajectory>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity: capacity.max(1), episodes: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn append(&mut self, trajectory: Trajectory) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(Arc::new(trajectory));
    }

    pub fn get(&self, i: usize) -> Option<&Arc<Trajectory>> {
        self.episodes.get(i)
    }

    /// `size` distinct episodes chosen uniformly at random.
    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R, size: usize) -> Result<Vec<Arc<Trajectory>>, LearnerError> {
        if self.episodes.is_empty() {
            return Err(LearnerError::EmptyBuffer);
        }
        if size > self.episodes.len() {
            return Err(LearnerError::BatchTooLarge { requested: size, available: self.episodes.len() });
        }
        Ok(index::sample(rng, self.episodes.len(), size).into_iter().map(|i| Arc::clone(&self.episodes[i])).collect())
    }
}

/// Lambda-return for step `t`, truncated at `t + n_step` (and the episode end).
///
/// `values[k]` is the bootstrap value of state `k` for `k` in `1..=T`;
/// `values[0]` is ignored. When `terminal` is set the final state is worth 0.
/// Uses `G_k = r_k + gamma * ((1 - lambda) V(s_{k+1}) + lambda G_{k+1})` with
/// `G_h = V(s_h)` at the horizon.
pub fn lambda_return(rewards: &[f64], values: &[f64], terminal: bool, t: usize, gamma: f64, lambda: f64, n_step: usize) -> f64 {
    let len = rewards.len();
    let horizon = (t + n_step.max(1)).min(len);
    let value = |k: usize| if k == len && terminal { 0.0 } else { values[k] };
    let mut g = value(horizon);
    for k in (t..horizon).rev() {
        let next = if k + 1 == horizon { g } else { (1.0 - lambda) * value(k + 1) + lambda * g };
        g = rewards[k] + gamma * next;
    }
    g
}

/// Lambda-returns for every step of an episode.
pub fn lambda_targets(rewards: &[f64], values: &[f64], terminal: bool, gamma: f64, lambda: f64, n_step: usize) -> Vec<f64> {
    (0..rewards.len()).map(|t| lambda_return(rewards, values, terminal, t, gamma, lambda, n_step)).collect()
}

/// `(Q_i - R)^2 + (sum_{j != i} Q_j)^2`.
pub fn dte_loss(q_acting: f64, q_others_sum: f64, target: f64) -> f64 {
    (q_acting - target).powi(2) + q_others_sum.powi(2)
}

/// `(sum_j Q_j - R)^2`.
pub fn vdn_loss(q_heads: &[f64], target: f64) -> f64 {
    (q_heads.iter().sum::<f64>() - target).powi(2)
}

/// Each head's value read as its share of the return.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibility {
    pub probabilities: Vec<f64>,
    /// Sum of the clamped shares before renormalisation; 1 when calibrated.
    pub raw_sum: f64,
}

/// Clamps each head value at zero, divides by the return estimate and
/// renormalises when the shares sum above one. `None` when `return_estimate <= 0`.
pub fn implied_responsibility(q_heads: &[f64], return_estimate: f64) -> Option<Responsibility> {
    if return_estimate <= 0.0 || !return_estimate.is_finite() {
        return None;
    }
    let shares: Vec<f64> = q_heads.iter().map(|q| q.max(0.0) / return_estimate).collect();
    let raw_sum: f64 = shares.iter().sum();
    let probabilities = if raw_sum > 1.0 { shares.iter().map(|s| s / raw_sum).collect() } else { shares };
    Some(Responsibility { probabilities, raw_sum })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Dte,
    MultiheadBaseline,
    SingleDqn,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Dte => "dte",
            Variant::MultiheadBaseline => "multihead",
            Variant::SingleDqn => "dqn1",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = LearnerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dte" => Ok(Variant::Dte),
            "multihead" | "multihead_baseline" | "baseline" => Ok(Variant::MultiheadBaseline),
            "dqn1" | "single_dqn" | "dqn" => Ok(Variant::SingleDqn),
            other => Err(LearnerError::UnknownVariant(other.to_string())),
        }
    }
}

/// How the exclusion term is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExclusionMode {
    /// One optimiser step on the summed loss.
    #[default]
    Combined,
    /// An acting-head step followed by a separate exclusion step.
    Alternating,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub variant: Variant,
    pub heads: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Lambda-return horizon, at most 40.
    pub n_step: usize,
    /// Transitions per learner step.
    pub batch_size: usize,
    /// Consecutive transitions taken from each sampled episode.
    pub sequence_length: usize,
    pub learning_rate: f64,
    pub target_sync: TargetSync,
    pub head_weights: Option<Vec<f64>>,
    pub exclusion: ExclusionMode,
    /// Replay capacity in episodes.
    pub replay_capacity: usize,
    /// Environment steps per learner step.
    pub learn_every: usize,
    /// Episodes stored before learning starts.
    pub min_replay: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            variant: Variant::Dte,
            heads: 9,
            epsilon: 0.1,
            gamma: 0.99,
            lambda: 0.9,
            n_step: 40,
            batch_size: 32,
            sequence_length: 8,
            learning_rate: 1e-4,
            target_sync: TargetSync::default(),
            head_weights: None,
            exclusion: ExclusionMode::Combined,
            replay_capacity: 10_000,
            learn_every: 4,
            min_replay: 10,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m: &str| Err(LearnerError::Config(m.to_string()));
        if self.heads == 0 {
            return bad("at least one head is required");
        }
        if self.variant == Variant::SingleDqn && self.heads != 1 {
            return bad("single-head DQN needs exactly one head");
        }
        for (name, v) in [("epsilon", self.epsilon), ("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.n_step == 0 || self.n_step > 40 {
            return bad("n_step must lie in 1..=40");
        }
        if self.batch_size == 0 || self.sequence_length == 0 || self.sequence_length > 40 {
            return bad("batch size must be positive and sequence length in 1..=40");
        }
        if self.learn_every == 0 {
            return bad("learn_every must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning rate must be finite and non-negative");
        }
        if let Some(w) = &self.head_weights {
            if w.len() != self.heads {
                return bad("need one head weight per head");
            }
            HeadSampler::new(w.clone())?;
        }
        Ok(())
    }

    pub fn sampler(&self) -> HeadSampler {
        match &self.head_weights {
            Some(w) => HeadSampler::new(w.clone()).expect("validated weights"),
            None => HeadSampler::uniform(self.heads),
        }
    }
}

/// A run of consecutive transitions `[start, end)` from one stored episode.
#[derive(Debug, Clone)]
pub struct Window {
    pub trajectory: Arc<Trajectory>,
    pub start: usize,
    pub end: usize,
}

/// Which loss terms feed a gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossPart {
    Combined,
    ActingOnly,
    ExclusionOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    /// Mean squared error of the acting heads against their targets.
    pub acting_loss: f64,
    /// Mean squared sum of the non-acting heads' values.
    pub exclusion_loss: f64,
    /// Mean Q of the taken actions per head; `None` when a head was not evaluated.
    pub mean_q: Vec<Option<f64>>,
    pub rows: usize,
}

/// Online and target parameters plus the optimiser.
#[derive(Debug, Clone)]
pub struct Learner {
    pub net: ValueNet,
    pub config: AgentConfig,
    pub params: Vec<f32>,
    pub target: Vec<f32>,
    optimizer: Adam<f32>,
    steps: usize,
}

fn features(net: &ValueNet, obs: &Observation) -> Features<f32> {
    Features::from_observation(obs, &net.spec.input)
}

impl Learner {
    pub fn new(net: ValueNet, config: AgentConfig, seed: u64) -> Result<Self, LearnerError> {
        config.validate()?;
        if net.spec.heads != config.heads {
            return Err(LearnerError::Config(format!("network has {} heads, config {}", net.spec.heads, config.heads)));
        }
        let params = net.init::<f32>(seed);
        Ok(Learner {
            target: params.clone(),
            optimizer: Adam::new(params.len(), config.learning_rate),
            params,
            net,
            config,
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Draws `batch_size / sequence_length` (rounded up) episodes and one
    /// uniformly placed window from each.
    pub fn sample_windows<R: Rng + ?Sized>(&self, buffer: &ReplayBuffer, rng: &mut R) -> Result<Vec<Window>, LearnerError> {
        let len = self.config.sequence_length;
        let count = self.config.batch_size.div_ceil(len).min(buffer.len().max(1));
        let episodes = buffer.sample_batch(rng, count)?;
        Ok(episodes
            .into_iter()
            .filter(|t| !t.is_empty())
            .map(|t| {
                let start = rng.random_range(0..t.len());
                let end = (start + len).min(t.len());
                Window { trajectory: t, start, end }
            })
            .collect())
    }

    /// Steps of context needed before position `start` of an episode.
    fn context(&self, start: usize) -> usize {
        match self.net.spec.memory {
            Memory::FrameStack(k) => start.min(k - 1),
            _ => 0,
        }
    }

    /// A sequence producing outputs for states `first..=last` of `t`.
    fn sequence(&self, params: &[f32], t: &Trajectory, first: usize, last: usize) -> Sequence<f32> {
        let ctx = self.context(first);
        let inputs = (first - ctx..=last).map(|k| features(&self.net, t.observation(k))).collect();
        let initial = match self.net.spec.memory {
            Memory::Lstm(_) if first > 0 => {
                let prefix: Vec<Features<f32>> = (0..first).map(|k| features(&self.net, t.observation(k))).collect();
                match self.net.burn_in(params, &prefix) {
                    MemoryState::Lstm { h, c } => Some((h, c)),
                    _ => None,
                }
            }
            _ => None,
        };
        Sequence { inputs, first_output: ctx, initial }
    }

    /// Lambda-return targets for every row of every window, in row order.
    pub fn targets(&self, windows: &[Window]) -> Result<Vec<f64>, LearnerError> {
        let cfg = &self.config;
        let mut seqs = Vec::with_capacity(windows.len());
        let mut spans = Vec::with_capacity(windows.len());
        for w in windows {
            let t = &w.trajectory;
            // States whose value can enter a target of this window.
            let last = (w.end - 1 + cfg.n_step).min(t.len());
            seqs.push(self.sequence(&self.target, t, w.start + 1, last));
            spans.push(last - w.start);
        }
        let heads: Vec<usize> =
            windows.iter().zip(&spans).flat_map(|(w, &n)| std::iter::repeat_n(w.trajectory.acting_head, n)).collect();
        let tape = self.net.forward(&self.target, &seqs, &HeadSel::PerRow(heads))?;
        let mut out = Vec::new();
        let mut row = 0;
        for (w, &n) in windows.iter().zip(&spans) {
            let t = &w.trajectory;
            let h = t.acting_head;
            // values[k - start] = V(s_k) for k in start+1..=last
            let mut values = vec![0.0; n + 1];
            for v in values.iter_mut().skip(1) {
                let q = tape.q_for_row(h, row).expect("acting head evaluated");
                *v = f64::from(q.iter().copied().fold(f32::NEG_INFINITY, f32::max));
                row += 1;
            }
            let rewards: Vec<f64> = t.steps[w.start..w.start + n].iter().map(|s| s.reward).collect();
            let terminal = !t.truncated && w.start + n == t.len();
            for k in 0..w.end - w.start {
                // Horizon is measured from the row, but capped by the values we have.
                let steps_left = n - k;
                let g = lambda_return(&rewards[k..], &values[k..], terminal, 0, cfg.gamma, cfg.lambda, cfg.n_step.min(steps_left));
                out.push(g);
            }
        }
        Ok(out)
    }

    /// Loss gradient (mean over rows) and metrics for the given windows.
    pub fn gradient(&self, windows: &[Window], targets: &[f64], part: LossPart) -> Result<(Vec<f32>, StepMetrics), LearnerError> {
        let heads = self.config.heads;
        for w in windows {
            if w.trajectory.acting_head >= heads {
                return Err(LearnerError::HeadOutOfRange { head: w.trajectory.acting_head, heads });
            }
        }
        let seqs: Vec<Sequence<f32>> =
            windows.iter().map(|w| self.sequence(&self.params, &w.trajectory, w.start, w.end - 1)).collect();
        let acting: Vec<usize> =
            windows.iter().flat_map(|w| std::iter::repeat_n(w.trajectory.acting_head, w.end - w.start)).collect();
        let actions: Vec<usize> =
            windows.iter().flat_map(|w| w.trajectory.steps[w.start..w.end].iter().map(|s| s.action.index())).collect();
        let rows = acting.len();
        let exclusion = self.config.variant == Variant::Dte && heads > 1;
        let sel = if exclusion { HeadSel::All } else { HeadSel::PerRow(acting.clone()) };
        let tape = self.net.forward(&self.params, &seqs, &sel)?;

        let mut dq: Vec<Option<Array2<f32>>> =
            (0..heads).map(|h| tape.q(h).map(|q| Array2::zeros(q.dim()))).collect();
        // Position of each row inside each evaluated head's Q matrix.
        let local = |h: usize, r: usize| -> usize {
            match tape.head_rows(h) {
                None => r,
                Some(rs) => rs.binary_search(&r).expect("row evaluated by head"),
            }
        };
        let scale = 2.0 / rows.max(1) as f64;
        let (mut acting_loss, mut exclusion_loss) = (0.0, 0.0);
        let mut q_sum = vec![0.0; heads];
        let mut q_count = vec![0usize; heads];
        for r in 0..rows {
            let (i, a) = (acting[r], actions[r]);
            let qi = f64::from(tape.q(i).expect("acting head")[[local(i, r), a]]);
            let err = qi - targets[r];
            acting_loss += err * err;
            if part != LossPart::ExclusionOnly {
                if let Some(d) = dq[i].as_mut() {
                    d[[local(i, r), a]] += (scale * err) as f32;
                }
            }
            for h in 0..heads {
                if tape.evaluated(h) && (tape.head_rows(h).is_none() || h == i) {
                    q_sum[h] += f64::from(tape.q(h).expect("evaluated")[[local(h, r), a]]);
                    q_count[h] += 1;
                }
            }
            if exclusion {
                let others: f64 = (0..heads).filter(|&j| j != i).map(|j| f64::from(tape.q(j).expect("all heads")[[r, a]])).sum();
                exclusion_loss += others * others;
                if part != LossPart::ActingOnly {
                    for j in (0..heads).filter(|&j| j != i) {
                        if let Some(d) = dq[j].as_mut() {
                            d[[r, a]] += (scale * others) as f32;
                        }
                    }
                }
            }
        }
        let grad = self.net.backward(&self.params, &tape, &dq);
        let n = rows.max(1) as f64;
        let metrics = StepMetrics {
            step: self.steps,
            acting_loss: acting_loss / n,
            exclusion_loss: exclusion_loss / n,
            mean_q: q_sum.iter().zip(&q_count).map(|(&s, &c)| (c > 0).then(|| s / c as f64)).collect(),
            rows,
        };
        Ok((grad, metrics))
    }

    /// One learner step on the given windows: gradient, optimiser update(s)
    /// and target synchronisation.
    pub fn step(&mut self, windows: &[Window]) -> Result<StepMetrics, LearnerError> {
        let targets = self.targets(windows)?;
        let split = self.config.exclusion == ExclusionMode::Alternating && self.config.variant == Variant::Dte;
        let part = if split { LossPart::ActingOnly } else { LossPart::Combined };
        let (grad, mut metrics) = self.gradient(windows, &targets, part)?;
        self.optimizer.step(&mut self.params, &grad)?;
        if split && self.config.heads > 1 {
            let (grad, m2) = self.gradient(windows, &targets, LossPart::ExclusionOnly)?;
            self.optimizer.step(&mut self.params, &grad)?;
            metrics.exclusion_loss = m2.exclusion_loss;
        }
        self.steps += 1;
        metrics.step = self.steps;
        sync_target(&self.params, &mut self.target, self.config.target_sync, self.steps);
        Ok(metrics)
    }

    /// Samples windows from the buffer and takes one step.
    pub fn train<R: Rng + ?Sized>(&mut self, buffer: &ReplayBuffer, rng: &mut R) -> Result<StepMetrics, LearnerError> {
        let windows = self.sample_windows(buffer, rng)?;
        self.step(&windows)
    }

    /// An immutable snapshot of the online parameters for actors.
    pub fn snapshot(&self) -> Arc<Vec<f32>> {
        Arc::new(self.params.clone())
    }
}

/// Acts with one head of a parameter snapshot, epsilon-greedily.
#[derive(Debug, Clone)]
pub struct ActingAgent<R> {
    pub net: ValueNet,
    pub params: Arc<Vec<f32>>,
    pub head: usize,
    pub epsilon: f64,
    pub rng: R,
    state: MemoryState<f32>,
}

impl<R: Rng> ActingAgent<R> {
    pub fn new(net: ValueNet, params: Arc<Vec<f32>>, head: usize, epsilon: f64, rng: R) -> Self {
        let state = net.initial_state();
        ActingAgent { net, params, head, epsilon, rng, state }
    }
}

impl<E: ?Sized, R: Rng> Policy<E> for ActingAgent<R> {
    fn begin_episode(&mut self) {
        self.state = self.net.initial_state();
    }

    fn act(&mut self, _env: &E, observation: &Observation) -> Action {
        let f = features(&self.net, observation);
        let q = self.net.act(&self.params, &mut self.state, &f, self.head);
        let a = epsilon_greedy(&q, self.epsilon, &mut self.rng).expect("network emits at least one action");
        Action::from_index(a).expect("network actions match the action set")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Transition;
    use crate::valuenet::{Encoder, InputSpec, NetworkSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn loss_examples() {
        assert_eq!(dte_loss(31.25, 0.0, 31.25), 0.0);
        assert_eq!(dte_loss(1.0, 2.0, 3.0), 8.0);
        assert_eq!(dte_loss(2.0, 1.0, 0.0), 5.0);
        assert_eq!(vdn_loss(&[2.0, 1.0], 0.0), 9.0);
        assert_eq!(vdn_loss(&[1.0, 1.0, 1.0], 0.0), 9.0);
        assert_eq!(vdn_loss(&[0.5, 1.5], 2.0), 0.0);
    }

    proptest! {
        #[test]
        fn dte_at_least_half_vdn(qi in -100.0f64..100.0, s in -100.0f64..100.0, r in 0.0f64..100.0) {
            let vdn = vdn_loss(&[qi, s], r);
            prop_assert!(dte_loss(qi, s, r) >= vdn / 2.0 - 1e-9 * vdn.max(1.0));
        }

        #[test]
        fn joint_argmax_decomposes(q in prop::collection::vec(prop::collection::vec(-5i32..5, 3), 1..4)) {
            let q: Vec<Vec<f64>> = q.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect();
            let best = vdn_joint_argmax(&q);
            let value = |acts: &[usize]| acts.iter().enumerate().map(|(h, &a)| q[h][a]).sum::<f64>();
            let n = q.len();
            let mut max = f64::NEG_INFINITY;
            for code in 0..3usize.pow(n as u32) {
                let acts: Vec<usize> = (0..n).map(|h| code / 3usize.pow(h as u32) % 3).collect();
                max = max.max(value(&acts));
            }
            prop_assert_eq!(value(&best), max);
        }
    }

    #[test]
    fn equality_case_of_half_bound() {
        // (Q_i - R) = sum of others gives dte = vdn / 2 exactly.
        let (qi, r) = (3.0, 1.0);
        let s = qi - r;
        assert_eq!(dte_loss(qi, s, r), vdn_loss(&[qi, s], r) / 2.0);
    }

    #[test]
    fn sampler_and_epsilon_greedy() {
        assert_eq!(HeadSampler::new(vec![0.0, 0.0]), Err(LearnerError::BadWeights));
        let one = HeadSampler::uniform(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| one.sample(&mut rng) == 0));
        assert_eq!(epsilon_greedy(&[1, 2, 3, 4], 0.0, &mut rng), Ok(3));
        assert_eq!(epsilon_greedy(&[7, 7, 7, 7], 0.0, &mut rng), Ok(0));
        assert_eq!(epsilon_greedy::<f64, _>(&[], 0.5, &mut rng), Err(LearnerError::EmptyRow));
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[epsilon_greedy(&[0.0; 4], 1.0, &mut rng).unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| (c as f64 / 10_000.0 - 0.25).abs() < 0.02), "{counts:?}");
    }

    #[test]
    fn replay_is_fifo_and_keeps_heads() {
        let mut buf = ReplayBuffer::new(2);
        for head in 0..3 {
            buf.append(trajectory(&[1.0], head, true));
        }
        assert_eq!(buf.len(), 2);
        assert_eq!(buf.get(0).unwrap().acting_head, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = buf.sample_batch(&mut rng, 2).unwrap();
        let mut heads: Vec<usize> = batch.iter().map(|t| t.acting_head).collect();
        heads.sort_unstable();
        assert_eq!(heads, vec![1, 2]);
        assert_eq!(buf.sample_batch(&mut rng, 3).unwrap_err(), LearnerError::BatchTooLarge { requested: 3, available: 2 });
        assert_eq!(ReplayBuffer::new(3).sample_batch(&mut rng, 1).unwrap_err(), LearnerError::EmptyBuffer);
    }

    #[test]
    fn lambda_return_examples() {
        let v = [0.0; 4];
        assert_eq!(lambda_targets(&[0.0, 0.0, 1.0], &v, true, 1.0, 1.0, 40), vec![1.0, 1.0, 1.0]);
        assert_eq!(lambda_targets(&[0.0, 0.0, 1.0], &v, true, 0.5, 1.0, 40), vec![0.25, 0.5, 1.0]);
        // lambda = 0 is the one-step target
        let values = [9.0, 1.0, 2.0, 3.0];
        let g = lambda_targets(&[1.0, 1.0, 1.0], &values, false, 0.9, 0.0, 40);
        for t in 0..3 {
            assert!((g[t] - (1.0 + 0.9 * values[t + 1])).abs() < 1e-12);
        }
        // a truncated episode bootstraps from the final state
        assert_eq!(lambda_targets(&[0.0], &[0.0, 5.0], false, 0.5, 0.9, 40), vec![2.5]);
        assert_eq!(lambda_targets(&[0.0], &[0.0, 5.0], true, 0.5, 0.9, 40), vec![0.0]);
    }

    /// The lambda-return as an explicit mixture of n-step returns.
    fn brute_force(rewards: &[f64], values: &[f64], terminal: bool, t: usize, gamma: f64, lambda: f64, n: usize) -> f64 {
        let len = rewards.len();
        let h = (t + n).min(len) - t;
        let v = |k: usize| if k == len && terminal { 0.0 } else { values[k] };
        let n_step = |m: usize| {
            let mut g = 0.0;
            for j in 0..m {
                g += gamma.powi(j as i32) * rewards[t + j];
            }
            g + gamma.powi(m as i32) * v(t + m)
        };
        let mut total = 0.0;
        for m in 1..h {
            total += (1.0 - lambda) * lambda.powi(m as i32 - 1) * n_step(m);
        }
        total + lambda.powi(h as i32 - 1) * n_step(h)
    }

    proptest! {
        #[test]
        fn lambda_return_matches_mixture_of_n_step_returns(
            rewards in prop::collection::vec(0.0f64..2.0, 10),
            values in prop::collection::vec(-3.0f64..3.0, 11),
            terminal in any::<bool>(),
            gamma in 0.0f64..=1.0,
            lambda in 0.0f64..=1.0,
            n in 1usize..12,
        ) {
            for t in 0..10 {
                let a = lambda_return(&rewards, &values, terminal, t, gamma, lambda, n);
                let b = brute_force(&rewards, &values, terminal, t, gamma, lambda, n);
                prop_assert!((a - b).abs() < 1e-9, "t={} {} vs {}", t, a, b);
            }
        }
    }

    #[test]
    fn responsibility_examples() {
        let r = 4.0;
        assert_eq!(implied_responsibility(&[r, 0.0, 0.0], r).unwrap().probabilities, vec![1.0, 0.0, 0.0]);
        assert_eq!(implied_responsibility(&[r / 2.0, r / 2.0, 0.0], r).unwrap().probabilities, vec![0.5, 0.5, 0.0]);
        let over = implied_responsibility(&[2.0 * r, 0.0, -1.0], r).unwrap();
        assert_eq!((over.probabilities, over.raw_sum), (vec![1.0, 0.0, 0.0], 2.0));
        assert_eq!(implied_responsibility(&[1.0], 0.0), None);
    }

    fn obs(cell: u8) -> Observation {
        Observation { height: 1, width: 2, num_classes: 3, cells: vec![cell, 2 - cell], num_inventory_kinds: 1, inventory: None, rgb: None }
    }

    fn trajectory(rewards: &[f64], head: usize, terminal: bool) -> Trajectory {
        let steps = rewards
            .iter()
            .enumerate()
            .map(|(k, &r)| Transition { observation: obs((k % 3) as u8), action: Action::from_index(k % 5).unwrap(), reward: r })
            .collect();
        Trajectory {
            steps,
            final_observation: obs(1),
            acting_head: head,
            episode_return: rewards.iter().sum(),
            niche_events: vec![],
            seed: 0,
            truncated: !terminal,
        }
    }

    fn tiny_net(heads: usize, memory: Memory) -> ValueNet {
        ValueNet::new(NetworkSpec {
            input: InputSpec::Features { len: 7 },
            encoder: Encoder::Dense { width: 8 },
            memory,
            heads,
            head_hidden: 6,
            actions: 5,
        })
        .unwrap()
    }

    fn learner(variant: Variant, heads: usize) -> Learner {
        let config = AgentConfig { variant, heads, learning_rate: 1e-2, batch_size: 4, sequence_length: 2, ..AgentConfig::default() };
        Learner::new(tiny_net(heads, Memory::FrameStack(2)), config, 3).unwrap()
    }

    fn window(t: Trajectory, start: usize, end: usize) -> Window {
        Window { trajectory: Arc::new(t), start, end }
    }

    #[test]
    fn baseline_leaves_other_heads_untouched() {
        let l = learner(Variant::MultiheadBaseline, 4);
        let w = vec![window(trajectory(&[0.0, 1.0, 0.5], 3, true), 0, 3)];
        let targets = l.targets(&w).unwrap();
        let (g, m) = l.gradient(&w, &targets, LossPart::Combined).unwrap();
        for h in 0..3 {
            assert!(g[l.net.head_range(h)].iter().all(|&v| v == 0.0));
        }
        assert!(g[l.net.head_range(3)].iter().any(|&v| v != 0.0));
        assert_eq!(m.exclusion_loss, 0.0);
        assert!(m.mean_q[0].is_none() && m.mean_q[3].is_some());
    }

    #[test]
    fn dte_pushes_every_non_acting_head() {
        let l = learner(Variant::Dte, 4);
        let w = vec![window(trajectory(&[0.0, 1.0, 0.5], 3, true), 0, 3)];
        let targets = l.targets(&w).unwrap();
        let (g, m) = l.gradient(&w, &targets, LossPart::Combined).unwrap();
        assert!(m.exclusion_loss > 0.0);
        for h in 0..4 {
            assert!(g[l.net.head_range(h)].iter().any(|&v| v != 0.0), "head {h}");
        }
    }

    #[test]
    fn exclusion_step_lowers_the_others_sum() {
        let mut l = learner(Variant::Dte, 3);
        // Make the non-acting heads' values positive through their output biases.
        for h in 0..3 {
            let b2 = l.net.layout.block(&format!("head{h}.b2")).unwrap().range();
            l.params[b2].iter_mut().for_each(|v| *v = 1.0);
        }
        let w = vec![window(trajectory(&[1.0], 0, true), 0, 1)];
        let others = |l: &Learner| {
            let t = &w[0].trajectory;
            let f = features(&l.net, t.observation(0));
            let q = l.net.act_all(&l.params, &mut l.net.initial_state(), &f);
            let a = t.steps[0].action.index();
            q[[1, a]] + q[[2, a]]
        };
        let before = others(&l);
        assert!(before > 0.0);
        let targets = l.targets(&w).unwrap();
        let (mut g, _) = l.gradient(&w, &targets, LossPart::Combined).unwrap();
        for i in l.net.trunk_range().chain(l.net.head_range(0)) {
            g[i] = 0.0;
        }
        crate::valuenet::Sgd { lr: 1e-3 }.step(&mut l.params, &g).unwrap();
        assert!(others(&l) < before);
    }

    #[test]
    fn single_head_variants_agree_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut buffer = ReplayBuffer::new(50);
        for k in 0..20 {
            let rewards: Vec<f64> = (0..(3 + k % 5)).map(|_| rng.random_range(0.0..1.0)).collect();
            buffer.append(trajectory(&rewards, 0, k % 2 == 0));
        }
        let mut runs: Vec<Vec<f32>> = Vec::new();
        for variant in [Variant::Dte, Variant::MultiheadBaseline, Variant::SingleDqn] {
            let config = AgentConfig {
                variant,
                heads: 1,
                batch_size: 4,
                sequence_length: 2,
                exclusion: ExclusionMode::Alternating,
                target_sync: TargetSync::Hard { every: 5 },
                ..AgentConfig::default()
            };
            let mut l = Learner::new(tiny_net(1, Memory::FrameStack(2)), config, 9).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            for _ in 0..30 {
                l.train(&buffer, &mut rng).unwrap();
            }
            runs.push(l.params);
        }
        assert_eq!(runs[0], runs[1]);
        assert_eq!(runs[1], runs[2]);
    }

    #[test]
    fn rejects_foreign_heads_and_bad_configs() {
        let l = learner(Variant::Dte, 2);
        let w = vec![window(trajectory(&[1.0], 5, true), 0, 1)];
        assert_eq!(l.gradient(&w, &[0.0], LossPart::Combined).unwrap_err(), LearnerError::HeadOutOfRange { head: 5, heads: 2 });
        let bad = AgentConfig { variant: Variant::SingleDqn, heads: 2, ..AgentConfig::default() };
        assert!(bad.validate().is_err());
        assert!(AgentConfig { epsilon: 1.5, ..AgentConfig::default() }.validate().is_err());
        assert_eq!("dqn1".parse::<Variant>().unwrap(), Variant::SingleDqn);
    }

    #[test]
    fn targets_match_direct_lambda_returns() {
        let l = learner(Variant::Dte, 2);
        let t = trajectory(&[0.0, 1.0, 0.0, 2.0, 0.5], 1, false);
        let w = vec![window(t.clone(), 1, 3)];
        let got = l.targets(&w).unwrap();
        // V(s_k) from the target network, acting head 1, played from the episode start.
        let mut state = l.net.initial_state();
        let mut values = vec![0.0];
        for k in 0..=t.len() {
            let q = l.net.act(&l.target, &mut state, &features(&l.net, t.observation(k)), 1);
            if k > 0 {
                values.push(f64::from(q.iter().copied().fold(f32::NEG_INFINITY, f32::max)));
            }
        }
        let rewards: Vec<f64> = t.rewards().collect();
        for (row, step) in (1..3).enumerate() {
            let want = lambda_return(&rewards, &values, false, step, 0.99, 0.9, 40);
            assert!((got[row] - want).abs() < 1e-5, "{} vs {}", got[row], want);
        }
    }
}
