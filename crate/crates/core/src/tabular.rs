//! Two-niche corridor and tabular multi-head Q-learning.
//!
//! A fast end-to-end check of the exclusion term without function
//! approximation. The agent starts next to a cheap niche; a richer one sits at
//! the far end of the corridor.
//!
//! ```text
//! [near] S . . . . . . . [far]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::learner::{HeadSampler, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Niche {
    Near,
    Far,
}

impl Niche {
    pub fn name(self) -> &'static str {
        match self {
            Niche::Near => "near",
            Niche::Far => "far",
        }
    }
}

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

/// Cells `1..=length` are walkable; stepping left from cell 1 reaches the near
/// niche and stepping right from `length` reaches the far one. Both end the
/// episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Corridor {
    pub length: usize,
    pub near_value: f64,
    pub far_value: f64,
    pub horizon: usize,
}

impl Default for Corridor {
    fn default() -> Self {
        Corridor { length: 20, near_value: 18.75, far_value: 31.25, horizon: 500 }
    }
}

/// Result of one corridor move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Move {
    pub next: usize,
    pub reward: f64,
    pub niche: Option<Niche>,
}

impl Corridor {
    pub const START: usize = 1;

    pub fn states(&self) -> usize {
        self.length + 1
    }

    pub fn step(&self, pos: usize, action: usize) -> Move {
        match action {
            LEFT if pos == 1 => Move { next: 0, reward: self.near_value, niche: Some(Niche::Near) },
            LEFT => Move { next: pos - 1, reward: 0.0, niche: None },
            _ if pos == self.length => Move { next: 0, reward: self.far_value, niche: Some(Niche::Far) },
            _ => Move { next: pos + 1, reward: 0.0, niche: None },
        }
    }

    /// Optimal state values by repeated Bellman backups over both actions.
    /// Index 0 is the absorbing terminal state.
    pub fn value_iteration(&self, gamma: f64, tolerance: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.states()];
        loop {
            let mut delta: f64 = 0.0;
            for s in 1..self.states() {
                let best = [LEFT, RIGHT]
                    .iter()
                    .map(|&a| {
                        let m = self.step(s, a);
                        m.reward + if m.niche.is_some() { 0.0 } else { gamma * v[m.next] }
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                delta = delta.max((best - v[s]).abs());
                v[s] = best;
            }
            if delta < tolerance {
                return v;
            }
        }
    }

    /// Niche reached by the greedy policy of the given values, if any.
    pub fn greedy_niche(&self, q: &[[f64; 2]]) -> Option<Niche> {
        let mut pos = Self::START;
        for _ in 0..self.horizon {
            let a = if q[pos][RIGHT] > q[pos][LEFT] { RIGHT } else { LEFT };
            let m = self.step(pos, a);
            if m.niche.is_some() {
                return m.niche;
            }
            pos = m.next;
        }
        None
    }

    /// Optimal action values derived from optimal state values.
    pub fn optimal_q(&self, gamma: f64) -> Vec<[f64; 2]> {
        let v = self.value_iteration(gamma, 1e-12);
        (0..self.states())
            .map(|s| {
                if s == 0 {
                    return [0.0; 2];
                }
                [LEFT, RIGHT].map(|a| {
                    let m = self.step(s, a);
                    m.reward + if m.niche.is_some() { 0.0 } else { gamma * v[m.next] }
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularConfig {
    pub variant: Variant,
    pub heads: usize,
    pub episodes: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for TabularConfig {
    fn default() -> Self {
        TabularConfig { variant: Variant::Dte, heads: 3, episodes: 5_000, epsilon: 0.1, alpha: 0.1, gamma: 0.99, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularEpisode {
    pub head: usize,
    pub niche: Option<Niche>,
    pub episode_return: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularRun {
    pub episodes: Vec<TabularEpisode>,
    /// `q[head][state][action]`.
    pub q: Vec<Vec<[f64; 2]>>,
}

impl TabularRun {
    /// Most frequent niche among each head's last `window` episodes; ties go
    /// to the near niche, and `None` when a head never reached one.
    pub fn modal_niches(&self, heads: usize, window: usize) -> Vec<Option<Niche>> {
        (0..heads)
            .map(|h| {
                let mut counts = [0usize; 2];
                for e in self.episodes.iter().rev().filter(|e| e.head == h).take(window) {
                    match e.niche {
                        Some(Niche::Near) => counts[0] += 1,
                        Some(Niche::Far) => counts[1] += 1,
                        None => {}
                    }
                }
                match counts {
                    [0, 0] => None,
                    [n, f] if f > n => Some(Niche::Far),
                    _ => Some(Niche::Near),
                }
            })
            .collect()
    }

    pub fn distinct_niches(&self, heads: usize, window: usize) -> usize {
        let mut niches: Vec<Niche> = self.modal_niches(heads, window).into_iter().flatten().collect();
        niches.sort();
        niches.dedup();
        niches.len()
    }
}

/// Greedy with uniformly random tie-breaking, epsilon-random otherwise.
fn choose<R: Rng>(q: &[f64; 2], epsilon: f64, rng: &mut R) -> usize {
    if rng.random::<f64>() < epsilon || q[LEFT] == q[RIGHT] {
        rng.random_range(0..2)
    } else if q[RIGHT] > q[LEFT] {
        RIGHT
    } else {
        LEFT
    }
}

/// One-step Q-learning for the acting head of each episode. Under DTE every
/// other head also descends `(sum_{k != i} Q_k(s, a))^2` on each visited pair.
pub fn train(corridor: &Corridor, config: &TabularConfig) -> TabularRun {
    let heads = if config.variant == Variant::SingleDqn { 1 } else { config.heads.max(1) };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sampler = HeadSampler::uniform(heads);
    let mut q = vec![vec![[0.0f64; 2]; corridor.states()]; heads];
    let mut episodes = Vec::with_capacity(config.episodes);
    for _ in 0..config.episodes {
        let i = sampler.sample(&mut rng);
        let mut pos = Corridor::START;
        let mut episode = TabularEpisode { head: i, niche: None, episode_return: 0.0, steps: 0 };
        while episode.steps < corridor.horizon {
            let a = choose(&q[i][pos], config.epsilon, &mut rng);
            let m = corridor.step(pos, a);
            let bootstrap = if m.niche.is_some() { 0.0 } else { q[i][m.next][LEFT].max(q[i][m.next][RIGHT]) };
            let target = m.reward + config.gamma * bootstrap;
            if config.variant == Variant::Dte && heads > 1 {
                let others: f64 = (0..heads).filter(|&j| j != i).map(|j| q[j][pos][a]).sum();
                for j in (0..heads).filter(|&j| j != i) {
                    q[j][pos][a] -= config.alpha * others;
                }
            }
            q[i][pos][a] += config.alpha * (target - q[i][pos][a]);
            episode.steps += 1;
            episode.episode_return += m.reward;
            if m.niche.is_some() {
                episode.niche = m.niche;
                break;
            }
            pos = m.next;
        }
        episodes.push(episode);
    }
    TabularRun { episodes, q }
}
