//! Environment contract shared by every task and learner.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvError {
    #[error("step called on a finished episode; call reset first")]
    EpisodeDone,
    #[error("unknown task `{0}` (expected maze, simple_chemistry or metabolic_cycles)")]
    UnknownTask(String),
}

/// The five actions available in every task. `Drop` is a no-op in the maze.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Drop,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Drop];
    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Action::ALL.get(index).copied()
    }

    /// Row/column offset of a movement action.
    pub fn delta(self) -> Option<(isize, isize)> {
        match self {
            Action::Up => Some((-1, 0)),
            Action::Down => Some((1, 0)),
            Action::Left => Some((0, -1)),
            Action::Right => Some((0, 1)),
            Action::Drop => None,
        }
    }
}

/// An RGB image stored row-major as `height x width x 3` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, 3)
    }

    /// Channel-major floats in `[0, 1]`, the layout the conv encoder expects.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; 3 * plane];
        for (pixel, rgb) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + pixel] = f32::from(rgb[c]) / 255.0;
            }
        }
        out
    }
}

/// Symbolic view of the agent's surroundings.
///
/// Each window cell holds exactly one class index, so the one-hot expansion
/// has exactly one active channel per cell. The inventory holds at most one
/// compound kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Class index per window cell, row-major.
    pub cells: Vec<u8>,
    pub num_inventory_kinds: usize,
    pub inventory: Option<u8>,
    pub rgb: Option<RgbImage>,
}

impl Observation {
    /// Length of the flattened one-hot feature vector (window channels then inventory).
    pub fn feature_len(&self) -> usize {
        self.num_classes * self.height * self.width + self.num_inventory_kinds
    }

    /// One-hot window of shape `(num_classes, height, width)`, flattened channel-major.
    pub fn grid_window(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; self.num_classes * plane];
        for (cell, &class) in self.cells.iter().enumerate() {
            out[usize::from(class) * plane + cell] = 1.0;
        }
        out
    }

    pub fn inventory_channel(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.num_inventory_kinds];
        if let Some(kind) = self.inventory {
            out[usize::from(kind)] = 1.0;
        }
        out
    }

    /// Indices of the non-zero entries of the flattened feature vector, ascending
    /// within the window block.
    pub fn active_features(&self) -> Vec<u32> {
        let plane = self.height * self.width;
        let mut idx: Vec<u32> = self
            .cells
            .iter()
            .enumerate()
            .map(|(cell, &class)| (usize::from(class) * plane + cell) as u32)
            .collect();
        if let Some(kind) = self.inventory {
            idx.push((self.num_classes * plane + usize::from(kind)) as u32);
        }
        idx
    }

    /// Dense flattened features (window then inventory).
    pub fn features(&self) -> Vec<f32> {
        let mut v = self.grid_window();
        v.extend(self.inventory_channel());
        v
    }
}

/// A rewarded (or noteworthy) event inside an episode, used for niche analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct NicheEvent {
    pub kind: String,
    pub reward_contribution: f64,
    pub step_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    /// Set together with `done` when the episode hit its step limit rather than
    /// a terminal state; value targets bootstrap in that case.
    pub truncated: bool,
    pub events: Vec<NicheEvent>,
}

pub trait Environment {
    /// Restores the initial layout and reseeds the environment RNG.
    fn reset(&mut self, seed: u64) -> Observation;
    fn step(&mut self, action: Action) -> Result<StepResult, EnvError>;
    fn observe(&self) -> Observation;
    /// Step limit after which the episode is truncated.
    fn max_steps(&self) -> usize;
    fn num_actions(&self) -> usize {
        Action::COUNT
    }
}

/// Chooses actions. Scripted policies may inspect the environment itself;
/// learned policies only look at the observation stream.
pub trait Policy<E: ?Sized> {
    fn begin_episode(&mut self) {}
    fn act(&mut self, env: &E, observation: &Observation) -> Action;
}

impl<E: ?Sized, F> Policy<E> for F
where
    F: FnMut(&E, &Observation) -> Action,
{
    fn act(&mut self, env: &E, observation: &Observation) -> Action {
        self(env, observation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    pub action: Action,
    pub reward: f64,
}

/// One episode as seen by a single acting head.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
    /// Observation after the last step; the bootstrap state on truncation.
    pub final_observation: Observation,
    pub acting_head: usize,
    pub episode_return: f64,
    pub niche_events: Vec<NicheEvent>,
    pub seed: u64,
    pub truncated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Observation `k` for `k` in `0..=len()`; index `len()` is the final observation.
    pub fn observation(&self, k: usize) -> &Observation {
        if k == self.steps.len() {
            &self.final_observation
        } else {
            &self.steps[k].observation
        }
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.reward)
    }

    pub fn with_head(mut self, head: usize) -> Self {
        self.acting_head = head;
        self
    }
}

impl fmt::Display for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "trajectory(head {}, {} steps, return {}{})",
            self.acting_head,
            self.steps.len(),
            self.episode_return,
            if self.truncated { ", truncated" } else { "" }
        )
    }
}

/// Runs one episode of at most `max_steps` steps.
///
/// The episode stops at the environment's own `done` signal or at
/// `max_steps`, whichever comes first; the latter is flagged as truncation.
pub fn run_episode<E, P>(env: &mut E, policy: &mut P, max_steps: usize, seed: u64) -> Result<Trajectory, EnvError>
where
    E: Environment + ?Sized,
    P: Policy<E> + ?Sized,
{
    let mut observation = env.reset(seed);
    policy.begin_episode();
    let mut steps = Vec::new();
    let mut events = Vec::new();
    let mut episode_return = 0.0;
    let truncated = loop {
        if steps.len() >= max_steps {
            break true;
        }
        let action = policy.act(env, &observation);
        let result = env.step(action)?;
        debug_assert!(result.reward >= 0.0, "negative reward {}", result.reward);
        episode_return += result.reward;
        events.extend(result.events);
        steps.push(Transition { observation, action, reward: result.reward });
        observation = result.observation;
        if result.done {
            break result.truncated;
        }
    };
    Ok(Trajectory {
        steps,
        final_observation: observation,
        acting_head: 0,
        episode_return,
        niche_events: events,
        seed,
        truncated,
    })
}
