//! The bundled tasks: the mushroom maze, the simple two-molecule chemistry,
//! and metabolic cycles with distractors. Each is a [`GridEnv`] built from a
//! map file (and, for chemistry tasks, a reaction graph file).

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chemistry::{Chemistry, ReactionGraph};
use crate::env::{Action, EnvError, Environment, NicheEvent, Observation, Policy, StepResult, Trajectory};
use crate::gridworld::{self, move_agent, observe_window, AgentState, CellContent, Pos, WorldMap};

pub const MAZE_MAP: &str = include_str!("../assets/maze.map");
pub const SIMPLE_CHEM_MAP: &str = include_str!("../assets/simple_chem.map");
pub const SIMPLE_CHEM_GRAPH: &str = include_str!("../assets/simple_chem.graph");
pub const METABOLIC_MAP: &str = include_str!("../assets/metabolic.map");
pub const METABOLIC_GRAPH: &str = include_str!("../assets/metabolic.graph");

/// Observation window radius (11x11 cells).
pub const VIEW_RADIUS: usize = 5;
pub const MAZE_MAX_STEPS: usize = 200;
pub const SIMPLE_CHEM_STEPS: usize = 100;
pub const METABOLIC_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Maze,
    SimpleChemistry,
    MetabolicCycles,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Maze, TaskKind::SimpleChemistry, TaskKind::MetabolicCycles];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Maze => "maze",
            TaskKind::SimpleChemistry => "simple_chemistry",
            TaskKind::MetabolicCycles => "metabolic_cycles",
        }
    }

    pub fn make(self) -> GridEnv {
        match self {
            TaskKind::Maze => make_maze(),
            TaskKind::SimpleChemistry => make_simple_chemistry(),
            TaskKind::MetabolicCycles => make_metabolic_cycles(),
        }
    }
}

impl FromStr for TaskKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "maze" => Ok(TaskKind::Maze),
            "simple_chemistry" | "simple_chem" | "simple" => Ok(TaskKind::SimpleChemistry),
            "metabolic_cycles" | "metabolic" => Ok(TaskKind::MetabolicCycles),
            other => Err(EnvError::UnknownTask(other.to_string())),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-step mushroom values of the maze.
#[derive(Debug, Clone, PartialEq)]
pub struct MazeSpec {
    /// Reward per digestion step, by mushroom colour.
    pub rewards: BTreeMap<String, f64>,
    pub digestion_steps: u32,
}

impl Default for MazeSpec {
    fn default() -> Self {
        let rewards = [("green", 0.75), ("blue", 1.0), ("red", 1.25)].into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        MazeSpec { rewards, digestion_steps: 25 }
    }
}

#[derive(Debug, Clone)]
pub enum Rules {
    /// Eating a mushroom pays its value on that step and every following
    /// digestion step; the episode ends when digestion finishes.
    Maze { values: Vec<f64>, digestion_steps: u32 },
    Chemistry(Chemistry),
}

/// A single-agent grid task implementing [`Environment`].
#[derive(Debug, Clone)]
pub struct GridEnv {
    pub name: String,
    initial: WorldMap,
    world: WorldMap,
    agent: AgentState,
    rules: Rules,
    radius: usize,
    max_steps: usize,
    steps: usize,
    done: bool,
    /// Value paid per remaining digestion step.
    digesting: Option<(u8, f64)>,
    rng: ChaCha8Rng,
    with_rgb: bool,
    /// Reactions fired and molecules dropped during the last chemistry step.
    last_fired: Vec<usize>,
    last_dropped: Vec<u8>,
}

impl GridEnv {
    pub fn new(name: impl Into<String>, world: WorldMap, rules: Rules, max_steps: usize) -> GridEnv {
        GridEnv {
            name: name.into(),
            agent: AgentState::at(world.spawn),
            initial: world.clone(),
            world,
            rules,
            radius: VIEW_RADIUS,
            max_steps,
            steps: 0,
            done: false,
            digesting: None,
            rng: ChaCha8Rng::seed_from_u64(0),
            with_rgb: false,
            last_fired: Vec::new(),
            last_dropped: Vec::new(),
        }
    }

    /// A chemistry task from a map file and a reaction graph file.
    pub fn chemistry(name: &str, map_text: &str, graph_text: &str, max_steps: usize) -> crate::Result<GridEnv> {
        let graph = ReactionGraph::load(graph_text)?;
        let world = WorldMap::parse(map_text)?.with_entity_kinds(&graph.compound_ids())?;
        let chemistry = Chemistry::new(graph, 1)?;
        Ok(GridEnv::new(name, world, Rules::Chemistry(chemistry), max_steps))
    }

    /// Also attach an RGB rendering to every observation.
    pub fn with_rgb(mut self, on: bool) -> Self {
        self.with_rgb = on;
        self
    }

    pub fn with_radius(mut self, radius: usize) -> Self {
        self.radius = radius;
        self
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn world(&self) -> &WorldMap {
        &self.world
    }

    pub fn agent(&self) -> &AgentState {
        &self.agent
    }

    pub fn rules(&self) -> &Rules {
        &self.rules
    }

    /// Reaction indices fired and compound kinds dropped by the last step.
    pub fn last_reactions(&self) -> (&[usize], &[u8]) {
        (&self.last_fired, &self.last_dropped)
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn kind(&self, name: &str) -> Option<u8> {
        self.world.entity_kind(name)
    }

    fn step_maze(&mut self, action: Action, values: &[f64], digestion_steps: u32) -> (f64, Vec<NicheEvent>, bool) {
        let step_index = self.steps;
        if self.digesting.is_none() {
            self.agent = move_agent(&self.world, &self.agent, action);
            if let CellContent::Entity(k) = self.world.get(self.agent.position) {
                self.world.set(self.agent.position, CellContent::Empty);
                self.digesting = Some((k, values[usize::from(k)]));
                self.agent.digestion_remaining = digestion_steps;
            }
        }
        match self.digesting {
            Some((kind, value)) => {
                self.agent.digestion_remaining -= 1;
                let event =
                    NicheEvent { kind: self.world.entity_kinds[usize::from(kind)].clone(), reward_contribution: value, step_index };
                (value, vec![event], self.agent.digestion_remaining == 0)
            }
            None => (0.0, Vec::new(), false),
        }
    }

    fn step_chemistry(&mut self, action: Action) -> (f64, Vec<NicheEvent>) {
        let before = self.agent.position;
        self.agent = move_agent(&self.world, &self.agent, action);
        let here = self.agent.position;
        if action == Action::Drop {
            if let Some(k) = self.agent.inventory {
                if self.world.get(here) == CellContent::Empty {
                    self.world.set(here, CellContent::Entity(k));
                    self.agent.inventory = None;
                }
            }
        } else if here != before && self.agent.inventory.is_none() {
            if let CellContent::Entity(k) = self.world.get(here) {
                self.world.set(here, CellContent::Empty);
                self.agent.inventory = Some(k);
            }
        }
        let Rules::Chemistry(chem) = &self.rules else { unreachable!() };
        let outcome = chem.step(&mut self.world, &mut self.agent, &mut self.rng, self.steps);
        self.last_fired = outcome.fired;
        self.last_dropped = outcome.dropped;
        (outcome.reward, outcome.events)
    }
}

impl Environment for GridEnv {
    fn reset(&mut self, seed: u64) -> Observation {
        self.world = self.initial.clone();
        self.agent = AgentState::at(self.world.spawn);
        self.steps = 0;
        self.done = false;
        self.digesting = None;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.observe()
    }

    fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let (reward, events, terminal) = match &self.rules {
            Rules::Maze { values, digestion_steps } => {
                let (values, d) = (values.clone(), *digestion_steps);
                self.step_maze(action, &values, d)
            }
            Rules::Chemistry(_) => {
                let (r, e) = self.step_chemistry(action);
                (r, e, false)
            }
        };
        self.steps += 1;
        // Digestion always runs to completion, so truncation waits for it.
        let truncated = !terminal && self.digesting.is_none() && self.steps >= self.max_steps;
        self.done = terminal || truncated;
        Ok(StepResult { observation: self.observe(), reward, done: self.done, truncated, events })
    }

    fn observe(&self) -> Observation {
        let mut obs = observe_window(&self.world, &self.agent, self.radius);
        if self.with_rgb {
            obs.rgb = Some(gridworld::render_rgb(&self.world, &self.agent, self.radius));
        }
        obs
    }

    fn max_steps(&self) -> usize {
        // Leave room for a digestion started on the last regular step.
        match &self.rules {
            Rules::Maze { digestion_steps, .. } => self.max_steps + *digestion_steps as usize,
            Rules::Chemistry(_) => self.max_steps,
        }
    }
}

pub fn make_maze() -> GridEnv {
    make_maze_with(&MazeSpec::default(), MAZE_MAP).expect("bundled maze is valid")
}

pub fn make_maze_with(spec: &MazeSpec, map_text: &str) -> crate::Result<GridEnv> {
    let world = WorldMap::parse(map_text)?;
    let values = world
        .entity_kinds
        .iter()
        .map(|k| spec.rewards.get(k).copied().ok_or_else(|| gridworld::MapError::UnknownKind(k.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GridEnv::new("maze", world, Rules::Maze { values, digestion_steps: spec.digestion_steps }, MAZE_MAX_STEPS))
}

pub fn make_simple_chemistry() -> GridEnv {
    GridEnv::chemistry("simple_chemistry", SIMPLE_CHEM_MAP, SIMPLE_CHEM_GRAPH, SIMPLE_CHEM_STEPS)
        .expect("bundled simple chemistry is valid")
}

pub fn make_metabolic_cycles() -> GridEnv {
    GridEnv::chemistry("metabolic_cycles", METABOLIC_MAP, METABOLIC_GRAPH, METABOLIC_STEPS)
        .expect("bundled metabolic task is valid")
}

/// The event kind contributing the most reward, or `"none"` for a reward-free
/// episode. Ties go to the lexicographically smallest kind.
pub fn niche_label(trajectory: &Trajectory) -> String {
    label_events(&trajectory.niche_events)
}

pub fn label_events(events: &[NicheEvent]) -> String {
    let totals = crate::chemistry::reward_by_kind(events);
    let mut best: Option<(&String, f64)> = None;
    for (kind, &total) in &totals {
        if total > 0.0 && best.is_none_or(|(_, b)| total > b) {
            best = Some((kind, total));
        }
    }
    best.map_or_else(|| "none".to_string(), |(k, _)| k.clone())
}

/// First action of a shortest path from `from` to any cell satisfying `goal`.
/// Cells listed by `blocked` are never entered unless they are a goal.
pub fn path_step(world: &WorldMap, from: Pos, goal: impl Fn(Pos) -> bool, blocked: impl Fn(Pos) -> bool) -> Option<Action> {
    if goal(from) {
        return None;
    }
    let mut first: Vec<Option<Action>> = vec![None; world.width * world.height];
    let mut seen = vec![false; world.width * world.height];
    seen[from.row * world.width + from.col] = true;
    let mut queue = VecDeque::from([from]);
    while let Some(p) = queue.pop_front() {
        for action in Action::MOVES {
            let (dr, dc) = action.delta().expect("movement action");
            let Some(n) = world.offset(p, dr, dc) else { continue };
            let idx = n.row * world.width + n.col;
            if seen[idx] || world.get(n) == CellContent::Wall {
                continue;
            }
            seen[idx] = true;
            let via = if p == from { Some(action) } else { first[p.row * world.width + p.col] };
            first[idx] = via;
            if goal(n) {
                return via;
            }
            if !blocked(n) {
                queue.push_back(n);
            }
        }
    }
    None
}

/// An action that leaves the agent and its inventory where they are.
fn idle(env: &GridEnv) -> Action {
    let world = env.world();
    let pos = env.agent().position;
    for action in Action::MOVES {
        let (dr, dc) = action.delta().expect("movement action");
        match world.offset(pos, dr, dc) {
            None => return action,
            Some(n) if world.get(n) == CellContent::Wall => return action,
            _ => {}
        }
    }
    // Dropping onto an occupied cell (or with nothing carried) does nothing.
    Action::Drop
}

fn is_idle_spot(env: &GridEnv, p: Pos) -> bool {
    let world = env.world();
    let walled = Action::MOVES.iter().any(|a| {
        let (dr, dc) = a.delta().expect("movement action");
        world.offset(p, dr, dc).is_none_or(|n| world.get(n) == CellContent::Wall)
    });
    walled || world.get(p) != CellContent::Empty
}

fn occupied(world: &WorldMap, p: Pos) -> bool {
    matches!(world.get(p), CellContent::Entity(_))
}

/// Walks to the nearest mushroom of one colour and eats it.
#[derive(Debug, Clone)]
pub struct GoToColour(pub String);

impl Policy<GridEnv> for GoToColour {
    fn act(&mut self, env: &GridEnv, _: &Observation) -> Action {
        let world = env.world();
        let Some(kind) = world.entity_kind(&self.0) else { return idle(env) };
        path_step(world, env.agent().position, |p| world.get(p) == CellContent::Entity(kind), |p| occupied(world, p))
            .unwrap_or_else(|| idle(env))
    }
}

/// Picks up a molecule of one kind and then either parks away from others of
/// its kind (`pair = false`) or next to one (`pair = true`). Anything else
/// picked up on the way is dropped.
#[derive(Debug, Clone)]
pub struct Holder {
    pub kind: String,
    pub pair: bool,
}

impl Policy<GridEnv> for Holder {
    fn act(&mut self, env: &GridEnv, _: &Observation) -> Action {
        let world = env.world();
        let agent = env.agent();
        let Some(kind) = world.entity_kind(&self.kind) else { return idle(env) };
        let target = CellContent::Entity(kind);
        match agent.inventory {
            // Detour around other molecules when possible, else walk through them.
            None => path_step(world, agent.position, |p| world.get(p) == target, |p| occupied(world, p))
                .or_else(|| path_step(world, agent.position, |p| world.get(p) == target, |_| false))
                .unwrap_or_else(|| idle(env)),
            Some(k) if k == kind => {
                let near_same = |p: Pos| world.neighborhood(p, 1).iter().any(|&n| world.get(n) == target);
                let done = |p: Pos| {
                    if self.pair {
                        world.get(p) == target
                    } else {
                        !near_same(p) && is_idle_spot(env, p)
                    }
                };
                if done(agent.position) {
                    idle(env)
                } else {
                    path_step(world, agent.position, done, |_| false).unwrap_or_else(|| idle(env))
                }
            }
            // Carrying the wrong kind: put it down first.
            Some(_) if world.get(agent.position) == CellContent::Empty => Action::Drop,
            Some(_) => path_step(world, agent.position, |p| world.get(p) == CellContent::Empty, |_| false)
                .unwrap_or_else(|| idle(env)),
        }
    }
}

/// Runs both metabolic cycles: fetch energy, feed a cycle molecule, let the
/// food digest to its side product, and combine the two side products to
/// regenerate energy. Side products wait at a depot cell for their partner.
#[derive(Debug, Clone, Default)]
pub struct CycleRunner {
    prefer_green: bool,
}

impl CycleRunner {
    fn kinds(env: &GridEnv, names: &[&str]) -> Vec<u8> {
        names.iter().filter_map(|n| env.kind(n)).collect()
    }

    fn depot(env: &GridEnv, cycle: &[u8]) -> Option<Pos> {
        let world = env.world();
        let centre = Pos::new(world.height / 2, world.width / 2);
        world
            .positions()
            .filter(|&p| world.get(p) == CellContent::Empty && p != env.agent().position)
            .filter(|&p| !world.neighborhood(p, 1).iter().any(|&n| matches!(world.get(n), CellContent::Entity(k) if cycle.contains(&k))))
            .min_by_key(|&p| (p.manhattan(centre), p.row, p.col))
    }
}

impl Policy<GridEnv> for CycleRunner {
    fn begin_episode(&mut self) {
        self.prefer_green = false;
    }

    fn act(&mut self, env: &GridEnv, _: &Observation) -> Action {
        let world = env.world();
        let agent = env.agent();
        let pos = agent.position;
        let blues = Self::kinds(env, &["B1", "B2", "B3"]);
        let greens = Self::kinds(env, &["G1", "G2", "G3"]);
        let cycle: Vec<u8> = blues.iter().chain(&greens).copied().collect();
        let id = |name: &str| env.kind(name);
        let on_ground = |k: Option<u8>| k.is_some_and(|k| !world.find_entities(k).is_empty());
        let go_to = |want: &dyn Fn(Pos) -> bool, avoid: bool| {
            path_step(world, pos, want, |p| avoid && occupied(world, p)).unwrap_or_else(|| idle(env))
        };
        let stand_on = |kinds: &[u8]| {
            let want = |p: Pos| matches!(world.get(p), CellContent::Entity(k) if kinds.contains(&k));
            if want(pos) {
                idle(env)
            } else {
                go_to(&want, false)
            }
        };
        match agent.inventory {
            None => {
                let energy = id("Energy");
                let want = |p: Pos| energy.is_some_and(|e| world.get(p) == CellContent::Entity(e));
                path_step(world, pos, want, |p| occupied(world, p)).unwrap_or_else(|| idle(env))
            }
            Some(k) if Some(k) == id("Energy") => {
                // Feed whichever cycle the waiting side product needs.
                let green = if on_ground(id("SideB")) {
                    true
                } else if on_ground(id("SideG")) {
                    false
                } else {
                    self.prefer_green
                };
                stand_on(if green { &greens } else { &blues })
            }
            Some(k) if Some(k) == id("FoodB") || Some(k) == id("FoodG") => idle(env),
            Some(k) if Some(k) == id("SideB") || Some(k) == id("SideG") => {
                let partner = if Some(k) == id("SideB") { id("SideG") } else { id("SideB") };
                if let Some(partner) = partner.filter(|&p| on_ground(Some(p))) {
                    return stand_on(&[partner]);
                }
                self.prefer_green = Some(k) == id("SideB");
                match Self::depot(env, &cycle) {
                    Some(_) if world.get(pos) == CellContent::Empty
                        && !world.neighborhood(pos, 1).iter().any(|&n| matches!(world.get(n), CellContent::Entity(c) if cycle.contains(&c))) =>
                    {
                        Action::Drop
                    }
                    Some(depot) => go_to(&|p| p == depot, false),
                    None => idle(env),
                }
            }
            Some(_) => {
                if world.get(pos) == CellContent::Empty {
                    Action::Drop
                } else {
                    go_to(&|p| world.get(p) == CellContent::Empty, false)
                }
            }
        }
    }
}
