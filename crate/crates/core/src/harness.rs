//! Seeded experiment runs, per-episode logs and their analysis.
//!
//! Actors play in rounds: every actor of a round acts with the same parameter
//! snapshot, episodes are appended to the replay buffer in episode order, then
//! the learner catches up on the environment steps collected. The schedule
//! does not depend on thread timing, so runs are reproducible for a fixed
//! actor count.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use plotters::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{run_episode, Environment};
use crate::learner::{ActingAgent, AgentConfig, ExclusionMode, Learner, LearnerError, ReplayBuffer, StepMetrics, Variant};
use crate::par::{self, Execution};
use crate::tasks::{self, GridEnv, TaskKind};
use crate::valuenet::{save_checkpoint, Encoder, Memory, NetError, NetworkSpec, TargetSync, ValueNet};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("plot {path}: {message}")]
    Plot { path: PathBuf, message: String },
    #[error("task: {0}")]
    Task(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Net(#[from] NetError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// A bundled task or a directory holding `task.map` and `task.graph`. A
/// directory without `task.graph` is a maze with the default mushroom values.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskSpec {
    Builtin(TaskKind),
    Custom(PathBuf),
}

impl TaskSpec {
    pub fn make(&self) -> Result<GridEnv, HarnessError> {
        match self {
            TaskSpec::Builtin(kind) => Ok(kind.make()),
            TaskSpec::Custom(dir) => {
                let read = |name: &str| {
                    let p = dir.join(name);
                    fs::read_to_string(&p).map_err(io_err(&p))
                };
                let map = read("task.map")?;
                let name = dir.file_name().map_or("custom".into(), |n| n.to_string_lossy().into_owned());
                if !dir.join("task.graph").exists() {
                    return tasks::make_maze_with(&tasks::MazeSpec::default(), &map).map_err(|e| HarnessError::Task(e.to_string()));
                }
                let graph = read("task.graph")?;
                let steps = match fs::read_to_string(dir.join("steps")) {
                    Ok(s) => s.trim().parse().map_err(|_| HarnessError::Task("steps file must hold an integer".into()))?,
                    Err(_) => tasks::METABOLIC_STEPS,
                };
                GridEnv::chemistry(&name, &map, &graph, steps).map_err(|e| HarnessError::Task(e.to_string()))
            }
        }
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskSpec::Builtin(k) => write!(f, "{k}"),
            TaskSpec::Custom(p) => write!(f, "{}", p.display()),
        }
    }
}

impl FromStr for TaskSpec {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.parse::<TaskKind>() {
            Ok(k) => Ok(TaskSpec::Builtin(k)),
            Err(e) if Path::new(s).is_dir() => {
                let _ = e;
                Ok(TaskSpec::Custom(PathBuf::from(s)))
            }
            Err(e) => Err(HarnessError::Task(e.to_string())),
        }
    }
}

/// Everything a run needs. Text form is one `key = value` per line.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub agent: AgentConfig,
    pub episodes: usize,
    /// Trailing window for reports.
    pub window: usize,
    pub seeds: Vec<u64>,
    pub actors: usize,
    pub serial: bool,
    pub out_dir: PathBuf,
    pub memory: Memory,
    pub encoder_width: usize,
    pub head_hidden: usize,
    /// Use the RGB image with the conv encoder instead of symbolic features.
    pub rgb: bool,
    /// Learner steps between metric rows; 0 disables metrics.
    pub metrics_every: usize,
    /// Episodes between checkpoints; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskSpec::Builtin(TaskKind::Maze),
            agent: AgentConfig::default(),
            episodes: 1_000,
            window: 100,
            seeds: vec![0],
            actors: 4,
            serial: false,
            out_dir: PathBuf::from("runs/out"),
            memory: Memory::FrameStack(4),
            encoder_width: 128,
            head_hidden: 128,
            rgb: false,
            metrics_every: 100,
            checkpoint_every: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("bad value `{value}` for {key}"))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Sets one key. Shared by config files and command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let invalid = |m: String| HarnessError::Config { line: 0, message: m };
        let a = &mut self.agent;
        match key {
            "task" => self.task = value.parse()?,
            "agent" | "variant" => a.variant = value.parse()?,
            "heads" => a.heads = parse(key, value).map_err(invalid)?,
            "epsilon" => a.epsilon = parse(key, value).map_err(invalid)?,
            "gamma" => a.gamma = parse(key, value).map_err(invalid)?,
            "lambda" => a.lambda = parse(key, value).map_err(invalid)?,
            "n_step" => a.n_step = parse(key, value).map_err(invalid)?,
            "batch_size" => a.batch_size = parse(key, value).map_err(invalid)?,
            "sequence_length" => a.sequence_length = parse(key, value).map_err(invalid)?,
            "learning_rate" => a.learning_rate = parse(key, value).map_err(invalid)?,
            "learn_every" => a.learn_every = parse(key, value).map_err(invalid)?,
            "min_replay" => a.min_replay = parse(key, value).map_err(invalid)?,
            "replay_capacity" => a.replay_capacity = parse(key, value).map_err(invalid)?,
            "head_weights" => a.head_weights = Some(list(key, value).map_err(invalid)?),
            "exclusion" => {
                a.exclusion = match value {
                    "combined" => ExclusionMode::Combined,
                    "alternating" => ExclusionMode::Alternating,
                    _ => return Err(invalid(format!("exclusion must be combined or alternating, got `{value}`"))),
                }
            }
            "target_sync" => {
                a.target_sync = match value.split_once(':') {
                    Some(("hard", n)) => TargetSync::Hard { every: parse(key, n).map_err(invalid)? },
                    Some(("soft", t)) => TargetSync::Soft { tau: parse(key, t).map_err(invalid)? },
                    _ => return Err(invalid(format!("target_sync must be hard:N or soft:TAU, got `{value}`"))),
                }
            }
            "episodes" => self.episodes = parse(key, value).map_err(invalid)?,
            "window" => self.window = parse(key, value).map_err(invalid)?,
            "seeds" | "seed" => self.seeds = list(key, value).map_err(invalid)?,
            "actors" => self.actors = parse(key, value).map_err(invalid)?,
            "serial" => self.serial = parse(key, value).map_err(invalid)?,
            "out" => self.out_dir = PathBuf::from(value),
            "memory" => {
                let mut it = value.split_whitespace();
                self.memory = match (it.next(), it.next()) {
                    (Some("none"), None) => Memory::None,
                    (Some("framestack"), Some(k)) => Memory::FrameStack(parse(key, k).map_err(invalid)?),
                    (Some("lstm"), Some(h)) => Memory::Lstm(parse(key, h).map_err(invalid)?),
                    _ => return Err(invalid(format!("memory must be none, framestack K or lstm H, got `{value}`"))),
                }
            }
            "encoder_width" => self.encoder_width = parse(key, value).map_err(invalid)?,
            "head_hidden" => self.head_hidden = parse(key, value).map_err(invalid)?,
            "input" => {
                self.rgb = match value {
                    "symbolic" => false,
                    "rgb" => true,
                    _ => return Err(invalid(format!("input must be symbolic or rgb, got `{value}`"))),
                }
            }
            "metrics_every" => self.metrics_every = parse(key, value).map_err(invalid)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value).map_err(invalid)?,
            _ => return Err(HarnessError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies a `key = value` file on top of `self`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), HarnessError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config { line: i + 1, message: format!("expected `key = value`, got `{line}`") })?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                HarnessError::Config { message, .. } => HarnessError::Config { line: i + 1, message },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, HarnessError> {
        let mut c = ExperimentConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Invalid(m.to_string()));
        if self.episodes == 0 {
            return bad("episodes must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if self.actors == 0 {
            return bad("at least one actor is required");
        }
        self.agent.validate()?;
        Ok(())
    }

    /// The network for observations like `obs`.
    pub fn network_spec(&self, env: &GridEnv) -> NetworkSpec {
        let mut env = env.clone().with_rgb(self.rgb);
        let obs = env.reset(0);
        let (input, encoder) = match (self.rgb, NetworkSpec::image_input_for(&obs)) {
            (true, Some(input)) => (input, Encoder::PAPER_CONV),
            _ => (NetworkSpec::input_for(&obs), Encoder::Dense { width: self.encoder_width }),
        };
        NetworkSpec {
            input,
            encoder,
            memory: self.memory,
            heads: self.agent.heads,
            head_hidden: self.head_hidden,
            actions: env.num_actions(),
        }
    }

    fn execution(&self) -> Execution {
        if self.serial {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    fn actor_count(&self) -> usize {
        if self.serial {
            1
        } else {
            self.actors
        }
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = &self.agent;
        writeln!(f, "task = {}", self.task)?;
        writeln!(f, "agent = {}", a.variant)?;
        writeln!(f, "heads = {}", a.heads)?;
        writeln!(f, "epsilon = {}", a.epsilon)?;
        writeln!(f, "gamma = {}", a.gamma)?;
        writeln!(f, "lambda = {}", a.lambda)?;
        writeln!(f, "n_step = {}", a.n_step)?;
        writeln!(f, "batch_size = {}", a.batch_size)?;
        writeln!(f, "sequence_length = {}", a.sequence_length)?;
        writeln!(f, "learning_rate = {}", a.learning_rate)?;
        writeln!(f, "learn_every = {}", a.learn_every)?;
        writeln!(f, "min_replay = {}", a.min_replay)?;
        writeln!(f, "replay_capacity = {}", a.replay_capacity)?;
        if let Some(w) = &a.head_weights {
            writeln!(f, "head_weights = {}", join(w))?;
        }
        let exclusion = match a.exclusion {
            ExclusionMode::Combined => "combined",
            ExclusionMode::Alternating => "alternating",
        };
        writeln!(f, "exclusion = {exclusion}")?;
        match a.target_sync {
            TargetSync::Hard { every } => writeln!(f, "target_sync = hard:{every}")?,
            TargetSync::Soft { tau } => writeln!(f, "target_sync = soft:{tau}")?,
        }
        writeln!(f, "episodes = {}", self.episodes)?;
        writeln!(f, "window = {}", self.window)?;
        writeln!(f, "seeds = {}", join(&self.seeds))?;
        writeln!(f, "actors = {}", self.actors)?;
        writeln!(f, "serial = {}", self.serial)?;
        writeln!(f, "out = {}", self.out_dir.display())?;
        match self.memory {
            Memory::None => writeln!(f, "memory = none")?,
            Memory::FrameStack(k) => writeln!(f, "memory = framestack {k}")?,
            Memory::Lstm(h) => writeln!(f, "memory = lstm {h}")?,
        }
        writeln!(f, "encoder_width = {}", self.encoder_width)?;
        writeln!(f, "head_hidden = {}", self.head_hidden)?;
        writeln!(f, "input = {}", if self.rgb { "rgb" } else { "symbolic" })?;
        writeln!(f, "metrics_every = {}", self.metrics_every)?;
        writeln!(f, "checkpoint_every = {}", self.checkpoint_every)
    }
}

/// One row of `episodes.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub episode: usize,
    pub head: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub niche: String,
    pub ms: u64,
}

pub const EPISODES_FILE: &str = "episodes.csv";

/// Appends episode rows, flushing after each so a killed run leaves a
/// parseable prefix.
pub struct EpisodeWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl EpisodeWriter {
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        let csv_err = |e: csv::Error| HarnessError::Csv { path: path.to_path_buf(), message: e.to_string() };
        inner.write_record(["seed", "episode", "head", "return", "niche", "ms"]).map_err(csv_err)?;
        inner.flush().map_err(io_err(path))?;
        Ok(EpisodeWriter { path: path.to_path_buf(), inner })
    }

    pub fn write(&mut self, log: &EpisodeLog) -> Result<(), HarnessError> {
        self.inner.serialize(log).map_err(|e| HarnessError::Csv { path: self.path.clone(), message: e.to_string() })?;
        self.inner.flush().map_err(io_err(&self.path))
    }
}

pub fn write_csv(logs: &[EpisodeLog], path: &Path) -> Result<(), HarnessError> {
    let mut w = EpisodeWriter::create(path)?;
    logs.iter().try_for_each(|l| w.write(l))
}

/// Parses an episode log. A trailing partial row (from a killed run) is ignored.
pub fn read_csv(path: &Path) -> Result<Vec<EpisodeLog>, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    let mut reader = csv::Reader::from_reader(complete.as_bytes());
    reader
        .deserialize()
        .map(|r| r.map_err(|e: csv::Error| HarnessError::Csv { path: path.to_path_buf(), message: e.to_string() }))
        .collect()
}

fn metrics_rows(out: &mut impl Write, variant: Variant, m: &StepMetrics) -> std::io::Result<()> {
    for (h, q) in m.mean_q.iter().enumerate() {
        let q = q.map_or(String::new(), |q| q.to_string());
        writeln!(out, "{},{},{},{},{},{}", m.step, variant, h, m.acting_loss, m.exclusion_loss, q)?;
    }
    Ok(())
}

/// RNG for one purpose of one episode of one run.
fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(8).wrapping_add(purpose));
    rng
}

const HEAD_STREAM: u64 = 1;
const ACT_STREAM: u64 = 2;
const LEARN_STREAM: u64 = 3;

/// Per-seed result of a run.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub learner_steps: usize,
    pub params: Vec<f32>,
}

/// Runs every seed of `config`, writing `episodes.csv`, per-seed metrics and
/// checkpoints into the output directory. Returns all episode rows.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<EpisodeLog>, HarnessError> {
    run_experiment_with(config, |_| {}).map(|(logs, _)| logs)
}

/// Like [`run_experiment`], calling `progress` after each episode and also
/// returning the final parameters of each seed.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    mut progress: impl FnMut(&EpisodeLog),
) -> Result<(Vec<EpisodeLog>, Vec<SeedRun>), HarnessError> {
    config.validate()?;
    let probe = config.task.make()?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let spec = config.network_spec(&probe);
    let net = ValueNet::new(spec)?;
    fs::write(out.join("network.txt"), spec.to_string()).map_err(io_err(&out.join("network.txt")))?;
    fs::write(out.join("config.txt"), config.to_string()).map_err(io_err(&out.join("config.txt")))?;
    let mut writer = EpisodeWriter::create(&out.join(EPISODES_FILE))?;
    let mut logs = Vec::with_capacity(config.episodes * config.seeds.len());
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        let run = run_seed(config, &net, seed, &mut |log| {
            writer.write(&log)?;
            progress(&log);
            logs.push(log);
            Ok(())
        })?;
        runs.push(run);
    }
    Ok((logs, runs))
}

fn run_seed(
    config: &ExperimentConfig,
    net: &ValueNet,
    seed: u64,
    emit: &mut dyn FnMut(EpisodeLog) -> Result<(), HarnessError>,
) -> Result<SeedRun, HarnessError> {
    let agent = &config.agent;
    let out = &config.out_dir;
    let exec = config.execution();
    let mut learner = Learner::new(net.clone(), agent.clone(), seed)?;
    let sampler = agent.sampler();
    let mut head_rng = stream_rng(seed, HEAD_STREAM, 0);
    let mut learn_rng = stream_rng(seed, LEARN_STREAM, 0);
    let mut buffer = ReplayBuffer::new(agent.replay_capacity);
    let windows_per_step = agent.batch_size.div_ceil(agent.sequence_length);
    let ready = agent.min_replay.max(windows_per_step);
    let metrics_path = out.join(format!("metrics_seed{seed}.csv"));
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    writeln!(metrics, "step,variant,head,acting_loss,exclusion_loss,mean_q").map_err(io_err(&metrics_path))?;
    let checkpoint = |params: &[f32]| {
        let p = out.join(format!("checkpoint_seed{seed}.dteq"));
        save_checkpoint(&p, &net.spec, params)
    };

    let mut pending = 0usize;
    let mut episode = 0usize;
    while episode < config.episodes {
        let round = config.actor_count().min(config.episodes - episode);
        let heads: Vec<usize> = (0..round).map(|_| sampler.sample(&mut head_rng)).collect();
        let snapshot: Arc<Vec<f32>> = learner.snapshot();
        let first = episode;
        let results = par::map_indexed(exec, round, |k| {
            let index = (first + k) as u64;
            let started = Instant::now();
            let mut env = config.task.make()?.with_rgb(config.rgb);
            let rng = stream_rng(seed, ACT_STREAM, index);
            let mut actor = ActingAgent::new(net.clone(), Arc::clone(&snapshot), heads[k], agent.epsilon, rng);
            let limit = env.max_steps();
            let env_seed = seed.wrapping_mul(1_000_003).wrapping_add(index);
            let trajectory = run_episode(&mut env, &mut actor, limit, env_seed)
                .map_err(|e| HarnessError::Task(e.to_string()))?
                .with_head(heads[k]);
            Ok::<_, HarnessError>((trajectory, started.elapsed().as_millis() as u64))
        });
        for (k, result) in results.into_iter().enumerate() {
            let (trajectory, ms) = result?;
            let log = EpisodeLog {
                seed,
                episode: first + k,
                head: heads[k],
                episode_return: trajectory.episode_return,
                niche: tasks::niche_label(&trajectory),
                ms: if config.serial { 0 } else { ms },
            };
            pending += trajectory.len();
            buffer.append(trajectory);
            emit(log)?;
        }
        episode += round;

        if buffer.len() < ready {
            pending = 0;
            continue;
        }
        while pending >= agent.learn_every {
            pending -= agent.learn_every;
            let m = learner.train(&buffer, &mut learn_rng)?;
            if config.metrics_every > 0 && m.step % config.metrics_every == 0 {
                metrics_rows(&mut metrics, agent.variant, &m).map_err(io_err(&metrics_path))?;
            }
        }
        if config.checkpoint_every > 0 && episode % config.checkpoint_every < round {
            checkpoint(&learner.params)?;
        }
    }
    metrics.flush().map_err(io_err(&metrics_path))?;
    checkpoint(&learner.params)?;
    Ok(SeedRun { seed, learner_steps: learner.steps(), params: learner.params })
}

/// The last `window` episodes of each head, oldest first.
fn per_head(logs: &[EpisodeLog], window: usize) -> BTreeMap<usize, Vec<&EpisodeLog>> {
    let mut by_head: BTreeMap<usize, Vec<&EpisodeLog>> = BTreeMap::new();
    for log in logs {
        by_head.entry(log.head).or_default().push(log);
    }
    for v in by_head.values_mut() {
        let skip = v.len().saturating_sub(window);
        v.drain(..skip);
    }
    by_head
}

/// Mean return of each head over its last `window` episodes.
pub fn trailing_means(logs: &[EpisodeLog], window: usize) -> BTreeMap<usize, f64> {
    per_head(logs, window)
        .into_iter()
        .map(|(h, v)| (h, v.iter().map(|l| l.episode_return).sum::<f64>() / v.len() as f64))
        .collect()
}

/// Head with the highest trailing mean return; ties go to the lowest index.
pub fn best_head(logs: &[EpisodeLog], window: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (h, m) in trailing_means(logs, window) {
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((h, m));
        }
    }
    best.map(|(h, _)| h)
}

/// Modal niche label of each head over its last `window` episodes. Ties go to
/// the lexicographically smallest label; heads `0..heads` without history map
/// to `"none"`.
pub fn niche_occupancy(logs: &[EpisodeLog], window: usize, heads: usize) -> BTreeMap<usize, String> {
    let recent = per_head(logs, window);
    let top = recent.keys().next_back().map_or(0, |h| h + 1);
    (0..heads.max(top))
        .map(|h| {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for l in recent.get(&h).into_iter().flatten() {
                *counts.entry(l.niche.as_str()).or_default() += 1;
            }
            let mut label = "none";
            let mut most = 0;
            for (niche, c) in counts {
                if c > most {
                    (label, most) = (niche, c);
                }
            }
            (h, label.to_string())
        })
        .collect()
}

/// Rows of one seed (all rows when `seed` is `None` and a single seed is present).
pub fn logs_for_seed(logs: &[EpisodeLog], seed: u64) -> Vec<EpisodeLog> {
    logs.iter().filter(|l| l.seed == seed).cloned().collect()
}

pub fn seeds(logs: &[EpisodeLog]) -> Vec<u64> {
    let mut s: Vec<u64> = logs.iter().map(|l| l.seed).collect();
    s.sort_unstable();
    s.dedup();
    s
}

/// Human-readable summary: best head, niche occupancy and trailing means per seed.
pub fn report(logs: &[EpisodeLog], window: usize) -> String {
    let mut out = String::new();
    if logs.is_empty() {
        out.push_str("no episodes logged\n");
        return out;
    }
    for seed in seeds(logs) {
        let run = logs_for_seed(logs, seed);
        let means = trailing_means(&run, window);
        let niches = niche_occupancy(&run, window, 0);
        out.push_str(&format!("seed {seed}: {} episodes\n", run.len()));
        if let Some(b) = best_head(&run, window) {
            out.push_str(&format!("  best head {b} (trailing {window} mean {:.3})\n", means[&b]));
        }
        for (h, niche) in &niches {
            let mean = means.get(h).map_or("-".to_string(), |m| format!("{m:.3}"));
            out.push_str(&format!("  head {h}: niche {niche}, mean return {mean}\n"));
        }
    }
    out
}

/// Trailing mean of `values` over the last `window` entries at each point.
pub fn trailing_mean(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut sum = 0.0;
    let mut out = Vec::with_capacity(values.len());
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Draws one smoothed return curve per head of one seed as an SVG.
/// Returns `false` (and writes nothing) when there are no episodes.
pub fn emit_plots(logs: &[EpisodeLog], path: &Path, window: usize) -> Result<bool, HarnessError> {
    if logs.is_empty() {
        return Ok(false);
    }
    let plot_err = |e: &dyn fmt::Display| HarnessError::Plot { path: path.to_path_buf(), message: e.to_string() };
    let seed = logs[0].seed;
    let run = logs_for_seed(logs, seed);
    let mut curves: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for l in &run {
        let c = curves.entry(l.head).or_default();
        c.0.push(l.episode as f64);
        c.1.push(l.episode_return);
    }
    let smoothed: Vec<(usize, Vec<(f64, f64)>)> = curves
        .into_iter()
        .map(|(h, (x, y))| (h, x.into_iter().zip(trailing_mean(&y, window)).collect()))
        .collect();
    let x_max = run.iter().map(|l| l.episode).max().unwrap_or(0) as f64 + 1.0;
    let (mut y_min, mut y_max) = (0.0f64, 0.0f64);
    for (_, pts) in &smoothed {
        for &(_, y) in pts {
            (y_min, y_max) = (y_min.min(y), y_max.max(y));
        }
    }
    if y_max - y_min < 1e-9 {
        y_max = y_min + 1.0;
    }
    let root = SVGBackend::new(path, (900, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("return per head, seed {seed} (trailing mean over {window})"), ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(0.0..x_max, y_min..y_max * 1.05)
        .map_err(|e| plot_err(&e))?;
    chart.configure_mesh().x_desc("episode").y_desc("return").draw().map_err(|e| plot_err(&e))?;
    for (h, pts) in smoothed {
        let colour = Palette99::pick(h).to_rgba();
        chart
            .draw_series(LineSeries::new(pts, colour.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(format!("head {h}"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], colour.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(episode: usize, head: usize, ret: f64, niche: &str) -> EpisodeLog {
        EpisodeLog { seed: 1, episode, head, episode_return: ret, niche: niche.into(), ms: 0 }
    }

    #[test]
    fn best_head_rules() {
        let logs = vec![log(0, 0, 1.0, "a"), log(1, 3, 5.0, "b"), log(2, 1, 2.0, "a")];
        assert_eq!(best_head(&logs, 100), Some(3));
        let tied = vec![log(0, 2, 4.0, "a"), log(1, 1, 4.0, "a")];
        assert_eq!(best_head(&tied, 100), Some(1));
        // Only the last episode of each head counts with window 1.
        let recent = vec![log(0, 0, 9.0, "a"), log(1, 0, 0.0, "a"), log(2, 1, 1.0, "a")];
        assert_eq!(best_head(&recent, 1), Some(1));
        assert_eq!(best_head(&[], 10), None);
    }

    #[test]
    fn occupancy_rules() {
        let logs = vec![log(0, 0, 25.0, "blue"), log(1, 1, 25.0, "blue"), log(2, 0, 31.25, "red"), log(3, 0, 31.25, "red")];
        let occ = niche_occupancy(&logs, 100, 3);
        assert_eq!(occ[&0], "red");
        assert_eq!(occ[&1], "blue");
        assert_eq!(occ[&2], "none");
        assert_eq!(niche_occupancy(&logs, 1, 0)[&0], "red");
    }

    #[test]
    fn csv_round_trip_and_partial_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let logs = vec![log(0, 0, 18.75, "green"), log(1, 2, 0.0, "none")];
        write_csv(&logs, &path).unwrap();
        assert_eq!(read_csv(&path).unwrap(), logs);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("seed,episode,head,return,niche,ms\n"));
        fs::write(&path, format!("{text}1,2,0,3.5,bl")).unwrap();
        assert_eq!(read_csv(&path).unwrap(), logs);
        write_csv(&[], &path).unwrap();
        assert!(read_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn config_text_round_trip() {
        let text = "task = metabolic\nagent = dte\nheads = 2\nhead_weights = 5,1\nepsilon = 0.01 # low\n\nmemory = lstm 32\ntarget_sync = soft:0.01\n";
        let c = ExperimentConfig::from_text(text).unwrap();
        assert_eq!(c.task, TaskSpec::Builtin(TaskKind::MetabolicCycles));
        assert_eq!(c.agent.head_weights, Some(vec![5.0, 1.0]));
        assert_eq!(c.memory, Memory::Lstm(32));
        assert_eq!(ExperimentConfig::from_text(&c.to_string()).unwrap(), c);
        assert!(matches!(ExperimentConfig::from_text("colour = red"), Err(HarnessError::UnknownKey(_))));
        assert!(matches!(ExperimentConfig::from_text("heads = x"), Err(HarnessError::Config { line: 1, .. })));
        assert!(matches!(ExperimentConfig::from_text("task = moon"), Err(HarnessError::Task(_))));
        assert!(matches!(ExperimentConfig::from_text("agent = ppo"), Err(HarnessError::Learner(_))));
    }

    #[test]
    fn trailing_mean_values() {
        assert_eq!(trailing_mean(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }

    fn tiny(dir: &Path, serial: bool) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.apply_text("task = maze\nheads = 3\nepisodes = 12\nencoder_width = 8\nhead_hidden = 8\nmin_replay = 2\nlearn_every = 50\nbatch_size = 8\nmetrics_every = 1")
            .unwrap();
        c.serial = serial;
        c.out_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn serial_runs_repeat_byte_for_byte() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let logs = run_experiment(&tiny(a.path(), true)).unwrap();
        run_experiment(&tiny(b.path(), true)).unwrap();
        assert_eq!(logs.len(), 12);
        for file in [EPISODES_FILE, "metrics_seed0.csv"] {
            assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file}");
        }
        assert!(fs::read_to_string(a.path().join("metrics_seed0.csv")).unwrap().lines().count() > 1);
        assert_eq!(read_csv(&a.path().join(EPISODES_FILE)).unwrap(), logs);
        assert!(a.path().join("checkpoint_seed0.dteq").exists());
        assert!(emit_plots(&logs, &a.path().join("p.svg"), 100).unwrap());
        assert!(!emit_plots(&[], &a.path().join("q.svg"), 100).unwrap());
    }

    #[test]
    fn parallel_rounds_match_serial_schedule_for_one_actor() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut par_cfg = tiny(b.path(), false);
        par_cfg.actors = 1;
        let strip = |logs: Vec<EpisodeLog>| logs.into_iter().map(|l| (l.head, l.episode_return.to_bits(), l.niche)).collect::<Vec<_>>();
        assert_eq!(strip(run_experiment(&tiny(a.path(), true)).unwrap()), strip(run_experiment(&par_cfg).unwrap()));
    }
}
