//! Compositional artificial chemistry.
//!
//! A [`ReactionGraph`] is a directed multigraph: compounds feed reaction
//! nodes, reaction nodes emit products. Reactions fire stochastically when
//! their reactants sit close together on the grid, either purely in the
//! world or with the agent's carried molecule taking part. Only firings that
//! involve the carried molecule pay reward.
//!
//! Text format, one item per line (`#` starts a comment):
//!
//! ```text
//! compound red
//! reaction pair_red: red+red -> red+red @world=0 @inv=1 reward=0.15
//! reaction dissipate: Energy -> ∅ @world=0.005 @inv=0.005 reward=0
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::env::NicheEvent;
use crate::gridworld::{AgentState, CellContent, Pos, WorldMap};

/// Written for an empty product list.
pub const EMPTY_SET: &str = "∅";

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("invalid reaction graph: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("conflicting definitions for {what} `{id}`")]
    Conflict { what: &'static str, id: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Compound {
    pub id: String,
    /// Sprite colour/class name; defaults to the id.
    pub display_class: String,
}

impl Compound {
    pub fn new(id: impl Into<String>) -> Self {
        let id = id.into();
        Compound { display_class: id.clone(), id }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reaction {
    pub id: String,
    pub reactants: Vec<String>,
    /// May be empty (dissipation).
    pub products: Vec<String>,
    /// Firing probability per step when bound purely in the world.
    pub rate_world: f64,
    /// Firing probability per step when the carried molecule takes part.
    pub rate_inventory: f64,
    /// Paid only for in-inventory firings.
    pub reward: f64,
}

impl Reaction {
    fn same_definition(&self, other: &Reaction) -> bool {
        let sorted = |v: &[String]| {
            let mut v = v.to_vec();
            v.sort();
            v
        };
        sorted(&self.reactants) == sorted(&other.reactants)
            && sorted(&self.products) == sorted(&other.products)
            && self.rate_world == other.rate_world
            && self.rate_inventory == other.rate_inventory
            && self.reward == other.reward
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateCompound(String),
    DuplicateReaction(String),
    UnknownCompound { reaction: String, compound: String },
    NoReactants(String),
    RateOutOfRange { reaction: String, rate: String },
    NegativeReward(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateCompound(id) => write!(f, "duplicate compound `{id}`"),
            Violation::DuplicateReaction(id) => write!(f, "duplicate reaction `{id}`"),
            Violation::UnknownCompound { reaction, compound } => {
                write!(f, "reaction `{reaction}` references unknown compound `{compound}`")
            }
            Violation::NoReactants(id) => write!(f, "reaction `{id}` has no reactants"),
            Violation::RateOutOfRange { reaction, rate } => {
                write!(f, "reaction `{reaction}`: rate {rate} out of [0,1]")
            }
            Violation::NegativeReward(id) => write!(f, "reaction `{id}` has a negative reward"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReactionGraph {
    pub compounds: Vec<Compound>,
    pub reactions: Vec<Reaction>,
}

impl ReactionGraph {
    pub fn compound_ids(&self) -> Vec<String> {
        self.compounds.iter().map(|c| c.id.clone()).collect()
    }

    pub fn reaction(&self, id: &str) -> Option<&Reaction> {
        self.reactions.iter().find(|r| r.id == id)
    }

    /// Every invariant violation, in declaration order. Empty means valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for c in &self.compounds {
            if !seen.insert(c.id.as_str()) {
                out.push(Violation::DuplicateCompound(c.id.clone()));
            }
        }
        let mut reaction_ids = HashSet::new();
        for r in &self.reactions {
            if !reaction_ids.insert(r.id.as_str()) {
                out.push(Violation::DuplicateReaction(r.id.clone()));
            }
            if r.reactants.is_empty() {
                out.push(Violation::NoReactants(r.id.clone()));
            }
            for c in r.reactants.iter().chain(&r.products) {
                if !seen.contains(c.as_str()) {
                    out.push(Violation::UnknownCompound { reaction: r.id.clone(), compound: c.clone() });
                }
            }
            for rate in [r.rate_world, r.rate_inventory] {
                if !(0.0..=1.0).contains(&rate) {
                    out.push(Violation::RateOutOfRange { reaction: r.id.clone(), rate: rate.to_string() });
                }
            }
            if r.reward < 0.0 || r.reward.is_nan() {
                out.push(Violation::NegativeReward(r.id.clone()));
            }
        }
        out
    }

    /// Union of two graphs. Items sharing an id must have identical definitions.
    pub fn merge(&self, other: &ReactionGraph) -> Result<ReactionGraph, GraphError> {
        let mut merged = self.clone();
        for c in &other.compounds {
            match merged.compounds.iter().find(|x| x.id == c.id) {
                Some(existing) if existing != c => {
                    return Err(GraphError::Conflict { what: "compound", id: c.id.clone() })
                }
                Some(_) => {}
                None => merged.compounds.push(c.clone()),
            }
        }
        for r in &other.reactions {
            match merged.reactions.iter().find(|x| x.id == r.id) {
                Some(existing) if !existing.same_definition(r) => {
                    return Err(GraphError::Conflict { what: "reaction", id: r.id.clone() })
                }
                Some(_) => {}
                None => merged.reactions.push(r.clone()),
            }
        }
        let violations = merged.validate();
        if violations.is_empty() {
            Ok(merged)
        } else {
            Err(GraphError::Invalid(violations))
        }
    }

    pub fn load(text: &str) -> Result<ReactionGraph, GraphError> {
        let mut graph = ReactionGraph::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |message: String| GraphError::Syntax { line: line_no, message };
            if let Some(rest) = line.strip_prefix("compound ") {
                let mut parts = rest.split_whitespace();
                let id = parts.next().ok_or_else(|| syntax("missing compound id".into()))?;
                let display = parts.next().unwrap_or(id);
                if parts.next().is_some() {
                    return Err(syntax("trailing tokens after compound".into()));
                }
                graph.compounds.push(Compound { id: id.to_string(), display_class: display.to_string() });
            } else if let Some(rest) = line.strip_prefix("reaction ") {
                graph.reactions.push(parse_reaction(rest).map_err(syntax)?);
            } else {
                return Err(syntax(format!("expected `compound` or `reaction`, got {line:?}")));
            }
        }
        let violations = graph.validate();
        if violations.is_empty() {
            Ok(graph)
        } else {
            Err(GraphError::Invalid(violations))
        }
    }

    pub fn save(&self) -> String {
        let mut out = String::new();
        for c in &self.compounds {
            if c.display_class == c.id {
                out.push_str(&format!("compound {}\n", c.id));
            } else {
                out.push_str(&format!("compound {} {}\n", c.id, c.display_class));
            }
        }
        for r in &self.reactions {
            let products = if r.products.is_empty() { EMPTY_SET.to_string() } else { r.products.join("+") };
            out.push_str(&format!(
                "reaction {}: {} -> {} @world={} @inv={} reward={}\n",
                r.id,
                r.reactants.join("+"),
                products,
                r.rate_world,
                r.rate_inventory,
                r.reward
            ));
        }
        out
    }
}

fn parse_side(text: &str, allow_empty: bool) -> Result<Vec<String>, String> {
    let text = text.trim();
    if text.is_empty() || text == EMPTY_SET {
        return if allow_empty { Ok(Vec::new()) } else { Err("empty reactant list".into()) };
    }
    text.split('+')
        .map(|s| {
            let s = s.trim();
            if s.is_empty() || s.contains(char::is_whitespace) {
                Err(format!("malformed compound list {text:?}"))
            } else {
                Ok(s.to_string())
            }
        })
        .collect()
}

fn parse_rate(value: &str) -> Result<f64, String> {
    let rate: f64 = value.parse().map_err(|_| format!("malformed rate {value:?}"))?;
    if (0.0..=1.0).contains(&rate) {
        Ok(rate)
    } else {
        Err(format!("rate {value} out of [0,1]"))
    }
}

fn parse_reaction(rest: &str) -> Result<Reaction, String> {
    let (id, body) = rest.split_once(':').ok_or("expected `reaction <id>: ...`")?;
    let id = id.trim();
    if id.is_empty() {
        return Err("missing reaction id".into());
    }
    let (lhs, rhs) = body.split_once("->").ok_or("expected `->`")?;
    let reactants = parse_side(lhs, false)?;
    let mut tokens = rhs.split_whitespace().peekable();
    let mut product_text = String::new();
    while let Some(tok) = tokens.peek() {
        if tok.starts_with('@') || tok.starts_with("reward=") {
            break;
        }
        product_text.push_str(tok);
        tokens.next();
    }
    let products = parse_side(&product_text, true)?;
    let (mut world, mut inv, mut reward) = (None, None, None);
    for tok in tokens {
        if let Some(v) = tok.strip_prefix("@world=") {
            world = Some(parse_rate(v)?);
        } else if let Some(v) = tok.strip_prefix("@inv=") {
            inv = Some(parse_rate(v)?);
        } else if let Some(v) = tok.strip_prefix("reward=") {
            let r: f64 = v.parse().map_err(|_| format!("malformed reward {v:?}"))?;
            if r < 0.0 {
                return Err(format!("reward {v} is negative"));
            }
            reward = Some(r);
        } else {
            return Err(format!("unexpected token {tok:?}"));
        }
    }
    Ok(Reaction {
        id: id.to_string(),
        reactants,
        products,
        rate_world: world.ok_or("missing @world=<rate>")?,
        rate_inventory: inv.ok_or("missing @inv=<rate>")?,
        reward: reward.ok_or("missing reward=<x>")?,
    })
}

/// Whether a binding involves the carried molecule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Context {
    World,
    Inventory,
}

/// Where a bound molecule lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Site {
    Inventory,
    Cell(Pos),
}

/// A reaction together with the molecules filling its reactant slots, in
/// reactant order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Binding {
    pub reaction: usize,
    pub context: Context,
    pub sites: Vec<Site>,
}

#[derive(Debug, Clone)]
struct CompiledReaction {
    reactants: Vec<u8>,
    products: Vec<u8>,
}

/// A reaction graph resolved against compound indices for fast stepping.
#[derive(Debug, Clone)]
pub struct Chemistry {
    pub graph: ReactionGraph,
    /// Neighbourhood radius (Manhattan) within which reactants bind.
    pub radius: usize,
    compiled: Vec<CompiledReaction>,
    /// Reactions having each compound among their reactants.
    by_kind: Vec<Vec<usize>>,
}

/// Everything that happened during one reaction step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReactionOutcome {
    pub reward: f64,
    pub events: Vec<NicheEvent>,
    /// Indices of reactions that fired, in firing order.
    pub fired: Vec<usize>,
    /// Compound kinds that could not be placed anywhere and left the world.
    pub dropped: Vec<u8>,
}

impl Chemistry {
    pub fn new(graph: ReactionGraph, radius: usize) -> Result<Chemistry, GraphError> {
        let violations = graph.validate();
        if !violations.is_empty() {
            return Err(GraphError::Invalid(violations));
        }
        let index = |id: &String| graph.compounds.iter().position(|c| &c.id == id).expect("validated") as u8;
        let compiled: Vec<CompiledReaction> = graph
            .reactions
            .iter()
            .map(|r| CompiledReaction {
                reactants: r.reactants.iter().map(index).collect(),
                products: r.products.iter().map(index).collect(),
            })
            .collect();
        let mut by_kind = vec![Vec::new(); graph.compounds.len()];
        for (ri, r) in compiled.iter().enumerate() {
            let mut kinds = r.reactants.clone();
            kinds.sort_unstable();
            kinds.dedup();
            for k in kinds {
                by_kind[usize::from(k)].push(ri);
            }
        }
        Ok(Chemistry { graph, radius, compiled, by_kind })
    }

    pub fn kind_names(&self) -> Vec<String> {
        self.graph.compound_ids()
    }

    fn rate(&self, reaction: usize, context: Context) -> f64 {
        let r = &self.graph.reactions[reaction];
        match context {
            Context::World => r.rate_world,
            Context::Inventory => r.rate_inventory,
        }
    }

    /// Fills the reactant slots of `reaction`, with `anchor` occupying the
    /// first slot of its kind and the rest drawn from `pool` (skipping `used`).
    fn bind(
        &self,
        world: &WorldMap,
        reaction: usize,
        anchor: (Site, u8),
        pool: &[Pos],
        used: &HashSet<Site>,
    ) -> Option<Vec<Site>> {
        let reactants = &self.compiled[reaction].reactants;
        let mut sites: Vec<Option<Site>> = vec![None; reactants.len()];
        let anchor_slot = reactants.iter().position(|&k| k == anchor.1)?;
        sites[anchor_slot] = Some(anchor.0);
        let mut taken: Vec<Site> = vec![anchor.0];
        for (slot, &kind) in reactants.iter().enumerate() {
            if sites[slot].is_some() {
                continue;
            }
            let found = pool.iter().copied().map(Site::Cell).find(|s| {
                !taken.contains(s)
                    && !used.contains(s)
                    && matches!(s, Site::Cell(p) if world.get(*p) == CellContent::Entity(kind))
            })?;
            sites[slot] = Some(found);
            taken.push(found);
        }
        Some(sites.into_iter().map(|s| s.expect("all slots filled")).collect())
    }

    /// Candidate (reaction, context, anchor) triples, in a canonical order.
    fn candidates(&self, world: &WorldMap, agent: &AgentState) -> Vec<(usize, Context, Site, u8)> {
        let mut out = Vec::new();
        if let Some(k) = agent.inventory {
            for &r in &self.by_kind[usize::from(k)] {
                out.push((r, Context::Inventory, Site::Inventory, k));
            }
        }
        for p in world.positions() {
            if let CellContent::Entity(k) = world.get(p) {
                for &r in &self.by_kind[usize::from(k)] {
                    out.push((r, Context::World, Site::Cell(p), k));
                }
            }
        }
        out
    }

    fn pool_for(&self, world: &WorldMap, agent: &AgentState, context: Context, anchor: Site) -> Vec<Pos> {
        match (context, anchor) {
            (Context::Inventory, _) => world.neighborhood(agent.position, self.radius),
            (Context::World, Site::Cell(p)) => world.neighborhood(p, self.radius),
            (Context::World, Site::Inventory) => Vec::new(),
        }
    }

    /// Every structurally eligible binding, ignoring the one-binding-per-molecule
    /// rule (which [`Chemistry::step`] enforces while selecting firings).
    ///
    /// A world binding needs all reactants within the neighbourhood of one of
    /// them; an inventory binding needs the carried molecule to fill one slot
    /// and the rest to lie within the agent's neighbourhood.
    pub fn eligible_reactions(&self, world: &WorldMap, agent: &AgentState) -> Vec<Binding> {
        let none = HashSet::new();
        let mut out: Vec<Binding> = Vec::new();
        for (reaction, context, anchor, kind) in self.candidates(world, agent) {
            let pool = self.pool_for(world, agent, context, anchor);
            if let Some(sites) = self.bind(world, reaction, (anchor, kind), &pool, &none) {
                let b = Binding { reaction, context, sites };
                let mut key = b.sites.clone();
                key.sort_by_key(site_key);
                if !out.iter().any(|o| {
                    let mut k2 = o.sites.clone();
                    k2.sort_by_key(site_key);
                    o.reaction == b.reaction && o.context == b.context && k2 == key
                }) {
                    out.push(b);
                }
            }
        }
        out
    }

    /// Advances the chemistry by one step, mutating the world and inventory.
    ///
    /// Candidate bindings are shuffled with `rng` and then stably ordered by
    /// descending reactant count, so multi-molecule reactions claim molecules
    /// before single-molecule ones. Each molecule binds at most once; bindings
    /// whose rate is zero in their context are skipped. Every binding draws one
    /// uniform number and fires when it falls below the rate.
    pub fn step<R: Rng + ?Sized>(
        &self,
        world: &mut WorldMap,
        agent: &mut AgentState,
        rng: &mut R,
        step_index: usize,
    ) -> ReactionOutcome {
        let mut candidates = self.candidates(world, agent);
        candidates.shuffle(rng);
        candidates.sort_by_key(|c| std::cmp::Reverse(self.compiled[c.0].reactants.len()));

        let mut used: HashSet<Site> = HashSet::new();
        let mut bindings = Vec::new();
        for (reaction, context, anchor, kind) in candidates {
            if used.contains(&anchor) || self.rate(reaction, context) <= 0.0 {
                continue;
            }
            let pool = self.pool_for(world, agent, context, anchor);
            if let Some(sites) = self.bind(world, reaction, (anchor, kind), &pool, &used) {
                used.extend(sites.iter().copied());
                bindings.push(Binding { reaction, context, sites });
            }
        }

        let mut outcome = ReactionOutcome::default();
        let fired: Vec<Binding> = bindings
            .into_iter()
            .filter(|b| rng.random::<f64>() < self.rate(b.reaction, b.context))
            .collect();
        for b in fired {
            self.apply(world, agent, &b, step_index, &mut outcome);
        }
        outcome
    }

    fn apply(&self, world: &mut WorldMap, agent: &mut AgentState, b: &Binding, step_index: usize, outcome: &mut ReactionOutcome) {
        let compiled = &self.compiled[b.reaction];
        let reaction = &self.graph.reactions[b.reaction];
        for site in &b.sites {
            match site {
                Site::Inventory => agent.inventory = None,
                Site::Cell(p) => world.set(*p, CellContent::Empty),
            }
        }
        // Products keep the slot of a consumed reactant of the same kind when
        // possible, then fill the remaining vacated slots in reactant order.
        let mut slot_free = vec![true; b.sites.len()];
        let mut placement: Vec<Option<usize>> = vec![None; compiled.products.len()];
        for (pi, &pk) in compiled.products.iter().enumerate() {
            if let Some(slot) = (0..b.sites.len()).find(|&s| slot_free[s] && compiled.reactants[s] == pk) {
                slot_free[slot] = false;
                placement[pi] = Some(slot);
            }
        }
        for slot_of in placement.iter_mut() {
            if slot_of.is_none() {
                if let Some(slot) = (0..b.sites.len()).find(|&s| slot_free[s]) {
                    slot_free[slot] = false;
                    *slot_of = Some(slot);
                }
            }
        }
        let origin = match b.sites[0] {
            Site::Cell(p) if b.context == Context::World => p,
            _ => agent.position,
        };
        for (pi, &pk) in compiled.products.iter().enumerate() {
            match placement[pi].map(|s| b.sites[s]) {
                Some(Site::Inventory) => agent.inventory = Some(pk),
                Some(Site::Cell(p)) => world.set(p, CellContent::Entity(pk)),
                None => match nearest_empty(world, origin) {
                    Some(p) => world.set(p, CellContent::Entity(pk)),
                    None => {
                        outcome.dropped.push(pk);
                        outcome.events.push(NicheEvent {
                            kind: format!("warning:dropped:{}", self.graph.compounds[usize::from(pk)].id),
                            reward_contribution: 0.0,
                            step_index,
                        });
                    }
                },
            }
        }
        let reward = if b.context == Context::Inventory { reaction.reward } else { 0.0 };
        outcome.reward += reward;
        outcome.fired.push(b.reaction);
        outcome.events.push(NicheEvent { kind: reaction.id.clone(), reward_contribution: reward, step_index });
    }

    /// Net molecule count change per compound implied by a set of firings.
    pub fn ledger(&self, fired: &[usize]) -> Vec<i64> {
        let mut delta = vec![0i64; self.graph.compounds.len()];
        for &r in fired {
            for &k in &self.compiled[r].products {
                delta[usize::from(k)] += 1;
            }
            for &k in &self.compiled[r].reactants {
                delta[usize::from(k)] -= 1;
            }
        }
        delta
    }
}

fn site_key(s: &Site) -> (u8, usize, usize) {
    match s {
        Site::Inventory => (0, 0, 0),
        Site::Cell(p) => (1, p.row, p.col),
    }
}

/// Closest empty cell by Manhattan distance, ties broken row-major.
fn nearest_empty(world: &WorldMap, origin: Pos) -> Option<Pos> {
    world
        .positions()
        .filter(|&p| world.get(p) == CellContent::Empty)
        .min_by_key(|&p| (p.manhattan(origin), p.row, p.col))
}

/// Molecule count per compound kind, including the carried molecule.
pub fn census(world: &WorldMap, agent: &AgentState, kinds: usize) -> Vec<i64> {
    let mut counts = vec![0i64; kinds];
    for c in &world.cells {
        if let CellContent::Entity(k) = c {
            counts[usize::from(*k)] += 1;
        }
    }
    if let Some(k) = agent.inventory {
        counts[usize::from(k)] += 1;
    }
    counts
}

/// Total reward per event kind, sorted by kind.
pub fn reward_by_kind(events: &[NicheEvent]) -> BTreeMap<String, f64> {
    let mut totals = BTreeMap::new();
    for e in events {
        *totals.entry(e.kind.clone()).or_insert(0.0) += e.reward_contribution;
    }
    totals
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SIMPLE: &str = "\
compound red
compound green
reaction single_red: red -> red @world=0 @inv=1 reward=0.1
reaction single_green: green -> green @world=0 @inv=1 reward=0.075
reaction pair_red: red+red -> red+red @world=0 @inv=1 reward=0.15
reaction pair_green: green+green -> green+green @world=0 @inv=1 reward=0.25
";

    fn graph() -> ReactionGraph {
        ReactionGraph::load(SIMPLE).unwrap()
    }

    fn world(rows: &[&str], kinds: &[String]) -> WorldMap {
        let text = format!(
            "# = wall\n. = empty\nS = spawn\nr = entity:red\ng = entity:green\ne = entity:Energy\n\n{}\n",
            rows.join("\n")
        );
        WorldMap::parse(&text).unwrap().with_entity_kinds(kinds).unwrap()
    }

    #[test]
    fn validation_reports_problems() {
        assert!(graph().validate().is_empty());
        let mut g = graph();
        g.reactions[0].reactants = vec!["blue".into()];
        assert_eq!(
            g.validate(),
            vec![Violation::UnknownCompound { reaction: "single_red".into(), compound: "blue".into() }]
        );
        let mut g = graph();
        g.reactions.push(g.reactions[1].clone());
        assert_eq!(g.validate(), vec![Violation::DuplicateReaction("single_green".into())]);
    }

    #[test]
    fn text_round_trip_and_errors() {
        let g = graph();
        assert_eq!(ReactionGraph::load(&g.save()).unwrap(), g);
        let err = ReactionGraph::load("compound a\nreaction x: a -> a @world=1.5 @inv=0 reward=0\n").unwrap_err();
        assert_eq!(err, GraphError::Syntax { line: 2, message: "rate 1.5 out of [0,1]".into() });
        let err = ReactionGraph::load("compound a\nreaction x:  -> a @world=1 @inv=0 reward=0\n").unwrap_err();
        assert!(matches!(err, GraphError::Syntax { line: 2, ref message } if message.contains("empty reactant")));
        let dissipate = "compound E\nreaction d: E -> ∅ @world=0.005 @inv=0.005 reward=0\n";
        let g = ReactionGraph::load(dissipate).unwrap();
        assert!(g.reactions[0].products.is_empty());
        assert_eq!(g.save(), dissipate);
    }

    #[test]
    fn merge_rules() {
        let a = ReactionGraph::load("compound x\nreaction rx: x -> x @world=0 @inv=1 reward=1\n").unwrap();
        let b = ReactionGraph::load("compound y\nreaction ry: y -> y @world=0 @inv=1 reward=1\n").unwrap();
        let ab = a.merge(&b).unwrap();
        assert_eq!(ab.compounds.len(), 2);
        assert_eq!(a.merge(&a).unwrap(), a);
        let shared = ReactionGraph::load("compound x\ncompound z\n").unwrap();
        assert_eq!(a.merge(&shared).unwrap().compounds.len(), 2);
        let clash = ReactionGraph::load("compound x\nreaction rx: x -> x @world=0 @inv=1 reward=2\n").unwrap();
        assert_eq!(a.merge(&clash), Err(GraphError::Conflict { what: "reaction", id: "rx".into() }));
    }

    /// Graphs drawn from one consistent pool: reaction `r{k}` always means the same thing.
    fn pool_graph(compounds: &[bool], reactions: &[bool]) -> ReactionGraph {
        let names = ["a", "b", "c", "d"];
        let mut g = ReactionGraph::default();
        let mut need: Vec<&str> = names.iter().zip(compounds).filter(|(_, &on)| on).map(|(n, _)| *n).collect();
        for (k, _) in reactions.iter().enumerate().filter(|(_, &on)| on) {
            let (x, y) = (names[k % 4], names[(k + 1) % 4]);
            need.extend([x, y]);
            g.reactions.push(Reaction {
                id: format!("r{k}"),
                reactants: vec![x.into()],
                products: vec![y.into()],
                rate_world: 0.1 * k as f64,
                rate_inventory: 0.5,
                reward: k as f64,
            });
        }
        need.sort_unstable();
        need.dedup();
        g.compounds = need.into_iter().map(Compound::new).collect();
        g
    }

    fn normalised(mut g: ReactionGraph) -> ReactionGraph {
        g.compounds.sort_by(|a, b| a.id.cmp(&b.id));
        g.reactions.sort_by(|a, b| a.id.cmp(&b.id));
        g
    }

    proptest::proptest! {
        #[test]
        fn merge_is_commutative_and_associative(
            ca in proptest::collection::vec(proptest::bool::ANY, 4), ra in proptest::collection::vec(proptest::bool::ANY, 6),
            cb in proptest::collection::vec(proptest::bool::ANY, 4), rb in proptest::collection::vec(proptest::bool::ANY, 6),
            cc in proptest::collection::vec(proptest::bool::ANY, 4), rc in proptest::collection::vec(proptest::bool::ANY, 6),
        ) {
            let (a, b, c) = (pool_graph(&ca, &ra), pool_graph(&cb, &rb), pool_graph(&cc, &rc));
            let ab = a.merge(&b).unwrap();
            proptest::prop_assert_eq!(normalised(ab.clone()), normalised(b.merge(&a).unwrap()));
            let left = ab.merge(&c).unwrap();
            let right = a.merge(&b.merge(&c).unwrap()).unwrap();
            proptest::prop_assert_eq!(normalised(left), normalised(right));
        }
    }

    #[test]
    fn pair_eligibility() {
        let g = graph();
        let chem = Chemistry::new(g.clone(), 1).unwrap();
        let kinds = g.compound_ids();
        let w = world(&["#####", "#gg.#", "#S..#", "#####"], &kinds);
        let agent = AgentState::at(w.spawn);
        let eligible = chem.eligible_reactions(&w, &agent);
        let pair_green = g.reactions.iter().position(|r| r.id == "pair_green").unwrap();
        assert!(eligible.iter().any(|b| b.reaction == pair_green && b.context == Context::World));

        let lone = world(&["#####", "#r..#", "#S..#", "#####"], &kinds);
        let pair_red = g.reactions.iter().position(|r| r.id == "pair_red").unwrap();
        assert!(!chem.eligible_reactions(&lone, &agent).iter().any(|b| b.reaction == pair_red));

        // carried red with another red under the agent
        let mut carrying = AgentState::at(Pos::new(1, 1));
        carrying.inventory = Some(0);
        let eligible = chem.eligible_reactions(&lone, &carrying);
        assert!(eligible.iter().any(|b| b.reaction == pair_red && b.context == Context::Inventory));
    }

    #[test]
    fn pair_reaction_beats_identity_and_keeps_molecules_in_place() {
        let g = graph();
        let chem = Chemistry::new(g.clone(), 1).unwrap();
        let kinds = g.compound_ids();
        let mut w = world(&["#####", "#g..#", "#S..#", "#####"], &kinds);
        let mut agent = AgentState::at(Pos::new(1, 1));
        agent.inventory = Some(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for step in 0..50 {
            let out = chem.step(&mut w, &mut agent, &mut rng, step);
            assert_eq!(out.reward, 0.25);
            assert_eq!(out.events.len(), 1);
            assert_eq!(out.events[0].kind, "pair_green");
        }
        assert_eq!(agent.inventory, Some(1));
        assert_eq!(w.get(Pos::new(1, 1)), CellContent::Entity(1));
    }

    #[test]
    fn zero_rates_are_identity() {
        let mut g = graph();
        for r in &mut g.reactions {
            r.rate_inventory = 0.0;
            r.rate_world = 0.0;
        }
        let chem = Chemistry::new(g.clone(), 1).unwrap();
        let mut w = world(&["#####", "#gr.#", "#Sgr#", "#####"], &g.compound_ids());
        let mut agent = AgentState::at(Pos::new(1, 1));
        agent.inventory = Some(0);
        let (w0, a0) = (w.clone(), agent);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in 0..20 {
            let out = chem.step(&mut w, &mut agent, &mut rng, s);
            assert_eq!(out, ReactionOutcome::default());
        }
        assert_eq!((w, agent), (w0, a0));
    }

    #[test]
    fn products_spill_and_drop_when_full() {
        let g = ReactionGraph::load(
            "compound Energy\ncompound red\nreaction split: red -> Energy+Energy+Energy @world=1 @inv=1 reward=0\n",
        )
        .unwrap();
        let chem = Chemistry::new(g.clone(), 1).unwrap();
        let kinds = g.compound_ids();
        let mut w = world(&["###", "#r#", "#S#", "###"], &kinds);
        let mut agent = AgentState::at(Pos::new(2, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let before = census(&w, &agent, 2);
        let out = chem.step(&mut w, &mut agent, &mut rng, 0);
        let after = census(&w, &agent, 2);
        // one product reuses the vacated cell, one spills to the spawn cell, one is dropped
        assert_eq!(out.dropped, vec![0]);
        assert!(out.events.iter().any(|e| e.kind == "warning:dropped:Energy"));
        let ledger = chem.ledger(&out.fired);
        assert_eq!(after[0] - before[0], ledger[0] - 1);
        assert_eq!(after[1] - before[1], ledger[1]);
    }
}
