//! 2D grid engine shared by the maze and chemistry worlds.
//!
//! Map files are UTF-8 text: a legend section with one `c = class[:kind]`
//! line per character, a blank line, then the ASCII grid. Classes are
//! `empty`, `wall`, `spawn`, `decoration:<kind>` and `entity:<kind>`.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::env::{Action, Observation, RgbImage};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MapError {
    #[error("legend line {line}: {message}")]
    Legend { line: usize, message: String },
    #[error("row {row} has {found} columns, expected {expected}")]
    Ragged { row: usize, found: usize, expected: usize },
    #[error("unknown character {ch:?} at row {row}, column {col}")]
    UnknownChar { ch: char, row: usize, col: usize },
    #[error("map has no spawn marker")]
    NoSpawn,
    #[error("second spawn marker at row {row}, column {col}")]
    MultipleSpawns { row: usize, col: usize },
    #[error("map has no grid rows")]
    Empty,
    #[error("entity kind `{0}` is not in the kind table")]
    UnknownKind(String),
}

/// Observation class indices: fixed classes first, then decorations, then entities.
pub const CLASS_EMPTY: u8 = 0;
pub const CLASS_OUT_OF_BOUNDS: u8 = 1;
pub const CLASS_WALL: u8 = 2;
const FIXED_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellContent {
    Empty,
    Wall,
    /// Walkable scenery; index into [`WorldMap::decoration_kinds`].
    Decoration(u8),
    /// A mushroom or molecule; index into [`WorldMap::entity_kinds`].
    Entity(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

impl Pos {
    pub fn new(row: usize, col: usize) -> Self {
        Pos { row, col }
    }

    pub fn manhattan(self, other: Pos) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldMap {
    pub width: usize,
    pub height: usize,
    /// Row-major cell contents.
    pub cells: Vec<CellContent>,
    pub spawn: Pos,
    pub decoration_kinds: Vec<String>,
    pub entity_kinds: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LegendClass {
    Cell(CellContent),
    Spawn,
}

impl WorldMap {
    pub fn parse(text: &str) -> Result<WorldMap, MapError> {
        let mut lines = text.lines().enumerate();
        let mut legend: HashMap<char, (String, Option<String>)> = HashMap::new();
        for (i, line) in lines.by_ref() {
            if line.trim().is_empty() {
                break;
            }
            let (lhs, rhs) = line.split_once('=').ok_or_else(|| MapError::Legend {
                line: i + 1,
                message: "expected `c = class[:kind]`".into(),
            })?;
            let lhs = lhs.trim();
            let mut chars = lhs.chars();
            let ch = match (chars.next(), chars.next()) {
                (Some(c), None) => c,
                _ => {
                    return Err(MapError::Legend {
                        line: i + 1,
                        message: format!("legend key must be one character, got {lhs:?}"),
                    })
                }
            };
            let rhs = rhs.trim();
            let (class, kind) = match rhs.split_once(':') {
                Some((c, k)) => (c.trim().to_string(), Some(k.trim().to_string())),
                None => (rhs.to_string(), None),
            };
            legend.insert(ch, (class, kind));
        }
        let grid: Vec<&str> = lines.map(|(_, l)| l).filter(|l| !l.is_empty()).collect();
        let mut rows = Vec::with_capacity(grid.len());
        for row in &grid {
            rows.push(row.chars().collect::<Vec<_>>());
        }
        Self::from_rows(&rows, &legend)
    }

    /// Builds a map from character rows and a legend of `char -> (class, kind)`.
    pub fn from_rows(rows: &[Vec<char>], legend: &HashMap<char, (String, Option<String>)>) -> Result<WorldMap, MapError> {
        let height = rows.len();
        if height == 0 {
            return Err(MapError::Empty);
        }
        let width = rows[0].len();
        let mut decoration_kinds: Vec<String> = Vec::new();
        let mut entity_kinds: Vec<String> = Vec::new();
        let mut classes: HashMap<char, LegendClass> = HashMap::new();
        // Sort legend keys so kind indices do not depend on hash order.
        let mut keys: Vec<&char> = legend.keys().collect();
        keys.sort_unstable();
        for &ch in keys {
            let (class, kind) = &legend[&ch];
            let parsed = match (class.as_str(), kind) {
                ("empty", None) => LegendClass::Cell(CellContent::Empty),
                ("wall", None) => LegendClass::Cell(CellContent::Wall),
                ("spawn", None) => LegendClass::Spawn,
                ("decoration", Some(k)) => LegendClass::Cell(CellContent::Decoration(intern(&mut decoration_kinds, k))),
                ("entity", Some(k)) => LegendClass::Cell(CellContent::Entity(intern(&mut entity_kinds, k))),
                _ => {
                    let text = match kind {
                        Some(k) => format!("{class}:{k}"),
                        None => class.clone(),
                    };
                    return Err(MapError::Legend { line: 0, message: format!("unknown class `{text}` for {ch:?}") });
                }
            };
            classes.insert(ch, parsed);
        }
        let mut cells = Vec::with_capacity(width * height);
        let mut spawn = None;
        for (r, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(MapError::Ragged { row: r, found: row.len(), expected: width });
            }
            for (c, ch) in row.iter().enumerate() {
                match classes.get(ch) {
                    None => return Err(MapError::UnknownChar { ch: *ch, row: r, col: c }),
                    Some(LegendClass::Spawn) => {
                        if spawn.is_some() {
                            return Err(MapError::MultipleSpawns { row: r, col: c });
                        }
                        spawn = Some(Pos::new(r, c));
                        cells.push(CellContent::Empty);
                    }
                    Some(LegendClass::Cell(content)) => cells.push(*content),
                }
            }
        }
        let spawn = spawn.ok_or(MapError::NoSpawn)?;
        Ok(WorldMap { width, height, cells, spawn, decoration_kinds, entity_kinds })
    }

    /// Re-indexes entities against an externally fixed kind table (e.g. a
    /// reaction graph's compound order). Every kind placed on the grid must appear.
    pub fn with_entity_kinds(&self, kinds: &[String]) -> Result<WorldMap, MapError> {
        let remap: Vec<Option<u8>> =
            self.entity_kinds.iter().map(|k| kinds.iter().position(|x| x == k).map(|i| i as u8)).collect();
        let cells = self
            .cells
            .iter()
            .map(|c| match c {
                CellContent::Entity(k) => remap[usize::from(*k)]
                    .map(CellContent::Entity)
                    .ok_or_else(|| MapError::UnknownKind(self.entity_kinds[usize::from(*k)].clone())),
                other => Ok(*other),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(WorldMap { cells, entity_kinds: kinds.to_vec(), ..self.clone() })
    }

    pub fn in_bounds(&self, row: isize, col: isize) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width
    }

    pub fn get(&self, pos: Pos) -> CellContent {
        self.cells[pos.row * self.width + pos.col]
    }

    pub fn set(&mut self, pos: Pos, content: CellContent) {
        self.cells[pos.row * self.width + pos.col] = content;
    }

    pub fn offset(&self, pos: Pos, dr: isize, dc: isize) -> Option<Pos> {
        let (r, c) = (pos.row as isize + dr, pos.col as isize + dc);
        self.in_bounds(r, c).then(|| Pos::new(r as usize, c as usize))
    }

    pub fn positions(&self) -> impl Iterator<Item = Pos> + '_ {
        (0..self.height).flat_map(move |r| (0..self.width).map(move |c| Pos::new(r, c)))
    }

    pub fn count(&self, content: CellContent) -> usize {
        self.cells.iter().filter(|&&c| c == content).count()
    }

    pub fn entity_kind(&self, name: &str) -> Option<u8> {
        self.entity_kinds.iter().position(|k| k == name).map(|i| i as u8)
    }

    /// Positions of every entity of `kind`, row-major.
    pub fn find_entities(&self, kind: u8) -> Vec<Pos> {
        self.positions().filter(|&p| self.get(p) == CellContent::Entity(kind)).collect()
    }

    pub fn num_classes(&self) -> usize {
        FIXED_CLASSES + self.decoration_kinds.len() + self.entity_kinds.len()
    }

    pub fn class_of(&self, content: CellContent) -> u8 {
        match content {
            CellContent::Empty => CLASS_EMPTY,
            CellContent::Wall => CLASS_WALL,
            CellContent::Decoration(k) => FIXED_CLASSES as u8 + k,
            CellContent::Entity(k) => (FIXED_CLASSES + self.decoration_kinds.len()) as u8 + k,
        }
    }

    /// Cells within Manhattan distance `radius` of `center` (including it), row-major.
    pub fn neighborhood(&self, center: Pos, radius: usize) -> Vec<Pos> {
        let r = radius as isize;
        let mut out = Vec::new();
        for dr in -r..=r {
            let span = r - dr.abs();
            for dc in -span..=span {
                if let Some(p) = self.offset(center, dr, dc) {
                    out.push(p);
                }
            }
        }
        out
    }
}

fn intern(table: &mut Vec<String>, kind: &str) -> u8 {
    match table.iter().position(|k| k == kind) {
        Some(i) => i as u8,
        None => {
            table.push(kind.to_string());
            (table.len() - 1) as u8
        }
    }
}

/// The agent's position, single-slot inventory and digestion countdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentState {
    pub position: Pos,
    pub inventory: Option<u8>,
    pub digestion_remaining: u32,
}

impl AgentState {
    pub fn at(position: Pos) -> Self {
        AgentState { position, inventory: None, digestion_remaining: 0 }
    }
}

/// Applies a movement action. Walls and the map edge block; decorations and
/// entities do not. Nothing moves while digesting, and `Drop` never moves.
pub fn move_agent(world: &WorldMap, agent: &AgentState, action: Action) -> AgentState {
    let mut next = *agent;
    if agent.digestion_remaining > 0 {
        return next;
    }
    if let Some((dr, dc)) = action.delta() {
        if let Some(p) = world.offset(agent.position, dr, dc) {
            if world.get(p) != CellContent::Wall {
                next.position = p;
            }
        }
    }
    next
}

/// Symbolic observation of the `(2r+1) x (2r+1)` window centred on the agent.
/// Cells outside the map observe as the out-of-bounds class.
pub fn observe_window(world: &WorldMap, agent: &AgentState, radius: usize) -> Observation {
    let side = 2 * radius + 1;
    let r = radius as isize;
    let mut cells = Vec::with_capacity(side * side);
    for dr in -r..=r {
        for dc in -r..=r {
            let class = match world.offset(agent.position, dr, dc) {
                Some(p) => world.class_of(world.get(p)),
                None => CLASS_OUT_OF_BOUNDS,
            };
            cells.push(class);
        }
    }
    Observation {
        height: side,
        width: side,
        num_classes: world.num_classes(),
        cells,
        num_inventory_kinds: world.entity_kinds.len(),
        inventory: agent.inventory,
        rgb: None,
    }
}

pub const SPRITE: usize = 8;
const BACKGROUND: [u8; 3] = [24, 24, 32];
const OUT_OF_BOUNDS: [u8; 3] = [0, 0, 0];
const WALL: [u8; 3] = [110, 110, 110];

fn kind_color(name: &str) -> [u8; 3] {
    match name {
        "red" => [220, 40, 40],
        "green" => [40, 190, 60],
        "blue" => [50, 90, 230],
        "orange" => [245, 150, 30],
        "yellow" => [235, 220, 50],
        "purple" => [150, 60, 200],
        _ => {
            // FNV-1a keeps unnamed kinds distinguishable and stable across runs.
            let mut h: u32 = 0x811c_9dc5;
            for b in name.bytes() {
                h = (h ^ u32::from(b)).wrapping_mul(0x0100_0193);
            }
            [64 + (h & 0x7f) as u8, 64 + ((h >> 8) & 0x7f) as u8, 64 + ((h >> 16) & 0x7f) as u8]
        }
    }
}

/// Base colour and glyph colour for one observation class.
fn sprite_colors(world: &WorldMap, class: u8) -> ([u8; 3], Option<[u8; 3]>) {
    let class = usize::from(class);
    let decorations = world.decoration_kinds.len();
    match class {
        0 => (BACKGROUND, None),
        1 => (OUT_OF_BOUNDS, None),
        2 => (WALL, Some([70, 70, 70])),
        c if c < FIXED_CLASSES + decorations => {
            let k = kind_color(&world.decoration_kinds[c - FIXED_CLASSES]);
            (BACKGROUND, Some(k))
        }
        c => {
            let k = kind_color(&world.entity_kinds[c - FIXED_CLASSES - decorations]);
            (k, Some([255, 255, 255]))
        }
    }
}

/// Renders the observation window as `8x8` sprites per cell.
///
/// Sprites are flat colour squares with a 2-pixel glyph that tells classes of
/// the same colour apart (decorations draw only the glyph over background).
pub fn render_rgb(world: &WorldMap, agent: &AgentState, radius: usize) -> RgbImage {
    let obs = observe_window(world, agent, radius);
    render_classes(world, &obs.cells, obs.height, obs.width)
}

pub(crate) fn render_classes(world: &WorldMap, cells: &[u8], height: usize, width: usize) -> RgbImage {
    let (h, w) = (height * SPRITE, width * SPRITE);
    let mut data = vec![0u8; h * w * 3];
    for (i, &class) in cells.iter().enumerate() {
        let (base, glyph) = sprite_colors(world, class);
        let (cr, cc) = (i / width, i % width);
        for y in 0..SPRITE {
            for x in 0..SPRITE {
                let in_glyph = (3..5).contains(&y) && (3..5).contains(&x);
                let color = match glyph {
                    Some(g) if in_glyph => g,
                    _ => base,
                };
                let offset = ((cr * SPRITE + y) * w + cc * SPRITE + x) * 3;
                data[offset..offset + 3].copy_from_slice(&color);
            }
        }
    }
    RgbImage { height: h, width: w, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BOX: &str = "# = wall\nS = spawn\n\n###\n#S#\n###\n";

    #[test]
    fn parses_walled_box() {
        let map = WorldMap::parse(BOX).unwrap();
        assert_eq!((map.width, map.height), (3, 3));
        assert_eq!(map.count(CellContent::Wall), 8);
        assert_eq!(map.spawn, Pos::new(1, 1));
        assert_eq!(map.get(map.spawn), CellContent::Empty);
    }

    #[test]
    fn parse_errors_name_position() {
        let err = WorldMap::parse("# = wall\nS = spawn\n\n###\n#Sx\n###\n").unwrap_err();
        assert_eq!(err, MapError::UnknownChar { ch: 'x', row: 1, col: 2 });
        let err = WorldMap::parse("# = wall\nS = spawn\n\n###\n#S\n###\n").unwrap_err();
        assert_eq!(err, MapError::Ragged { row: 1, found: 2, expected: 3 });
        assert_eq!(WorldMap::parse("# = wall\nS = spawn\n\n###\n").unwrap_err(), MapError::NoSpawn);
        let err = WorldMap::parse("S = spawn\n\nSS\n").unwrap_err();
        assert_eq!(err, MapError::MultipleSpawns { row: 0, col: 1 });
        assert!(matches!(WorldMap::parse("## = wall\n\n#\n"), Err(MapError::Legend { line: 1, .. })));
    }

    fn open_map() -> WorldMap {
        let text = "# = wall\n. = empty\nS = spawn\nf = decoration:red\nm = entity:green\n\n\
                    #####\n#.f.#\n#.Sm#\n#...#\n#####\n";
        WorldMap::parse(text).unwrap()
    }

    #[test]
    fn movement_rules() {
        let map = open_map();
        let agent = AgentState::at(map.spawn);
        // decoration above spawn is walkable
        assert_eq!(move_agent(&map, &agent, Action::Up).position, Pos::new(1, 2));
        // entity is walkable
        assert_eq!(move_agent(&map, &agent, Action::Right).position, Pos::new(2, 3));
        let corner = AgentState::at(Pos::new(1, 1));
        assert_eq!(move_agent(&map, &corner, Action::Up).position, corner.position);
        assert_eq!(move_agent(&map, &corner, Action::Left).position, corner.position);
        let digesting = AgentState { digestion_remaining: 3, ..agent };
        assert_eq!(move_agent(&map, &digesting, Action::Down).position, agent.position);
        assert_eq!(move_agent(&map, &agent, Action::Drop).position, agent.position);
    }

    #[test]
    fn window_shape_and_out_of_bounds() {
        let map = open_map();
        let corner = AgentState::at(Pos::new(0, 0));
        let obs = observe_window(&map, &corner, 5);
        assert_eq!((obs.height, obs.width), (11, 11));
        assert_eq!(obs.cells.len(), 121);
        // rows above and columns left of the map are out of bounds
        assert!(obs.cells[..11].iter().all(|&c| c == CLASS_OUT_OF_BOUNDS));
        assert!((0..11).all(|r| obs.cells[r * 11] == CLASS_OUT_OF_BOUNDS));
        assert_eq!(obs.cells[5 * 11 + 5], CLASS_WALL);
        assert_eq!(obs, observe_window(&map, &corner, 5));
    }

    #[test]
    fn render_shape_and_determinism() {
        let map = open_map();
        let agent = AgentState::at(map.spawn);
        let img = render_rgb(&map, &agent, 5);
        assert_eq!(img.shape(), (88, 88, 3));
        assert_eq!(img, render_rgb(&map, &agent, 5));
    }

    #[test]
    fn empty_window_renders_uniform_background() {
        let map = WorldMap::parse(". = empty\nS = spawn\n\n.....\n.....\n..S..\n.....\n.....\n").unwrap();
        let img = render_rgb(&map, &AgentState::at(map.spawn), 2);
        assert!(img.data.chunks_exact(3).all(|px| px == BACKGROUND));
    }

    #[test]
    fn neighborhood_is_von_neumann() {
        let map = open_map();
        let n = map.neighborhood(Pos::new(2, 2), 1);
        assert_eq!(n.len(), 5);
        assert_eq!(map.neighborhood(Pos::new(0, 0), 1).len(), 3);
    }
}
