//! Deterministic blocks world.
//!
//! The board is a grid of square cells, one block width each. A block moves
//! one cell per action and can neither leave the board nor enter an occupied
//! cell. Observations are one-hot planes, one plane per block identity.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Block identities used by the default geometry, in canonical order.
pub const LOGO_BLOCKS: [&str; 20] = [
    "adidas",
    "bmw",
    "burgerking",
    "cocacola",
    "esso",
    "heineken",
    "hp",
    "mcdonalds",
    "mercedes",
    "nvidia",
    "pepsi",
    "shell",
    "sri",
    "starbucks",
    "stella",
    "target",
    "texaco",
    "toyota",
    "twitter",
    "ups",
];

pub const MAX_BLOCKS: usize = 20;
pub const DEFAULT_STEP_FRACTION: f64 = 0.04;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardGeometry {
    width: usize,
    height: usize,
    block_ids: Vec<String>,
    step_fraction: f64,
}

impl BoardGeometry {
    /// Square board whose side is `round(1 / step_fraction)` cells.
    pub fn from_step_fraction(step_fraction: f64, block_ids: Vec<String>) -> Result<Self> {
        if !(step_fraction > 0.0 && step_fraction <= 1.0) {
            return Err(Error::InvalidGeometry(format!(
                "step fraction {step_fraction} outside (0, 1]"
            )));
        }
        let side = (1.0 / step_fraction).round() as usize;
        let mut geometry = Self::new(side, side, block_ids)?;
        geometry.step_fraction = step_fraction;
        Ok(geometry)
    }

    pub fn new(width: usize, height: usize, block_ids: Vec<String>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidGeometry(
                "board must have at least one cell".into(),
            ));
        }
        if block_ids.len() > MAX_BLOCKS {
            return Err(Error::InvalidGeometry(format!(
                "{} blocks exceeds the maximum of {MAX_BLOCKS}",
                block_ids.len()
            )));
        }
        for (i, id) in block_ids.iter().enumerate() {
            if id.is_empty() || id.chars().any(char::is_whitespace) {
                return Err(Error::InvalidGeometry(format!("bad block id {id:?}")));
            }
            if block_ids[..i].contains(id) {
                return Err(Error::InvalidGeometry(format!("duplicate block id {id}")));
            }
        }
        Ok(Self {
            width,
            height,
            block_ids,
            step_fraction: 1.0 / width.max(height) as f64,
        })
    }

    /// 25x25 board with the first `n_blocks` logo blocks.
    pub fn standard(n_blocks: usize) -> Result<Self> {
        Self::from_step_fraction(DEFAULT_STEP_FRACTION, logo_ids(n_blocks)?)
    }

    /// Square board of `side` cells with the first `n_blocks` logo blocks.
    pub fn square(side: usize, n_blocks: usize) -> Result<Self> {
        Self::new(side, side, logo_ids(n_blocks)?)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn step_fraction(&self) -> f64 {
        self.step_fraction
    }

    pub fn block_ids(&self) -> &[String] {
        &self.block_ids
    }

    pub fn num_blocks(&self) -> usize {
        self.block_ids.len()
    }

    pub fn block_index(&self, id: &str) -> Option<usize> {
        self.block_ids.iter().position(|b| b == id)
    }

    pub fn block_name(&self, index: usize) -> &str {
        &self.block_ids[index]
    }

    pub fn in_bounds(&self, cell: Cell) -> bool {
        cell.col >= 0
            && cell.row >= 0
            && (cell.col as usize) < self.width
            && (cell.row as usize) < self.height
    }

    /// Number of selectable actions: four moves per block plus STOP.
    pub fn num_actions(&self) -> usize {
        self.num_blocks() * 4 + 1
    }

    /// Every selectable action in canonical order; STOP is last.
    pub fn actions(&self) -> Vec<Action> {
        (0..self.num_actions())
            .map(|i| self.action_from_index(i))
            .collect()
    }

    pub fn action_index(&self, action: Action) -> Option<usize> {
        match action {
            Action::Move { block, dir } if block < self.num_blocks() => {
                Some(block * 4 + dir.index())
            }
            Action::Stop => Some(self.num_blocks() * 4),
            _ => None,
        }
    }

    pub fn action_from_index(&self, index: usize) -> Action {
        assert!(
            index < self.num_actions(),
            "action index {index} out of range"
        );
        if index == self.num_blocks() * 4 {
            Action::Stop
        } else {
            Action::Move {
                block: index / 4,
                dir: Direction::ALL[index % 4],
            }
        }
    }

    pub fn check_state(&self, state: &WorldState) -> Result<()> {
        if state.positions.len() != self.num_blocks() {
            return Err(Error::InvalidState(format!(
                "state has {} block slots, geometry has {}",
                state.positions.len(),
                self.num_blocks()
            )));
        }
        for (i, pos) in state.positions.iter().enumerate() {
            let Some(cell) = *pos else { continue };
            if !self.in_bounds(cell) {
                return Err(Error::InvalidState(format!(
                    "block {} at {cell} is off the board",
                    self.block_ids[i]
                )));
            }
            if state.positions[..i].contains(&Some(cell)) {
                return Err(Error::InvalidState(format!("two blocks share cell {cell}")));
            }
        }
        Ok(())
    }

    /// Executes one action.
    ///
    /// Blocked, off-board, and absent-block moves fail and leave the state
    /// untouched. `Action::None` is not selectable and is treated as a failed
    /// no-op.
    pub fn apply(&self, state: &WorldState, action: Action) -> StepResult {
        match action {
            Action::Stop => StepResult {
                next_state: state.clone(),
                failed: false,
                terminal: true,
            },
            Action::None => StepResult {
                next_state: state.clone(),
                failed: true,
                terminal: false,
            },
            Action::Move { block, dir } => {
                let target = state
                    .position(block)
                    .map(|cell| cell.step(dir))
                    .filter(|&t| self.in_bounds(t) && state.occupant(t).is_none());
                match target {
                    Some(cell) => {
                        let mut next_state = state.clone();
                        next_state.positions[block] = Some(cell);
                        StepResult {
                            next_state,
                            failed: false,
                            terminal: false,
                        }
                    }
                    None => StepResult {
                        next_state: state.clone(),
                        failed: true,
                        terminal: false,
                    },
                }
            }
        }
    }

    pub fn render(&self, state: &WorldState) -> Result<Observation> {
        self.check_state(state)?;
        Ok(Observation {
            height: self.height,
            width: self.width,
            cells: state.positions.clone(),
        })
    }

    pub fn empty_observation(&self) -> Observation {
        Observation::zeros(self.num_blocks(), self.height, self.width)
    }

    /// One `block_id col row` line per present block, in canonical block order.
    pub fn format_snapshot(&self, state: &WorldState) -> String {
        let mut out = String::new();
        for (i, pos) in state.positions.iter().enumerate() {
            if let Some(cell) = pos {
                out.push_str(&format!(
                    "{} {} {}\n",
                    self.block_ids[i], cell.col, cell.row
                ));
            }
        }
        out
    }

    pub fn parse_snapshot(&self, text: &str) -> Result<WorldState> {
        let mut state = WorldState::empty(self.num_blocks());
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [id, col, row] = fields[..] else {
                return Err(Error::InvalidState(format!("bad snapshot line {line:?}")));
            };
            let block = self
                .block_index(id)
                .ok_or_else(|| Error::InvalidState(format!("unknown block {id}")))?;
            let parse = |s: &str| {
                s.parse::<i32>()
                    .map_err(|_| Error::InvalidState(format!("bad coordinate {s:?}")))
            };
            if state.positions[block].is_some() {
                return Err(Error::InvalidState(format!("block {id} listed twice")));
            }
            state.positions[block] = Some(Cell::new(parse(col)?, parse(row)?));
        }
        self.check_state(&state)?;
        Ok(state)
    }
}

fn logo_ids(n_blocks: usize) -> Result<Vec<String>> {
    if n_blocks > MAX_BLOCKS {
        return Err(Error::InvalidGeometry(format!(
            "{n_blocks} blocks exceeds the maximum of {MAX_BLOCKS}"
        )));
    }
    Ok(LOGO_BLOCKS[..n_blocks]
        .iter()
        .map(|s| s.to_string())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub col: i32,
    pub row: i32,
}

impl Cell {
    pub const fn new(col: i32, row: i32) -> Self {
        Self { col, row }
    }

    pub fn step(self, dir: Direction) -> Self {
        let (dc, dr) = dir.delta();
        Self::new(self.col + dc, self.row + dr)
    }

    pub fn offset(self, dc: i32, dr: i32) -> Self {
        Self::new(self.col + dc, self.row + dr)
    }

    pub fn manhattan(self, other: Cell) -> u32 {
        self.col.abs_diff(other.col) + self.row.abs_diff(other.row)
    }

    pub fn euclidean(self, other: Cell) -> f64 {
        let dc = f64::from(self.col - other.col);
        let dr = f64::from(self.row - other.row);
        dc.hypot(dr)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.col, self.row)
    }
}

/// Compass direction. Row 0 is the north edge of the board.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    North,
    South,
    East,
    West,
}

impl Direction {
    /// Canonical order, which is also the shortest-path tie-break priority.
    pub const ALL: [Direction; 4] = [Self::North, Self::South, Self::East, Self::West];

    pub fn delta(self) -> (i32, i32) {
        match self {
            Self::North => (0, -1),
            Self::South => (0, 1),
            Self::East => (1, 0),
            Self::West => (-1, 0),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn opposite(self) -> Self {
        match self {
            Self::North => Self::South,
            Self::South => Self::North,
            Self::East => Self::West,
            Self::West => Self::East,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Self::North => "N",
            Self::South => "S",
            Self::East => "E",
            Self::West => "W",
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Self::North => "north",
            Self::South => "south",
            Self::East => "east",
            Self::West => "west",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.code() == code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Move {
        block: usize,
        dir: Direction,
    },
    Stop,
    /// Previous-action placeholder at the first step of an episode.
    None,
}

impl Action {
    pub fn is_selectable(self) -> bool {
        !matches!(self, Action::None)
    }

    pub fn describe(self, geometry: &BoardGeometry) -> String {
        match self {
            Action::Move { block, dir } => format!("{} {}", geometry.block_name(block), dir.code()),
            Action::Stop => "STOP".to_string(),
            Action::None => "NONE".to_string(),
        }
    }
}

/// Positions of the blocks, indexed like the geometry's block ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WorldState {
    positions: Vec<Option<Cell>>,
}

impl WorldState {
    pub fn empty(num_blocks: usize) -> Self {
        Self {
            positions: vec![None; num_blocks],
        }
    }

    pub fn from_positions(geometry: &BoardGeometry, positions: Vec<Option<Cell>>) -> Result<Self> {
        let state = Self { positions };
        geometry.check_state(&state)?;
        Ok(state)
    }

    pub fn num_slots(&self) -> usize {
        self.positions.len()
    }

    pub fn position(&self, block: usize) -> Option<Cell> {
        self.positions.get(block).copied().flatten()
    }

    pub fn positions(&self) -> &[Option<Cell>] {
        &self.positions
    }

    pub fn is_present(&self, block: usize) -> bool {
        self.position(block).is_some()
    }

    pub fn num_present(&self) -> usize {
        self.positions.iter().filter(|p| p.is_some()).count()
    }

    pub fn occupant(&self, cell: Cell) -> Option<usize> {
        self.positions.iter().position(|p| *p == Some(cell))
    }

    /// Unchecked placement; callers validate against a geometry.
    pub fn with_block(mut self, block: usize, cell: Option<Cell>) -> Self {
        self.positions[block] = cell;
        self
    }

    pub fn same_present_set(&self, other: &WorldState) -> bool {
        self.positions.len() == other.positions.len()
            && self
                .positions
                .iter()
                .zip(&other.positions)
                .all(|(a, b)| a.is_some() == b.is_some())
    }

    /// Indices of blocks whose positions differ between the two states.
    pub fn changed_blocks(&self, other: &WorldState) -> Vec<usize> {
        self.positions
            .iter()
            .zip(&other.positions)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepResult {
    pub next_state: WorldState,
    pub failed: bool,
    pub terminal: bool,
}

/// Sum over blocks of the Euclidean displacement, in block widths.
pub fn state_distance(a: &WorldState, b: &WorldState) -> Result<f64> {
    if !a.same_present_set(b) {
        return Err(Error::IncomparableStates(
            "states have different present blocks".into(),
        ));
    }
    Ok(a.positions
        .iter()
        .zip(&b.positions)
        .filter_map(|(pa, pb)| Some(pa.as_ref()?.euclidean(*pb.as_ref()?)))
        .sum())
}

/// Goal test: the summed displacement is under one block width.
pub fn states_equal_relaxed(a: &WorldState, b: &WorldState) -> Result<bool> {
    Ok(state_distance(a, b)? < 1.0)
}

/// One-hot rendering of a state: plane `c` holds a single 1 at the cell of
/// block `c`, or nothing when the block is absent.
///
/// Stored sparsely; [`Observation::to_dense`] gives the `channels x height x
/// width` tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Observation {
    height: usize,
    width: usize,
    cells: Vec<Option<Cell>>,
}

impl Observation {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![None; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.cells.len()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels(), self.height, self.width]
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        match self.cells[channel] {
            Some(cell) if cell.row as usize == row && cell.col as usize == col => 1.0,
            _ => 0.0,
        }
    }

    /// Nonzero entries as `(channel, row, col)`.
    pub fn nonzeros(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(c, cell)| cell.map(|cell| (c, cell.row as usize, cell.col as usize)))
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.channels() * self.height * self.width];
        for (c, r, col) in self.nonzeros() {
            out[(c * self.height + r) * self.width + col] = 1.0;
        }
        out
    }
}
