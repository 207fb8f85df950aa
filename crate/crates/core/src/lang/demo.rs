//! Shortest-path demonstrations for single-block tasks.

use std::collections::VecDeque;

use crate::env::{Action, BoardGeometry, Cell, Direction, WorldState};
use crate::error::{Error, Result};

/// An annotated execution: each state paired with the action taken in it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Execution {
    pub steps: Vec<(WorldState, Action)>,
}

impl Execution {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> impl Iterator<Item = Action> + '_ {
        self.steps.iter().map(|(_, a)| *a)
    }

    /// Rebuilds an execution by replaying `actions` from `start`. Fails if
    /// any action fails, if an action follows STOP, or if the last action is
    /// not STOP.
    pub fn replay(
        geometry: &BoardGeometry,
        start: &WorldState,
        actions: &[Action],
    ) -> Result<Self> {
        let mut steps = Vec::with_capacity(actions.len());
        let mut state = start.clone();
        for (j, &action) in actions.iter().enumerate() {
            if !action.is_selectable() {
                return Err(Error::InvalidAction(format!(
                    "step {}: NONE is not selectable",
                    j + 1
                )));
            }
            let result = geometry.apply(&state, action);
            if result.failed {
                return Err(Error::InvalidAction(format!(
                    "step {}: action {} fails",
                    j + 1,
                    action.describe(geometry)
                )));
            }
            if result.terminal && j + 1 != actions.len() {
                return Err(Error::InvalidAction(format!(
                    "step {}: STOP before the end",
                    j + 1
                )));
            }
            steps.push((state, action));
            state = result.next_state;
        }
        if actions.last() != Some(&Action::Stop) {
            return Err(Error::InvalidAction(
                "execution does not end with STOP".into(),
            ));
        }
        Ok(Self { steps })
    }

    /// State reached after the last action (STOP leaves it unchanged).
    pub fn final_state(&self) -> Option<&WorldState> {
        self.steps.last().map(|(s, _)| s)
    }
}

/// Minimum-length execution moving the single changed block from its start
/// cell to its goal cell, followed by STOP.
///
/// Among shortest paths, the one whose direction sequence is smallest under
/// N < S < E < W is returned.
pub fn make_demonstration(
    geometry: &BoardGeometry,
    start: &WorldState,
    goal: &WorldState,
) -> Result<Execution> {
    geometry.check_state(start)?;
    geometry.check_state(goal)?;
    if !start.same_present_set(goal) {
        return Err(Error::IncomparableStates(
            "start and goal differ in present blocks".into(),
        ));
    }
    let changed = start.changed_blocks(goal);
    let [block] = changed[..] else {
        return Err(Error::InvalidState(format!(
            "expected exactly one changed block, found {}",
            changed.len()
        )));
    };
    let from = start.position(block).expect("present");
    let to = goal.position(block).expect("present");

    let free =
        |cell: Cell| geometry.in_bounds(cell) && start.occupant(cell).is_none_or(|b| b == block);
    let dist = distances_to(geometry, to, free);
    if dist[cell_index(geometry, from)].is_none() {
        return Err(Error::NoPath);
    }

    let mut actions = Vec::new();
    let mut cell = from;
    while cell != to {
        let here = dist[cell_index(geometry, cell)].expect("reachable");
        let dir = Direction::ALL
            .into_iter()
            .find(|&d| {
                let next = cell.step(d);
                free(next) && dist[cell_index(geometry, next)] == Some(here - 1)
            })
            .expect("a neighbour one step closer exists");
        actions.push(Action::Move { block, dir });
        cell = cell.step(dir);
    }
    actions.push(Action::Stop);
    Execution::replay(geometry, start, &actions)
}

/// Breadth-first distances to `target` over cells accepted by `free`.
fn distances_to(
    geometry: &BoardGeometry,
    target: Cell,
    free: impl Fn(Cell) -> bool,
) -> Vec<Option<u32>> {
    let mut dist = vec![None; geometry.width() * geometry.height()];
    let mut queue = VecDeque::new();
    dist[cell_index(geometry, target)] = Some(0);
    queue.push_back(target);
    while let Some(cell) = queue.pop_front() {
        let d = dist[cell_index(geometry, cell)].expect("queued cells have distances");
        for dir in Direction::ALL {
            let next = cell.step(dir);
            if free(next) && dist[cell_index(geometry, next)].is_none() {
                dist[cell_index(geometry, next)] = Some(d + 1);
                queue.push_back(next);
            }
        }
    }
    dist
}

fn cell_index(geometry: &BoardGeometry, cell: Cell) -> usize {
    cell.row as usize * geometry.width() + cell.col as usize
}

/// Cells reachable by `block` from its current position, with their path
/// lengths. Used by the oracle planner to pick a fallback target.
pub fn reachable_cells(
    geometry: &BoardGeometry,
    state: &WorldState,
    block: usize,
) -> Vec<(Cell, u32)> {
    let Some(from) = state.position(block) else {
        return Vec::new();
    };
    let free =
        |cell: Cell| geometry.in_bounds(cell) && state.occupant(cell).is_none_or(|b| b == block);
    let dist = distances_to(geometry, from, free);
    let mut out = Vec::new();
    for row in 0..geometry.height() as i32 {
        for col in 0..geometry.width() as i32 {
            let cell = Cell::new(col, row);
            if let Some(d) = dist[cell_index(geometry, cell)] {
                out.push((cell, d));
            }
        }
    }
    out
}
