//! Task examples and the line-oriented corpus format.
//!
//! One JSON object per line:
//!
//! ```text
//! {"id":"x1","instruction":"move bmw 2 steps east","start":[["bmw",0,0]],"goal":[["bmw",2,0]],"demonstration":[["bmw","E"],["bmw","E"],[null,"STOP"]]}
//! ```
//!
//! `demonstration` is optional. Positions are listed in the geometry's block
//! order when written.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{states_equal_relaxed, Action, BoardGeometry, Cell, Direction, WorldState};
use crate::error::{Error, Result};
use crate::lang::demo::Execution;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskExample {
    pub id: String,
    pub instruction: String,
    pub start: WorldState,
    pub goal: WorldState,
    pub demonstration: Option<Execution>,
}

impl TaskExample {
    /// Checks the single-block and demonstration invariants.
    pub fn validate(&self, geometry: &BoardGeometry) -> Result<()> {
        let invalid = |message: String| Error::InvalidExample {
            id: self.id.clone(),
            message,
        };
        if self.instruction.trim().is_empty() {
            return Err(invalid("empty instruction".into()));
        }
        geometry
            .check_state(&self.start)
            .map_err(|e| invalid(format!("start: {e}")))?;
        geometry
            .check_state(&self.goal)
            .map_err(|e| invalid(format!("goal: {e}")))?;
        if !self.start.same_present_set(&self.goal) {
            return Err(invalid(
                "start and goal have different present blocks".into(),
            ));
        }
        match self.start.changed_blocks(&self.goal).len() {
            1 => {}
            0 => return Err(invalid("no block changes between start and goal".into())),
            n => {
                return Err(invalid(format!(
                    "{n} blocks change between start and goal; exactly one must move"
                )))
            }
        }
        if let Some(demo) = &self.demonstration {
            let Some((first, _)) = demo.steps.first() else {
                return Err(invalid("empty demonstration".into()));
            };
            if *first != self.start {
                return Err(invalid(
                    "demonstration does not begin at the start state".into(),
                ));
            }
            let actions: Vec<Action> = demo.actions().collect();
            let replayed = Execution::replay(geometry, &self.start, &actions)
                .map_err(|e| invalid(format!("demonstration: {e}")))?;
            if replayed != *demo {
                return Err(invalid(
                    "demonstration states do not follow the transitions".into(),
                ));
            }
            let end = demo.final_state().expect("nonempty");
            if !states_equal_relaxed(end, &self.goal)? {
                return Err(invalid("demonstration does not end at the goal".into()));
            }
        }
        Ok(())
    }

    pub fn moved_block(&self) -> usize {
        self.start.changed_blocks(&self.goal)[0]
    }

    pub fn to_record(&self, geometry: &BoardGeometry) -> CorpusRecord {
        let positions = |s: &WorldState| {
            s.positions()
                .iter()
                .enumerate()
                .filter_map(|(i, p)| p.map(|c| (geometry.block_name(i).to_string(), c.col, c.row)))
                .collect()
        };
        CorpusRecord {
            id: self.id.clone(),
            instruction: self.instruction.clone(),
            start: positions(&self.start),
            goal: positions(&self.goal),
            demonstration: self.demonstration.as_ref().map(|demo| {
                demo.actions()
                    .map(|a| match a {
                        Action::Move { block, dir } => (
                            Some(geometry.block_name(block).to_string()),
                            dir.code().to_string(),
                        ),
                        _ => (None, "STOP".to_string()),
                    })
                    .collect()
            }),
        }
    }
}

/// Serialized form of a [`TaskExample`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub instruction: String,
    pub start: Vec<(String, i32, i32)>,
    pub goal: Vec<(String, i32, i32)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demonstration: Option<Vec<(Option<String>, String)>>,
}

impl CorpusRecord {
    pub fn into_example(self, geometry: &BoardGeometry) -> Result<TaskExample> {
        let state = |entries: &[(String, i32, i32)]| -> Result<WorldState> {
            let mut state = WorldState::empty(geometry.num_blocks());
            for (id, col, row) in entries {
                let block = geometry
                    .block_index(id)
                    .ok_or_else(|| Error::InvalidState(format!("unknown block {id}")))?;
                if state.is_present(block) {
                    return Err(Error::InvalidState(format!("block {id} listed twice")));
                }
                state = state.with_block(block, Some(Cell::new(*col, *row)));
            }
            geometry.check_state(&state)?;
            Ok(state)
        };
        let start = state(&self.start)?;
        let goal = state(&self.goal)?;
        let demonstration = match self.demonstration {
            None => None,
            Some(entries) => {
                let mut actions = Vec::with_capacity(entries.len());
                for (block, code) in &entries {
                    let action = if code == "STOP" {
                        Action::Stop
                    } else {
                        let dir = Direction::from_code(code).ok_or_else(|| {
                            Error::InvalidAction(format!("unknown direction {code:?}"))
                        })?;
                        let id = block
                            .as_deref()
                            .ok_or_else(|| Error::InvalidAction("move without a block".into()))?;
                        let block = geometry
                            .block_index(id)
                            .ok_or_else(|| Error::InvalidAction(format!("unknown block {id}")))?;
                        Action::Move { block, dir }
                    };
                    actions.push(action);
                }
                Some(Execution::replay(geometry, &start, &actions)?)
            }
        };
        let example = TaskExample {
            id: self.id,
            instruction: self.instruction,
            start,
            goal,
            demonstration,
        };
        example.validate(geometry)?;
        Ok(example)
    }
}

/// Parses corpus text. Errors carry 1-based line numbers.
pub fn parse_corpus(text: &str, geometry: &BoardGeometry, path: &Path) -> Result<Vec<TaskExample>> {
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let example = record
            .into_example(geometry)
            .map_err(|e| Error::Validation {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
        examples.push(example);
    }
    Ok(examples)
}

pub fn load_corpus(path: impl AsRef<Path>, geometry: &BoardGeometry) -> Result<Vec<TaskExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_corpus(&text, geometry, path)
}

pub fn format_corpus(examples: &[TaskExample], geometry: &BoardGeometry) -> Result<String> {
    let mut out = String::new();
    for example in examples {
        out.push_str(&serde_json::to_string(&example.to_record(geometry))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_corpus(
    path: impl AsRef<Path>,
    examples: &[TaskExample],
    geometry: &BoardGeometry,
) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(format_corpus(examples, geometry)?.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geo() -> BoardGeometry {
        BoardGeometry::square(5, 3).unwrap()
    }

    const GOOD: &str = r#"{"id":"a","instruction":"move adidas two steps east","start":[["adidas",0,0],["bmw",4,4]],"goal":[["adidas",2,0],["bmw",4,4]],"demonstration":[["adidas","E"],["adidas","E"],[null,"STOP"]]}"#;

    #[test]
    fn single_record_loads() {
        let examples = parse_corpus(GOOD, &geo(), Path::new("t")).unwrap();
        assert_eq!(examples.len(), 1);
        assert_eq!(examples[0].demonstration.as_ref().unwrap().len(), 3);
        assert_eq!(examples[0].moved_block(), 0);
    }

    #[test]
    fn canonical_round_trip() {
        let g = geo();
        let examples = parse_corpus(GOOD, &g, Path::new("t")).unwrap();
        assert_eq!(format_corpus(&examples, &g).unwrap(), format!("{GOOD}\n"));
    }

    #[test]
    fn start_equal_goal_rejected() {
        let text =
            r#"{"id":"b","instruction":"stay","start":[["adidas",0,0]],"goal":[["adidas",0,0]]}"#;
        let err = parse_corpus(text, &geo(), Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::Validation { line: 1, .. }), "{err}");
        assert!(err.to_string().contains("no block changes"));
    }

    #[test]
    fn two_moved_blocks_rejected() {
        let text = format!(
            "{GOOD}\n{}",
            r#"{"id":"c","instruction":"swap","start":[["adidas",0,0],["bmw",4,4]],"goal":[["adidas",1,0],["bmw",3,4]]}"#
        );
        let err = parse_corpus(&text, &geo(), Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::Validation { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("exactly one must move"));
    }

    #[test]
    fn malformed_record_is_parse_error() {
        let err = parse_corpus("{\"id\": 3}", &geo(), Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn demonstration_must_reach_goal() {
        let text = r#"{"id":"d","instruction":"x","start":[["adidas",0,0]],"goal":[["adidas",2,0]],"demonstration":[["adidas","E"],[null,"STOP"]]}"#;
        assert!(parse_corpus(text, &geo(), Path::new("t")).is_err());
    }
}
