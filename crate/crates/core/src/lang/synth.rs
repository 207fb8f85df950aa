//! Seeded synthetic task generation.
//!
//! Two template families: relative placement ("place A one space east of B")
//! and displacement ("move A 3 steps north"). Goals are computed on the grid,
//! so every goal is exactly reachable.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{BoardGeometry, Cell, Direction, WorldState};
use crate::error::{Error, Result};
use crate::lang::corpus::TaskExample;
use crate::lang::demo::make_demonstration;
use crate::lang::vocab::{normalize, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateFamily {
    Relative,
    Displacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateSet {
    pub families: Vec<TemplateFamily>,
    /// Largest step count for displacement templates.
    pub max_displacement: usize,
    /// Reject tasks whose shortest path has fewer moves than this.
    pub min_moves: usize,
    /// Attempts per example before giving up.
    pub attempts_per_example: usize,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            families: vec![TemplateFamily::Relative, TemplateFamily::Displacement],
            max_displacement: 4,
            min_moves: 1,
            attempts_per_example: 1000,
        }
    }
}

const RELATIVE_TEMPLATES: [&str; 4] = [
    "place {a} one space {dir} of {b}",
    "put the {a} block just {dir} of the {b} block",
    "move {a} so that it sits directly {dir} of {b}",
    "slide the {a} to the {dir} side of {b}",
];

const DISPLACEMENT_TEMPLATES: [&str; 4] = [
    "move {a} {k} steps {dir}",
    "shift the {a} block {k} spaces to the {dir}",
    "push {a} {dir} by {k}",
    "slide the {a} block {k} squares {dir}",
];

const NUMBERS: [&str; 9] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

/// Every word the templates can produce for this geometry.
pub fn template_vocabulary(geometry: &BoardGeometry) -> Vocabulary {
    let mut vocab = Vocabulary::default();
    for template in RELATIVE_TEMPLATES.iter().chain(&DISPLACEMENT_TEMPLATES) {
        for word in normalize(template) {
            if !matches!(word.as_str(), "a" | "b" | "k" | "dir") {
                vocab.insert(&word);
            }
        }
    }
    for word in NUMBERS
        .iter()
        .copied()
        .chain(Direction::ALL.iter().map(|d| d.word()))
    {
        vocab.insert(word);
    }
    for id in geometry.block_ids() {
        vocab.insert(id);
    }
    vocab
}

pub fn generate_synthetic(
    seed: u64,
    count: usize,
    geometry: &BoardGeometry,
    templates: &TemplateSet,
) -> Result<Vec<TaskExample>> {
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    if templates.families.is_empty() {
        return Err(Error::Config("template set has no families".into()));
    }
    let n_blocks = geometry.num_blocks();
    if n_blocks == 0 || (n_blocks < 2 && templates.families == [TemplateFamily::Relative]) {
        return Err(Error::Config(
            "not enough blocks for the template set".into(),
        ));
    }
    if n_blocks > geometry.width() * geometry.height() {
        return Err(Error::Config("more blocks than cells".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut attempts = 0;
        let example = loop {
            if attempts == templates.attempts_per_example {
                return Err(Error::GenerationExhausted { attempts });
            }
            attempts += 1;
            if let Some(example) =
                sample_task(&mut rng, geometry, templates, format!("syn-{seed}-{i:05}"))
            {
                break example;
            }
        };
        out.push(example);
    }
    Ok(out)
}

fn sample_task(
    rng: &mut ChaCha8Rng,
    geometry: &BoardGeometry,
    templates: &TemplateSet,
    id: String,
) -> Option<TaskExample> {
    let start = random_state(rng, geometry);
    let family = *templates.families.choose(rng)?;
    let n_blocks = geometry.num_blocks();
    let block = rng.random_range(0..n_blocks);
    let dir = Direction::ALL[rng.random_range(0..4)];
    let from = start.position(block)?;
    let (goal_cell, instruction) = match family {
        TemplateFamily::Relative => {
            if n_blocks < 2 {
                return None;
            }
            let mut anchor = rng.random_range(0..n_blocks - 1);
            if anchor >= block {
                anchor += 1;
            }
            let (dc, dr) = dir.delta();
            let cell = start.position(anchor)?.offset(dc, dr);
            let template = RELATIVE_TEMPLATES.choose(rng)?;
            let text = template
                .replace("{a}", geometry.block_name(block))
                .replace("{b}", geometry.block_name(anchor))
                .replace("{dir}", dir.word());
            (cell, text)
        }
        TemplateFamily::Displacement => {
            let max = templates.max_displacement.clamp(1, NUMBERS.len());
            let k = rng.random_range(1..=max);
            let (dc, dr) = dir.delta();
            let cell = from.offset(dc * k as i32, dr * k as i32);
            let template = DISPLACEMENT_TEMPLATES.choose(rng)?;
            let text = template
                .replace("{a}", geometry.block_name(block))
                .replace("{k}", NUMBERS[k - 1])
                .replace("{dir}", dir.word());
            (cell, text)
        }
    };
    if !geometry.in_bounds(goal_cell) || goal_cell == from || start.occupant(goal_cell).is_some() {
        return None;
    }
    let goal = start.clone().with_block(block, Some(goal_cell));
    let demonstration = make_demonstration(geometry, &start, &goal).ok()?;
    if demonstration.len() - 1 < templates.min_moves {
        return None;
    }
    Some(TaskExample {
        id,
        instruction,
        start,
        goal,
        demonstration: Some(demonstration),
    })
}

/// All blocks present at distinct uniformly drawn cells.
fn random_state(rng: &mut ChaCha8Rng, geometry: &BoardGeometry) -> WorldState {
    let cells = geometry.width() * geometry.height();
    let picks = rand::seq::index::sample(rng, cells, geometry.num_blocks());
    let mut state = WorldState::empty(geometry.num_blocks());
    for (block, idx) in picks.into_iter().enumerate() {
        let cell = Cell::new(
            (idx % geometry.width()) as i32,
            (idx / geometry.width()) as i32,
        );
        state = state.with_block(block, Some(cell));
    }
    state
}

/// Seeded 70/10/20 train/validation/test split.
pub fn split_dataset(
    examples: &[TaskExample],
    seed: u64,
) -> (Vec<TaskExample>, Vec<TaskExample>, Vec<TaskExample>) {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = examples.len() * 7 / 10;
    let n_val = examples.len() / 10;
    let pick = |range: &[usize]| range.iter().map(|&i| examples[i].clone()).collect();
    (
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    )
}
