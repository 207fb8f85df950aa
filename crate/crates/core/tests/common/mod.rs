#![allow(dead_code)]

use blocks_core::env::{Action, BoardGeometry, Cell, Direction, WorldState};
use blocks_core::eval::Task;
use blocks_core::lang::{
    generate_synthetic, template_vocabulary, Instruction, TemplateFamily, TemplateSet, Vocabulary,
};
use blocks_core::learn::TrainData;
use blocks_core::policy::{AgentContext, ModelDims, NetShape, ParamSet, PolicyParams};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const FD_STEP: f64 = 1e-5;
/// Entries whose gradients are both below this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

pub fn random_state(rng: &mut impl Rng, g: &BoardGeometry) -> WorldState {
    let cells = sample(rng, g.width() * g.height(), g.num_blocks());
    let positions = cells
        .into_iter()
        .map(|i| Some(Cell::new((i % g.width()) as i32, (i / g.width()) as i32)))
        .collect();
    WorldState::from_positions(g, positions).unwrap()
}

pub fn random_action(rng: &mut impl Rng, g: &BoardGeometry) -> Action {
    g.action_from_index(rng.random_range(0..g.num_actions()))
}

/// Random context: random boards in each slot (leading slots sometimes empty),
/// random tokens and previous action.
pub fn random_context(
    rng: &mut impl Rng,
    g: &BoardGeometry,
    vocab_size: usize,
    history: usize,
) -> AgentContext {
    let empty_slots = rng.random_range(0..=history);
    let observations = (0..=history)
        .map(|i| {
            if i < empty_slots {
                g.empty_observation()
            } else {
                g.render(&random_state(rng, g)).unwrap()
            }
        })
        .collect();
    let n_tokens = rng.random_range(1..=6);
    let tokens = (0..n_tokens)
        .map(|_| rng.random_range(0..vocab_size))
        .collect();
    let prev_action = match rng.random_range(0..4) {
        0 => Action::None,
        1 => Action::Stop,
        _ => Action::Move {
            block: rng.random_range(0..g.num_blocks()),
            dir: Direction::ALL[rng.random_range(0..4)],
        },
    };
    AgentContext {
        instruction: Instruction {
            tokens,
            raw: String::new(),
        },
        observations,
        prev_action,
    }
}

pub fn shape(g: &BoardGeometry, vocab_size: usize, history: usize, dims: ModelDims) -> NetShape {
    NetShape {
        vocab_size,
        n_blocks: g.num_blocks(),
        height: g.height(),
        width: g.width(),
        history,
        dims,
    }
}

/// Adds N(0, scale^2) noise to every parameter so that biases are nonzero
/// and the heads are far from uniform.
pub fn perturb<P: ParamSet>(params: &mut P, scale: f64, rng: &mut impl Rng) {
    let noise = Normal::new(0.0, scale).unwrap();
    for (_, t) in params.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|x| *x += noise.sample(rng));
    }
}

pub fn objective(
    params: &PolicyParams,
    ctx: &AgentContext,
    action: Action,
    w_logp: f64,
    w_ent: f64,
) -> f64 {
    let dist = params.action_distribution(ctx).unwrap();
    let lp = if w_logp != 0.0 {
        dist.log_prob(action).unwrap()
    } else {
        0.0
    };
    w_logp * lp + w_ent * dist.entropy()
}

/// Worst relative error between the analytic gradient and central
/// differences, over up to `per_tensor` random entries of every tensor.
pub fn max_gradient_error(
    params: &PolicyParams,
    ctx: &AgentContext,
    action: Action,
    w_logp: f64,
    w_ent: f64,
    per_tensor: usize,
    rng: &mut impl Rng,
) -> (f64, String) {
    let trace = params.forward(ctx).unwrap();
    let grads = params.gradient(&trace, action, w_logp, w_ent).unwrap();
    let mut worst = (0.0, String::new());
    let names: Vec<(String, usize)> = params
        .tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.len()))
        .collect();
    for (ti, (name, len)) in names.iter().enumerate() {
        let picks: Vec<usize> = if *len <= per_tensor {
            (0..*len).collect()
        } else {
            sample(rng, *len, per_tensor).into_vec()
        };
        for i in picks {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].1.data_mut()[i] += FD_STEP;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].1.data_mut()[i] -= FD_STEP;
            let numeric = (objective(&plus, ctx, action, w_logp, w_ent)
                - objective(&minus, ctx, action, w_logp, w_ent))
                / (2.0 * FD_STEP);
            let analytic = grads.tensors()[ti].1.data()[i];
            let e = rel_err(analytic, numeric);
            if e > worst.0 {
                worst = (
                    e,
                    format!("{name}[{i}] analytic {analytic} numeric {numeric}"),
                );
            }
        }
    }
    worst
}

/// Seeded synthetic suite on a 5x5 board with three blocks: displacement
/// instructions of at least three moves, 200 training and 50 test tasks.
pub struct Suite {
    pub geometry: BoardGeometry,
    pub vocab: Vocabulary,
    pub train: Vec<Task>,
    pub test: Vec<Task>,
}

impl Suite {
    pub fn new(seed: u64) -> Self {
        Self::sized(seed, 200, 50)
    }

    pub fn sized(seed: u64, n_train: usize, n_test: usize) -> Self {
        let geometry = BoardGeometry::square(5, 3).unwrap();
        let vocab = template_vocabulary(&geometry);
        let templates = TemplateSet {
            families: vec![TemplateFamily::Displacement],
            min_moves: 3,
            ..TemplateSet::default()
        };
        let examples = generate_synthetic(seed, n_train + n_test, &geometry, &templates).unwrap();
        let mut tasks = Task::from_examples(&examples, &vocab);
        let test = tasks.split_off(n_train);
        Self {
            geometry,
            vocab,
            train: tasks,
            test,
        }
    }

    pub fn data(&self) -> TrainData<'_> {
        TrainData {
            geometry: &self.geometry,
            vocab: &self.vocab,
            train: &self.train,
            monitor: &self.test,
        }
    }

    pub fn mean_demo_len(&self) -> f64 {
        let all: Vec<&Task> = self.train.iter().chain(&self.test).collect();
        all.iter()
            .map(|t| t.demonstration.as_ref().unwrap().len() as f64)
            .sum::<f64>()
            / all.len() as f64
    }
}

/// Shortest number of unit moves taking `block` from its start cell to its
/// goal cell, treating every other present block as a wall. Plain BFS over
/// the cell grid, sharing nothing with the demonstration planner.
pub fn bfs_oracle(
    g: &BoardGeometry,
    start: &WorldState,
    goal: &WorldState,
    block: usize,
) -> Option<usize> {
    let (w, h) = (g.width() as i32, g.height() as i32);
    let index = |c: Cell| (c.row * w + c.col) as usize;
    let mut blocked = vec![false; (w * h) as usize];
    for (i, pos) in start.positions().iter().enumerate() {
        if let (Some(c), true) = (pos, i != block) {
            blocked[index(*c)] = true;
        }
    }
    let from = start.position(block)?;
    let to = goal.position(block)?;
    let mut dist = vec![usize::MAX; (w * h) as usize];
    dist[index(from)] = 0;
    let mut queue = std::collections::VecDeque::from([from]);
    while let Some(c) = queue.pop_front() {
        if c == to {
            return Some(dist[index(c)]);
        }
        for (dc, dr) in [(0, 1), (1, 0), (0, -1), (-1, 0)] {
            let n = Cell::new(c.col + dc, c.row + dr);
            if n.col < 0 || n.row < 0 || n.col >= w || n.row >= h {
                continue;
            }
            let k = index(n);
            if !blocked[k] && dist[k] == usize::MAX {
                dist[k] = dist[index(c)] + 1;
                queue.push_back(n);
            }
        }
    }
    None
}

/// Random board of side up to `max_side` with up to `max_blocks` blocks,
/// and a goal that moves one block to another free cell. The goal may be
/// unreachable.
pub fn random_board_task(
    rng: &mut impl Rng,
    max_side: usize,
    max_blocks: usize,
) -> (BoardGeometry, WorldState, WorldState, usize) {
    loop {
        let w = rng.random_range(2..=max_side);
        let h = rng.random_range(2..=max_side);
        let n = rng.random_range(1..=max_blocks.min(w * h - 1));
        let g = BoardGeometry::new(
            w,
            h,
            BoardGeometry::standard(n).unwrap().block_ids().to_vec(),
        )
        .unwrap();
        let start = random_state(rng, &g);
        let block = rng.random_range(0..n);
        let free: Vec<usize> = (0..w * h)
            .filter(|&i| {
                start
                    .occupant(Cell::new((i % w) as i32, (i / w) as i32))
                    .is_none()
            })
            .collect();
        if free.is_empty() {
            continue;
        }
        let i = free[rng.random_range(0..free.len())];
        let goal = start
            .clone()
            .with_block(block, Some(Cell::new((i % w) as i32, (i / w) as i32)));
        return (g, start, goal, block);
    }
}
