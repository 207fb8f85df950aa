//! Problem reward and the two potential-based shaping terms.
//!
//! `F1` rewards progress toward the goal through the potential
//! `phi1(s) = -eta * dist(s, goal)`. `F2` is look-back advice built on the
//! demonstration: `phi2(s, a)` is 1 when `s` is within one block width of its
//! closest demonstration state and `a` is the action taken there, and
//! `-delta_f` otherwise. Both terms use a discount of 1.

pub mod checker;

use serde::{Deserialize, Serialize};

use crate::env::{state_distance, states_equal_relaxed, Action, StepResult, WorldState};
use crate::error::{Error, Result};
use crate::lang::Execution;

pub use checker::{check_shaping_safety, OrderReport, Potential, SmallMdp};

/// Reward penalties and shaping switches shared by every example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardParams {
    pub delta: f64,
    pub delta_f: f64,
    pub eta: f64,
    pub enable_f1: bool,
    pub enable_f2: bool,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            delta: 0.02,
            delta_f: 0.02,
            eta: 1.0,
            enable_f1: true,
            enable_f2: true,
        }
    }
}

/// Per-example reward definition.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSpec {
    pub goal: WorldState,
    pub demonstration: Option<Execution>,
    pub delta: f64,
    pub delta_f: f64,
    pub eta: f64,
    pub enable_f1: bool,
    pub enable_f2: bool,
}

impl RewardSpec {
    pub fn new(
        goal: WorldState,
        demonstration: Option<Execution>,
        params: RewardParams,
    ) -> Result<Self> {
        let spec = Self {
            goal,
            demonstration,
            delta: params.delta,
            delta_f: params.delta_f,
            eta: params.eta,
            enable_f1: params.enable_f1,
            enable_f2: params.enable_f2,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta_f >= 0.0) {
            return Err(Error::Config("reward penalties must be nonnegative".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config("eta must be positive".into()));
        }
        if self.enable_f2 && self.demonstration.is_none() {
            return Err(Error::Config("F2 shaping requires a demonstration".into()));
        }
        Ok(())
    }
}

/// The transition a shaped reward is computed for, with its predecessor.
/// At the first step `prev_action` is [`Action::None`].
#[derive(Debug, Clone, Copy)]
pub struct ShapingInputs<'a> {
    pub prev_state: &'a WorldState,
    pub prev_action: Action,
    pub state: &'a WorldState,
    pub action: Action,
    pub next_state: &'a WorldState,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RewardBreakdown {
    pub problem: f64,
    pub f1: f64,
    pub f2: f64,
    pub total: f64,
}

pub fn problem_reward(
    spec: &RewardSpec,
    state: &WorldState,
    action: Action,
    step: &StepResult,
) -> Result<f64> {
    Ok(match action {
        Action::Stop if states_equal_relaxed(state, &spec.goal)? => 1.0,
        Action::Stop => -1.0,
        _ if step.failed => -1.0,
        _ => -spec.delta,
    })
}

pub fn phi1(spec: &RewardSpec, state: &WorldState) -> Result<f64> {
    Ok(-spec.eta * state_distance(state, &spec.goal)?)
}

pub fn f1(spec: &RewardSpec, state: &WorldState, next_state: &WorldState) -> Result<f64> {
    Ok(phi1(spec, next_state)? - phi1(spec, state)?)
}

pub fn phi2(spec: &RewardSpec, state: &WorldState, action: Action) -> Result<f64> {
    let demo = spec
        .demonstration
        .as_ref()
        .ok_or_else(|| Error::MissingDemonstration("phi2".into()))?;
    let mut closest: Option<(f64, Action)> = None;
    for (demo_state, demo_action) in &demo.steps {
        let d = state_distance(demo_state, state)?;
        // strict comparison keeps the earliest index on ties
        if closest.is_none_or(|(best, _)| d < best) {
            closest = Some((d, *demo_action));
        }
    }
    Ok(match closest {
        Some((d, a)) if spec.eta * d < 1.0 && a == action => 1.0,
        _ => -spec.delta_f,
    })
}

pub fn f2(spec: &RewardSpec, inputs: &ShapingInputs<'_>) -> Result<f64> {
    Ok(phi2(spec, inputs.state, inputs.action)?
        - phi2(spec, inputs.prev_state, inputs.prev_action)?)
}

pub fn shaped_reward_breakdown(
    spec: &RewardSpec,
    inputs: &ShapingInputs<'_>,
    step: &StepResult,
) -> Result<RewardBreakdown> {
    let problem = problem_reward(spec, inputs.state, inputs.action, step)?;
    let f1 = if spec.enable_f1 {
        f1(spec, inputs.state, inputs.next_state)?
    } else {
        0.0
    };
    let f2 = if spec.enable_f2 {
        f2(spec, inputs)?
    } else {
        0.0
    };
    Ok(RewardBreakdown {
        problem,
        f1,
        f2,
        total: problem + f1 + f2,
    })
}

pub fn shaped_reward(
    spec: &RewardSpec,
    inputs: &ShapingInputs<'_>,
    step: &StepResult,
) -> Result<f64> {
    Ok(shaped_reward_breakdown(spec, inputs, step)?.total)
}
