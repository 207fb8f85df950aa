mod common;

use blocks_core::env::{state_distance, states_equal_relaxed, Action, BoardGeometry, WorldState};
use blocks_core::eval::{run_episode, EvalSettings, RandomAgent, SuiteReport, Task};
use blocks_core::lang::vocab::normalize;
use blocks_core::lang::{
    format_corpus, generate_synthetic, make_demonstration, parse_corpus, template_vocabulary,
    tokenize, TemplateSet,
};
use blocks_core::policy::{ActionDistribution, AgentContext, ModelDims, PolicyParams};
use blocks_core::reward::{
    phi1, phi2, problem_reward, shaped_reward_breakdown, RewardParams, RewardSpec, ShapingInputs,
};
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn board(rng: &mut impl Rng) -> BoardGeometry {
    let w = rng.random_range(1..=8);
    let h = rng.random_range(1..=8);
    let n = rng.random_range(0..=5.min(w * h));
    BoardGeometry::new(
        w,
        h,
        BoardGeometry::standard(n).unwrap().block_ids().to_vec(),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn apply_is_pure_and_conserves_blocks(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = board(&mut rng);
        let s = random_state(&mut rng, &g);
        let a = random_action(&mut rng, &g);
        let first = g.apply(&s, a);
        prop_assert_eq!(&first, &g.apply(&s, a));
        prop_assert_eq!(first.next_state.num_present(), s.num_present());
        if first.failed {
            prop_assert_eq!(&first.next_state, &s);
            prop_assert_eq!(g.apply(&first.next_state, a), first);
        }
    }

    #[test]
    fn distance_is_a_metric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = board(&mut rng);
        let [a, b, c] = [0; 3].map(|_| random_state(&mut rng, &g));
        let ab = state_distance(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(state_distance(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(ab, state_distance(&b, &a).unwrap());
        let ac = state_distance(&a, &c).unwrap();
        let cb = state_distance(&c, &b).unwrap();
        prop_assert!(ab <= ac + cb + 1e-12);
        prop_assert_eq!(states_equal_relaxed(&a, &b).unwrap(), ab < 1.0);
    }

    #[test]
    fn render_is_injective(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = board(&mut rng);
        let a = random_state(&mut rng, &g);
        let b = if rng.random_bool(0.3) { a.clone() } else { random_state(&mut rng, &g) };
        prop_assert_eq!(g.render(&a).unwrap() == g.render(&b).unwrap(), a == b);
    }

    #[test]
    fn demonstrations_are_shortest_and_replay_cleanly(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, start, goal, block) = random_board_task(&mut rng, 10, 5);
        match (make_demonstration(&g, &start, &goal), bfs_oracle(&g, &start, &goal, block)) {
            (Ok(demo), Some(len)) => {
                prop_assert_eq!(demo.len(), len + 1);
                let mut state = start.clone();
                for (j, (s, a)) in demo.steps.iter().enumerate() {
                    prop_assert_eq!(s, &state);
                    let step = g.apply(&state, *a);
                    prop_assert!(!step.failed);
                    prop_assert_eq!(step.terminal, j + 1 == demo.len());
                    if let Action::Move { block: b, .. } = a {
                        prop_assert_eq!(*b, block);
                    }
                    state = step.next_state;
                }
                prop_assert_eq!(state, goal);
            }
            (Err(_), None) => {}
            (demo, oracle) => prop_assert!(false, "planner {:?} vs oracle {:?}", demo.map(|d| d.len()), oracle),
        }
    }

    #[test]
    fn tokenize_is_idempotent_on_normalized_text(raw in "[A-Za-z ,.!?'-]{0,40}") {
        let g = BoardGeometry::standard(20).unwrap();
        let vocab = template_vocabulary(&g);
        let once = normalize(&raw).join(" ");
        prop_assert_eq!(normalize(&once).join(" "), once.clone());
        prop_assert_eq!(tokenize(&raw, &vocab).tokens, tokenize(&once, &vocab).tokens);
    }

    #[test]
    fn heads_are_normalized_and_shift_invariant(
        blocks in prop::collection::vec(-30.0f64..30.0, 1..21),
        dirs in prop::collection::vec(-30.0f64..30.0, 5),
        c in -100.0f64..100.0,
    ) {
        let d = ActionDistribution::from_logits(&blocks, &dirs).unwrap();
        prop_assert!((d.block_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!((d.dir_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let shift = |v: &[f64]| v.iter().map(|x| x + c).collect::<Vec<_>>();
        let shifted = ActionDistribution::from_logits(&shift(&blocks), &dirs).unwrap();
        for (p, q) in d.block_probs.iter().zip(&shifted.block_probs) {
            prop_assert!((p - q).abs() < 1e-12);
        }
        let shifted = ActionDistribution::from_logits(&blocks, &shift(&dirs)).unwrap();
        for (p, q) in d.dir_probs.iter().zip(&shifted.dir_probs) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}

/// Random rollout with per-step shaping inputs, as the trainers build them.
fn trajectory_rewards(
    rng: &mut impl Rng,
    g: &BoardGeometry,
    spec: &RewardSpec,
    start: &WorldState,
) -> (f64, f64, f64, f64) {
    let (mut sum_f1, mut sum_f2) = (0.0, 0.0);
    let (mut prev_state, mut prev_action) = (start.clone(), Action::None);
    let mut state = start.clone();
    let len = rng.random_range(1..=40);
    let mut last = (start.clone(), Action::None);
    for _ in 0..len {
        let action = if rng.random_bool(0.05) {
            Action::Stop
        } else {
            random_action(rng, g)
        };
        let step = g.apply(&state, action);
        let inputs = ShapingInputs {
            prev_state: &prev_state,
            prev_action,
            state: &state,
            action,
            next_state: &step.next_state,
        };
        let r = shaped_reward_breakdown(spec, &inputs, &step).unwrap();
        sum_f1 += r.f1;
        sum_f2 += r.f2;
        last = (state.clone(), action);
        if step.terminal {
            break;
        }
        prev_state = std::mem::replace(&mut state, step.next_state);
        prev_action = action;
    }
    let end = g.apply(&last.0, last.1).next_state;
    let f1_closed = phi1(spec, &end).unwrap() - phi1(spec, start).unwrap();
    let f2_closed = phi2(spec, &last.0, last.1).unwrap() - phi2(spec, start, Action::None).unwrap();
    (sum_f1, f1_closed, sum_f2, f2_closed)
}

fn demo_spec(rng: &mut impl Rng) -> (BoardGeometry, RewardSpec, WorldState) {
    loop {
        let (g, start, goal, _) = random_board_task(rng, 8, 4);
        if let Ok(demo) = make_demonstration(&g, &start, &goal) {
            let spec = RewardSpec::new(goal, Some(demo), RewardParams::default()).unwrap();
            return (g, spec, start);
        }
    }
}

proptest! {
    #[test]
    fn shaping_terms_telescope(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, spec, start) = demo_spec(&mut rng);
        let (f1, f1_closed, f2, f2_closed) = trajectory_rewards(&mut rng, &g, &spec, &start);
        prop_assert!((f1 - f1_closed).abs() < 1e-12, "{} vs {}", f1, f1_closed);
        prop_assert!((f2 - f2_closed).abs() < 1e-12, "{} vs {}", f2, f2_closed);
    }

    #[test]
    fn rewards_are_bounded_and_goal_is_unique(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, spec, _) = demo_spec(&mut rng);
        let state = if rng.random_bool(0.2) { spec.goal.clone() } else { random_state(&mut rng, &g) };
        let prev = random_state(&mut rng, &g);
        let action = random_action(&mut rng, &g);
        let prev_action = random_action(&mut rng, &g);
        let step = g.apply(&state, action);
        let problem = problem_reward(&spec, &state, action, &step).unwrap();
        prop_assert!([1.0, -1.0, -spec.delta].contains(&problem));
        prop_assert_eq!(
            problem == 1.0,
            action == Action::Stop && states_equal_relaxed(&state, &spec.goal).unwrap()
        );
        let inputs = ShapingInputs { prev_state: &prev, prev_action, state: &state, action, next_state: &step.next_state };
        let r = shaped_reward_breakdown(&spec, &inputs, &step).unwrap();
        let diameter = ((g.width().pow(2) + g.height().pow(2)) as f64).sqrt() * g.num_blocks() as f64;
        prop_assert!(r.total.abs() <= 1.0 + spec.eta * diameter + 1.0 + spec.delta_f);
    }
}

#[test]
fn generated_examples_round_trip_through_the_corpus_format() {
    let g = BoardGeometry::square(10, 5).unwrap();
    let examples = generate_synthetic(7, 1000, &g, &TemplateSet::default()).unwrap();
    let text = format_corpus(&examples, &g).unwrap();
    let loaded = parse_corpus(&text, &g, std::path::Path::new("generated")).unwrap();
    assert_eq!(loaded, examples);
    assert_eq!(format_corpus(&loaded, &g).unwrap(), text);
}

#[test]
fn demonstration_endpoints_meet_relaxed_goal() {
    let g = BoardGeometry::square(5, 3).unwrap();
    for ex in generate_synthetic(3, 300, &g, &TemplateSet::default()).unwrap() {
        let demo = ex.demonstration.as_ref().unwrap();
        let (last, action) = demo.steps.last().unwrap();
        assert_eq!(*action, Action::Stop);
        assert!(states_equal_relaxed(last, &ex.goal).unwrap(), "{}", ex.id);
    }
}

#[test]
fn sampling_frequencies_match_probabilities() {
    let d =
        ActionDistribution::from_logits(&[0.3, -1.0, 1.2], &[0.5, 0.0, -0.7, 1.0, 0.2]).unwrap();
    let g = BoardGeometry::square(5, 3).unwrap();
    let mut counts = vec![0usize; g.num_actions()];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    for _ in 0..n {
        counts[g.action_index(d.sample(&mut rng)).unwrap()] += 1;
    }
    for (i, &c) in counts.iter().enumerate() {
        let p = d.prob(g.action_from_index(i)).unwrap();
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (c as f64 - n as f64 * p).abs() <= 3.0 * sigma,
            "action {i}: {c} draws, expected {}",
            n as f64 * p
        );
    }
}

#[test]
fn forward_pass_is_bit_reproducible() {
    let g = BoardGeometry::square(5, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = PolicyParams::init(shape(&g, 12, 2, ModelDims::desk()), &mut rng).unwrap();
    for _ in 0..20 {
        let ctx: AgentContext = random_context(&mut rng, &g, 12, 2);
        let a = params.action_distribution(&ctx).unwrap();
        let b = params.action_distribution(&ctx).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn reports_are_consistent_with_their_episodes() {
    let g = BoardGeometry::square(5, 3).unwrap();
    let vocab = template_vocabulary(&g);
    let examples = generate_synthetic(2, 60, &g, &TemplateSet::default()).unwrap();
    let tasks = Task::from_examples(&examples, &vocab);
    let settings = EvalSettings {
        horizon: 12,
        ..EvalSettings::default()
    };
    let mut episodes = Vec::new();
    for task in &tasks {
        let (report, steps) = run_episode(&RandomAgent, &g, task, &settings, None).unwrap();
        assert!(report.min_distance <= report.final_error);
        assert_eq!(report.steps, steps.len());
        assert_eq!(
            report.hit_horizon,
            steps.len() == settings.horizon && steps.last().unwrap().action != Action::Stop
        );
        episodes.push(report);
    }
    let suite = SuiteReport::from_episodes(episodes.clone());
    let n = episodes.len() as f64;
    let mean_error = episodes.iter().map(|e| e.final_error).sum::<f64>() / n;
    assert_eq!(suite.mean_error, mean_error);
    let completed = episodes.iter().filter(|e| e.completed).count() as f64;
    assert_eq!(suite.completion_rate, completed / n);
    let mut sorted: Vec<f64> = episodes.iter().map(|e| e.final_error).collect();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(suite.median_error, sorted[(sorted.len() - 1) / 2]);
}
