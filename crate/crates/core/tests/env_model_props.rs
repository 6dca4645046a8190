use proptest::prelude::*;
use rand::Rng;
use shieldrl_core::agent::Policy;
use shieldrl_core::env::{
    enumerate_transitions, ActionId, Cell, ChainMdp, ChainSpec, ConveyorSpec, ConveyorWorld, Environment, StateId,
};
use shieldrl_core::model::{CostLabeller, CostPrior, TabularWorldModel, TransitionRecord};
use shieldrl_core::parse_state_formula;
use shieldrl_core::rng::seeded;

fn conveyor(slip: f64) -> ConveyorWorld {
    ConveyorWorld::new(ConveyorSpec::default().with_slip(slip)).unwrap()
}

/// Always plays the action listed for the current state.
struct Scripted(Vec<ActionId>, usize);

impl Policy for Scripted {
    fn num_actions(&self) -> usize {
        self.1
    }

    fn probabilities_into(&self, state: StateId, out: &mut [f64]) {
        out.fill(0.0);
        out[self.0[state]] = 1.0;
    }
}

#[test]
fn rows_are_distributions() {
    for slip in [0.0, 0.1, 0.3, 0.9] {
        assert!(enumerate_transitions(&conveyor(slip)).max_row_error() <= 1e-12);
    }
    let chain = ChainMdp::new(ChainSpec::new(vec![0.9, 0.5, 0.0, 1.0])).unwrap();
    assert!(enumerate_transitions(&chain).max_row_error() <= 1e-12);
}

#[test]
fn empirical_frequencies_within_three_sigma() {
    let env = conveyor(0.1);
    let table = enumerate_transitions(&env);
    let mut rng = seeded(17);
    let n = 100_000usize;
    let pairs = [(0, 0), (0, 3), (8, 1), (24, 2), (40, 3), (15, 4)];
    for (s, a) in pairs {
        let mut counts = vec![0usize; env.num_states()];
        for _ in 0..n {
            counts[env.step(s, a, &mut rng).unwrap().state] += 1;
        }
        for (next, &c) in counts.iter().enumerate() {
            let p = table.prob(s, a, next);
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            let freq = c as f64 / n as f64;
            assert!((freq - p).abs() <= 3.0 * sigma + 1e-12, "({s},{a})->{next}: {freq} vs {p}");
        }
    }
}

#[test]
fn belt_always_ends_in_acid() {
    let env = conveyor(0.0);
    let acid = env.state_of(env.spec().acid);
    let belt: Vec<StateId> = env.spec().belt.iter().map(|&c| env.state_of(c)).collect();
    // Every action sequence of belt length from every belt cell.
    let na = env.num_actions();
    let len = belt.len();
    for &start in &belt {
        for code in 0..na.pow(len as u32) {
            let mut s = start;
            let mut c = code;
            let mut reached = false;
            for _ in 0..len {
                let a = c % na;
                c /= na;
                let row = enumerate_transitions(&env).row(s, a).to_vec();
                assert_eq!(row.len(), 1);
                s = row[0].next;
                if s == acid {
                    reached = true;
                    break;
                }
            }
            assert!(reached, "from {start} with code {code}");
        }
    }
}

#[test]
fn model_converges_to_true_dynamics() {
    let env = conveyor(0.1);
    let table = enumerate_transitions(&env);
    let labeller = CostLabeller::new(parse_state_formula("!acid").unwrap(), 1.0, 0.999).unwrap();
    let mut model = TabularWorldModel::new(env.num_states(), env.num_actions(), 0.999, 1.0, CostPrior::Optimistic).unwrap();
    let mut rng = seeded(3);
    let n = 100_000;
    let (s, a) = (env.state_of(Cell::new(2, 3)), 3);
    for _ in 0..n {
        let next = env.step(s, a, &mut rng).unwrap();
        model
            .observe(&TransitionRecord {
                state: s,
                action: a,
                reward: next.reward,
                cost: labeller.cost(&next.labels),
                safety_discount: labeller.safety_discount(&next.labels),
                next_state: next.state,
                terminal: next.terminal,
            })
            .unwrap();
    }
    let pred = model.predict(s, a).unwrap();
    assert!((pred.next.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() <= 1e-12);
    for next in 0..env.num_states() {
        let p = table.prob(s, a, next);
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((model.transition_prob(s, a, next) - p).abs() <= 3.0 * sigma + 1e-12);
    }
}

/// Feeds every transition of a deterministic world to a fresh model once.
fn exact_model(env: &ConveyorWorld) -> TabularWorldModel {
    let labeller = CostLabeller::new(parse_state_formula("!acid").unwrap(), 1.0, 0.999).unwrap();
    let table = enumerate_transitions(env);
    let mut model = TabularWorldModel::new(env.num_states(), env.num_actions(), 0.999, 1.0, CostPrior::Optimistic).unwrap();
    for s in (0..env.num_states()).filter(|&s| !env.is_terminal(s)) {
        for a in 0..env.num_actions() {
            let t = table.row(s, a)[0];
            let labels = env.labels(t.next);
            model
                .observe(&TransitionRecord {
                    state: s,
                    action: a,
                    reward: t.reward,
                    cost: labeller.cost(labels),
                    safety_discount: labeller.safety_discount(labels),
                    next_state: t.next,
                    terminal: env.is_terminal(t.next),
                })
                .unwrap();
        }
    }
    model
}

proptest! {
    #[test]
    fn converged_rollouts_replay_the_real_environment(
        actions in prop::collection::vec(0usize..5, 49),
        start in 0usize..49,
        horizon in 1usize..20,
    ) {
        let env = conveyor(0.0);
        prop_assume!(!env.is_terminal(start));
        let model = exact_model(&env);
        let policy = Scripted(actions.clone(), 5);
        let trace = model.rollout(&policy, start, horizon, &mut seeded(0));
        let mut s = start;
        let mut rng = seeded(1);
        for (t, step) in trace.steps.iter().enumerate() {
            prop_assert_eq!(step.state, s);
            prop_assert_eq!(step.action, actions[s]);
            if env.is_terminal(s) {
                prop_assert!(trace.terminated);
                prop_assert_eq!(t + 1, trace.len());
                break;
            }
            s = env.step(s, actions[s], &mut rng).unwrap().state;
        }
        if !trace.terminated {
            prop_assert_eq!(trace.len(), horizon);
        }
    }

    #[test]
    fn cost_and_safety_discount_stay_in_range(
        records in prop::collection::vec((0usize..6, 0usize..2, 0usize..6, any::<bool>(), any::<bool>()), 0..200),
        pessimistic in any::<bool>(),
    ) {
        let (c, gamma) = (2.5, 0.95);
        let prior = if pessimistic { CostPrior::Pessimistic } else { CostPrior::Optimistic };
        let mut model = TabularWorldModel::new(6, 2, gamma, c, prior).unwrap();
        // Violation status is a fixed function of the state, as with noise-free labels.
        let violating = |s: StateId| s % 3 == 0;
        for (s, a, next, terminal, _) in records {
            let v = violating(next);
            model.observe(&TransitionRecord {
                state: s,
                action: a,
                reward: 0.0,
                cost: if v { c } else { 0.0 },
                safety_discount: if v { 0.0 } else { gamma },
                next_state: next,
                terminal,
            }).unwrap();
        }
        for s in 0..6 {
            let (cost, sd) = (model.cost(s), model.safety_discount(s));
            prop_assert!((0.0..=c).contains(&cost));
            prop_assert!((0.0..=gamma).contains(&sd));
            prop_assert_eq!(cost == c, sd == 0.0);
        }
    }
}

#[test]
fn uniform_random_walk_from_start_is_reproducible() {
    let env = conveyor(0.1);
    let run = |seed| {
        let mut rng = seeded(seed);
        let mut s = env.reset(&mut rng).state;
        let mut out = vec![s];
        while !env.is_terminal(s) && out.len() < 200 {
            let a = rng.gen_range(0..env.num_actions());
            s = env.step(s, a, &mut rng).unwrap().state;
            out.push(s);
        }
        out
    };
    assert_eq!(run(9), run(9));
}
