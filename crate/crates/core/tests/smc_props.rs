use proptest::prelude::*;
use shieldrl_core::env::{enumerate_transitions, simulate_labels, ChainMdp, ChainSpec, Environment, LabelSet};
use shieldrl_core::logic::bounded_always;
use shieldrl_core::parse_state_formula;
use shieldrl_core::rng::{derive_seed, seeded};
use shieldrl_core::smc::{estimate_mu, exact_mu_table, required_samples, BoundSide, MarkovChain};

fn chain(stay: Vec<f64>) -> (ChainMdp, MarkovChain, Vec<LabelSet>) {
    let env = ChainMdp::new(ChainSpec::new(stay)).unwrap();
    let table = enumerate_transitions(&env);
    let mc = MarkovChain::from_policy(&table, |_| vec![1.0]).unwrap();
    let labels = (0..env.num_states()).map(|s| env.labels(s).clone()).collect();
    (env, mc, labels)
}

/// `∏` of stay probabilities along every path, summed: the chain only moves
/// forward, so `μ(0, n)` is the probability of not reaching the last state.
fn direct_mu(stay: &[f64], n: usize) -> f64 {
    // dist[i] = probability of being in state i after k steps.
    let mut dist = vec![0.0; stay.len() + 1];
    dist[0] = 1.0;
    for _ in 0..n {
        let mut next = vec![0.0; dist.len()];
        for (i, &p) in dist.iter().enumerate() {
            match stay.get(i) {
                Some(&q) => {
                    next[i] += p * q;
                    next[i + 1] += p * (1.0 - q);
                }
                None => next[i] += p,
            }
        }
        dist = next;
    }
    1.0 - dist[stay.len()]
}

proptest! {
    #[test]
    fn oracle_matches_direct_propagation(stay in prop::collection::vec(0.0f64..=1.0, 1..5), n in 0u64..12) {
        let (_, mc, labels) = chain(stay.clone());
        let phi = parse_state_formula("!unsafe").unwrap();
        let mu = exact_mu_table(&mc, &labels, &phi, n).unwrap()[0];
        prop_assert!((mu - direct_mu(&stay, n as usize)).abs() <= 1e-12);
    }

    #[test]
    fn mu_is_a_probability_and_nonincreasing_in_n(stay in prop::collection::vec(0.0f64..=1.0, 1..5)) {
        let (_, mc, labels) = chain(stay);
        let phi = parse_state_formula("!unsafe").unwrap();
        let mut prev = vec![1.0; labels.len()];
        for n in 0..15 {
            let mu = exact_mu_table(&mc, &labels, &phi, n).unwrap();
            for (s, (&m, &p)) in mu.iter().zip(&prev).enumerate() {
                prop_assert!((0.0..=1.0).contains(&m));
                prop_assert!(m <= p + 1e-15, "state {} n {}", s, n);
            }
            prev = mu;
        }
    }

    #[test]
    fn estimate_lies_in_unit_interval(seed in any::<u64>(), m in 1usize..60) {
        let (env, _, _) = chain(vec![0.7, 0.7]);
        let prop = bounded_always(3, parse_state_formula("!unsafe").unwrap());
        let mut rng = seeded(seed);
        let traces: Vec<_> = (0..m).map(|_| simulate_labels(&env, 0, 3, |_, _| 0, &mut rng).unwrap()).collect();
        let mu = estimate_mu(traces.iter(), &prop, m).unwrap();
        prop_assert!((0.0..=1.0).contains(&mu));
    }
}

#[test]
fn deterministic_enumeration_is_exact() {
    // Stay probabilities of 0 or 1 make every trace deterministic.
    for stay in [vec![0.0], vec![1.0], vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 0.0]] {
        let (env, mc, labels) = chain(stay);
        let phi = parse_state_formula("!unsafe").unwrap();
        for n in 0..6u64 {
            let trace = simulate_labels(&env, 0, n as usize, |_, _| 0, &mut seeded(0)).unwrap();
            let prop = bounded_always(n, phi.clone());
            let est = estimate_mu(std::iter::once(&trace), &prop, 1).unwrap();
            assert_eq!(est, exact_mu_table(&mc, &labels, &phi, n).unwrap()[0]);
        }
    }
}

#[test]
fn hoeffding_coverage_on_a_three_state_chain() {
    let stay = vec![0.8, 0.6];
    let (env, mc, labels) = chain(stay);
    let phi = parse_state_formula("!unsafe").unwrap();
    let n = 4u64;
    let mu = exact_mu_table(&mc, &labels, &phi, n).unwrap()[0];
    let (eps, delta, reps) = (0.1, 0.1, 500usize);
    let m = required_samples(eps, delta, BoundSide::TwoSided).unwrap();
    let prop = bounded_always(n, phi);
    let mut misses = 0;
    for r in 0..reps {
        let mut rng = seeded(derive_seed(11, r as u64));
        let traces: Vec<_> = (0..m)
            .map(|_| simulate_labels(&env, 0, n as usize, |_, _| 0, &mut rng).unwrap())
            .collect();
        if (estimate_mu(traces.iter(), &prop, m).unwrap() - mu).abs() > eps {
            misses += 1;
        }
    }
    let allowed = delta * reps as f64 + 3.0 * (delta * (1.0 - delta) * reps as f64).sqrt();
    assert!(misses as f64 <= allowed, "{misses} misses, allowed {allowed}");
}
