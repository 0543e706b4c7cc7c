use htmm::em::{e_step, m_step, Counts};
use htmm::hdp::{gibbs_sweep, init_state, HdpHypers};
use htmm::inference::{brute_force, log_likelihood, posteriors};
use htmm::model::{init_random, sample, Model, ModelKind};
use htmm::tree::{random_skeleton, Dataset, LabeledTree, Subtree};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
struct Case {
    kind: ModelKind,
    states: usize,
    labels: usize,
    max_outdegree: usize,
    seed: u64,
    concentration: f64,
    nodes: usize,
    branching: f64,
}

fn case() -> impl Strategy<Value = Case> {
    (
        prop_oneof![Just(ModelKind::Td), Just(ModelKind::Bu)],
        1usize..=3,
        1usize..=3,
        1usize..=3,
        any::<u64>(),
        0.3f64..3.0,
        1usize..=8,
        0.2f64..0.9,
    )
        .prop_map(
            |(kind, states, labels, max_outdegree, seed, concentration, nodes, branching)| Case {
                kind,
                states,
                labels,
                max_outdegree,
                seed,
                concentration,
                nodes,
                branching,
            },
        )
}

impl Case {
    fn model(&self) -> Model {
        init_random(
            self.kind,
            self.states,
            self.labels,
            self.max_outdegree,
            self.seed,
            self.concentration,
        )
        .unwrap()
    }

    fn trees(&self, model: &Model, n: usize) -> Vec<LabeledTree> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1));
        (0..n)
            .map(|_| {
                let skeleton = random_skeleton(&mut rng, self.nodes, self.max_outdegree, self.branching);
                sample(model, &skeleton, &mut rng).unwrap()
            })
            .collect()
    }
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn upward_matches_enumeration(c in case()) {
        let model = c.model();
        for tree in c.trees(&model, 2) {
            let exact = brute_force(&model, &tree).unwrap();
            let post = posteriors(&model, &tree).unwrap();
            prop_assert!(close(post.log_likelihood, exact.log_likelihood, 1e-8));
            let oracle = exact.posteriors.unwrap();
            for (a, b) in post.node_marginals.iter().flatten().zip(oracle.node_marginals.iter().flatten()) {
                prop_assert!((a - b).abs() < 1e-7);
            }
            prop_assert!(post.consistency_error(&tree) < 1e-9);
        }
    }

    #[test]
    fn expected_counts_have_exact_totals(c in case()) {
        let model = c.model();
        let ds = Dataset::new(c.trees(&model, 5), c.labels, c.max_outdegree).unwrap();
        let (counts, _) = e_step(&model, &ds).unwrap();
        let nodes = ds.node_count() as f64;
        let trees = ds.len() as f64;
        let tol = 1e-9 * nodes;
        match counts {
            Counts::Td(k) => {
                prop_assert!((k.emission.iter().flatten().sum::<f64>() - nodes).abs() < tol);
                prop_assert!((k.root.iter().sum::<f64>() - trees).abs() < tol);
                prop_assert!((k.transition.iter().flatten().sum::<f64>() - (nodes - trees)).abs() < tol);
            }
            Counts::Bu(k) => {
                let leaves: usize = ds.trees().iter().map(|t| t.leaves().count()).sum();
                let internal: usize = ds.trees().iter().map(|t| t.internal_count()).sum();
                prop_assert!((k.emission.iter().flatten().sum::<f64>() - nodes).abs() < tol);
                prop_assert!((k.leaf.iter().sum::<f64>() - leaves as f64).abs() < tol);
                prop_assert!((k.switch.iter().sum::<f64>() - internal as f64).abs() < tol);
                prop_assert!((k.occupied_sets.values().sum::<f64>() - internal as f64).abs() < tol);
            }
        }
    }

    #[test]
    fn unsmoothed_em_step_is_monotone(c in case(), init_seed in any::<u64>()) {
        let truth = c.model();
        let ds = Dataset::new(c.trees(&truth, 12), c.labels, c.max_outdegree).unwrap();
        let mut model = init_random(c.kind, c.states, c.labels, c.max_outdegree, init_seed, 1.0).unwrap();
        let (mut counts, mut ll) = e_step(&model, &ds).unwrap();
        for _ in 0..5 {
            model = m_step(&counts, 0.0).unwrap();
            let (next, next_ll) = e_step(&model, &ds).unwrap();
            prop_assert!(next_ll >= ll - 1e-8, "{} -> {}", ll, next_ll);
            counts = next;
            ll = next_ll;
        }
    }

    #[test]
    fn td_ignores_sibling_order(c in case()) {
        let c = Case { kind: ModelKind::Td, max_outdegree: 3, ..c };
        let model = c.model();
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let labels = c.labels;
        let leaf = |rng: &mut ChaCha8Rng| Subtree::leaf(rng.random_range(0..labels));
        let a = Subtree::new(rng.random_range(0..labels), vec![Some(leaf(&mut rng)), None, Some(leaf(&mut rng))]);
        let b = leaf(&mut rng);
        let root = rng.random_range(0..labels);
        let left = LabeledTree::from_subtree(&Subtree::new(root, vec![Some(a.clone()), Some(b.clone())]));
        let right = LabeledTree::from_subtree(&Subtree::new(root, vec![Some(b), None, Some(a)]));
        let x = log_likelihood(&model, &left).unwrap();
        let y = log_likelihood(&model, &right).unwrap();
        prop_assert!((x - y).abs() < 1e-10);
    }

    #[test]
    fn gibbs_states_stay_valid(seed in any::<u64>(), k in 1usize..6, gamma in 0.2f64..3.0, alpha in 0.2f64..3.0) {
        let truth = init_random(ModelKind::Bu, 2, 3, 2, seed, 1.0).unwrap();
        let c = Case {
            kind: ModelKind::Bu, states: 2, labels: 3, max_outdegree: 2, seed, concentration: 1.0, nodes: 6, branching: 0.6,
        };
        let ds = Dataset::new(c.trees(&truth, 6), 3, 2).unwrap();
        let hypers = HdpHypers {
            gamma,
            alpha_position: vec![alpha; 2],
            alpha_transition: alpha,
            truncation: k,
            ..HdpHypers::new(2)
        };
        let mut state = init_state(&ds, &hypers, seed).unwrap();
        for _ in 0..5 {
            gibbs_sweep(&mut state, &ds, &hypers).unwrap();
            state.check_invariants(&ds).unwrap();
            prop_assert!(state.joint_log_prob(&ds).unwrap().is_finite());
            prop_assert!(state.active_states() <= k);
        }
    }
}
