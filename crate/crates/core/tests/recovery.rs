//! Generate-and-refit experiments.

use htmm::em::{fit, EmConfig};
use htmm::hdp::{predictive_score, run_chains, ChainConfig, HdpHypers};
use htmm::inference::score_dataset;
use htmm::model::{sample, BuParams, Model, ModelKind, TdParams};
use htmm::tree::{random_skeleton, Dataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn generate(model: &Model, trees: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = model.max_outdegree();
    let trees = (0..trees)
        .map(|_| {
            let skeleton = random_skeleton(&mut rng, 10, l, 0.6);
            sample(model, &skeleton, &mut rng).unwrap()
        })
        .collect();
    Dataset::new(trees, model.num_labels(), l).unwrap()
}

fn td_truth() -> Model {
    Model::Td(TdParams {
        num_states: 2,
        num_labels: 3,
        max_outdegree: 2,
        root_prior: vec![0.7, 0.3],
        transition: vec![vec![0.8, 0.2], vec![0.3, 0.7]],
        emission: vec![vec![0.8, 0.15, 0.05], vec![0.1, 0.2, 0.7]],
    })
}

fn bu_truth() -> Model {
    Model::Bu(BuParams {
        num_states: 2,
        num_labels: 3,
        max_outdegree: 2,
        leaf_prior: vec![0.8, 0.2],
        transition: vec![
            vec![vec![0.1, 0.7], vec![0.9, 0.3]],
            vec![vec![0.6, 0.2], vec![0.4, 0.8]],
        ],
        switch: vec![0.4, 0.6],
        emission: vec![vec![0.8, 0.15, 0.05], vec![0.1, 0.2, 0.7]],
    })
}

#[test]
fn em_refit_matches_generating_model_on_held_out_data() {
    for (truth, seed) in [(td_truth(), 1), (bu_truth(), 2)] {
        let data = generate(&truth, 500, seed);
        let (train, test) = data.split_at(400);
        let config = EmConfig {
            restarts: 3,
            seed,
            ..EmConfig::default()
        };
        let fitted = fit(truth.kind(), &train, 2, &config).unwrap();
        let ours = score_dataset(&fitted.model, &test).unwrap().total;
        let reference = score_dataset(&truth, &test).unwrap().total;
        assert!(
            (ours - reference).abs() <= 0.05 * reference.abs(),
            "{}: fitted {ours} vs generating {reference}",
            truth.kind()
        );
        assert!(fitted.trace.max_decrease() < 1e-6);
    }
}

#[test]
fn td_cannot_fit_position_dependent_data_as_well_as_bu() {
    let data = generate(&bu_truth(), 500, 5);
    let (train, test) = data.split_at(400);
    let config = EmConfig {
        restarts: 2,
        ..EmConfig::default()
    };
    let td = fit(ModelKind::Td, &train, 2, &config).unwrap();
    let bu = fit(ModelKind::Bu, &train, 2, &config).unwrap();
    let score = |m: &Model| score_dataset(m, &test).unwrap().total;
    assert!(score(&bu.model) > score(&td.model));
}

#[test]
fn hdp_predictive_score_tracks_generating_model() {
    let truth = bu_truth();
    let data = generate(&truth, 250, 9);
    let (train, test) = data.split_at(150);
    let hypers = HdpHypers {
        truncation: 10,
        emission_base: 1.0,
        ..HdpHypers::new(2)
    };
    let chains = run_chains(&train, &hypers, &ChainConfig::new(400, 200, 20, 3), 2).unwrap();
    let samples: Vec<_> = chains.iter().flat_map(|c| c.samples.iter().cloned()).collect();
    let ours: f64 = test
        .trees()
        .iter()
        .map(|t| predictive_score(&samples, t).unwrap())
        .sum();
    let reference = score_dataset(&truth, &test).unwrap().total;
    assert!(
        (ours - reference).abs() <= 0.10 * reference.abs(),
        "predictive {ours} vs generating {reference}"
    );
}
