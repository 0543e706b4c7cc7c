//! Expectation maximization for finite TD and BU models.
//!
//! The E-step runs the upward-downward passes on every tree and sums the
//! posteriors into expected counts. The M-step renormalizes the counts, plus
//! an optional additive pseudocount, along each distribution's axis.
//!
//! The one non-closed-form update is the BU switch distribution: it is
//! renormalized over the occupied slots of each node, so nodes with fewer
//! than `L` children contribute `log(s_l / sum_{occupied} s)` to the expected
//! complete log-likelihood. That objective is maximized with a
//! minorize-maximize fixed point, `s_l <- c_l / sum_{sets containing l}
//! n_set / sum_{l' in set} s_l'`, which is exact in one step when every node
//! has all `L` slots occupied.

use std::collections::BTreeMap;
use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::posteriors;
use crate::model::{init_random, BuParams, Matrix, Model, ModelKind, TdParams};
use crate::tree::{Dataset, LabeledTree};

const CHUNK: usize = 16;
const SWITCH_MAX_ITERS: usize = 10_000;
const SWITCH_TOL: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the relative log-likelihood improvement drops below this.
    pub rel_tol: f64,
    /// Additive pseudocount applied in every M-step.
    pub smoothing: f64,
    pub seed: u64,
    pub init_concentration: f64,
    /// Independent initializations (seeds `seed`, `seed + 1`, ...); the run
    /// with the highest final log-likelihood wins.
    pub restarts: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 200,
            rel_tol: 1e-6,
            smoothing: 1e-6,
            seed: 0,
            init_concentration: 1.0,
            restarts: 1,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidParameter("rel_tol must be positive".into()));
        }
        if !(self.smoothing >= 0.0 && self.smoothing.is_finite()) {
            return Err(Error::InvalidParameter("smoothing must be non-negative".into()));
        }
        if !(self.init_concentration > 0.0 && self.init_concentration.is_finite()) {
            return Err(Error::InvalidParameter("init_concentration must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidParameter("restarts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Log-likelihood history of one EM run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmTrace {
    /// Log-likelihood of the initial parameters.
    pub initial_log_likelihood: f64,
    /// Log-likelihood after each EM iteration.
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
    /// Seed of the initialization this trace belongs to.
    pub seed: u64,
}

impl EmTrace {
    pub fn iterations(&self) -> usize {
        self.log_likelihoods.len()
    }

    pub fn final_log_likelihood(&self) -> f64 {
        self.log_likelihoods
            .last()
            .copied()
            .unwrap_or(self.initial_log_likelihood)
    }

    /// Largest drop between consecutive entries (0 when non-decreasing).
    pub fn max_decrease(&self) -> f64 {
        let mut prev = self.initial_log_likelihood;
        let mut worst: f64 = 0.0;
        for &ll in &self.log_likelihoods {
            worst = worst.max(prev - ll);
            prev = ll;
        }
        worst
    }

    /// `iteration,log_likelihood` rows; iteration 0 is the initialization.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "iteration,log_likelihood")?;
        writeln!(out, "0,{}", self.initial_log_likelihood)?;
        for (i, ll) in self.log_likelihoods.iter().enumerate() {
            writeln!(out, "{},{}", i + 1, ll)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdCounts {
    pub root: Vec<f64>,
    pub transition: Matrix,
    pub emission: Matrix,
    max_outdegree: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuCounts {
    pub leaf: Vec<f64>,
    /// `transition[l][i][j]`: expected number of times the child in slot `l`
    /// had state `j`, drove its parent's transition, and the parent had
    /// state `i`.
    pub transition: Vec<Matrix>,
    pub switch: Vec<f64>,
    /// Number of internal nodes per set of occupied slots.
    pub occupied_sets: BTreeMap<Vec<usize>, f64>,
    pub emission: Matrix,
}

/// Expected sufficient statistics accumulated by the E-step.
#[derive(Debug, Clone, PartialEq)]
pub enum Counts {
    Td(TdCounts),
    Bu(BuCounts),
}

fn add_vec(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn add_matrix(a: &mut Matrix, b: &Matrix) {
    for (x, y) in a.iter_mut().zip(b) {
        add_vec(x, y);
    }
}

impl Counts {
    pub fn zeros(model: &Model) -> Self {
        let (c, m, l) = (model.num_states(), model.num_labels(), model.max_outdegree());
        match model {
            Model::Td(_) => Counts::Td(TdCounts {
                root: vec![0.0; c],
                transition: vec![vec![0.0; c]; c],
                emission: vec![vec![0.0; m]; c],
                max_outdegree: l,
            }),
            Model::Bu(_) => Counts::Bu(BuCounts {
                leaf: vec![0.0; c],
                transition: vec![vec![vec![0.0; c]; c]; l],
                switch: vec![0.0; l],
                occupied_sets: BTreeMap::new(),
                emission: vec![vec![0.0; m]; c],
            }),
        }
    }

    /// Adds one tree's posteriors.
    pub fn accumulate(&mut self, model: &Model, tree: &LabeledTree) -> Result<f64> {
        let post = posteriors(model, tree)?;
        let eps = &post.node_marginals;
        match self {
            Counts::Td(k) => {
                add_vec(&mut k.root, &eps[0]);
                for u in 1..tree.len() {
                    add_matrix(&mut k.transition, post.parent_pairs[u].as_ref().unwrap());
                }
                add_emissions(&mut k.emission, tree, eps);
            }
            Counts::Bu(k) => {
                for u in 0..tree.len() {
                    if tree.is_leaf(u) {
                        add_vec(&mut k.leaf, &eps[u]);
                        continue;
                    }
                    for (slot, zeta) in &post.switch_triples[u] {
                        add_matrix(&mut k.transition[*slot], zeta);
                        k.switch[*slot] += zeta.iter().flatten().sum::<f64>();
                    }
                    let set: Vec<usize> = tree.occupied(u).map(|(l, _)| l).collect();
                    *k.occupied_sets.entry(set).or_insert(0.0) += 1.0;
                }
                add_emissions(&mut k.emission, tree, eps);
            }
        }
        Ok(post.log_likelihood)
    }

    pub fn merge(&mut self, other: &Counts) -> Result<()> {
        match (self, other) {
            (Counts::Td(a), Counts::Td(b)) => {
                add_vec(&mut a.root, &b.root);
                add_matrix(&mut a.transition, &b.transition);
                add_matrix(&mut a.emission, &b.emission);
            }
            (Counts::Bu(a), Counts::Bu(b)) => {
                add_vec(&mut a.leaf, &b.leaf);
                for (x, y) in a.transition.iter_mut().zip(&b.transition) {
                    add_matrix(x, y);
                }
                add_vec(&mut a.switch, &b.switch);
                for (set, n) in &b.occupied_sets {
                    *a.occupied_sets.entry(set.clone()).or_insert(0.0) += n;
                }
                add_matrix(&mut a.emission, &b.emission);
            }
            _ => return Err(Error::Dimension("cannot merge TD and BU counts".into())),
        }
        Ok(())
    }

    fn all_values(&self) -> Vec<f64> {
        match self {
            Counts::Td(k) => k
                .root
                .iter()
                .chain(k.transition.iter().flatten())
                .chain(k.emission.iter().flatten())
                .copied()
                .collect(),
            Counts::Bu(k) => k
                .leaf
                .iter()
                .chain(k.transition.iter().flatten().flatten())
                .chain(&k.switch)
                .chain(k.emission.iter().flatten())
                .copied()
                .collect(),
        }
    }
}

fn add_emissions(emission: &mut Matrix, tree: &LabeledTree, eps: &Matrix) {
    for u in 0..tree.len() {
        let x = tree.label(u);
        for (row, p) in emission.iter_mut().zip(&eps[u]) {
            row[x] += p;
        }
    }
}

/// Expected counts under `model` and the total log-likelihood of the data.
///
/// Trees are processed in parallel in fixed-size chunks that are merged in
/// dataset order, so the result is identical for any thread count.
pub fn e_step(model: &Model, dataset: &Dataset) -> Result<(Counts, f64)> {
    if dataset.alphabet_size() > model.num_labels() {
        return Err(Error::Dimension(format!(
            "dataset alphabet size {} exceeds model's M={}",
            dataset.alphabet_size(),
            model.num_labels()
        )));
    }
    let partials = dataset
        .trees()
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut counts = Counts::zeros(model);
            let mut ll = 0.0;
            for tree in chunk {
                ll += counts.accumulate(model, tree)?;
            }
            Ok((counts, ll))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = Counts::zeros(model);
    let mut ll = 0.0;
    for (counts, part) in &partials {
        total.merge(counts)?;
        ll += part;
    }
    Ok((total, ll))
}

fn normalize_smoothed(counts: &[f64], smoothing: f64) -> Vec<f64> {
    let total: f64 = counts.iter().map(|c| c + smoothing).sum();
    if total > 0.0 {
        counts.iter().map(|c| (c + smoothing) / total).collect()
    } else {
        vec![1.0 / counts.len() as f64; counts.len()]
    }
}

/// Maximizes `sum_l c_l log s_l - sum_sets n_set log(sum_{l in set} s_l)`
/// over the simplex.
fn maximize_switch(counts: &[f64], sets: &BTreeMap<Vec<usize>, f64>, smoothing: f64) -> Vec<f64> {
    let l = counts.len();
    let c: Vec<f64> = counts.iter().map(|x| x + smoothing).collect();
    let mut sets: Vec<(Vec<usize>, f64)> = sets.iter().map(|(k, v)| (k.clone(), *v)).collect();
    if smoothing > 0.0 {
        // Pseudocounts behave like extra nodes with every slot occupied.
        sets.push(((0..l).collect(), smoothing * l as f64));
    }
    let mut s = normalize_smoothed(counts, smoothing);
    for _ in 0..SWITCH_MAX_ITERS {
        let mut exposure = vec![0.0; l];
        for (set, n) in &sets {
            let mass: f64 = set.iter().map(|&k| s[k]).sum();
            if mass > 0.0 {
                for &k in set {
                    exposure[k] += n / mass;
                }
            }
        }
        let mut next: Vec<f64> = (0..l)
            .map(|k| if exposure[k] > 0.0 { c[k] / exposure[k] } else { s[k] })
            .collect();
        let total: f64 = next.iter().sum();
        if !(total > 0.0) {
            return s;
        }
        next.iter_mut().for_each(|x| *x /= total);
        let delta = next.iter().zip(&s).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        s = next;
        if delta < SWITCH_TOL {
            break;
        }
    }
    s
}

/// New parameters from expected counts.
///
/// Each distribution is `(counts + smoothing)` normalized; a distribution
/// whose counts are all zero with zero smoothing becomes uniform.
pub fn m_step(counts: &Counts, smoothing: f64) -> Result<Model> {
    if !(smoothing >= 0.0) {
        return Err(Error::InvalidParameter("smoothing must be non-negative".into()));
    }
    if let Some(x) = counts.all_values().into_iter().find(|x| !(*x >= 0.0)) {
        return Err(Error::Numerical(format!("invalid expected count {x}")));
    }
    let model = match counts {
        Counts::Td(k) => Model::Td(TdParams {
            num_states: k.root.len(),
            num_labels: k.emission[0].len(),
            max_outdegree: k.max_outdegree,
            root_prior: normalize_smoothed(&k.root, smoothing),
            transition: k.transition.iter().map(|r| normalize_smoothed(r, smoothing)).collect(),
            emission: k.emission.iter().map(|r| normalize_smoothed(r, smoothing)).collect(),
        }),
        Counts::Bu(k) => {
            let c = k.leaf.len();
            let transition = k
                .transition
                .iter()
                .map(|t| {
                    let mut out = vec![vec![0.0; c]; c];
                    for j in 0..c {
                        let column: Vec<f64> = t.iter().map(|row| row[j]).collect();
                        for (i, p) in normalize_smoothed(&column, smoothing).into_iter().enumerate() {
                            out[i][j] = p;
                        }
                    }
                    out
                })
                .collect();
            Model::Bu(BuParams {
                num_states: c,
                num_labels: k.emission[0].len(),
                max_outdegree: k.switch.len(),
                leaf_prior: normalize_smoothed(&k.leaf, smoothing),
                transition,
                switch: maximize_switch(&k.switch, &k.occupied_sets, smoothing),
                emission: k.emission.iter().map(|r| normalize_smoothed(r, smoothing)).collect(),
            })
        }
    };
    model.validate()?;
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub model: Model,
    pub trace: EmTrace,
}

impl Fit {
    pub fn log_likelihood(&self) -> f64 {
        self.trace.best_log_likelihood()
    }
}

impl EmTrace {
    fn best_log_likelihood(&self) -> f64 {
        self.log_likelihoods
            .iter()
            .copied()
            .fold(self.initial_log_likelihood, f64::max)
    }
}

/// Trains a `num_states`-state model of the given kind on `dataset`.
pub fn fit(kind: ModelKind, dataset: &Dataset, num_states: usize, config: &EmConfig) -> Result<Fit> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut best: Option<Fit> = None;
    for r in 0..config.restarts {
        let seed = config.seed.wrapping_add(r as u64);
        let run = fit_once(kind, dataset, num_states, config, seed)?;
        if best.as_ref().is_none_or(|b| run.log_likelihood() > b.log_likelihood()) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn fit_once(kind: ModelKind, dataset: &Dataset, num_states: usize, config: &EmConfig, seed: u64) -> Result<Fit> {
    let mut model = init_random(
        kind,
        num_states,
        dataset.alphabet_size(),
        dataset.max_outdegree(),
        seed,
        config.init_concentration,
    )?;
    let (mut counts, mut ll) = e_step(&model, dataset)?;
    let mut trace = EmTrace {
        initial_log_likelihood: ll,
        log_likelihoods: Vec::new(),
        converged: false,
        seed,
    };
    let mut best = (model.clone(), ll);
    for _ in 0..config.max_iters {
        model = m_step(&counts, config.smoothing)?;
        let (next_counts, next_ll) = e_step(&model, dataset)?;
        if !next_ll.is_finite() {
            return Err(Error::Numerical(format!("log-likelihood became {next_ll}")));
        }
        trace.log_likelihoods.push(next_ll);
        if next_ll >= best.1 {
            best = (model.clone(), next_ll);
        }
        let improvement = (next_ll - ll) / ll.abs().max(f64::MIN_POSITIVE);
        counts = next_counts;
        ll = next_ll;
        if improvement < config.rel_tol {
            trace.converged = true;
            break;
        }
    }
    Ok(Fit { model: best.0, trace })
}
