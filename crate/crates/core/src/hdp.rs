//! Infinite bottom-up model under a truncated HDP prior.
//!
//! The generative hierarchy, truncated at `K` states:
//!
//! ```text
//! beta         ~ GEM(gamma)                    (stick-breaking, K sticks)
//! beta_l       ~ Dirichlet(alpha_l * beta)     one per position l
//! pi[j][l]     ~ Dirichlet(alpha_t * beta_l)   parent state given child state j in slot l
//! leaf_prior   ~ Dirichlet(alpha_t * beta)
//! sigma[k]     ~ Dirichlet(emission_base)      symmetric over M labels
//! phi          ~ Dirichlet(alpha_s)            symmetric over L slots
//! ```
//!
//! Trees are then generated as in the finite BU model with `pi`, `leaf_prior`,
//! `sigma` and `phi` in place of the finite parameters.
//!
//! Inference is blocked Gibbs sampling over node states, switch positions and
//! parameters. A sweep
//!
//! 1. visits each node bottom-up and draws its state jointly with its switch
//!    position, conditioned on its children, its parent and the parameters;
//! 2. redraws every switch position given the states;
//! 3. redraws `beta`, `beta_l`, `pi`, `leaf_prior` and `sigma` given the
//!    assignments. Table counts are drawn from the Chinese restaurant
//!    distribution to integrate out `pi` and `leaf_prior` when updating `beta_l`
//!    and `beta`;
//! 4. updates `phi` with an independence Metropolis-Hastings step whose proposal
//!    is its posterior when every node has all `L` slots occupied.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::upward_bu;
use crate::math::{
    check_simplex, ln_vec, log_add, log_mean_exp, log_sum_exp, sample_categorical, sample_dirichlet,
    sample_log_categorical, sample_log_gamma, sample_table_count,
};
use crate::model::{complete_log_prob_bu, BuParams, Model};
use crate::tree::{Dataset, LabeledTree};

/// Hyperparameters of the truncated HDP prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdpHypers {
    /// Top-level stick-breaking concentration.
    pub gamma: f64,
    /// Per-position concentration, one per slot.
    pub alpha_position: Vec<f64>,
    /// Concentration of transition rows and the leaf prior around `beta_l` / `beta`.
    pub alpha_transition: f64,
    pub alpha_switch: f64,
    /// Symmetric Dirichlet concentration of emission rows.
    pub emission_base: f64,
    /// Truncation level `K`.
    pub truncation: usize,
}

impl HdpHypers {
    /// Unit concentrations, emission base 0.5 and `K = 20`.
    pub fn new(max_outdegree: usize) -> Self {
        HdpHypers {
            gamma: 1.0,
            alpha_position: vec![1.0; max_outdegree],
            alpha_transition: 1.0,
            alpha_switch: 1.0,
            emission_base: 0.5,
            truncation: 20,
        }
    }

    pub fn validate(&self, max_outdegree: usize) -> Result<()> {
        let positive = |x: f64, name: &str| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive, got {x}")))
            }
        };
        positive(self.gamma, "gamma")?;
        positive(self.alpha_transition, "alpha_transition")?;
        positive(self.alpha_switch, "alpha_switch")?;
        positive(self.emission_base, "emission_base")?;
        if self.alpha_position.len() != max_outdegree {
            return Err(Error::Dimension(format!(
                "alpha_position has {} entries, expected L={max_outdegree}",
                self.alpha_position.len()
            )));
        }
        for &a in &self.alpha_position {
            positive(a, "alpha_position")?;
        }
        if self.truncation == 0 {
            return Err(Error::InvalidParameter("truncation must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parameters of one truncated iBU model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdpParams {
    pub beta: Vec<f64>,
    /// `beta_position[l]`: position-level weights.
    pub beta_position: Vec<Vec<f64>>,
    /// `transition[j][l]`: distribution of the parent state given that the
    /// child in slot `l` has state `j`.
    pub transition: Vec<Vec<Vec<f64>>>,
    pub emission: Vec<Vec<f64>>,
    pub switch: Vec<f64>,
    pub leaf_prior: Vec<f64>,
}

impl HdpParams {
    pub fn truncation(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_simplex(&self.beta, "beta")?;
        for (l, b) in self.beta_position.iter().enumerate() {
            check_simplex(b, &format!("beta_position[{l}]"))?;
        }
        for (j, rows) in self.transition.iter().enumerate() {
            for (l, row) in rows.iter().enumerate() {
                check_simplex(row, &format!("transition[{j}][{l}]"))?;
            }
        }
        for (k, row) in self.emission.iter().enumerate() {
            check_simplex(row, &format!("emission[{k}]"))?;
        }
        check_simplex(&self.switch, "switch")?;
        check_simplex(&self.leaf_prior, "leaf_prior")
    }

    /// The same parameters as a finite BU model with `K` states.
    pub fn to_bu_params(&self) -> BuParams {
        let k = self.truncation();
        let l = self.switch.len();
        let transition = (0..l)
            .map(|slot| {
                (0..k)
                    .map(|i| (0..k).map(|j| self.transition[j][slot][i]).collect())
                    .collect()
            })
            .collect();
        BuParams {
            num_states: k,
            num_labels: self.emission[0].len(),
            max_outdegree: l,
            leaf_prior: self.leaf_prior.clone(),
            transition,
            switch: self.switch.clone(),
            emission: self.emission.clone(),
        }
    }
}

/// Draws `K` stick weights with `v_k ~ Beta(a_k, b_k)`; the last weight takes
/// whatever is left.
fn stick_breaking<R: Rng + ?Sized>(
    rng: &mut R,
    k: usize,
    mut shapes: impl FnMut(usize) -> (f64, f64),
) -> Result<Vec<f64>> {
    let mut weights = Vec::with_capacity(k);
    let mut log_rest = 0.0;
    for i in 0..k - 1 {
        let (a, b) = shapes(i);
        let x = sample_log_gamma(rng, a)?;
        let y = sample_log_gamma(rng, b)?;
        let norm = log_add(x, y);
        weights.push((log_rest + x - norm).exp());
        log_rest += y - norm;
    }
    let assigned: f64 = weights.iter().sum();
    weights.push((1.0 - assigned).max(0.0));
    Ok(weights)
}

/// Truncated GEM(gamma) draw of length `k`.
pub fn sample_gem<R: Rng + ?Sized>(gamma: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("truncation must be at least 1".into()));
    }
    stick_breaking(rng, k, |_| (1.0, gamma))
}

/// Finite weak-limit DP draw: `Dirichlet(alpha * base)`.
pub fn sample_dp_weak_limit<R: Rng + ?Sized>(alpha: f64, base: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
    }
    check_simplex(base, "base measure")?;
    let scaled: Vec<f64> = base.iter().map(|b| alpha * b).collect();
    sample_dirichlet(rng, &scaled)
}

/// Draws a full parameter set from the prior.
pub fn sample_prior<R: Rng + ?Sized>(
    hypers: &HdpHypers,
    num_labels: usize,
    max_outdegree: usize,
    rng: &mut R,
) -> Result<HdpParams> {
    hypers.validate(max_outdegree)?;
    let k = hypers.truncation;
    let beta = sample_gem(hypers.gamma, k, rng)?;
    let beta_position = hypers
        .alpha_position
        .iter()
        .map(|&a| sample_dp_weak_limit(a, &beta, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut transition = Vec::with_capacity(k);
    for _ in 0..k {
        transition.push(
            beta_position
                .iter()
                .map(|b| sample_dp_weak_limit(hypers.alpha_transition, b, rng))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let leaf_prior = sample_dp_weak_limit(hypers.alpha_transition, &beta, rng)?;
    let emission = (0..k)
        .map(|_| sample_dirichlet(rng, &vec![hypers.emission_base; num_labels]))
        .collect::<Result<Vec<_>>>()?;
    let switch = sample_dirichlet(rng, &vec![hypers.alpha_switch; max_outdegree])?;
    Ok(HdpParams {
        beta,
        beta_position,
        transition,
        emission,
        switch,
        leaf_prior,
    })
}

/// Parameters plus per-node assignments of one Gibbs chain.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    pub params: HdpParams,
    /// `states[t][u]`: state of node `u` of tree `t`.
    pub states: Vec<Vec<usize>>,
    /// `switches[t][u]`: switch position of internal nodes, `None` for leaves.
    pub switches: Vec<Vec<Option<usize>>>,
    /// Completed sweeps.
    pub sweeps: usize,
    pub seed: u64,
    pub stream: u64,
    pub assignment_move: AssignmentMove,
    rng: ChaCha8Rng,
}

/// How [`GibbsState::sweep_assignments`] redraws states and switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignmentMove {
    /// All states and switches of a tree in one joint draw.
    #[default]
    Tree,
    /// One node at a time.
    Node,
}

impl fmt::Display for AssignmentMove {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AssignmentMove::Tree => "tree",
            AssignmentMove::Node => "node",
        })
    }
}

impl FromStr for AssignmentMove {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tree" => Ok(AssignmentMove::Tree),
            "node" => Ok(AssignmentMove::Node),
            other => Err(Error::InvalidParameter(format!(
                "unknown assignment move {other:?}, expected \"tree\" or \"node\""
            ))),
        }
    }
}

fn chain_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Initial state on RNG stream 0.
pub fn init_state(dataset: &Dataset, hypers: &HdpHypers, seed: u64) -> Result<GibbsState> {
    init_state_on_stream(dataset, hypers, seed, 0)
}

/// Parameters from the prior, assignments uniform over the first
/// `min(K, 10)` states and uniform switches, followed by one parameter update
/// given those assignments so that every used parameter entry is positive.
pub fn init_state_on_stream(dataset: &Dataset, hypers: &HdpHypers, seed: u64, stream: u64) -> Result<GibbsState> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = chain_rng(seed, stream);
    let params = sample_prior(hypers, dataset.alphabet_size(), dataset.max_outdegree(), &mut rng)?;
    let mut state = GibbsState::with_params(dataset, params, rng, seed, stream, 10)?;
    state.resample_parameters(dataset, hypers)?;
    state.check_invariants(dataset)?;
    Ok(state)
}

impl GibbsState {
    /// State with the given parameters and random assignments; parameters are
    /// left untouched until [`GibbsState::resample_parameters`] is called.
    pub fn from_params(dataset: &Dataset, params: HdpParams, seed: u64, stream: u64) -> Result<Self> {
        params.validate()?;
        Self::with_params(dataset, params, chain_rng(seed, stream), seed, stream, usize::MAX)
    }

    fn with_params(
        dataset: &Dataset,
        params: HdpParams,
        mut rng: ChaCha8Rng,
        seed: u64,
        stream: u64,
        init_states: usize,
    ) -> Result<Self> {
        let k = params.truncation();
        if params.switch.len() != dataset.max_outdegree() || params.emission[0].len() != dataset.alphabet_size() {
            return Err(Error::Dimension("parameters do not match the dataset's M and L".into()));
        }
        let init_states = init_states.min(k);
        let mut states = Vec::with_capacity(dataset.len());
        let mut switches = Vec::with_capacity(dataset.len());
        for tree in dataset.trees() {
            states.push((0..tree.len()).map(|_| rng.random_range(0..init_states)).collect());
            switches.push(
                (0..tree.len())
                    .map(|u| {
                        let slots: Vec<usize> = tree.occupied(u).map(|(l, _)| l).collect();
                        (!slots.is_empty()).then(|| slots[rng.random_range(0..slots.len())])
                    })
                    .collect(),
            );
        }
        Ok(GibbsState {
            params,
            states,
            switches,
            sweeps: 0,
            seed,
            stream,
            assignment_move: AssignmentMove::default(),
            rng,
        })
    }

    pub fn truncation(&self) -> usize {
        self.params.truncation()
    }

    /// Number of distinct states assigned to at least one node.
    pub fn active_states(&self) -> usize {
        self.state_usage().iter().filter(|&&n| n > 0).count()
    }

    /// Number of nodes assigned to each state.
    pub fn state_usage(&self) -> Vec<usize> {
        let mut usage = vec![0; self.truncation()];
        for &q in self.states.iter().flatten() {
            usage[q] += 1;
        }
        usage
    }

    pub fn to_bu_params(&self) -> BuParams {
        self.params.to_bu_params()
    }

    /// `log p(labels, states, switches | parameters)` summed over trees.
    pub fn joint_log_prob(&self, dataset: &Dataset) -> Result<f64> {
        let params = self.to_bu_params();
        let mut total = 0.0;
        for (t, tree) in dataset.trees().iter().enumerate() {
            total += complete_log_prob_bu(&params, tree, &self.states[t], &self.switches[t])?;
        }
        Ok(total)
    }

    pub fn check_invariants(&self, dataset: &Dataset) -> Result<()> {
        self.params
            .validate()
            .map_err(|e| Error::Numerical(format!("sampler produced invalid parameters: {e}")))?;
        let k = self.truncation();
        for (t, tree) in dataset.trees().iter().enumerate() {
            for u in 0..tree.len() {
                if self.states[t][u] >= k {
                    return Err(Error::Numerical(format!("tree {t} node {u} has state >= K")));
                }
                let ok = match self.switches[t][u] {
                    None => tree.is_leaf(u),
                    Some(l) => tree.child_at(u, l).is_some(),
                };
                if !ok {
                    return Err(Error::Numerical(format!("tree {t} node {u} has an invalid switch")));
                }
            }
        }
        Ok(())
    }

    /// Redraws every node state and switch with the parameters held fixed.
    pub fn sweep_assignments(&mut self, dataset: &Dataset) -> Result<()> {
        match self.assignment_move {
            AssignmentMove::Tree => self.sweep_trees(dataset),
            AssignmentMove::Node => self.sweep_nodes(dataset),
        }
    }

    /// Draws all states and switches of each tree jointly: a scaled upward
    /// pass, then top-down sampling.
    fn sweep_trees(&mut self, dataset: &Dataset) -> Result<()> {
        let k = self.truncation();
        let p = &self.params;
        let mut weights = Vec::new();
        let mut candidates = Vec::new();
        for (t, tree) in dataset.trees().iter().enumerate() {
            let n = tree.len();
            // up[u] is proportional to P(Q_u, labels in the subtree of u).
            let mut up = vec![vec![0.0; k]; n];
            for u in (0..n).rev() {
                let x = tree.label(u);
                let mut row = vec![0.0; k];
                if tree.is_leaf(u) {
                    for (i, r) in row.iter_mut().enumerate() {
                        *r = p.leaf_prior[i] * p.emission[i][x];
                    }
                } else {
                    let total: f64 = tree.occupied(u).map(|(l, _)| p.switch[l]).sum();
                    for (l, c) in tree.occupied(u) {
                        let w = p.switch[l] / total;
                        for (j, &b) in up[c].iter().enumerate() {
                            if b > 0.0 {
                                for (r, pi) in row.iter_mut().zip(&p.transition[j][l]) {
                                    *r += w * b * pi;
                                }
                            }
                        }
                    }
                    for (i, r) in row.iter_mut().enumerate() {
                        *r *= p.emission[i][x];
                    }
                }
                let norm: f64 = row.iter().sum();
                if !(norm > 0.0 && norm.is_finite()) {
                    return Err(Error::Numerical(format!("tree {t} has zero probability at node {u}")));
                }
                row.iter_mut().for_each(|r| *r /= norm);
                up[u] = row;
            }
            let states = &mut self.states[t];
            let switches = &mut self.switches[t];
            states[0] = sample_categorical(&mut self.rng, &up[0])?;
            for u in 0..n {
                if tree.is_leaf(u) {
                    switches[u] = None;
                    continue;
                }
                let i = states[u];
                weights.clear();
                candidates.clear();
                for (l, c) in tree.occupied(u) {
                    for (j, &b) in up[c].iter().enumerate() {
                        weights.push(p.switch[l] * p.transition[j][l][i] * b);
                        candidates.push((l, j));
                    }
                }
                let (chosen, j) = candidates[sample_categorical(&mut self.rng, &weights)?];
                switches[u] = Some(chosen);
                for (l, c) in tree.occupied(u) {
                    states[c] = if l == chosen {
                        j
                    } else {
                        sample_categorical(&mut self.rng, &up[c])?
                    };
                }
            }
        }
        Ok(())
    }

    /// Single-site updates: each node's state jointly with its own switch,
    /// bottom-up, then every switch given the states.
    fn sweep_nodes(&mut self, dataset: &Dataset) -> Result<()> {
        let k = self.truncation();
        let p = &self.params;
        let ln_pi: Vec<Vec<Vec<f64>>> = p
            .transition
            .iter()
            .map(|r| r.iter().map(|v| ln_vec(v)).collect())
            .collect();
        let ln_sigma: Vec<Vec<f64>> = p.emission.iter().map(|r| ln_vec(r)).collect();
        let ln_leaf = ln_vec(&p.leaf_prior);
        let ln_phi = ln_vec(&p.switch);
        let mut log_weights = Vec::new();
        let mut candidates = Vec::new();

        for (t, tree) in dataset.trees().iter().enumerate() {
            let states = &mut self.states[t];
            let switches = &mut self.switches[t];
            for u in (0..tree.len()).rev() {
                let x = tree.label(u);
                let parent = tree
                    .parent(u)
                    .filter(|&v| switches[v] == Some(tree.slot_in_parent(u)))
                    .map(|v| (tree.slot_in_parent(u), states[v]));
                let outgoing = |i: usize| parent.map_or(0.0, |(l, q)| ln_pi[i][l][q]);
                log_weights.clear();
                candidates.clear();
                if tree.is_leaf(u) {
                    for i in 0..k {
                        log_weights.push(ln_leaf[i] + ln_sigma[i][x] + outgoing(i));
                        candidates.push((i, None));
                    }
                } else {
                    let ln_total = log_sum_exp(tree.occupied(u).map(|(l, _)| ln_phi[l]).collect::<Vec<_>>());
                    for (l, c) in tree.occupied(u) {
                        let j = states[c];
                        for i in 0..k {
                            log_weights.push(ln_phi[l] - ln_total + ln_pi[j][l][i] + ln_sigma[i][x] + outgoing(i));
                            candidates.push((i, Some(l)));
                        }
                    }
                }
                let pick = sample_log_categorical(&mut self.rng, &log_weights)
                    .map_err(|e| Error::Numerical(format!("tree {t} node {u}: {e}")))?;
                (states[u], switches[u]) = candidates[pick];
            }
            for u in 0..tree.len() {
                if tree.is_leaf(u) {
                    continue;
                }
                log_weights.clear();
                candidates.clear();
                for (l, c) in tree.occupied(u) {
                    log_weights.push(ln_phi[l] + ln_pi[states[c]][l][states[u]]);
                    candidates.push((states[u], Some(l)));
                }
                let pick = sample_log_categorical(&mut self.rng, &log_weights)
                    .map_err(|e| Error::Numerical(format!("tree {t} node {u}: {e}")))?;
                switches[u] = candidates[pick].1;
            }
        }
        Ok(())
    }

    /// Redraws all parameters given the current assignments.
    pub fn resample_parameters(&mut self, dataset: &Dataset, hypers: &HdpHypers) -> Result<()> {
        let k = self.truncation();
        let l_max = dataset.max_outdegree();
        hypers.validate(l_max)?;
        if hypers.truncation != k {
            return Err(Error::Dimension(format!(
                "hyperparameters have K={}, state has K={k}",
                hypers.truncation
            )));
        }
        let m = dataset.alphabet_size();
        let mut trans = vec![vec![vec![0u64; k]; l_max]; k];
        let mut leaf = vec![0u64; k];
        let mut labels = vec![vec![0.0; m]; k];
        let mut switch_counts = vec![0.0; l_max];
        for (t, tree) in dataset.trees().iter().enumerate() {
            let states = &self.states[t];
            for u in 0..tree.len() {
                labels[states[u]][tree.label(u)] += 1.0;
                match self.switches[t][u] {
                    None => leaf[states[u]] += 1,
                    Some(l) => {
                        let c = tree.child_at(u, l).expect("switch points at a child");
                        trans[states[c]][l][states[u]] += 1;
                        switch_counts[l] += 1.0;
                    }
                }
            }
        }

        let rng = &mut self.rng;
        let p = &mut self.params;
        let at = hypers.alpha_transition;

        // Tables at the transition level, summed over child states.
        let mut tables = vec![vec![0u64; k]; l_max];
        for row in &trans {
            for (l, counts) in row.iter().enumerate() {
                for i in 0..k {
                    tables[l][i] += sample_table_count(rng, counts[i], at * p.beta_position[l][i]);
                }
            }
        }
        // Tables one level up, plus the leaf context.
        let mut top = vec![0u64; k];
        for l in 0..l_max {
            for i in 0..k {
                top[i] += sample_table_count(rng, tables[l][i], hypers.alpha_position[l] * p.beta[i]);
            }
        }
        for i in 0..k {
            top[i] += sample_table_count(rng, leaf[i], at * p.beta[i]);
        }

        let tail: Vec<f64> = (0..k).map(|i| top[i + 1..].iter().sum::<u64>() as f64).collect();
        p.beta = stick_breaking(rng, k, |i| (1.0 + top[i] as f64, hypers.gamma + tail[i]))?;
        for l in 0..l_max {
            let alpha: Vec<f64> = (0..k)
                .map(|i| hypers.alpha_position[l] * p.beta[i] + tables[l][i] as f64)
                .collect();
            p.beta_position[l] = sample_dirichlet(rng, &alpha)?;
        }
        for j in 0..k {
            for l in 0..l_max {
                let alpha: Vec<f64> = (0..k)
                    .map(|i| at * p.beta_position[l][i] + trans[j][l][i] as f64)
                    .collect();
                p.transition[j][l] = sample_dirichlet(rng, &alpha)?;
            }
        }
        let alpha: Vec<f64> = (0..k).map(|i| at * p.beta[i] + leaf[i] as f64).collect();
        p.leaf_prior = sample_dirichlet(rng, &alpha)?;
        for i in 0..k {
            let alpha: Vec<f64> = labels[i].iter().map(|n| hypers.emission_base + n).collect();
            p.emission[i] = sample_dirichlet(rng, &alpha)?;
        }

        let alpha: Vec<f64> = switch_counts.iter().map(|n| hypers.alpha_switch + n).collect();
        let proposal = sample_dirichlet(rng, &alpha)?;
        let mut log_accept = 0.0;
        for tree in dataset.trees() {
            for u in 0..tree.len() {
                if !tree.is_leaf(u) {
                    let mass = |phi: &[f64]| tree.occupied(u).map(|(l, _)| phi[l]).sum::<f64>().ln();
                    log_accept += mass(&p.switch) - mass(&proposal);
                }
            }
        }
        if log_accept >= 0.0 || rng.random::<f64>().ln() < log_accept {
            p.switch = proposal;
        }
        Ok(())
    }
}

/// One full sweep: assignments, then parameters.
pub fn gibbs_sweep(state: &mut GibbsState, dataset: &Dataset, hypers: &HdpHypers) -> Result<()> {
    state.sweep_assignments(dataset)?;
    state.resample_parameters(dataset, hypers)?;
    state.sweeps += 1;
    state.check_invariants(dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub sweeps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    #[serde(default)]
    pub assignment_move: AssignmentMove,
}

impl ChainConfig {
    pub fn new(sweeps: usize, burn_in: usize, thin: usize, seed: u64) -> Self {
        ChainConfig {
            sweeps,
            burn_in,
            thin,
            seed,
            assignment_move: AssignmentMove::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweeps <= self.burn_in {
            return Err(Error::InvalidParameter(format!(
                "sweeps ({}) must exceed burn_in ({})",
                self.sweeps, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidParameter("thin must be at least 1".into()));
        }
        Ok(())
    }

    fn keeps(&self, sweep: usize) -> bool {
        sweep > self.burn_in && (sweep - self.burn_in).is_multiple_of(self.thin)
    }
}

/// Per-sweep diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRecord {
    pub sweep: usize,
    pub joint_log_prob: f64,
    pub active_states: usize,
}

/// A retained posterior sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSample {
    pub sweep: usize,
    pub params: HdpParams,
    pub active_states: usize,
    pub state_usage: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SampleDocument {
    #[serde(flatten)]
    model: Model,
    sweep: usize,
    beta: Vec<f64>,
    beta_position: Vec<Vec<f64>>,
    active_states: usize,
    state_usage: Vec<usize>,
}

impl ChainSample {
    /// JSON document readable as a BU model file, with the HDP-specific
    /// fields alongside.
    pub fn to_json(&self) -> String {
        let doc = SampleDocument {
            model: Model::Bu(self.params.to_bu_params()),
            sweep: self.sweep,
            beta: self.params.beta.clone(),
            beta_position: self.params.beta_position.clone(),
            active_states: self.active_states,
            state_usage: self.state_usage.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("sample serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub stream: u64,
    pub samples: Vec<ChainSample>,
    pub diagnostics: Vec<SweepRecord>,
}

impl Chain {
    /// Most frequent post-burn-in active-state count (smallest on ties).
    pub fn active_state_mode(&self, burn_in: usize) -> Option<usize> {
        let counts = self.post_burn_in(burn_in);
        let max = *counts.iter().max()?;
        let mut hist = vec![0usize; max + 1];
        for &c in &counts {
            hist[c] += 1;
        }
        let best = *hist.iter().max()?;
        hist.iter().position(|&n| n == best)
    }

    /// Lower median of the post-burn-in active-state counts.
    pub fn active_state_median(&self, burn_in: usize) -> Option<usize> {
        let mut counts = self.post_burn_in(burn_in);
        counts.sort_unstable();
        counts.get(counts.len().checked_sub(1)? / 2).copied()
    }

    fn post_burn_in(&self, burn_in: usize) -> Vec<usize> {
        self.diagnostics
            .iter()
            .filter(|d| d.sweep > burn_in)
            .map(|d| d.active_states)
            .collect()
    }
}

/// `sweep,joint_log_prob,active_states` rows.
pub fn write_diagnostics<W: Write>(records: &[SweepRecord], mut out: W) -> io::Result<()> {
    writeln!(out, "sweep,joint_log_prob,active_states")?;
    for r in records {
        writeln!(out, "{},{},{}", r.sweep, r.joint_log_prob, r.active_states)?;
    }
    Ok(())
}

/// Runs one chain on RNG stream 0.
pub fn run_chain(dataset: &Dataset, hypers: &HdpHypers, config: &ChainConfig) -> Result<Chain> {
    run_chain_with(dataset, hypers, config, 0, |_, _| Ok(()))
}

/// Runs one chain on the given stream, calling `observe` after every sweep
/// with its diagnostics and, for retained sweeps, the sample.
pub fn run_chain_with<F>(
    dataset: &Dataset,
    hypers: &HdpHypers,
    config: &ChainConfig,
    stream: u64,
    mut observe: F,
) -> Result<Chain>
where
    F: FnMut(&SweepRecord, Option<&ChainSample>) -> Result<()>,
{
    config.validate()?;
    let mut state = init_state_on_stream(dataset, hypers, config.seed, stream)?;
    state.assignment_move = config.assignment_move;
    let mut chain = Chain {
        stream,
        samples: Vec::new(),
        diagnostics: Vec::with_capacity(config.sweeps),
    };
    for sweep in 1..=config.sweeps {
        gibbs_sweep(&mut state, dataset, hypers)?;
        let joint_log_prob = state.joint_log_prob(dataset)?;
        if !joint_log_prob.is_finite() {
            return Err(Error::Numerical(format!(
                "joint log-probability is {joint_log_prob} at sweep {sweep}"
            )));
        }
        let record = SweepRecord {
            sweep,
            joint_log_prob,
            active_states: state.active_states(),
        };
        let sample = config.keeps(sweep).then(|| ChainSample {
            sweep,
            params: state.params.clone(),
            active_states: record.active_states,
            state_usage: state.state_usage(),
        });
        observe(&record, sample.as_ref())?;
        chain.diagnostics.push(record);
        chain.samples.extend(sample);
    }
    Ok(chain)
}

/// Runs `chains` independent chains in parallel; chain `c` uses RNG stream `c`.
pub fn run_chains(dataset: &Dataset, hypers: &HdpHypers, config: &ChainConfig, chains: usize) -> Result<Vec<Chain>> {
    (0..chains as u64)
        .into_par_iter()
        .map(|c| run_chain_with(dataset, hypers, config, c, |_, _| Ok(())))
        .collect()
}

/// Log posterior-predictive likelihood of `tree`, averaging its BU likelihood
/// over samples.
pub fn predictive_score(samples: &[ChainSample], tree: &LabeledTree) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter(
            "predictive score needs at least one sample".into(),
        ));
    }
    let lls = samples
        .iter()
        .map(|s| Ok(upward_bu(&s.params.to_bu_params(), tree)?.log_likelihood))
        .collect::<Result<Vec<_>>>()?;
    Ok(log_mean_exp(&lls))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::brute_force;
    use crate::model::{init_random, sample, ModelKind};
    use crate::tree::{parse_tree, random_skeleton};

    fn small_dataset(seed: u64, trees: usize) -> Dataset {
        let model = init_random(ModelKind::Bu, 3, 4, 2, seed, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees = (0..trees)
            .map(|_| sample(&model, &random_skeleton(&mut rng, 8, 2, 0.6), &mut rng).unwrap())
            .collect();
        Dataset::new(trees, 4, 2).unwrap()
    }

    fn hypers(l: usize, k: usize) -> HdpHypers {
        HdpHypers {
            truncation: k,
            ..HdpHypers::new(l)
        }
    }

    /// Standard error of a mean from batch means.
    fn batch_se(xs: &[f64], batches: usize) -> f64 {
        let size = xs.len() / batches;
        let means: Vec<f64> = xs
            .chunks(size)
            .take(batches)
            .map(|c| c.iter().sum::<f64>() / size as f64)
            .collect();
        let mean = means.iter().sum::<f64>() / batches as f64;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
        (var / batches as f64).sqrt()
    }

    #[test]
    fn gem_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_gem(2.0, 1, &mut rng).unwrap(), vec![1.0]);
        for &(g, k) in &[(0.1, 5), (1.0, 50), (10.0, 20), (0.01, 100)] {
            let w = sample_gem(g, k, &mut rng).unwrap();
            assert_eq!(w.len(), k);
            assert!(w.iter().all(|x| *x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(sample_gem(0.0, 3, &mut rng).is_err());
        assert!(sample_gem(1.0, 0, &mut rng).is_err());
    }

    #[test]
    fn gem_first_stick_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let mean = (0..n).map(|_| sample_gem(1.0, 50, &mut rng).unwrap()[0]).sum::<f64>() / n as f64;
        let se = (1.0f64 / 12.0 / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn weak_limit_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(
            sample_dp_weak_limit(3.0, &[0.0, 1.0, 0.0], &mut rng).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        assert_eq!(sample_dp_weak_limit(3.0, &[1.0], &mut rng).unwrap(), vec![1.0]);
        let base = [0.1, 0.2, 0.3, 0.4];
        let mut l1 = 0.0;
        for _ in 0..100 {
            let w = sample_dp_weak_limit(1e6, &base, &mut rng).unwrap();
            l1 += w.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum::<f64>() / 100.0;
        }
        assert!(l1 < 1e-2, "{l1}");
        assert!(sample_dp_weak_limit(-1.0, &base, &mut rng).is_err());
        assert!(sample_dp_weak_limit(1.0, &[0.5, 0.6], &mut rng).is_err());
    }

    #[test]
    fn init_respects_invariants_and_seed() {
        let ds = small_dataset(3, 20);
        let h = hypers(2, 20);
        let a = init_state(&ds, &h, 7).unwrap();
        a.check_invariants(&ds).unwrap();
        assert!(a.active_states() <= 10);
        assert!(a.joint_log_prob(&ds).unwrap().is_finite());
        assert_eq!(a, init_state(&ds, &h, 7).unwrap());
        assert_ne!(a, init_state(&ds, &h, 8).unwrap());
    }

    #[test]
    fn truncation_one_is_degenerate() {
        let ds = small_dataset(4, 10);
        let h = hypers(2, 1);
        let mut s = init_state(&ds, &h, 0).unwrap();
        assert!(s.states.iter().flatten().all(|&q| q == 0));
        assert_eq!(s.params.beta, vec![1.0]);
        assert_eq!(s.params.leaf_prior, vec![1.0]);
        for _ in 0..3 {
            gibbs_sweep(&mut s, &ds, &h).unwrap();
            assert_eq!(s.active_states(), 1);
            assert!(s.params.transition.iter().flatten().all(|r| r == &vec![1.0]));
        }
    }

    #[test]
    fn sweeps_are_deterministic_and_keep_invariants() {
        let ds = small_dataset(5, 30);
        let h = hypers(2, 8);
        let mut a = init_state(&ds, &h, 11).unwrap();
        let mut b = a.clone();
        for _ in 0..20 {
            gibbs_sweep(&mut a, &ds, &h).unwrap();
            gibbs_sweep(&mut b, &ds, &h).unwrap();
            assert!(a.joint_log_prob(&ds).unwrap().is_finite());
        }
        assert_eq!(a, b);
        assert_eq!(a.sweeps, 20);
    }

    #[test]
    fn chain_bookkeeping() {
        let ds = small_dataset(6, 10);
        let h = hypers(2, 5);
        let one = run_chain(&ds, &h, &ChainConfig::new(4, 3, 1, 0)).unwrap();
        assert_eq!(one.samples.len(), 1);
        assert_eq!(one.samples[0].sweep, 4);
        assert_eq!(one.diagnostics.len(), 4);
        let thinned = run_chain(&ds, &h, &ChainConfig::new(12, 2, 3, 0)).unwrap();
        assert_eq!(
            thinned.samples.iter().map(|s| s.sweep).collect::<Vec<_>>(),
            vec![5, 8, 11]
        );
        assert!(run_chain(&ds, &h, &ChainConfig::new(3, 3, 1, 0)).is_err());
        assert!(run_chain(&ds, &h, &ChainConfig::new(3, 0, 0, 0)).is_err());
    }

    #[test]
    fn chains_use_distinct_streams() {
        let ds = small_dataset(7, 10);
        let h = hypers(2, 6);
        let config = ChainConfig::new(5, 1, 1, 3);
        let chains = run_chains(&ds, &h, &config, 2).unwrap();
        assert_ne!(chains[0].diagnostics, chains[1].diagnostics);
        let again = run_chains(&ds, &h, &config, 2).unwrap();
        assert_eq!(chains, again);
        assert_eq!(chains[0], run_chain(&ds, &h, &config).unwrap());
    }

    #[test]
    fn sample_document_reads_as_bu_model() {
        let ds = small_dataset(8, 5);
        let h = hypers(2, 4);
        let chain = run_chain(&ds, &h, &ChainConfig::new(2, 1, 1, 0)).unwrap();
        let text = chain.samples[0].to_json();
        let model = Model::from_json(&text).unwrap();
        assert_eq!(model, Model::Bu(chain.samples[0].params.to_bu_params()));
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["kind"], "bu");
        assert_eq!(value["beta"].as_array().unwrap().len(), 4);
        assert!(value["active_states"].as_u64().unwrap() >= 1);
    }

    #[test]
    fn predictive_score_averages() {
        let ds = small_dataset(9, 10);
        let h = hypers(2, 4);
        let chain = run_chain(&ds, &h, &ChainConfig::new(6, 3, 1, 0)).unwrap();
        let tree = &ds.trees()[0];
        let single = predictive_score(&chain.samples[..1], tree).unwrap();
        let direct = upward_bu(&chain.samples[0].params.to_bu_params(), tree)
            .unwrap()
            .log_likelihood;
        assert!((single - direct).abs() < 1e-12);
        let all = predictive_score(&chain.samples, tree).unwrap();
        let doubled: Vec<ChainSample> = chain.samples.iter().chain(&chain.samples).cloned().collect();
        assert!((predictive_score(&doubled, tree).unwrap() - all).abs() < 1e-12);
        assert!(predictive_score(&[], tree).is_err());
    }

    fn fixed_params() -> HdpParams {
        HdpParams {
            beta: vec![0.5, 0.5],
            beta_position: vec![vec![0.5, 0.5]; 2],
            transition: vec![
                vec![vec![0.8, 0.2], vec![0.3, 0.7]],
                vec![vec![0.25, 0.75], vec![0.6, 0.4]],
            ],
            emission: vec![vec![0.7, 0.3], vec![0.2, 0.8]],
            switch: vec![0.4, 0.6],
            leaf_prior: vec![0.35, 0.65],
        }
    }

    #[test]
    fn fixed_parameter_sweeps_match_exact_posterior() {
        let tree = parse_tree("(0 (1) (1 (0)))", 2, 2).unwrap();
        let ds = Dataset::new(vec![tree.clone()], 2, 2).unwrap();
        let params = fixed_params();
        let exact = brute_force(&Model::Bu(params.to_bu_params()), &tree)
            .unwrap()
            .posteriors
            .unwrap();
        for mv in [AssignmentMove::Tree, AssignmentMove::Node] {
            let mut state = GibbsState::from_params(&ds, params.clone(), 5, 0).unwrap();
            state.assignment_move = mv;
            let n = 40_000;
            let mut hits = vec![Vec::with_capacity(n); tree.len()];
            let mut root_switch = Vec::with_capacity(n);
            for _ in 0..n {
                state.sweep_assignments(&ds).unwrap();
                for u in 0..tree.len() {
                    hits[u].push((state.states[0][u] == 0) as u8 as f64);
                }
                root_switch.push((state.switches[0][0] == Some(0)) as u8 as f64);
            }
            assert_eq!(state.params, params);
            let switch0: f64 = exact.switch_triples[0][0].1.iter().flatten().sum();
            let checks = hits
                .iter()
                .zip(exact.node_marginals.iter().map(|m| m[0]))
                .chain([(&root_switch, switch0)]);
            for (u, (xs, p)) in checks.enumerate() {
                let freq = xs.iter().sum::<f64>() / n as f64;
                let se = batch_se(xs, 40).max(1e-4);
                assert!((freq - p).abs() < 4.0 * se, "{mv:?} check {u}: {freq} vs {p} (se {se})");
            }
        }
    }

    #[test]
    fn single_node_full_sampler_matches_prior_predictive() {
        // One leaf: P(Q = 0 | x) = E[leaf_prior_0] = E[beta_0] = 1 / (1 + gamma)
        // because symmetric emissions make the label uninformative.
        let ds = Dataset::parse("(1)\n", 2, 1).unwrap();
        let h = HdpHypers {
            gamma: 1.5,
            ..hypers(1, 2)
        };
        let mut state = init_state(&ds, &h, 21).unwrap();
        let n = 40_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                gibbs_sweep(&mut state, &ds, &h).unwrap();
                (state.states[0][0] == 0) as u8 as f64
            })
            .collect();
        let freq = xs.iter().sum::<f64>() / n as f64;
        let se = batch_se(&xs, 40);
        let p = 1.0 / (1.0 + h.gamma);
        assert!((freq - p).abs() < 4.0 * se, "{freq} vs {p} (se {se})");
    }

    #[test]
    fn two_node_full_sampler_matches_importance_reference() {
        // Reference posterior over (Q_root, Q_child) by averaging the complete
        // likelihood over prior parameter draws.
        let tree = parse_tree("(0 (1))", 2, 1).unwrap();
        let ds = Dataset::new(vec![tree.clone()], 2, 1).unwrap();
        let h = HdpHypers {
            gamma: 1.0,
            alpha_position: vec![0.7],
            alpha_transition: 0.8,
            emission_base: 0.6,
            ..hypers(1, 2)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut mass = [0.0; 4];
        for _ in 0..200_000 {
            let bu = sample_prior(&h, 2, 1, &mut rng).unwrap().to_bu_params();
            for (idx, m) in mass.iter_mut().enumerate() {
                let states = [idx / 2, idx % 2];
                *m += complete_log_prob_bu(&bu, &tree, &states, &[Some(0), None])
                    .unwrap()
                    .exp();
            }
        }
        let total: f64 = mass.iter().sum();
        let p_same = (mass[0] + mass[3]) / total;
        let p_root0 = (mass[0] + mass[1]) / total;

        let mut state = init_state(&ds, &h, 4).unwrap();
        let n = 60_000;
        let mut same = Vec::with_capacity(n);
        let mut root0 = Vec::with_capacity(n);
        for _ in 0..n {
            gibbs_sweep(&mut state, &ds, &h).unwrap();
            let q = &state.states[0];
            same.push((q[0] == q[1]) as u8 as f64);
            root0.push((q[0] == 0) as u8 as f64);
        }
        for (xs, p, what) in [(&same, p_same, "same"), (&root0, p_root0, "root0")] {
            let freq = xs.iter().sum::<f64>() / n as f64;
            // reference itself carries Monte Carlo error, roughly 0.003
            let se = (batch_se(xs, 40).powi(2) + 0.003f64.powi(2)).sqrt();
            assert!((freq - p).abs() < 4.0 * se, "{what}: {freq} vs {p} (se {se})");
        }
    }
}
