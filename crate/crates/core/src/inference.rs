//! Exact likelihoods and smoothed posteriors by upward-downward message
//! passing, plus an exhaustive-enumeration oracle.
//!
//! Everything runs in log-space. Tables are dense per node, so memory is
//! `O(U * C^2 * L)` for a tree of `U` nodes in the worst case.
//!
//! TD recursions, with `A` the transition matrix and `e` the emissions:
//!
//! ```text
//! beta_u(i) = e(i, x_u) * prod_{children c} m_c(i),   m_c(i) = sum_j A(i, j) beta_c(j)
//! P(x)      = sum_i root_prior(i) beta_root(i)
//! zeta_c(i, j) = eps_u(i) * A(i, j) beta_c(j) / m_c(i)
//! ```
//!
//! BU recursions, where `beta_u(i)` is the joint probability of `Q_u = i` and
//! the labels below and at `u`, `N_v = sum_j beta_v(j)`, and `s'` is the switch
//! distribution renormalized over the occupied slots of `u`:
//!
//! ```text
//! t_{u,l}(i) = sum_j T_l(i, j) beta_{ch_l}(j) * prod_{l' != l} N_{ch_l'}
//! beta_u(i)  = e(i, x_u) * sum_l s'_l t_{u,l}(i)          (leaves: leaf_prior(i) e(i, x_u))
//! P(x)       = N_root
//! ```
//!
//! Given `Q_u`, the states below `u` are independent of everything above it,
//! which gives the downward step for both directions.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::math::{ln_vec, log_sum_exp};
use crate::model::{complete_log_prob_bu, complete_log_prob_td, BuParams, Matrix, Model, TdParams};
use crate::tree::{Dataset, LabeledTree};

/// Smoothed posteriors of one tree.
///
/// `parent_pairs` is filled for TD models and `switch_triples` for BU models;
/// the other is left with empty entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    /// `node_marginals[u][i] = P(Q_u = i | x)`.
    pub node_marginals: Matrix,
    /// TD: `parent_pairs[u][i][j] = P(Q_pa(u) = i, Q_u = j | x)`; `None` at the root.
    pub parent_pairs: Vec<Option<Matrix>>,
    /// BU: for each internal node, `(slot, zeta)` with
    /// `zeta[i][j] = P(Q_u = i, S_u = slot, Q_ch_slot(u) = j | x)`.
    pub switch_triples: Vec<Vec<(usize, Matrix)>>,
    pub log_likelihood: f64,
}

impl Posteriors {
    fn empty(n: usize, c: usize) -> Self {
        Posteriors {
            node_marginals: vec![vec![0.0; c]; n],
            parent_pairs: vec![None; n],
            switch_triples: vec![Vec::new(); n],
            log_likelihood: f64::NEG_INFINITY,
        }
    }

    /// Largest violation of the normalization and marginalization identities
    /// the posteriors must satisfy for `tree`.
    pub fn consistency_error(&self, tree: &LabeledTree) -> f64 {
        let mut worst: f64 = 0.0;
        let mut note = |x: f64| worst = worst.max(x.abs());
        for u in 0..tree.len() {
            let eps = &self.node_marginals[u];
            note(eps.iter().sum::<f64>() - 1.0);
            if let (Some(pair), Some(p)) = (&self.parent_pairs[u], tree.parent(u)) {
                note(pair.iter().flatten().sum::<f64>() - 1.0);
                for j in 0..eps.len() {
                    note(pair.iter().map(|row| row[j]).sum::<f64>() - eps[j]);
                }
                for (i, row) in pair.iter().enumerate() {
                    note(row.iter().sum::<f64>() - self.node_marginals[p][i]);
                }
            }
            let triples = &self.switch_triples[u];
            if !triples.is_empty() {
                note(
                    triples
                        .iter()
                        .map(|(_, z)| z.iter().flatten().sum::<f64>())
                        .sum::<f64>()
                        - 1.0,
                );
                for (i, &e) in eps.iter().enumerate() {
                    let m: f64 = triples.iter().map(|(_, z)| z[i].iter().sum::<f64>()).sum();
                    note(m - e);
                }
            }
        }
        worst
    }
}

/// Output of the TD upward pass.
#[derive(Debug, Clone)]
pub struct TdUpward {
    /// `log beta_u(i) = log P(labels in subtree of u | Q_u = i)`.
    pub log_beta: Matrix,
    /// `log m_u(i)`, the message from `u` to its parent indexed by parent
    /// state; unused at the root.
    pub log_message: Matrix,
    pub log_likelihood: f64,
}

/// Output of the BU upward pass.
#[derive(Debug, Clone)]
pub struct BuUpward {
    /// `log beta_u(i) = log P(Q_u = i, labels in subtree of u)`.
    pub log_beta: Matrix,
    /// `log N_u = log P(labels in subtree of u)`.
    pub log_norm: Vec<f64>,
    /// For each node, `(slot, child, log s'_slot, log t_{u,slot})` over its
    /// occupied slots.
    pub components: Vec<Vec<BuComponent>>,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone)]
pub struct BuComponent {
    pub slot: usize,
    pub child: usize,
    pub log_switch: f64,
    /// Log of the product of the other children's subtree likelihoods.
    pub log_spectators: f64,
    pub log_t: Vec<f64>,
}

fn check_td(params: &TdParams, tree: &LabeledTree) -> Result<()> {
    // TD ignores positions, so only the alphabet is checked here.
    tree.validate(params.num_labels, usize::MAX)
        .map_err(|e| Error::Dimension(e.to_string()))
}

fn check_bu(params: &BuParams, tree: &LabeledTree) -> Result<()> {
    tree.validate(params.num_labels, params.max_outdegree)
        .map_err(|e| Error::Dimension(e.to_string()))
}

pub fn upward_td(params: &TdParams, tree: &LabeledTree) -> Result<TdUpward> {
    check_td(params, tree)?;
    let c = params.num_states;
    let log_a: Matrix = params.transition.iter().map(|r| ln_vec(r)).collect();
    let n = tree.len();
    let mut log_beta = vec![vec![0.0; c]; n];
    let mut log_message = vec![vec![0.0; c]; n];
    for u in (0..n).rev() {
        let x = tree.label(u);
        for i in 0..c {
            let mut acc = params.emission[i][x].ln();
            for (_, v) in tree.occupied(u) {
                acc += log_message[v][i];
            }
            log_beta[u][i] = acc;
        }
        if tree.parent(u).is_some() {
            for i in 0..c {
                log_message[u][i] = log_sum_exp((0..c).map(|j| log_a[i][j] + log_beta[u][j]));
            }
        }
    }
    let log_likelihood = log_sum_exp((0..c).map(|i| params.root_prior[i].ln() + log_beta[0][i]));
    Ok(TdUpward {
        log_beta,
        log_message,
        log_likelihood,
    })
}

pub fn downward_td(params: &TdParams, tree: &LabeledTree, up: &TdUpward) -> Result<Posteriors> {
    check_td(params, tree)?;
    let c = params.num_states;
    let n = tree.len();
    if up.log_beta.len() != n || up.log_beta.iter().any(|r| r.len() != c) || up.log_message.len() != n {
        return Err(Error::Dimension("upward tables do not match the tree".into()));
    }
    if up.log_likelihood == f64::NEG_INFINITY {
        return Err(Error::Numerical("tree has zero probability under the model".into()));
    }
    let log_a: Matrix = params.transition.iter().map(|r| ln_vec(r)).collect();
    let mut post = Posteriors::empty(n, c);
    post.log_likelihood = up.log_likelihood;
    for i in 0..c {
        post.node_marginals[0][i] = (params.root_prior[i].ln() + up.log_beta[0][i] - up.log_likelihood).exp();
    }
    for u in 1..n {
        let p = tree.parent(u).unwrap();
        let mut pair = vec![vec![0.0; c]; c];
        for i in 0..c {
            let eps = post.node_marginals[p][i];
            if eps == 0.0 || up.log_message[u][i] == f64::NEG_INFINITY {
                continue;
            }
            for j in 0..c {
                pair[i][j] = eps * (log_a[i][j] + up.log_beta[u][j] - up.log_message[u][i]).exp();
            }
        }
        for j in 0..c {
            post.node_marginals[u][j] = pair.iter().map(|row| row[j]).sum();
        }
        post.parent_pairs[u] = Some(pair);
    }
    Ok(post)
}

pub fn upward_bu(params: &BuParams, tree: &LabeledTree) -> Result<BuUpward> {
    check_bu(params, tree)?;
    let c = params.num_states;
    let n = tree.len();
    let log_t: Vec<Matrix> = params
        .transition
        .iter()
        .map(|m| m.iter().map(|r| ln_vec(r)).collect())
        .collect();
    let mut log_beta = vec![vec![0.0; c]; n];
    let mut log_norm = vec![0.0; n];
    let mut components = vec![Vec::new(); n];
    for u in (0..n).rev() {
        let x = tree.label(u);
        if tree.is_leaf(u) {
            for i in 0..c {
                log_beta[u][i] = params.leaf_prior[i].ln() + params.emission[i][x].ln();
            }
        } else {
            let weights = params.switch_weights(tree, u);
            let mut comps = Vec::with_capacity(weights.len());
            for &(slot, child, w) in &weights {
                let log_spectators: f64 = weights.iter().filter(|o| o.0 != slot).map(|o| log_norm[o.1]).sum();
                let t = (0..c)
                    .map(|i| log_sum_exp((0..c).map(|j| log_t[slot][i][j] + log_beta[child][j])) + log_spectators)
                    .collect();
                comps.push(BuComponent {
                    slot,
                    child,
                    log_switch: w.ln(),
                    log_spectators,
                    log_t: t,
                });
            }
            for i in 0..c {
                let mixture = log_sum_exp(comps.iter().map(|k| k.log_switch + k.log_t[i]));
                log_beta[u][i] = params.emission[i][x].ln() + mixture;
            }
            components[u] = comps;
        }
        log_norm[u] = log_sum_exp(log_beta[u].iter().copied());
    }
    Ok(BuUpward {
        log_likelihood: log_norm[0],
        log_beta,
        log_norm,
        components,
    })
}

pub fn downward_bu(params: &BuParams, tree: &LabeledTree, up: &BuUpward) -> Result<Posteriors> {
    check_bu(params, tree)?;
    let c = params.num_states;
    let n = tree.len();
    if up.log_beta.len() != n
        || up.log_beta.iter().any(|r| r.len() != c)
        || up.log_norm.len() != n
        || up.components.len() != n
    {
        return Err(Error::Dimension("upward tables do not match the tree".into()));
    }
    if up.log_likelihood == f64::NEG_INFINITY {
        return Err(Error::Numerical("tree has zero probability under the model".into()));
    }
    let log_t: Vec<Matrix> = params
        .transition
        .iter()
        .map(|m| m.iter().map(|r| ln_vec(r)).collect())
        .collect();
    let mut post = Posteriors::empty(n, c);
    post.log_likelihood = up.log_likelihood;
    for i in 0..c {
        post.node_marginals[0][i] = (up.log_beta[0][i] - up.log_likelihood).exp();
    }
    for u in 0..n {
        let comps = &up.components[u];
        if comps.is_empty() {
            continue;
        }
        if comps.len() != tree.occupied(u).count() {
            return Err(Error::Dimension(format!(
                "upward components of node {u} do not match the tree"
            )));
        }
        let eps_u = post.node_marginals[u].clone();
        let log_mixture: Vec<f64> = (0..c)
            .map(|i| log_sum_exp(comps.iter().map(|k| k.log_switch + k.log_t[i])))
            .collect();
        let mut triples = Vec::with_capacity(comps.len());
        let mut switch_post = Vec::with_capacity(comps.len());
        for k in comps {
            let mut zeta = vec![vec![0.0; c]; c];
            for i in 0..c {
                if eps_u[i] == 0.0 || log_mixture[i] == f64::NEG_INFINITY {
                    continue;
                }
                let base = k.log_switch + k.log_spectators - log_mixture[i];
                for j in 0..c {
                    zeta[i][j] = eps_u[i] * (base + log_t[k.slot][i][j] + up.log_beta[k.child][j]).exp();
                }
            }
            switch_post.push(zeta.iter().flatten().sum::<f64>());
            triples.push((k.slot, zeta));
        }
        for (idx, k) in comps.iter().enumerate() {
            // As a spectator the child keeps its upward posterior.
            let spectator: f64 = switch_post
                .iter()
                .enumerate()
                .filter(|&(other, _)| other != idx)
                .map(|(_, p)| p)
                .sum();
            let zeta = &triples[idx].1;
            for j in 0..c {
                let selected: f64 = zeta.iter().map(|row| row[j]).sum();
                let own = if spectator > 0.0 {
                    spectator * (up.log_beta[k.child][j] - up.log_norm[k.child]).exp()
                } else {
                    0.0
                };
                post.node_marginals[k.child][j] = selected + own;
            }
        }
        post.switch_triples[u] = triples;
    }
    Ok(post)
}

/// Log-likelihood of a tree by the upward pass.
pub fn log_likelihood(model: &Model, tree: &LabeledTree) -> Result<f64> {
    match model {
        Model::Td(p) => upward_td(p, tree).map(|u| u.log_likelihood),
        Model::Bu(p) => upward_bu(p, tree).map(|u| u.log_likelihood),
    }
}

/// Upward then downward pass.
pub fn posteriors(model: &Model, tree: &LabeledTree) -> Result<Posteriors> {
    match model {
        Model::Td(p) => downward_td(p, tree, &upward_td(p, tree)?),
        Model::Bu(p) => downward_bu(p, tree, &upward_bu(p, tree)?),
    }
}

/// Upper bound on the number of assignments brute force will enumerate.
pub const BRUTE_FORCE_LIMIT: f64 = 1e6;

/// Result of exhaustive enumeration. Posteriors are `None` when the tree has
/// zero probability.
#[derive(Debug, Clone)]
pub struct BruteForce {
    pub log_likelihood: f64,
    pub posteriors: Option<Posteriors>,
}

/// Sums the complete-data probability over every hidden state assignment
/// (and every switch assignment for BU). Only for tiny instances: the number
/// of joint assignments, `C^U` times the product of occupied-slot counts of
/// the internal nodes, must not exceed 1e6.
pub fn brute_force(model: &Model, tree: &LabeledTree) -> Result<BruteForce> {
    let c = model.num_states();
    let n = tree.len();
    let internal: Vec<usize> = (0..n).filter(|&u| !tree.is_leaf(u)).collect();
    let mut size = (c as f64).powi(n as i32);
    match model {
        Model::Bu(p) => {
            check_bu(p, tree)?;
            // switch choices actually available, at most L per internal node
            size *= internal
                .iter()
                .map(|&u| tree.occupied(u).count() as f64)
                .product::<f64>();
        }
        Model::Td(p) => check_td(p, tree)?,
    }
    if size > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            assignments: size,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let slot_choices: Vec<Vec<usize>> = match model {
        Model::Bu(_) => (0..n).map(|u| tree.occupied(u).map(|(l, _)| l).collect()).collect(),
        Model::Td(_) => vec![Vec::new(); n],
    };

    // Odometer over states (all nodes) then switches (internal nodes).
    let mut states = vec![0usize; n];
    let mut choice = vec![0usize; n];
    let mut switches = vec![None; n];
    let mut assignments = Vec::new();
    let mut log_weights = Vec::new();
    loop {
        for &u in &internal {
            switches[u] = slot_choices[u].get(choice[u]).copied();
        }
        let lp = match model {
            Model::Td(p) => complete_log_prob_td(p, tree, &states)?,
            Model::Bu(p) => complete_log_prob_bu(p, tree, &states, &switches)?,
        };
        log_weights.push(lp);
        assignments.push((states.clone(), switches.clone()));
        if !advance(&mut states, &mut choice, &internal, &slot_choices, c) {
            break;
        }
    }

    let log_likelihood = log_sum_exp(log_weights.iter().copied());
    if log_likelihood == f64::NEG_INFINITY {
        return Ok(BruteForce {
            log_likelihood,
            posteriors: None,
        });
    }
    let mut post = Posteriors::empty(n, c);
    post.log_likelihood = log_likelihood;
    if let Model::Td(_) = model {
        for u in 1..n {
            post.parent_pairs[u] = Some(vec![vec![0.0; c]; c]);
        }
    } else {
        for &u in &internal {
            post.switch_triples[u] = slot_choices[u].iter().map(|&l| (l, vec![vec![0.0; c]; c])).collect();
        }
    }
    for ((states, switches), lp) in assignments.iter().zip(&log_weights) {
        let w = (lp - log_likelihood).exp();
        if w == 0.0 {
            continue;
        }
        for u in 0..n {
            post.node_marginals[u][states[u]] += w;
            if let (Some(pair), Some(p)) = (post.parent_pairs[u].as_mut(), tree.parent(u)) {
                pair[states[p]][states[u]] += w;
            }
            if let Some(slot) = switches[u] {
                let child = tree.child_at(u, slot).unwrap();
                let entry = post.switch_triples[u].iter_mut().find(|(l, _)| *l == slot).unwrap();
                entry.1[states[u]][states[child]] += w;
            }
        }
    }
    Ok(BruteForce {
        log_likelihood,
        posteriors: Some(post),
    })
}

fn advance(
    states: &mut [usize],
    choice: &mut [usize],
    internal: &[usize],
    slot_choices: &[Vec<usize>],
    c: usize,
) -> bool {
    for q in states.iter_mut() {
        *q += 1;
        if *q < c {
            return true;
        }
        *q = 0;
    }
    for &u in internal {
        let options = slot_choices[u].len().max(1);
        choice[u] += 1;
        if choice[u] < options {
            return true;
        }
        choice[u] = 0;
    }
    false
}

/// Per-tree and total log-likelihoods of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    #[serde(skip)]
    pub per_tree: Vec<f64>,
    pub total: f64,
    pub nodes: usize,
    /// `exp(-total / nodes)`; `None` for an empty dataset.
    pub perplexity: Option<f64>,
}

impl ScoreReport {
    /// One `index<TAB>log_likelihood` line per tree followed by a JSON
    /// summary line.
    pub fn write_to<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (n, ll) in self.per_tree.iter().enumerate() {
            writeln!(out, "{n}\t{ll}")?;
        }
        writeln!(out, "{}", serde_json::to_string(self).expect("report serializes"))
    }
}

/// Scores every tree in parallel; results are in dataset order and do not
/// depend on the number of threads.
pub fn score_dataset(model: &Model, dataset: &Dataset) -> Result<ScoreReport> {
    if dataset.alphabet_size() > model.num_labels() {
        return Err(Error::Dimension(format!(
            "dataset alphabet size {} exceeds model's M={}",
            dataset.alphabet_size(),
            model.num_labels()
        )));
    }
    let per_tree = dataset
        .trees()
        .par_iter()
        .map(|t| log_likelihood(model, t))
        .collect::<Result<Vec<f64>>>()?;
    let total = per_tree.iter().sum::<f64>();
    let nodes = dataset.node_count();
    let perplexity = (nodes > 0).then(|| (-total / nodes as f64).exp());
    Ok(ScoreReport {
        per_tree,
        total,
        nodes,
        perplexity,
    })
}
