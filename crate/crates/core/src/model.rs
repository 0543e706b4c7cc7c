//! Parameters of finite top-down (TD) and bottom-up (BU) hidden tree Markov
//! models.
//!
//! Both models emit the label of node `u` from its hidden state through a
//! `C x M` emission matrix. They differ in the direction of the state
//! transitions:
//!
//! * TD: the root state is drawn from `root_prior` and every child state is
//!   drawn from the transition row of its parent's state, independently of
//!   the child's position.
//! * BU: leaf states are drawn from `leaf_prior`. An internal node first picks
//!   one of its occupied child slots `l` with probability `switch[l]`
//!   (renormalized over the occupied slots) and then draws its state from the
//!   column of `transition[l]` indexed by that child's state. The `L`
//!   position-specific `C x C` matrices replace a joint `C^L`-sized table.
//!
//! All probabilities are stored in linear space. Zero entries are allowed and
//! show up as `-inf` in log-space computations.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{check_simplex, sample_categorical, sample_dirichlet};
use crate::tree::LabeledTree;

pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Td,
    Bu,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Td => "td",
            ModelKind::Bu => "bu",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "td" => Ok(ModelKind::Td),
            "bu" => Ok(ModelKind::Bu),
            other => Err(Error::InvalidParameter(format!(
                "unknown model kind {other:?}, expected \"td\" or \"bu\""
            ))),
        }
    }
}

/// Top-down model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdParams {
    #[serde(rename = "C")]
    pub num_states: usize,
    #[serde(rename = "M")]
    pub num_labels: usize,
    /// Out-degree bound of the trees the model is used with. The TD
    /// transition ignores positions, so this only gates input validation.
    #[serde(rename = "L")]
    pub max_outdegree: usize,
    pub root_prior: Vec<f64>,
    /// Row `i` is the distribution of a child's state given parent state `i`.
    pub transition: Matrix,
    /// Row `j` is the label distribution of state `j`.
    pub emission: Matrix,
}

/// Bottom-up model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuParams {
    #[serde(rename = "C")]
    pub num_states: usize,
    #[serde(rename = "M")]
    pub num_labels: usize,
    #[serde(rename = "L")]
    pub max_outdegree: usize,
    pub leaf_prior: Vec<f64>,
    /// `transition[l][i][j]` is the probability of parent state `i` given
    /// that the child in slot `l` has state `j`. Columns sum to one.
    pub transition: Vec<Matrix>,
    /// Probability of each slot driving the parent's transition.
    pub switch: Vec<f64>,
    pub emission: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Model {
    Td(TdParams),
    Bu(BuParams),
}

fn check_dims(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Dimension(format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}

fn check_rows(m: &Matrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    check_dims(what, m.len(), rows)?;
    for (i, row) in m.iter().enumerate() {
        check_dims(&format!("{what} row {i}"), row.len(), cols)?;
        check_simplex(row, &format!("{what} row {i}"))?;
    }
    Ok(())
}

fn check_positive_dims(c: usize, m: usize, l: usize) -> Result<()> {
    if c == 0 || m == 0 || l == 0 {
        return Err(Error::InvalidParameter(format!(
            "dimensions must be positive (C={c}, M={m}, L={l})"
        )));
    }
    Ok(())
}

impl TdParams {
    pub fn validate(&self) -> Result<()> {
        let (c, m) = (self.num_states, self.num_labels);
        check_positive_dims(c, m, self.max_outdegree)?;
        check_dims("root_prior", self.root_prior.len(), c)?;
        check_simplex(&self.root_prior, "root_prior")?;
        check_rows(&self.transition, c, c, "transition")?;
        check_rows(&self.emission, c, m, "emission")
    }
}

impl BuParams {
    pub fn validate(&self) -> Result<()> {
        let (c, m, l) = (self.num_states, self.num_labels, self.max_outdegree);
        check_positive_dims(c, m, l)?;
        check_dims("leaf_prior", self.leaf_prior.len(), c)?;
        check_simplex(&self.leaf_prior, "leaf_prior")?;
        check_dims("transition", self.transition.len(), l)?;
        for (pos, t) in self.transition.iter().enumerate() {
            check_dims(&format!("transition[{pos}]"), t.len(), c)?;
            for (i, row) in t.iter().enumerate() {
                check_dims(&format!("transition[{pos}] row {i}"), row.len(), c)?;
            }
            for j in 0..c {
                let column: Vec<f64> = t.iter().map(|row| row[j]).collect();
                check_simplex(&column, &format!("transition[{pos}] column {j}"))?;
            }
        }
        check_dims("switch", self.switch.len(), l)?;
        check_simplex(&self.switch, "switch")?;
        check_rows(&self.emission, c, m, "emission")
    }

    /// Switch probabilities of the occupied slots of `u`, renormalized over
    /// those slots, as `(slot, child, weight)`.
    pub fn switch_weights(&self, tree: &LabeledTree, u: usize) -> Vec<(usize, usize, f64)> {
        let total: f64 = tree.occupied(u).map(|(l, _)| self.switch[l]).sum();
        tree.occupied(u)
            .map(|(l, v)| {
                let w = if total > 0.0 { self.switch[l] / total } else { 0.0 };
                (l, v, w)
            })
            .collect()
    }
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Td(_) => ModelKind::Td,
            Model::Bu(_) => ModelKind::Bu,
        }
    }

    pub fn num_states(&self) -> usize {
        match self {
            Model::Td(p) => p.num_states,
            Model::Bu(p) => p.num_states,
        }
    }

    pub fn num_labels(&self) -> usize {
        match self {
            Model::Td(p) => p.num_labels,
            Model::Bu(p) => p.num_labels,
        }
    }

    pub fn max_outdegree(&self) -> usize {
        match self {
            Model::Td(p) => p.max_outdegree,
            Model::Bu(p) => p.max_outdegree,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Model::Td(p) => p.validate(),
            Model::Bu(p) => p.validate(),
        }
    }

    /// Checks that a tree fits this model's alphabet and out-degree.
    pub fn check_tree(&self, tree: &LabeledTree) -> Result<()> {
        tree.validate(self.num_labels(), self.max_outdegree())
    }

    /// Number of free-standing probabilities stored (all entries, not
    /// degrees of freedom).
    pub fn parameter_count(&self) -> usize {
        let (c, m, l) = (self.num_states(), self.num_labels(), self.max_outdegree());
        match self {
            Model::Td(_) => c + c * c + c * m,
            Model::Bu(_) => c + l * c * c + l + c * m,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Model = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }
}

/// Draws every distribution from a symmetric Dirichlet with the given
/// concentration. Deterministic for a fixed seed.
pub fn init_random(
    kind: ModelKind,
    num_states: usize,
    num_labels: usize,
    max_outdegree: usize,
    seed: u64,
    concentration: f64,
) -> Result<Model> {
    check_positive_dims(num_states, num_labels, max_outdegree)?;
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "concentration must be positive, got {concentration}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| sample_dirichlet(&mut rng, &vec![concentration; n]);
    let (c, m, l) = (num_states, num_labels, max_outdegree);
    let model = match kind {
        ModelKind::Td => Model::Td(TdParams {
            num_states: c,
            num_labels: m,
            max_outdegree: l,
            root_prior: draw(c)?,
            transition: (0..c).map(|_| draw(c)).collect::<Result<_>>()?,
            emission: (0..c).map(|_| draw(m)).collect::<Result<_>>()?,
        }),
        ModelKind::Bu => {
            let leaf_prior = draw(c)?;
            let mut transition = Vec::with_capacity(l);
            for _ in 0..l {
                let mut t = vec![vec![0.0; c]; c];
                for j in 0..c {
                    for (i, p) in draw(c)?.into_iter().enumerate() {
                        t[i][j] = p;
                    }
                }
                transition.push(t);
            }
            Model::Bu(BuParams {
                num_states: c,
                num_labels: m,
                max_outdegree: l,
                leaf_prior,
                transition,
                switch: draw(l)?,
                emission: (0..c).map(|_| draw(m)).collect::<Result<_>>()?,
            })
        }
    };
    Ok(model)
}

fn check_states(tree: &LabeledTree, states: &[usize], num_states: usize) -> Result<()> {
    if states.len() != tree.len() {
        return Err(Error::Dimension(format!(
            "state assignment covers {} nodes, tree has {}",
            states.len(),
            tree.len()
        )));
    }
    if let Some(q) = states.iter().find(|&&q| q >= num_states) {
        return Err(Error::Dimension(format!("state {q} out of range for C={num_states}")));
    }
    Ok(())
}

/// Log-probability of the tree's labels jointly with one full assignment of
/// hidden states under a TD model.
pub fn complete_log_prob_td(params: &TdParams, tree: &LabeledTree, states: &[usize]) -> Result<f64> {
    tree.validate(params.num_labels, usize::MAX)?;
    check_states(tree, states, params.num_states)?;
    let mut lp = params.root_prior[states[0]].ln();
    for u in 0..tree.len() {
        lp += params.emission[states[u]][tree.label(u)].ln();
        if let Some(p) = tree.parent(u) {
            lp += params.transition[states[p]][states[u]].ln();
        }
    }
    Ok(lp)
}

/// Log-probability of the labels jointly with a state assignment and a switch
/// assignment under a BU model. `switches[u]` is the chosen slot of internal
/// node `u` and `None` for leaves.
pub fn complete_log_prob_bu(
    params: &BuParams,
    tree: &LabeledTree,
    states: &[usize],
    switches: &[Option<usize>],
) -> Result<f64> {
    tree.validate(params.num_labels, params.max_outdegree)?;
    check_states(tree, states, params.num_states)?;
    if switches.len() != tree.len() {
        return Err(Error::Dimension(format!(
            "switch assignment covers {} nodes, tree has {}",
            switches.len(),
            tree.len()
        )));
    }
    let mut lp = 0.0;
    for u in 0..tree.len() {
        let q = states[u];
        lp += params.emission[q][tree.label(u)].ln();
        if tree.is_leaf(u) {
            if switches[u].is_some() {
                return Err(Error::InvalidParameter(format!("leaf {u} has a switch position")));
            }
            lp += params.leaf_prior[q].ln();
            continue;
        }
        let slot = switches[u].ok_or_else(|| Error::InvalidParameter(format!("internal node {u} has no switch")))?;
        let child = tree
            .child_at(u, slot)
            .ok_or_else(|| Error::InvalidParameter(format!("switch of node {u} points at empty slot {slot}")))?;
        let weight = params
            .switch_weights(tree, u)
            .into_iter()
            .find(|&(l, _, _)| l == slot)
            .map_or(0.0, |(_, _, w)| w);
        lp += weight.ln() + params.transition[slot][q][states[child]].ln();
    }
    Ok(lp)
}

/// Dispatching form of the two complete-data log-probabilities.
pub fn complete_log_prob(
    model: &Model,
    tree: &LabeledTree,
    states: &[usize],
    switches: &[Option<usize>],
) -> Result<f64> {
    match model {
        Model::Td(p) => complete_log_prob_td(p, tree, states),
        Model::Bu(p) => complete_log_prob_bu(p, tree, states, switches),
    }
}

/// Samples labels for the given tree shape (its labels are ignored).
pub fn sample<R: Rng + ?Sized>(model: &Model, skeleton: &LabeledTree, rng: &mut R) -> Result<LabeledTree> {
    if skeleton.max_slots() > model.max_outdegree() {
        return Err(Error::TooManySlots {
            slots: skeleton.max_slots(),
            max_outdegree: model.max_outdegree(),
        });
    }
    let n = skeleton.len();
    let mut states = vec![0usize; n];
    let emission = match model {
        Model::Td(p) => {
            for u in 0..n {
                let weights = match skeleton.parent(u) {
                    None => &p.root_prior,
                    Some(parent) => &p.transition[states[parent]],
                };
                states[u] = sample_categorical(rng, weights)?;
            }
            &p.emission
        }
        Model::Bu(p) => {
            let c = p.num_states;
            for u in (0..n).rev() {
                if skeleton.is_leaf(u) {
                    states[u] = sample_categorical(rng, &p.leaf_prior)?;
                    continue;
                }
                let options = p.switch_weights(skeleton, u);
                let weights: Vec<f64> = options.iter().map(|o| o.2).collect();
                let (slot, child, _) = options[sample_categorical(rng, &weights)?];
                let column: Vec<f64> = (0..c).map(|i| p.transition[slot][i][states[child]]).collect();
                states[u] = sample_categorical(rng, &column)?;
            }
            &p.emission
        }
    };
    let labels = states
        .iter()
        .map(|&q| sample_categorical(rng, &emission[q]))
        .collect::<Result<Vec<_>>>()?;
    skeleton.relabeled(&labels)
}

/// Seeded convenience wrapper around [`sample`].
pub fn sample_seeded(model: &Model, skeleton: &LabeledTree, seed: u64) -> Result<LabeledTree> {
    sample(model, skeleton, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Hand-set two-state TD model over a binary alphabet.
    pub fn td_two_state() -> TdParams {
        TdParams {
            num_states: 2,
            num_labels: 2,
            max_outdegree: 2,
            root_prior: vec![0.6, 0.4],
            transition: vec![vec![0.7, 0.3], vec![0.2, 0.8]],
            emission: vec![vec![0.9, 0.1], vec![0.25, 0.75]],
        }
    }

    /// Hand-set two-state BU model with distinct per-position transitions.
    pub fn bu_two_state() -> BuParams {
        BuParams {
            num_states: 2,
            num_labels: 2,
            max_outdegree: 2,
            leaf_prior: vec![0.3, 0.7],
            // columns sum to one
            transition: vec![
                vec![vec![0.8, 0.4], vec![0.2, 0.6]],
                vec![vec![0.1, 0.5], vec![0.9, 0.5]],
            ],
            switch: vec![0.35, 0.65],
            emission: vec![vec![0.6, 0.4], vec![0.15, 0.85]],
        }
    }
}
