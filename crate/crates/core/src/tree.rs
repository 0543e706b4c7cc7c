//! Labeled positional trees, their text format, and datasets of trees.
//!
//! A tree is written as an S-expression: `(label child*)` where each child is
//! either a nested tree or `_` for an empty positional slot. `(1 (2) _ (0))`
//! is a root labeled 1 with a leaf in slot 0, nothing in slot 1 and a leaf in
//! slot 2. Trailing empty slots are never written.
//!
//! Nodes are numbered in depth-first preorder with children visited in
//! ascending slot order, so the root is node 0 and every parent has a smaller
//! index than its children. Upward passes iterate indices in reverse, downward
//! passes iterate them forward.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Nested form of a tree, used for construction and rewriting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subtree {
    pub label: usize,
    pub children: Vec<Option<Subtree>>,
}

impl Subtree {
    pub fn leaf(label: usize) -> Self {
        Subtree {
            label,
            children: Vec::new(),
        }
    }

    pub fn new(label: usize, children: Vec<Option<Subtree>>) -> Self {
        Subtree { label, children }
    }
}

/// One node of a flattened tree before structural validation. `children`
/// holds indices into the same node list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawNode {
    pub label: usize,
    pub children: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Node {
    label: usize,
    parent: Option<usize>,
    /// Slot this node occupies in its parent; 0 for the root.
    slot: usize,
    /// Positional child slots, trailing empty slots trimmed.
    children: Vec<Option<usize>>,
}

/// A rooted positional tree with a discrete label on every node.
///
/// Immutable once built. Structural invariants (single root, one parent per
/// non-root node, acyclic) hold by construction; alphabet and out-degree
/// limits are checked against a dataset with [`LabeledTree::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledTree {
    nodes: Vec<Node>,
}

impl LabeledTree {
    pub fn from_subtree(root: &Subtree) -> Self {
        let mut nodes = Vec::new();
        flatten(root, None, 0, &mut nodes);
        LabeledTree { nodes }
    }

    /// Builds a tree from an arbitrary indexed node list, checking that it
    /// forms exactly one rooted tree. The result is re-indexed in preorder.
    pub fn from_nodes(raw: &[RawNode]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Structure("tree has no nodes".into()));
        }
        let mut parent_count = vec![0usize; raw.len()];
        for (u, node) in raw.iter().enumerate() {
            for &child in node.children.iter().flatten() {
                if child >= raw.len() {
                    return Err(Error::Structure(format!("node {u} references missing node {child}")));
                }
                parent_count[child] += 1;
            }
        }
        if let Some(v) = parent_count.iter().position(|&c| c > 1) {
            return Err(Error::Structure(format!("node {v} has more than one parent")));
        }
        let roots: Vec<usize> = (0..raw.len()).filter(|&u| parent_count[u] == 0).collect();
        let root = match roots.as_slice() {
            [r] => *r,
            [] => return Err(Error::Structure("no root: every node has a parent".into())),
            _ => {
                return Err(Error::Structure(format!(
                    "{} candidate roots, expected exactly one",
                    roots.len()
                )))
            }
        };
        // With one parent per node and a unique root, a cycle shows up as
        // nodes unreachable from the root.
        let mut seen = vec![false; raw.len()];
        let mut stack = vec![root];
        let mut visited = 0;
        while let Some(u) = stack.pop() {
            if seen[u] {
                return Err(Error::Structure(format!("cycle through node {u}")));
            }
            seen[u] = true;
            visited += 1;
            stack.extend(raw[u].children.iter().flatten().copied());
        }
        if visited != raw.len() {
            return Err(Error::Structure(format!(
                "{} of {} nodes are not reachable from the root",
                raw.len() - visited,
                raw.len()
            )));
        }
        fn build(raw: &[RawNode], u: usize) -> Subtree {
            Subtree {
                label: raw[u].label,
                children: raw[u].children.iter().map(|c| c.map(|v| build(raw, v))).collect(),
            }
        }
        Ok(LabeledTree::from_subtree(&build(raw, root)))
    }

    pub fn to_subtree(&self) -> Subtree {
        self.subtree_at(0)
    }

    pub fn subtree_at(&self, u: usize) -> Subtree {
        Subtree {
            label: self.nodes[u].label,
            children: self.nodes[u]
                .children
                .iter()
                .map(|c| c.map(|v| self.subtree_at(v)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn label(&self, u: usize) -> usize {
        self.nodes[u].label
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().map(|n| n.label)
    }

    pub fn parent(&self, u: usize) -> Option<usize> {
        self.nodes[u].parent
    }

    /// Slot index `u` occupies under its parent.
    pub fn slot_in_parent(&self, u: usize) -> usize {
        self.nodes[u].slot
    }

    /// Positional child slots of `u`; trailing empty slots are not included.
    pub fn children(&self, u: usize) -> &[Option<usize>] {
        &self.nodes[u].children
    }

    /// `(slot, child)` pairs for the occupied slots of `u`, slot-ascending.
    pub fn occupied(&self, u: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes[u]
            .children
            .iter()
            .enumerate()
            .filter_map(|(l, c)| c.map(|v| (l, v)))
    }

    pub fn child_at(&self, u: usize, slot: usize) -> Option<usize> {
        self.nodes[u].children.get(slot).copied().flatten()
    }

    pub fn is_leaf(&self, u: usize) -> bool {
        self.nodes[u].children.is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&u| self.is_leaf(u))
    }

    pub fn internal_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.children.is_empty()).count()
    }

    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.len()];
        for u in 1..self.len() {
            depth[u] = depth[self.nodes[u].parent.unwrap()] + 1;
        }
        depth.into_iter().max().unwrap_or(0)
    }

    /// Widest slot vector in the tree, i.e. the smallest admissible `L`.
    pub fn max_slots(&self) -> usize {
        self.nodes.iter().map(|n| n.children.len()).max().unwrap_or(0)
    }

    /// Same shape with new labels, given in node order.
    pub fn relabeled(&self, labels: &[usize]) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::Dimension(format!(
                "{} labels for a tree of {} nodes",
                labels.len(),
                self.len()
            )));
        }
        let mut out = self.clone();
        for (node, &label) in out.nodes.iter_mut().zip(labels) {
            node.label = label;
        }
        Ok(out)
    }

    /// Checks labels against the alphabet and slot counts against `L`.
    pub fn validate(&self, alphabet_size: usize, max_outdegree: usize) -> Result<()> {
        for node in &self.nodes {
            if node.label >= alphabet_size {
                return Err(Error::LabelOutOfRange {
                    label: node.label,
                    alphabet_size,
                });
            }
            if node.children.len() > max_outdegree {
                return Err(Error::TooManySlots {
                    slots: node.children.len(),
                    max_outdegree,
                });
            }
        }
        Ok(())
    }
}

fn flatten(tree: &Subtree, parent: Option<usize>, slot: usize, nodes: &mut Vec<Node>) -> usize {
    let index = nodes.len();
    let width = tree.children.iter().rposition(Option::is_some).map_or(0, |p| p + 1);
    nodes.push(Node {
        label: tree.label,
        parent,
        slot,
        children: vec![None; width],
    });
    for (l, child) in tree.children.iter().take(width).enumerate() {
        if let Some(child) = child {
            let v = flatten(child, Some(index), l, nodes);
            nodes[index].children[l] = Some(v);
        }
    }
    index
}

impl fmt::Display for LabeledTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn write_node(t: &LabeledTree, u: usize, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            write!(f, "({}", t.label(u))?;
            for child in t.children(u) {
                match child {
                    Some(v) => {
                        f.write_str(" ")?;
                        write_node(t, *v, f)?;
                    }
                    None => f.write_str(" _")?,
                }
            }
            f.write_str(")")
        }
        write_node(self, 0, f)
    }
}

/// Writes a tree in the text grammar.
pub fn serialize_tree(tree: &LabeledTree) -> String {
    tree.to_string()
}

/// Parses a single tree and validates it against `alphabet_size` and
/// `max_outdegree`.
pub fn parse_tree(text: &str, alphabet_size: usize, max_outdegree: usize) -> Result<LabeledTree> {
    let tree = parse_unchecked(text)?;
    tree.validate(alphabet_size, max_outdegree)?;
    Ok(tree)
}

/// Parses a tree without alphabet or out-degree checks.
pub fn parse_unchecked(text: &str) -> Result<LabeledTree> {
    let mut parser = Parser {
        src: text.as_bytes(),
        pos: 0,
    };
    let root = parser.tree()?;
    parser.skip_ws();
    if parser.pos != parser.src.len() {
        return Err(parser.error("trailing input after tree"));
    }
    Ok(LabeledTree::from_subtree(&root))
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> Error {
        Error::Syntax {
            position: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn tree(&mut self) -> Result<Subtree> {
        match self.peek() {
            Some(b'(') => self.pos += 1,
            Some(_) => return Err(self.error("expected '('")),
            None => return Err(self.error("unexpected end of input, expected '('")),
        }
        let label = self.integer()?;
        let mut children = Vec::new();
        loop {
            match self.peek() {
                Some(b')') => {
                    self.pos += 1;
                    return Ok(Subtree::new(label, children));
                }
                Some(b'_') => {
                    self.pos += 1;
                    self.expect_delimiter()?;
                    children.push(None);
                }
                Some(b'(') => children.push(Some(self.tree()?)),
                Some(_) => return Err(self.error("expected '(', '_' or ')'")),
                None => return Err(self.error("unexpected end of input, expected ')'")),
            }
        }
    }

    fn integer(&mut self) -> Result<usize> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("expected a non-negative integer label"));
        }
        self.expect_delimiter()?;
        // Digits are ASCII, so the slice is valid UTF-8.
        let digits = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        digits.parse().map_err(|_| Error::Syntax {
            position: start,
            message: format!("label {digits} does not fit in an integer"),
        })
    }

    /// Tokens must be separated by whitespace or parentheses.
    fn expect_delimiter(&self) -> Result<()> {
        match self.src.get(self.pos) {
            None | Some(b'(') | Some(b')') => Ok(()),
            Some(c) if c.is_ascii_whitespace() => Ok(()),
            Some(_) => Err(self.error("expected whitespace or parenthesis")),
        }
    }
}

/// A collection of trees sharing an alphabet size `M` and out-degree bound `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    trees: Vec<LabeledTree>,
    alphabet_size: usize,
    max_outdegree: usize,
}

impl Dataset {
    pub fn new(trees: Vec<LabeledTree>, alphabet_size: usize, max_outdegree: usize) -> Result<Self> {
        if alphabet_size == 0 || max_outdegree == 0 {
            return Err(Error::InvalidParameter(
                "alphabet size and maximum out-degree must be positive".into(),
            ));
        }
        for (n, tree) in trees.iter().enumerate() {
            tree.validate(alphabet_size, max_outdegree)
                .map_err(|e| Error::Structure(format!("tree {n}: {e}")))?;
        }
        Ok(Dataset {
            trees,
            alphabet_size,
            max_outdegree,
        })
    }

    /// Parses one tree per non-empty line; lines starting with `#` are
    /// comments. Errors carry 1-based line numbers.
    pub fn parse(text: &str, alphabet_size: usize, max_outdegree: usize) -> Result<Self> {
        let mut trees = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let tree = parse_tree(trimmed, alphabet_size, max_outdegree).map_err(|e| e.at_line(i + 1))?;
            trees.push(tree);
        }
        Dataset::new(trees, alphabet_size, max_outdegree)
    }

    pub fn trees(&self) -> &[LabeledTree] {
        &self.trees
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn max_outdegree(&self) -> usize {
        self.max_outdegree
    }

    pub fn node_count(&self) -> usize {
        self.trees.iter().map(LabeledTree::len).sum()
    }

    /// Splits off the first `n` trees.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.trees.len());
        let make = |trees: &[LabeledTree]| Dataset {
            trees: trees.to_vec(),
            alphabet_size: self.alphabet_size,
            max_outdegree: self.max_outdegree,
        };
        (make(&self.trees[..n]), make(&self.trees[n..]))
    }

    /// One tree per line in the text grammar.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for tree in &self.trees {
            out.push_str(&tree.to_string());
            out.push('\n');
        }
        out
    }
}

pub fn load_dataset(path: &Path, alphabet_size: usize, max_outdegree: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Dataset::parse(&text, alphabet_size, max_outdegree)
}

/// Grows a random tree shape with all labels 0.
///
/// Breadth-first: every slot of every node is filled with probability
/// `branching` until `max_nodes` nodes exist.
pub fn random_skeleton<R: Rng + ?Sized>(
    rng: &mut R,
    max_nodes: usize,
    max_outdegree: usize,
    branching: f64,
) -> LabeledTree {
    let max_nodes = max_nodes.max(1);
    let mut raw = vec![RawNode {
        label: 0,
        children: Vec::new(),
    }];
    let mut frontier = 0;
    while frontier < raw.len() {
        let mut slots = vec![None; max_outdegree];
        for slot in slots.iter_mut() {
            if raw.len() < max_nodes && rng.random::<f64>() < branching {
                *slot = Some(raw.len());
                raw.push(RawNode {
                    label: 0,
                    children: Vec::new(),
                });
            }
        }
        raw[frontier].children = slots;
        frontier += 1;
    }
    LabeledTree::from_nodes(&raw).expect("generated nodes form a tree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parses_single_node() {
        let t = parse_tree("(0)", 1, 1).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.label(0), 0);
        assert!(t.is_leaf(0));
        assert_eq!(t.parent(0), None);
    }

    #[test]
    fn parses_interior_gap() {
        let t = parse_tree("(1 (2) _ (0))", 3, 3).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.label(0), 1);
        assert_eq!(t.children(0), &[Some(1), None, Some(2)]);
        assert_eq!(t.label(1), 2);
        assert_eq!(t.label(2), 0);
        assert_eq!(t.slot_in_parent(2), 2);
        assert_eq!(t.parent(2), Some(0));
    }

    #[test]
    fn parses_nested_tree_in_preorder() {
        let t = parse_tree("(0 (1 (2) (2)) (1))", 3, 2).unwrap();
        assert_eq!(t.len(), 5);
        assert_eq!(t.depth(), 2);
        assert_eq!(t.labels().collect::<Vec<_>>(), vec![0, 1, 2, 2, 1]);
        assert_eq!(t.children(1), &[Some(2), Some(3)]);
        assert_eq!(t.leaves().collect::<Vec<_>>(), vec![2, 3, 4]);
        assert_eq!(t.internal_count(), 2);
    }

    #[test]
    fn serializes_with_gaps_and_trims_trailing_slots() {
        assert_eq!(serialize_tree(&parse_tree("(3)", 4, 1).unwrap()), "(3)");
        let t = LabeledTree::from_subtree(&Subtree::new(1, vec![None, None, Some(Subtree::leaf(0))]));
        assert_eq!(serialize_tree(&t), "(1 _ _ (0))");
        let trailing = parse_tree("(1 (0) _ _)", 2, 3).unwrap();
        assert_eq!(serialize_tree(&trailing), "(1 (0))");
        assert_eq!(trailing.children(0).len(), 1);
    }

    #[test]
    fn whitespace_is_flexible() {
        let t = parse_tree("  ( 1\t(2)\n_ ( 0 ) ) ", 3, 3).unwrap();
        assert_eq!(serialize_tree(&t), "(1 (2) _ (0))");
    }

    #[test]
    fn syntax_errors_report_position() {
        for (text, pos) in [
            ("", 0),
            ("0", 0),
            ("(x)", 1),
            ("(1", 2),
            ("(1 (0)", 6),
            ("(1) (2)", 4),
            ("(1_)", 2),
            ("(12a)", 3),
        ] {
            match parse_tree(text, 100, 3) {
                Err(Error::Syntax { position, .. }) => assert_eq!(position, pos, "{text:?}"),
                other => panic!("{text:?}: expected syntax error, got {other:?}"),
            }
        }
    }

    #[test]
    fn rejects_label_and_outdegree_violations() {
        assert!(matches!(
            parse_tree("(1 (3))", 3, 2),
            Err(Error::LabelOutOfRange {
                label: 3,
                alphabet_size: 3
            })
        ));
        assert!(matches!(
            parse_tree("(1 (0) (0) (0))", 3, 2),
            Err(Error::TooManySlots {
                slots: 3,
                max_outdegree: 2
            })
        ));
        // A child in slot 2 needs L >= 3 even though only one slot is used.
        assert!(matches!(
            parse_tree("(1 _ _ (0))", 3, 2),
            Err(Error::TooManySlots { slots: 3, .. })
        ));
    }

    #[test]
    fn dataset_skips_comments_and_blank_lines() {
        let ds = Dataset::parse("# header\n(0 (1))\n\n(1)\n", 2, 1).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.node_count(), 3);
        assert!(Dataset::parse("", 2, 1).unwrap().is_empty());
    }

    #[test]
    fn dataset_error_names_line() {
        let err = Dataset::parse("(0)\n# c\n(0 (5))\n", 2, 1).unwrap_err();
        match err {
            Error::Line { line, source } => {
                assert_eq!(line, 3);
                assert!(matches!(*source, Error::LabelOutOfRange { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_string("(0)\n(0 (1)\n").contains("line 2"));
    }

    fn err_string(text: &str) -> String {
        Dataset::parse(text, 2, 2).unwrap_err().to_string()
    }

    #[test]
    fn load_dataset_reports_missing_file() {
        let err = load_dataset(Path::new("/nonexistent/trees.txt"), 2, 2).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/trees.txt"));
    }

    #[test]
    fn from_nodes_reindexes_in_preorder() {
        let raw = vec![
            RawNode {
                label: 2,
                children: vec![],
            },
            RawNode {
                label: 0,
                children: vec![Some(2), None, Some(0)],
            },
            RawNode {
                label: 1,
                children: vec![],
            },
        ];
        let t = LabeledTree::from_nodes(&raw).unwrap();
        assert_eq!(t.to_string(), "(0 (1) _ (2))");
    }

    #[test]
    fn from_nodes_rejects_structural_violations() {
        let leaf = |label| RawNode {
            label,
            children: vec![],
        };
        let node = |children: Vec<Option<usize>>| RawNode { label: 0, children };
        let cases: Vec<Vec<RawNode>> = vec![
            vec![],
            // two roots
            vec![node(vec![Some(1)]), leaf(0), leaf(0)],
            // shared child
            vec![node(vec![Some(1), Some(2)]), node(vec![Some(2)]), leaf(0)],
            // dangling index
            vec![node(vec![Some(7)])],
            // cycle detached from the root
            vec![leaf(0), node(vec![Some(2)]), node(vec![Some(1)])],
            // every node has a parent
            vec![node(vec![Some(1)]), node(vec![Some(0)])],
        ];
        for raw in cases {
            assert!(
                matches!(LabeledTree::from_nodes(&raw), Err(Error::Structure(_))),
                "{raw:?}"
            );
        }
    }

    #[test]
    fn swapping_via_subtrees_rebuilds_indices() {
        let t = parse_tree("(0 (1 (2)) (3))", 4, 2).unwrap();
        let mut s = t.to_subtree();
        s.children.swap(0, 1);
        let swapped = LabeledTree::from_subtree(&s);
        assert_eq!(swapped.to_string(), "(0 (3) (1 (2)))");
        assert_eq!(swapped.parent(3), Some(2));
    }

    #[test]
    fn random_skeleton_respects_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let t = random_skeleton(&mut rng, 12, 3, 0.5);
            assert!(t.len() <= 12);
            t.validate(1, 3).unwrap();
        }
    }

    fn arb_subtree(max_label: usize, max_slots: usize) -> impl Strategy<Value = Subtree> {
        let leaf = (0..max_label).prop_map(Subtree::leaf);
        leaf.prop_recursive(4, 24, max_slots as u32, move |inner| {
            (
                0..max_label,
                prop::collection::vec(prop::option::weighted(0.7, inner), 0..=max_slots),
            )
                .prop_map(|(label, children)| Subtree::new(label, children))
        })
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(s in arb_subtree(5, 3)) {
            let t = LabeledTree::from_subtree(&s);
            let back = parse_tree(&serialize_tree(&t), 5, 3).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn validate_rejects_exactly_the_broken_invariant(s in arb_subtree(5, 3), which in 0..2usize) {
            let t = LabeledTree::from_subtree(&s);
            prop_assert!(t.validate(5, 3).is_ok());
            match which {
                0 => {
                    let mut labels: Vec<usize> = t.labels().collect();
                    let last = labels.len() - 1;
                    labels[last] = 5;
                    let broken = t.relabeled(&labels).unwrap();
                    let is_label_error = matches!(broken.validate(5, 3), Err(Error::LabelOutOfRange { .. }));
                    prop_assert!(is_label_error);
                }
                _ => {
                    let width = t.max_slots();
                    if width > 0 {
                        let is_slot_error = matches!(t.validate(5, width - 1), Err(Error::TooManySlots { .. }));
                        prop_assert!(is_slot_error);
                    }
                    prop_assert!(t.validate(5, width.max(1)).is_ok());
                }
            }
        }

        #[test]
        fn from_nodes_round_trips_flattened_trees(s in arb_subtree(5, 3), rot in 0usize..24) {
            let t = LabeledTree::from_subtree(&s);
            // Present the nodes in a rotated order to exercise re-indexing.
            let n = t.len();
            let shift = rot % n;
            let pos = |u: usize| (u + shift) % n;
            let mut raw = vec![RawNode { label: 0, children: vec![] }; n];
            for u in 0..n {
                raw[pos(u)] = RawNode {
                    label: t.label(u),
                    children: t.children(u).iter().map(|c| c.map(pos)).collect(),
                };
            }
            prop_assert_eq!(LabeledTree::from_nodes(&raw).unwrap(), t.clone());
            if n > 1 {
                // Point a leaf back at the root: the root gains a parent.
                let leaf = t.leaves().next().unwrap();
                raw[pos(leaf)].children = vec![Some(pos(0))];
                prop_assert!(LabeledTree::from_nodes(&raw).is_err());
            }
        }
    }
}
