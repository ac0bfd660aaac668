//! Phylogenetic language trees and per-node layer budgets.
//!
//! A tree is written as a parenthesized list, e.g. `(((en,de),ru),az)`.
//! Every node is identified by the sorted set of leaf codes beneath it, so
//! the block shared by `en` and `de` is `de+en` regardless of child order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("empty tree specification")]
    Empty,
    #[error("unbalanced parentheses at byte {0}")]
    Unbalanced(usize),
    #[error("unexpected character {found:?} at byte {pos}")]
    Unexpected { pos: usize, found: char },
    #[error("trailing input at byte {0}")]
    Trailing(usize),
    #[error("duplicate leaf code `{0}`")]
    DuplicateLeaf(String),
    #[error("internal node at byte {0} has fewer than two children")]
    TooFewChildren(usize),
    #[error("depth budget {budget} is infeasible: deepest path has {needed} nodes")]
    Infeasible { budget: usize, needed: usize },
    #[error("unknown language `{0}`")]
    UnknownLanguage(String),
}

/// A node of a language tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeNode {
    Leaf(String),
    Internal(Vec<TreeNode>),
}

/// Sorted set of leaf codes under a node. Rendered as codes joined by `+`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(Vec<String>);

impl NodeId {
    pub fn from_codes<I, S>(codes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = codes.into_iter().map(Into::into).collect();
        NodeId(set.into_iter().collect())
    }

    pub fn codes(&self) -> &[String] {
        &self.0
    }

    pub fn contains(&self, code: &str) -> bool {
        self.0.binary_search_by(|c| c.as_str().cmp(code)).is_ok()
    }

    pub fn is_leaf(&self) -> bool {
        self.0.len() == 1
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("+"))
    }
}

impl TreeNode {
    pub fn node_id(&self) -> NodeId {
        let mut codes = Vec::new();
        self.collect_leaves(&mut codes);
        NodeId::from_codes(codes)
    }

    fn collect_leaves(&self, out: &mut Vec<String>) {
        match self {
            TreeNode::Leaf(code) => out.push(code.clone()),
            TreeNode::Internal(children) => {
                for c in children {
                    c.collect_leaves(out);
                }
            }
        }
    }

    fn render_into(&self, out: &mut String) {
        match self {
            TreeNode::Leaf(code) => out.push_str(code),
            TreeNode::Internal(children) => {
                out.push('(');
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    c.render_into(out);
                }
                out.push(')');
            }
        }
    }
}

/// A validated language tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanguageTree {
    root: TreeNode,
}

impl LanguageTree {
    /// Builds a tree from a node, checking leaf uniqueness and arity.
    pub fn new(root: TreeNode) -> Result<Self, TreeError> {
        fn check(node: &TreeNode, seen: &mut BTreeSet<String>) -> Result<(), TreeError> {
            match node {
                TreeNode::Leaf(code) => {
                    if !seen.insert(code.clone()) {
                        return Err(TreeError::DuplicateLeaf(code.clone()));
                    }
                    Ok(())
                }
                TreeNode::Internal(children) => {
                    if children.len() < 2 {
                        return Err(TreeError::TooFewChildren(0));
                    }
                    children.iter().try_for_each(|c| check(c, seen))
                }
            }
        }
        check(&root, &mut BTreeSet::new())?;
        Ok(LanguageTree { root })
    }

    pub fn single(code: &str) -> Self {
        LanguageTree {
            root: TreeNode::Leaf(code.to_string()),
        }
    }

    pub fn root(&self) -> &TreeNode {
        &self.root
    }

    pub fn root_id(&self) -> NodeId {
        self.root.node_id()
    }

    /// Leaf codes in left-to-right order.
    pub fn leaves(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.root.collect_leaves(&mut out);
        out
    }

    pub fn has_leaf(&self, code: &str) -> bool {
        self.root_id().contains(code)
    }

    /// Canonical text form; `parse_tree(&t.render()) == Ok(t)`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        self.root.render_into(&mut s);
        s
    }

    /// Number of nodes on the deepest root-to-leaf path.
    pub fn max_path_nodes(&self) -> usize {
        fn depth(n: &TreeNode) -> usize {
            match n {
                TreeNode::Leaf(_) => 1,
                TreeNode::Internal(ch) => 1 + ch.iter().map(depth).max().unwrap_or(0),
            }
        }
        depth(&self.root)
    }

    /// Node ids from the root down to `leaf` (root first).
    pub fn path_to(&self, leaf: &str) -> Result<Vec<NodeId>, TreeError> {
        fn walk(n: &TreeNode, leaf: &str, acc: &mut Vec<NodeId>) -> bool {
            acc.push(n.node_id());
            let found = match n {
                TreeNode::Leaf(code) => code == leaf,
                TreeNode::Internal(ch) => ch.iter().any(|c| walk(c, leaf, acc)),
            };
            if !found {
                acc.pop();
            }
            found
        }
        let mut acc = Vec::new();
        if walk(&self.root, leaf, &mut acc) {
            Ok(acc)
        } else {
            Err(TreeError::UnknownLanguage(leaf.to_string()))
        }
    }

    /// Number of nodes shared by the root paths of two leaves.
    pub fn shared_nodes(&self, a: &str, b: &str) -> Result<usize, TreeError> {
        let pa = self.path_to(a)?;
        let pb = self.path_to(b)?;
        Ok(pa.iter().zip(&pb).take_while(|(x, y)| x == y).count())
    }

    /// Children (as node ids) of every internal node, in spec order.
    pub fn children_map(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        fn walk(n: &TreeNode, out: &mut BTreeMap<NodeId, Vec<NodeId>>) {
            if let TreeNode::Internal(ch) = n {
                out.insert(n.node_id(), ch.iter().map(TreeNode::node_id).collect());
                for c in ch {
                    walk(c, out);
                }
            }
        }
        let mut out = BTreeMap::new();
        walk(&self.root, &mut out);
        out
    }

    /// All node ids, leaves first, every child before its parent.
    pub fn traversal_schedule(&self) -> TraversalSchedule {
        fn post(n: &TreeNode, out: &mut Vec<NodeId>) {
            if let TreeNode::Internal(ch) = n {
                for c in ch {
                    post(c, out);
                }
            }
            out.push(n.node_id());
        }
        let mut order = Vec::new();
        post(&self.root, &mut order);
        TraversalSchedule { order }
    }
}

impl fmt::Display for LanguageTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    seen: BTreeSet<String>,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn unexpected(&self) -> TreeError {
        match self.peek() {
            None => TreeError::Unbalanced(self.pos),
            Some(b) => TreeError::Unexpected {
                pos: self.pos,
                found: b as char,
            },
        }
    }

    fn tree(&mut self) -> Result<TreeNode, TreeError> {
        self.skip_ws();
        match self.peek() {
            Some(b'(') => {
                let open = self.pos;
                self.pos += 1;
                let mut children = vec![self.tree()?];
                loop {
                    self.skip_ws();
                    match self.peek() {
                        Some(b',') => {
                            self.pos += 1;
                            children.push(self.tree()?);
                        }
                        Some(b')') => {
                            self.pos += 1;
                            break;
                        }
                        None => return Err(TreeError::Unbalanced(open)),
                        Some(_) => return Err(self.unexpected()),
                    }
                }
                if children.len() < 2 {
                    return Err(TreeError::TooFewChildren(open));
                }
                Ok(TreeNode::Internal(children))
            }
            Some(b) if b.is_ascii_alphabetic() => {
                let start = self.pos;
                while let Some(b) = self.peek() {
                    if b.is_ascii_alphanumeric() || b == b'-' {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                let code = std::str::from_utf8(&self.src[start..self.pos])
                    .expect("ascii")
                    .to_string();
                if !self.seen.insert(code.clone()) {
                    return Err(TreeError::DuplicateLeaf(code));
                }
                Ok(TreeNode::Leaf(code))
            }
            _ => Err(self.unexpected()),
        }
    }
}

/// Parses `tree := code | '(' tree (',' tree)+ ')'`, ignoring whitespace.
pub fn parse_tree(spec_text: &str) -> Result<LanguageTree, TreeError> {
    if spec_text.trim().is_empty() {
        return Err(TreeError::Empty);
    }
    let mut p = Parser {
        src: spec_text.as_bytes(),
        pos: 0,
        seen: BTreeSet::new(),
    };
    let root = p.tree()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(if p.src[p.pos] == b')' {
            TreeError::Unbalanced(p.pos)
        } else {
            TreeError::Trailing(p.pos)
        });
    }
    Ok(LanguageTree { root })
}

/// Leaves-first order of node ids; reversed it is the decoder split order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraversalSchedule {
    pub order: Vec<NodeId>,
}

impl TraversalSchedule {
    pub fn split_order(&self) -> impl Iterator<Item = &NodeId> {
        self.order.iter().rev()
    }
}

/// Number of Transformer layers owned by each tree node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerAllocation {
    pub layers: BTreeMap<NodeId, usize>,
    pub depth_budget: usize,
}

impl LayerAllocation {
    pub fn get(&self, id: &NodeId) -> Option<usize> {
        self.layers.get(id).copied()
    }

    pub fn total(&self) -> usize {
        self.layers.values().sum()
    }

    /// Sum of layer counts along the root path of `leaf`.
    pub fn path_sum(&self, tree: &LanguageTree, leaf: &str) -> Result<usize, TreeError> {
        Ok(tree
            .path_to(leaf)?
            .iter()
            .map(|id| self.layers.get(id).copied().unwrap_or(0))
            .sum())
    }

    /// True when the allocation covers exactly the nodes of `tree`.
    pub fn matches(&self, tree: &LanguageTree) -> bool {
        let sched = tree.traversal_schedule();
        sched.order.len() == self.layers.len() && sched.order.iter().all(|id| self.layers.contains_key(id))
    }
}

/// Splits `depth_budget` over tree nodes so every root-to-leaf path sums to it.
///
/// With `m` the node count of the deepest path, position `i` (root = 1) gets
/// `D / m` layers plus one when `i <= D % m`. Internal nodes take the count of
/// their depth; leaves absorb whatever remains of the budget.
pub fn allocate_layers(tree: &LanguageTree, depth_budget: usize) -> Result<LayerAllocation, TreeError> {
    let m = tree.max_path_nodes();
    if depth_budget < m {
        return Err(TreeError::Infeasible {
            budget: depth_budget,
            needed: m,
        });
    }
    let base = depth_budget / m;
    let extra = depth_budget % m;
    let position = |depth: usize| base + usize::from(depth <= extra);

    fn walk(
        n: &TreeNode,
        depth: usize,
        used: usize,
        budget: usize,
        position: &dyn Fn(usize) -> usize,
        out: &mut BTreeMap<NodeId, usize>,
    ) -> Result<(), TreeError> {
        match n {
            TreeNode::Leaf(_) => {
                if used >= budget {
                    return Err(TreeError::Infeasible { budget, needed: depth });
                }
                out.insert(n.node_id(), budget - used);
            }
            TreeNode::Internal(ch) => {
                let own = position(depth);
                out.insert(n.node_id(), own);
                for c in ch {
                    walk(c, depth + 1, used + own, budget, position, out)?;
                }
            }
        }
        Ok(())
    }

    let mut layers = BTreeMap::new();
    walk(tree.root(), 1, 0, depth_budget, &position, &mut layers)?;
    Ok(LayerAllocation { layers, depth_budget })
}

/// Encoder and decoder depths of the full-sharing model matched to a
/// hierarchical one: the sum of all blocks on each side.
pub fn baseline_depths(enc: &LayerAllocation, dec: &LayerAllocation) -> (usize, usize) {
    (enc.total(), dec.total())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn id(codes: &[&str]) -> NodeId {
        NodeId::from_codes(codes.iter().copied())
    }

    #[test]
    fn parses_two_leaf_tree() {
        let t = parse_tree("(az,tr)").unwrap();
        assert_eq!(t.root_id(), id(&["az", "tr"]));
        assert_eq!(t.leaves(), vec!["az", "tr"]);
    }

    #[test]
    fn parses_nested_with_whitespace() {
        let t = parse_tree(" ( ((en, de) ,ru), az ) ").unwrap();
        assert_eq!(t.render(), "(((en,de),ru),az)");
        assert_eq!(t.max_path_nodes(), 4);
    }

    #[test]
    fn parses_single_leaf() {
        let t = parse_tree("de").unwrap();
        assert_eq!(t.root(), &TreeNode::Leaf("de".into()));
        assert_eq!(t.max_path_nodes(), 1);
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse_tree("(en,en)"), Err(TreeError::DuplicateLeaf("en".into())));
        assert_eq!(parse_tree("   "), Err(TreeError::Empty));
        assert!(matches!(parse_tree("(az)"), Err(TreeError::TooFewChildren(0))));
        assert!(matches!(parse_tree("(az,tr"), Err(TreeError::Unbalanced(_))));
        assert!(matches!(parse_tree("(az,tr))"), Err(TreeError::Unbalanced(_))));
        assert!(matches!(parse_tree("(az,,tr)"), Err(TreeError::Unexpected { .. })));
        assert!(matches!(parse_tree("az tr"), Err(TreeError::Trailing(_))));
        assert!(matches!(parse_tree("(1a,b)"), Err(TreeError::Unexpected { .. })));
    }

    #[test]
    fn bcp47_codes_with_subtags() {
        let t = parse_tree("(zh-Hant,zh-Hans)").unwrap();
        assert!(t.has_leaf("zh-Hant"));
    }

    #[test]
    fn case_one_allocation() {
        let t = parse_tree("(az,tr)").unwrap();
        let a = allocate_layers(&t, 3).unwrap();
        assert_eq!(a.get(&id(&["az"])), Some(1));
        assert_eq!(a.get(&id(&["tr"])), Some(1));
        assert_eq!(a.get(&id(&["az", "tr"])), Some(2));
    }

    #[test]
    fn single_leaf_takes_whole_budget() {
        let a = allocate_layers(&parse_tree("de").unwrap(), 3).unwrap();
        assert_eq!(a.get(&id(&["de"])), Some(3));
    }

    #[test]
    fn unbalanced_tree_allocation() {
        let t = parse_tree("((az,tr),pl)").unwrap();
        let a = allocate_layers(&t, 3).unwrap();
        assert_eq!(a.get(&id(&["az", "pl", "tr"])), Some(1));
        assert_eq!(a.get(&id(&["az", "tr"])), Some(1));
        assert_eq!(a.get(&id(&["az"])), Some(1));
        assert_eq!(a.get(&id(&["tr"])), Some(1));
        assert_eq!(a.get(&id(&["pl"])), Some(2));
        for leaf in ["az", "tr", "pl"] {
            assert_eq!(a.path_sum(&t, leaf).unwrap(), 3);
        }
    }

    #[test]
    fn infeasible_budget() {
        let t = parse_tree("((a,b),c)").unwrap();
        assert_eq!(
            allocate_layers(&t, 2),
            Err(TreeError::Infeasible { budget: 2, needed: 3 })
        );
    }

    #[test]
    fn schedules() {
        let s = parse_tree("(az,tr)").unwrap().traversal_schedule();
        assert_eq!(s.order, vec![id(&["az"]), id(&["tr"]), id(&["az", "tr"])]);
        let s = parse_tree("(((en,de),ru),az)").unwrap().traversal_schedule();
        assert_eq!(
            s.order,
            vec![
                id(&["en"]),
                id(&["de"]),
                id(&["de", "en"]),
                id(&["ru"]),
                id(&["de", "en", "ru"]),
                id(&["az"]),
                id(&["az", "de", "en", "ru"]),
            ]
        );
        let s = parse_tree("de").unwrap().traversal_schedule();
        assert_eq!(s.order, vec![id(&["de"])]);
    }

    #[test]
    fn baseline_depth_sums() {
        let enc = allocate_layers(&parse_tree("(az,tr)").unwrap(), 3).unwrap();
        let dec = allocate_layers(&parse_tree("de").unwrap(), 3).unwrap();
        assert_eq!(baseline_depths(&enc, &dec), (4, 3));
        let enc = allocate_layers(&parse_tree("((az,tr),pl)").unwrap(), 3).unwrap();
        assert_eq!(enc.total(), 6);
        let bi = allocate_layers(&parse_tree("az").unwrap(), 3).unwrap();
        assert_eq!(baseline_depths(&bi, &dec), (3, 3));
    }

    #[test]
    fn shared_nodes_counts_common_ancestors() {
        let t = parse_tree("(((en,de),ru),az)").unwrap();
        assert_eq!(t.shared_nodes("en", "de").unwrap(), 3);
        assert_eq!(t.shared_nodes("en", "ru").unwrap(), 2);
        assert_eq!(t.shared_nodes("en", "az").unwrap(), 1);
        assert_eq!(t.shared_nodes("en", "en").unwrap(), 4);
        assert!(t.shared_nodes("en", "xx").is_err());
    }

    fn arb_tree() -> impl Strategy<Value = LanguageTree> {
        let leaf = Just(()).prop_map(|_| TreeNode::Leaf(String::new()));
        let node = leaf.prop_recursive(4, 24, 4, |inner| {
            prop::collection::vec(inner, 2..4).prop_map(TreeNode::Internal)
        });
        node.prop_map(|mut n| {
            fn name(n: &mut TreeNode, next: &mut usize) {
                match n {
                    TreeNode::Leaf(code) => {
                        *code = format!("l{next}");
                        *next += 1;
                    }
                    TreeNode::Internal(ch) => ch.iter_mut().for_each(|c| name(c, next)),
                }
            }
            name(&mut n, &mut 0);
            LanguageTree::new(n).unwrap()
        })
    }

    proptest! {
        #[test]
        fn every_path_sums_to_budget(t in arb_tree(), slack in 0usize..6) {
            let d = t.max_path_nodes() + slack;
            let a = allocate_layers(&t, d).unwrap();
            prop_assert!(a.matches(&t));
            prop_assert!(a.layers.values().all(|&c| c >= 1));
            for leaf in t.leaves() {
                prop_assert_eq!(a.path_sum(&t, &leaf).unwrap(), d);
            }
            prop_assert_eq!(allocate_layers(&t, d).unwrap(), a);
        }

        #[test]
        fn render_round_trips(t in arb_tree()) {
            prop_assert_eq!(parse_tree(&t.render()).unwrap(), t);
        }

        #[test]
        fn schedule_is_topological(t in arb_tree()) {
            let s = t.traversal_schedule();
            let pos: BTreeMap<_, _> = s.order.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
            prop_assert_eq!(pos.len(), s.order.len());
            for (parent, kids) in t.children_map() {
                for k in kids {
                    prop_assert!(pos[&k] < pos[&parent]);
                }
            }
        }

        #[test]
        fn closer_leaves_merge_no_later(t in arb_tree(), slack in 0usize..4) {
            let d = t.max_path_nodes() + slack;
            let a = allocate_layers(&t, d).unwrap();
            let leaves = t.leaves();
            let before_merge = |x: &str, y: &str| -> usize {
                let shared = t.shared_nodes(x, y).unwrap();
                let path = t.path_to(x).unwrap();
                path[shared..].iter().map(|n| a.get(n).unwrap()).sum()
            };
            for x in &leaves {
                for y in &leaves {
                    for z in &leaves {
                        if x == y || x == z {
                            continue;
                        }
                        let sy = t.shared_nodes(x, y).unwrap();
                        let sz = t.shared_nodes(x, z).unwrap();
                        if sy > sz {
                            prop_assert!(before_merge(x, y) <= before_merge(x, z));
                        }
                    }
                }
            }
        }
    }
}
