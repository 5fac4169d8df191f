//! Fully materialized protocol trees: explicit Chance weights, leaf
//! (allocation, payment) pairs, exact backward induction with the
//! revenue-then-zero tie rule, and a brute-force strategy enumeration used
//! as the independent reference for the induction.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Allowed, Bit, BuyerStrategy, ChanceDist, NodeView, Protocol, RunError};
use crate::menu::Valuation;
use crate::num::{format_q, parse_q, q_one, q_zero, Q};

#[derive(Clone, Debug, PartialEq)]
pub enum TreeNode {
    Buyer { children: [usize; 2] },
    Chance { weights: Vec<Q>, children: Vec<usize> },
    Leaf { alloc_mask: u64, payment: Q },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplicitTree {
    nodes: Vec<TreeNode>,
    root: usize,
}

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("chance node {0}: weights must be non-negative and sum to 1")]
    BadWeights(usize),
    #[error("node {0}: child index out of range")]
    BadChild(usize),
    #[error("tree is cyclic or root unreachable")]
    NotATree,
    #[error("json: {0}")]
    Json(String),
}

impl ExplicitTree {
    pub fn new(nodes: Vec<TreeNode>, root: usize) -> Result<ExplicitTree, TreeError> {
        let t = ExplicitTree { nodes, root };
        t.validate()?;
        Ok(t)
    }

    pub fn root_id(&self) -> usize {
        self.root
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn validate(&self) -> Result<(), TreeError> {
        if self.root >= self.nodes.len() {
            return Err(TreeError::BadChild(self.root));
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            if seen[id] {
                return Err(TreeError::NotATree);
            }
            seen[id] = true;
            match &self.nodes[id] {
                TreeNode::Buyer { children } => {
                    for &c in children {
                        if c >= self.nodes.len() {
                            return Err(TreeError::BadChild(id));
                        }
                        stack.push(c);
                    }
                }
                TreeNode::Chance { weights, children } => {
                    if weights.len() != children.len() || children.is_empty() {
                        return Err(TreeError::BadWeights(id));
                    }
                    let mut sum = q_zero();
                    for w in weights {
                        if w < &q_zero() {
                            return Err(TreeError::BadWeights(id));
                        }
                        sum += w;
                    }
                    if sum != q_one() {
                        return Err(TreeError::BadWeights(id));
                    }
                    for &c in children {
                        if c >= self.nodes.len() {
                            return Err(TreeError::BadChild(id));
                        }
                        stack.push(c);
                    }
                }
                TreeNode::Leaf { .. } => {}
            }
        }
        Ok(())
    }

    pub fn count_chance(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Chance { .. })).count()
    }

    pub fn count_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    pub fn max_leaf_payment(&self) -> Q {
        let mut m = q_zero();
        for n in &self.nodes {
            if let TreeNode::Leaf { payment, .. } = n {
                if payment > &m {
                    m = payment.clone();
                }
            }
        }
        m
    }

    /// Copy of the tree with `delta` added to every leaf payment in the
    /// subtree rooted at `at`.
    pub fn offset_subtree(&self, at: usize, delta: &Q) -> ExplicitTree {
        let mut nodes = self.nodes.clone();
        let mut stack = vec![at];
        while let Some(id) = stack.pop() {
            match &mut nodes[id] {
                TreeNode::Leaf { payment, .. } => *payment += delta,
                TreeNode::Buyer { children } => stack.extend(children.iter().copied()),
                TreeNode::Chance { children, .. } => stack.extend(children.iter().copied()),
            }
        }
        ExplicitTree { nodes, root: self.root }
    }
}

impl Protocol for ExplicitTree {
    type Node = usize;

    fn root(&self) -> usize {
        self.root
    }

    fn view(&self, node: &usize) -> NodeView {
        match &self.nodes[*node] {
            TreeNode::Buyer { .. } => NodeView::Buyer { allowed: Allowed::Both },
            TreeNode::Chance { weights, .. } => {
                NodeView::Chance { dist: ChanceDist::Weighted(weights.clone()), reveal: true }
            }
            TreeNode::Leaf { alloc_mask, payment } => {
                NodeView::Leaf { alloc_mask: *alloc_mask, payment: payment.clone() }
            }
        }
    }

    fn buyer_child(&self, node: &usize, bit: Bit) -> Result<usize, RunError> {
        match &self.nodes[*node] {
            TreeNode::Buyer { children } => Ok(children[bit as usize]),
            _ => Err(RunError::DisallowedBit { bit }),
        }
    }

    fn chance_child(&self, node: &usize, outcome: usize) -> usize {
        match &self.nodes[*node] {
            TreeNode::Chance { children, .. } => children[outcome],
            _ => unreachable!("chance_child on a non-chance node"),
        }
    }
}

/// Exact best response on an explicit tree by backward induction. At a
/// Buyer node ties on utility prefer the child with higher continuation
/// revenue, then bit 0.
#[derive(Clone, Debug)]
pub struct BestResponse {
    pub value: Q,
    pub revenue: Q,
    /// Chosen bit per Buyer node id.
    pub policy: Vec<Option<Bit>>,
    /// Continuation (utility, expected payment) per node id under the policy.
    pub node_values: Vec<Option<(Q, Q)>>,
}

pub fn tree_best_response(tree: &ExplicitTree, v: &Valuation) -> BestResponse {
    let mut policy = vec![None; tree.len()];
    let mut node_values = vec![None; tree.len()];
    fn go(
        tree: &ExplicitTree,
        v: &Valuation,
        id: usize,
        policy: &mut Vec<Option<Bit>>,
        node_values: &mut Vec<Option<(Q, Q)>>,
    ) -> (Q, Q) {
        let out = match tree.node(id) {
            TreeNode::Leaf { alloc_mask, payment } => {
                (v.value(*alloc_mask) - payment, payment.clone())
            }
            TreeNode::Chance { weights, children } => {
                let mut val = q_zero();
                let mut rev = q_zero();
                for (w, &c) in weights.iter().zip(children) {
                    let (cv, cr) = go(tree, v, c, policy, node_values);
                    val += w * cv;
                    rev += w * cr;
                }
                (val, rev)
            }
            TreeNode::Buyer { children } => {
                let (v0, r0) = go(tree, v, children[0], policy, node_values);
                let (v1, r1) = go(tree, v, children[1], policy, node_values);
                let pick_one = v1 > v0 || (v1 == v0 && r1 > r0);
                policy[id] = Some(pick_one);
                if pick_one {
                    (v1, r1)
                } else {
                    (v0, r0)
                }
            }
        };
        node_values[id] = Some(out.clone());
        out
    }
    let (value, revenue) = go(tree, v, tree.root_id(), &mut policy, &mut node_values);
    BestResponse { value, revenue, policy, node_values }
}

/// Every pure strategy's exact (utility, expected payment), by recursive
/// union at Buyer nodes and weighted cartesian product at Chance nodes.
/// Deliberately independent of the backward-induction code path.
pub fn exhaustive_strategy_values(tree: &ExplicitTree, v: &Valuation) -> Vec<(Q, Q)> {
    fn go(tree: &ExplicitTree, v: &Valuation, id: usize) -> Vec<(Q, Q)> {
        match tree.node(id) {
            TreeNode::Leaf { alloc_mask, payment } => {
                vec![(v.value(*alloc_mask) - payment, payment.clone())]
            }
            TreeNode::Buyer { children } => {
                let mut out = go(tree, v, children[0]);
                out.extend(go(tree, v, children[1]));
                out.sort();
                out.dedup();
                out
            }
            TreeNode::Chance { weights, children } => {
                let mut acc: Vec<(Q, Q)> = vec![(q_zero(), q_zero())];
                for (w, &c) in weights.iter().zip(children) {
                    let child = go(tree, v, c);
                    let mut next = Vec::with_capacity(acc.len() * child.len());
                    for (av, ar) in &acc {
                        for (cv, cr) in &child {
                            next.push((av + w * cv, ar + w * cr));
                        }
                    }
                    next.sort();
                    next.dedup();
                    acc = next;
                }
                acc
            }
        }
    }
    go(tree, v, tree.root_id())
}

/// Max-utility strategy value from the exhaustive enumeration, revenue as
/// the tie-break, matching the induction's tie rule.
pub fn exhaustive_best(tree: &ExplicitTree, v: &Valuation) -> (Q, Q) {
    let all = exhaustive_strategy_values(tree, v);
    all.into_iter()
        .max_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)))
        .expect("at least one strategy")
}

/// Strategy that follows a fixed per-node policy on an explicit tree,
/// tracking its position through revealed Chance outcomes.
pub struct TreePolicyStrategy {
    tree: ExplicitTree,
    policy: Vec<Option<Bit>>,
    values: Vec<Option<(Q, Q)>>,
    current: usize,
}

impl TreePolicyStrategy {
    pub fn new(tree: &ExplicitTree, policy: Vec<Option<Bit>>) -> TreePolicyStrategy {
        TreePolicyStrategy {
            current: tree.root_id(),
            values: vec![None; tree.len()],
            tree: tree.clone(),
            policy,
        }
    }

    pub fn best_response(tree: &ExplicitTree, v: &Valuation) -> TreePolicyStrategy {
        let br = tree_best_response(tree, v);
        TreePolicyStrategy {
            current: tree.root_id(),
            tree: tree.clone(),
            policy: br.policy,
            values: br.node_values,
        }
    }

    /// Continuation utility at a node under this policy; available when the
    /// strategy was built from a best response (hedging needs it).
    pub fn continuation_utility(&self, node: usize) -> Q {
        self.values[node].as_ref().expect("strategy carries node values").0.clone()
    }
}

impl BuyerStrategy for TreePolicyStrategy {
    fn next_bit(&mut self) -> Bit {
        let bit = self.policy[self.current].expect("policy covers reachable buyer nodes");
        if let TreeNode::Buyer { children } = self.tree.node(self.current) {
            self.current = children[bit as usize];
        }
        bit
    }

    fn observe_forced(&mut self, bit: Bit) {
        if let TreeNode::Buyer { children } = self.tree.node(self.current) {
            self.current = children[bit as usize];
        }
    }

    fn observe_chance(&mut self, outcome: usize) {
        if let TreeNode::Chance { children, .. } = self.tree.node(self.current) {
            self.current = children[outcome];
        }
    }
}

// --- JSON form -------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct JsonTree {
    node: JsonNode,
}

#[derive(Serialize, Deserialize)]
struct JsonNode {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    children: Option<Vec<JsonNode>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alloc_mask: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    payment: Option<String>,
}

impl ExplicitTree {
    pub fn to_json(&self) -> String {
        fn build(tree: &ExplicitTree, id: usize) -> JsonNode {
            match tree.node(id) {
                TreeNode::Buyer { children } => JsonNode {
                    kind: "B".into(),
                    children: Some(children.iter().map(|&c| build(tree, c)).collect()),
                    weights: None,
                    alloc_mask: None,
                    payment: None,
                },
                TreeNode::Chance { weights, children } => JsonNode {
                    kind: "C".into(),
                    children: Some(children.iter().map(|&c| build(tree, c)).collect()),
                    weights: Some(weights.iter().map(format_q).collect()),
                    alloc_mask: None,
                    payment: None,
                },
                TreeNode::Leaf { alloc_mask, payment } => JsonNode {
                    kind: "leaf".into(),
                    children: None,
                    weights: None,
                    alloc_mask: Some(*alloc_mask),
                    payment: Some(format_q(payment)),
                },
            }
        }
        serde_json::to_string_pretty(&JsonTree { node: build(self, self.root_id()) })
            .expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<ExplicitTree, TreeError> {
        let raw: JsonTree = serde_json::from_str(s).map_err(|e| TreeError::Json(e.to_string()))?;
        let mut nodes = Vec::new();
        fn build(raw: &JsonNode, nodes: &mut Vec<TreeNode>) -> Result<usize, TreeError> {
            let node = match raw.kind.as_str() {
                "B" => {
                    let ch = raw.children.as_ref().ok_or_else(|| TreeError::Json("B node needs children".into()))?;
                    if ch.len() != 2 {
                        return Err(TreeError::Json("B node needs exactly 2 children".into()));
                    }
                    let c0 = build(&ch[0], nodes)?;
                    let c1 = build(&ch[1], nodes)?;
                    TreeNode::Buyer { children: [c0, c1] }
                }
                "C" => {
                    let ch = raw.children.as_ref().ok_or_else(|| TreeError::Json("C node needs children".into()))?;
                    let ws = raw.weights.as_ref().ok_or_else(|| TreeError::Json("C node needs weights".into()))?;
                    let mut children = Vec::with_capacity(ch.len());
                    for c in ch {
                        children.push(build(c, nodes)?);
                    }
                    let weights = ws
                        .iter()
                        .map(|w| parse_q(w).map_err(TreeError::Json))
                        .collect::<Result<Vec<_>, _>>()?;
                    TreeNode::Chance { weights, children }
                }
                "leaf" => TreeNode::Leaf {
                    alloc_mask: raw.alloc_mask.unwrap_or(0),
                    payment: raw
                        .payment
                        .as_deref()
                        .map(|p| parse_q(p).map_err(TreeError::Json))
                        .transpose()?
                        .unwrap_or_else(q_zero),
                },
                other => return Err(TreeError::Json(format!("unknown node kind {other:?}"))),
            };
            nodes.push(node);
            Ok(nodes.len() - 1)
        }
        let root = build(&raw.node, &mut nodes)?;
        ExplicitTree::new(nodes, root)
    }
}

// --- random trees ----------------------------------------------------------

/// Shape parameters for sampled trees (test and audit corpora).
#[derive(Clone, Debug)]
pub struct RandomTreeSpec {
    pub n_items: usize,
    pub max_depth: u32,
    /// Probability (out of 256) that an internal node is Chance.
    pub chance_weight: u8,
    /// Leaf payments are k/16 of this cap, k in 0..=16.
    pub payment_cap: Q,
    /// Hard cap on Chance nodes in the whole tree.
    pub max_chance_nodes: usize,
}

pub fn random_tree<R: Rng>(spec: &RandomTreeSpec, rng: &mut R) -> ExplicitTree {
    fn gen<R: Rng>(
        spec: &RandomTreeSpec,
        rng: &mut R,
        depth: u32,
        chance_left: &mut usize,
        nodes: &mut Vec<TreeNode>,
    ) -> usize {
        let force_leaf = depth >= spec.max_depth;
        let leaf_roll = force_leaf || rng.random_range(0..256u32) < 48;
        if leaf_roll {
            let mask = rng.random_range(0..(1u64 << spec.n_items));
            let k = rng.random_range(0..=16u32);
            let payment = crate::num::q(k as i64, 16) * &spec.payment_cap;
            nodes.push(TreeNode::Leaf { alloc_mask: mask, payment });
            return nodes.len() - 1;
        }
        let chance = *chance_left > 0 && rng.random_range(0..256u32) < spec.chance_weight as u32;
        if chance {
            *chance_left -= 1;
            let k = rng.random_range(1..=15u32);
            let w0 = crate::num::q(k as i64, 16);
            let w1 = q_one() - &w0;
            let c0 = gen(spec, rng, depth + 1, chance_left, nodes);
            let c1 = gen(spec, rng, depth + 1, chance_left, nodes);
            nodes.push(TreeNode::Chance { weights: vec![w0, w1], children: vec![c0, c1] });
        } else {
            let c0 = gen(spec, rng, depth + 1, chance_left, nodes);
            let c1 = gen(spec, rng, depth + 1, chance_left, nodes);
            nodes.push(TreeNode::Buyer { children: [c0, c1] });
        }
        nodes.len() - 1
    }
    let mut nodes = Vec::new();
    let mut chance_left = spec.max_chance_nodes;
    let root = gen(spec, rng, 0, &mut chance_left, &mut nodes);
    ExplicitTree::new(nodes, root).expect("generated tree is well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::{q, q_int};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn leaf(nodes: &mut Vec<TreeNode>, mask: u64, pay: Q) -> usize {
        nodes.push(TreeNode::Leaf { alloc_mask: mask, payment: pay });
        nodes.len() - 1
    }

    /// Depth-2 tree: root Buyer, each branch a Chance over two leaves.
    fn depth2_tree() -> ExplicitTree {
        let mut nodes = Vec::new();
        let l0 = leaf(&mut nodes, 0b1, q(1, 2)); // item, pay 1/2
        let l1 = leaf(&mut nodes, 0, q_zero());
        let c0 = {
            nodes.push(TreeNode::Chance { weights: vec![q(1, 4), q(3, 4)], children: vec![l0, l1] });
            nodes.len() - 1
        };
        let l2 = leaf(&mut nodes, 0b1, q_int(1));
        let l3 = leaf(&mut nodes, 0b1, q(1, 4));
        let c1 = {
            nodes.push(TreeNode::Chance { weights: vec![q(1, 2), q(1, 2)], children: vec![l2, l3] });
            nodes.len() - 1
        };
        nodes.push(TreeNode::Buyer { children: [c0, c1] });
        let root = nodes.len() - 1;
        ExplicitTree::new(nodes, root).unwrap()
    }

    #[test]
    fn leaf_value_is_its_utility() {
        let mut nodes = Vec::new();
        let root = leaf(&mut nodes, 0b1, q(1, 4));
        let t = ExplicitTree::new(nodes, root).unwrap();
        let v = Valuation::additive(vec![q_int(1)]);
        let br = tree_best_response(&t, &v);
        assert_eq!(br.value, q(3, 4));
        assert_eq!(br.revenue, q(1, 4));
    }

    #[test]
    fn depth2_hand_computed() {
        let t = depth2_tree();
        let v = Valuation::additive(vec![q_int(1)]);
        // child 0: 1/4·(1 − 1/2) = 1/8; child 1: 1/2·(1−1) + 1/2·(1−1/4) = 3/8.
        let br = tree_best_response(&t, &v);
        assert_eq!(br.value, q(3, 8));
        assert_eq!(br.revenue, q(5, 8));
        let (bv, brv) = exhaustive_best(&t, &v);
        assert_eq!(bv, br.value);
        assert_eq!(brv, br.revenue);
    }

    #[test]
    fn tie_prefers_revenue_then_zero() {
        // Both children are leaves with equal utility for the buyer but
        // different payments.
        let mut nodes = Vec::new();
        let a = leaf(&mut nodes, 0, q_zero());
        let b = leaf(&mut nodes, 0b1, q_int(1)); // value 1, pay 1 → utility 0
        nodes.push(TreeNode::Buyer { children: [a, b] });
        let root = nodes.len() - 1;
        let t = ExplicitTree::new(nodes, root).unwrap();
        let v = Valuation::additive(vec![q_int(1)]);
        let br = tree_best_response(&t, &v);
        assert_eq!(br.value, q_zero());
        assert_eq!(br.revenue, q_int(1), "revenue-maximizing child wins the tie");
        assert_eq!(br.policy[root], Some(true));

        // Equal utility and equal revenue: bit 0.
        let mut nodes = Vec::new();
        let a = leaf(&mut nodes, 0, q_zero());
        let b = leaf(&mut nodes, 0, q_zero());
        nodes.push(TreeNode::Buyer { children: [a, b] });
        let root = nodes.len() - 1;
        let t = ExplicitTree::new(nodes, root).unwrap();
        let br = tree_best_response(&t, &v);
        assert_eq!(br.policy[root], Some(false));
    }

    #[test]
    fn induction_matches_enumeration_on_random_trees() {
        let spec = RandomTreeSpec {
            n_items: 2,
            max_depth: 5,
            chance_weight: 128,
            payment_cap: q_int(2),
            max_chance_nodes: 10,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..50 {
            let t = random_tree(&spec, &mut rng);
            let v = Valuation::additive(vec![q(3, 4), q(5, 4)]);
            let br = tree_best_response(&t, &v);
            let (bv, brv) = exhaustive_best(&t, &v);
            assert_eq!(br.value, bv);
            assert_eq!(br.revenue, brv);
        }
    }

    #[test]
    fn json_roundtrip() {
        let t = depth2_tree();
        let s = t.to_json();
        let back = ExplicitTree::from_json(&s).unwrap();
        let v = Valuation::additive(vec![q(7, 8)]);
        assert_eq!(tree_best_response(&t, &v).value, tree_best_response(&back, &v).value);
        assert!(s.contains("\"kind\": \"B\""));
        assert!(s.contains("\"weights\""));
    }

    #[test]
    fn run_with_policy_matches_induction_in_expectation() {
        let t = depth2_tree();
        let v = Valuation::additive(vec![q_int(1)]);
        let br = tree_best_response(&t, &v);
        let trials = 20_000u64;
        let mut total_pay = 0f64;
        let mut total_val = 0f64;
        for seed in 0..trials {
            let mut s = TreePolicyStrategy::new(&t, br.policy.clone());
            let tr = crate::engine::run(&t, &mut s, seed, &crate::engine::RunConfig::default()).unwrap();
            total_pay += crate::num::q_to_f64(&tr.payment);
            total_val += crate::num::q_to_f64(&v.value(tr.alloc_mask));
        }
        let mean_u = (total_val - total_pay) / trials as f64;
        let expect = crate::num::q_to_f64(&br.value);
        assert!((mean_u - expect).abs() < 0.02, "mean {mean_u} vs {expect}");
    }

    #[test]
    fn offset_subtree_shifts_value_by_constant() {
        let t = depth2_tree();
        let v = Valuation::additive(vec![q_int(1)]);
        let base = tree_best_response(&t, &v);
        let delta = q(3, 16);
        let shifted = t.offset_subtree(t.root_id(), &delta);
        let after = tree_best_response(&shifted, &v);
        assert_eq!(after.value, base.value - &delta);
        assert_eq!(after.revenue, base.revenue + &delta);
    }
}
