//! Ex-post approximate individual rationality by hedging: before every
//! Chance node the buyer reports his conditional continuation utilities to
//! geometrically tightening precision, and payments in each branch are
//! shifted by (report − current target). The probability-weighted sum of
//! reports is pinned to the incoming target exactly by deriving the
//! heaviest child's report instead of sending it, so the shift has exactly
//! zero expected effect on payments.

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive};

use crate::engine::{Allowed, Bit, BuyerStrategy, NodeView, Protocol, RunError};
use crate::num::{ceil_log2, q_pow2, q_zero, Q};

/// Wrapped protocol: an initial utility report, then the inner protocol
/// with per-Chance-node report rounds. All wrapped Chance outcomes are
/// revealed (the buyer must know his position to report at the next node).
pub struct ExPostWrapped<P: Protocol> {
    inner: P,
    /// ⌈log₂(1/ε)⌉: the initial report grid is 2^-eps_bits ≤ ε.
    eps_bits: u32,
    /// Integer bound on |conditional utility| of any audited strategy.
    cap: u64,
}

#[derive(Clone, Debug)]
pub struct HedgeState {
    /// Running payment offset accumulated along the path.
    pub offset: Q,
    /// Current utility target: the initial report, then the report of each
    /// branch taken.
    pub target: Q,
    /// Chance nodes passed so far (the precision schedule index).
    pub chance_seen: u32,
}

#[derive(Clone)]
pub enum WrapNode<N> {
    /// Collecting the initial utility report.
    Init { bits: u32, acc: u64 },
    /// Inner protocol at a non-chance position.
    Pass { node: N, st: HedgeState },
    /// Collecting the report for one child of the upcoming chance node.
    Report {
        node: N,
        st: HedgeState,
        weights: Vec<Q>,
        derived: usize,
        /// reports decoded so far, child order, derived slot left empty
        reports: Vec<Option<Q>>,
        child: usize,
        bits: u32,
        acc: u64,
    },
    /// All reports in; the inner chance node resolves next.
    Resolve { node: N, st: HedgeState, reports: Vec<Q> },
}

impl<P: Protocol> ExPostWrapped<P> {
    pub fn new(inner: P, eps: &Q, cap: u64) -> ExPostWrapped<P> {
        assert!(eps > &q_zero() && !eps.is_negative());
        let inv = (Q::from_integer(BigInt::one()) / eps).ceil();
        let eps_bits = ceil_log2(inv.to_integer().to_u64().expect("1/eps fits in u64").max(1));
        ExPostWrapped { inner, eps_bits, cap }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    /// Grid step of the i-th report round (0 = the initial report).
    pub fn step(&self, i: u32) -> Q {
        q_pow2(-((i + self.eps_bits) as i64))
    }

    /// Fixed bit width of one report at round i, covering [-cap, cap].
    pub fn width(&self, i: u32) -> u32 {
        let points: u64 = 2 * self.cap * (1u64 << (i + self.eps_bits)) + 1;
        ceil_log2(points)
    }

    /// Nearest on-grid index for a value, clamped to the representable
    /// range; returns the index and the decoded value.
    pub fn encode(&self, value: &Q, i: u32) -> (u64, Q) {
        let step = self.step(i);
        let max_k = 2 * self.cap * (1u64 << (i + self.eps_bits));
        let shifted = (value + Q::from_integer(BigInt::from(self.cap))) / &step;
        let k = (shifted + crate::num::q(1, 2)).floor().to_integer();
        let k = k.max(BigInt::from(0)).min(BigInt::from(max_k));
        let k = k.to_u64().expect("clamped");
        (k, self.decode(k, i))
    }

    pub fn decode(&self, k: u64, i: u32) -> Q {
        Q::from_integer(BigInt::from(k)) * self.step(i) - Q::from_integer(BigInt::from(self.cap))
    }

    /// Heaviest child absorbs the weighted-sum constraint; ties, lowest
    /// index.
    pub fn derived_child(weights: &[Q]) -> usize {
        let mut best = 0;
        for (i, w) in weights.iter().enumerate() {
            if w > &weights[best] {
                best = i;
            }
        }
        best
    }

    fn after_init(&self, target: Q) -> WrapNode<P::Node> {
        self.lift(self.inner.root(), HedgeState { offset: q_zero(), target, chance_seen: 0 })
    }

    /// Enter an inner node, converting chance positions into report rounds.
    fn lift(&self, node: P::Node, st: HedgeState) -> WrapNode<P::Node> {
        if let NodeView::Chance { .. } = self.inner.view(&node) {
            let weights = self.inner.chance_weights(&node);
            let derived = Self::derived_child(&weights);
            if weights.len() == 1 {
                // single-outcome node: the derived report is the target
                return WrapNode::Resolve { node, reports: vec![st.target.clone()], st };
            }
            let reports = vec![None; weights.len()];
            let child = if derived == 0 { 1 } else { 0 };
            WrapNode::Report { node, st, weights, derived, reports, child, bits: 0, acc: 0 }
        } else {
            WrapNode::Pass { node, st }
        }
    }

    fn finish_reports(
        &self,
        node: &P::Node,
        st: &HedgeState,
        weights: &[Q],
        derived: usize,
        reports: &[Option<Q>],
    ) -> Result<WrapNode<P::Node>, RunError> {
        let mut sum = q_zero();
        for (x, r) in reports.iter().enumerate() {
            if x != derived {
                sum += &weights[x] * r.as_ref().expect("sent report present");
            }
        }
        let derived_value = (&st.target - sum) / &weights[derived];
        let bound = Q::from_integer(BigInt::from(self.cap + 1));
        if derived_value.abs() > bound {
            return Err(RunError::ReportOutOfRange(st.chance_seen + 1));
        }
        let mut full: Vec<Q> = Vec::with_capacity(reports.len());
        for (x, r) in reports.iter().enumerate() {
            full.push(if x == derived { derived_value.clone() } else { r.clone().unwrap() });
        }
        Ok(WrapNode::Resolve { node: node.clone(), st: st.clone(), reports: full })
    }
}

impl<P: Protocol> Protocol for ExPostWrapped<P> {
    type Node = WrapNode<P::Node>;

    fn root(&self) -> WrapNode<P::Node> {
        WrapNode::Init { bits: 0, acc: 0 }
    }

    fn view(&self, node: &WrapNode<P::Node>) -> NodeView {
        match node {
            WrapNode::Init { .. } | WrapNode::Report { .. } => {
                NodeView::Buyer { allowed: Allowed::Both }
            }
            WrapNode::Pass { node, st } => match self.inner.view(node) {
                NodeView::Leaf { alloc_mask, payment } => {
                    NodeView::Leaf { alloc_mask, payment: payment + &st.offset }
                }
                buyer @ NodeView::Buyer { .. } => buyer,
                NodeView::Chance { .. } => unreachable!("lift converts chance positions"),
            },
            WrapNode::Resolve { node, .. } => match self.inner.view(node) {
                NodeView::Chance { dist, .. } => NodeView::Chance { dist, reveal: true },
                _ => unreachable!("resolve holds a chance node"),
            },
        }
    }

    fn buyer_child(&self, node: &WrapNode<P::Node>, bit: Bit) -> Result<WrapNode<P::Node>, RunError> {
        match node {
            WrapNode::Init { bits, acc } => {
                let acc = acc << 1 | bit as u64;
                let bits = bits + 1;
                if bits == self.width(0) {
                    Ok(self.after_init(self.decode(acc, 0)))
                } else {
                    Ok(WrapNode::Init { bits, acc })
                }
            }
            WrapNode::Pass { node, st } => {
                let child = self.inner.buyer_child(node, bit)?;
                Ok(self.lift(child, st.clone()))
            }
            WrapNode::Report { node, st, weights, derived, reports, child, bits, acc } => {
                let acc = acc << 1 | bit as u64;
                let bits = bits + 1;
                let round = st.chance_seen + 1;
                if bits < self.width(round) {
                    return Ok(WrapNode::Report {
                        node: node.clone(),
                        st: st.clone(),
                        weights: weights.clone(),
                        derived: *derived,
                        reports: reports.clone(),
                        child: *child,
                        bits,
                        acc,
                    });
                }
                let mut reports = reports.clone();
                reports[*child] = Some(self.decode(acc, round));
                let mut next = child + 1;
                if next == *derived {
                    next += 1;
                }
                if next < weights.len() {
                    Ok(WrapNode::Report {
                        node: node.clone(),
                        st: st.clone(),
                        weights: weights.clone(),
                        derived: *derived,
                        reports,
                        child: next,
                        bits: 0,
                        acc: 0,
                    })
                } else {
                    self.finish_reports(node, st, weights, *derived, &reports)
                }
            }
            WrapNode::Resolve { .. } => Err(RunError::DisallowedBit { bit }),
        }
    }

    fn chance_child(&self, node: &WrapNode<P::Node>, outcome: usize) -> WrapNode<P::Node> {
        match node {
            WrapNode::Resolve { node, st, reports } => {
                let r = &reports[outcome];
                let st = HedgeState {
                    offset: &st.offset + (r - &st.target),
                    target: r.clone(),
                    chance_seen: st.chance_seen + 1,
                };
                self.lift(self.inner.chance_child(node, outcome), st)
            }
            _ => unreachable!("chance_child on non-chance node"),
        }
    }
}

/// Strategies that can price their own continuation at any inner node.
pub trait ConditionalUtility<P: Protocol>: BuyerStrategy {
    fn node_utility(&self, protocol: &P, node: &P::Node) -> Q;
}

/// Honest hedging wrapper around an inner strategy: reports the true
/// conditional continuation utility plus the current target drift, rounded
/// to the round's grid, so per-run drift stays within ±ε.
pub struct HedgedStrategy<'a, P: Protocol, S: ConditionalUtility<P>> {
    wrapped: &'a ExPostWrapped<P>,
    inner: S,
    inner_node: P::Node,
    queue: Vec<Bit>,
    queue_pos: usize,
    /// decoded values of queued sent reports, child order minus derived
    pending: Vec<Q>,
    pending_weights: Vec<Q>,
    pending_derived: usize,
    target: Q,
    chance_seen: u32,
    report_bits: u64,
}

impl<'a, P: Protocol, S: ConditionalUtility<P>> HedgedStrategy<'a, P, S> {
    pub fn new(wrapped: &'a ExPostWrapped<P>, inner: S) -> HedgedStrategy<'a, P, S> {
        let root = wrapped.inner().root();
        let u0 = inner.node_utility(wrapped.inner(), &root);
        let (k, decoded) = wrapped.encode(&u0, 0);
        let mut s = HedgedStrategy {
            wrapped,
            inner,
            inner_node: root,
            queue: Vec::new(),
            queue_pos: 0,
            pending: Vec::new(),
            pending_weights: Vec::new(),
            pending_derived: 0,
            target: decoded,
            chance_seen: 0,
            report_bits: 0,
        };
        s.push_bits(k, wrapped.width(0));
        s.maybe_queue_reports();
        s
    }

    pub fn report_bits_sent(&self) -> u64 {
        self.report_bits
    }

    pub fn into_inner(self) -> S {
        self.inner
    }

    fn push_bits(&mut self, value: u64, width: u32) {
        for k in (0..width).rev() {
            self.queue.push(value >> k & 1 == 1);
        }
    }

    /// If the mirrored inner position is a Chance node, queue this round's
    /// reports: true child utility corrected by the target drift.
    fn maybe_queue_reports(&mut self) {
        if !matches!(self.wrapped.inner().view(&self.inner_node), NodeView::Chance { .. }) {
            return;
        }
        let weights = self.wrapped.inner().chance_weights(&self.inner_node);
        let derived = ExPostWrapped::<P>::derived_child(&weights);
        if weights.len() == 1 {
            self.pending = vec![self.target.clone()];
            self.pending_weights = weights;
            self.pending_derived = derived;
            return;
        }
        let here = self.inner.node_utility(self.wrapped.inner(), &self.inner_node);
        let drift = &self.target - &here;
        let round = self.chance_seen + 1;
        let mut sent = Vec::new();
        let mut sum = q_zero();
        for x in 0..weights.len() {
            if x == derived {
                continue;
            }
            let child = self.wrapped.inner().chance_child(&self.inner_node, x);
            let ax = self.inner.node_utility(self.wrapped.inner(), &child);
            let (k, decoded) = self.wrapped.encode(&(ax + &drift), round);
            self.push_bits(k, self.wrapped.width(round));
            self.report_bits += self.wrapped.width(round) as u64;
            sum += &weights[x] * &decoded;
            sent.push(decoded);
        }
        let derived_value = (&self.target - sum) / &weights[derived];
        let mut full = Vec::with_capacity(weights.len());
        let mut it = sent.into_iter();
        for x in 0..weights.len() {
            if x == derived {
                full.push(derived_value.clone());
            } else {
                full.push(it.next().unwrap());
            }
        }
        self.pending = full;
        self.pending_weights = weights;
        self.pending_derived = derived;
    }
}

impl<'a, P: Protocol, S: ConditionalUtility<P>> BuyerStrategy for HedgedStrategy<'a, P, S> {
    fn next_bit(&mut self) -> Bit {
        if self.queue_pos < self.queue.len() {
            let b = self.queue[self.queue_pos];
            self.queue_pos += 1;
            if self.queue_pos == self.queue.len() {
                self.queue.clear();
                self.queue_pos = 0;
            }
            return b;
        }
        let bit = self.inner.next_bit();
        self.inner_node = self
            .wrapped
            .inner()
            .buyer_child(&self.inner_node, bit)
            .expect("inner strategy stays feasible");
        self.maybe_queue_reports();
        bit
    }

    fn observe_forced(&mut self, bit: Bit) {
        self.inner.observe_forced(bit);
        self.inner_node = self
            .wrapped
            .inner()
            .buyer_child(&self.inner_node, bit)
            .expect("forced bits are feasible");
        self.maybe_queue_reports();
    }

    fn observe_chance(&mut self, outcome: usize) {
        if let NodeView::Chance { reveal, .. } = self.wrapped.inner().view(&self.inner_node) {
            if reveal {
                self.inner.observe_chance(outcome);
            }
            self.target = self.pending[outcome].clone();
            self.chance_seen += 1;
            self.inner_node = self.wrapped.inner().chance_child(&self.inner_node, outcome);
            self.pending.clear();
            self.maybe_queue_reports();
        }
    }
}

impl<P: Protocol> ExPostWrapped<P> {
    /// Upper bound on wrapper bits along a path crossing `c` Chance nodes,
    /// all binary.
    pub fn report_bit_budget(&self, c: u32) -> u64 {
        (0..=c).map(|i| self.width(i) as u64).sum()
    }
}

// Conditional utilities for the two audited strategy families.

impl ConditionalUtility<crate::tree::ExplicitTree> for crate::tree::TreePolicyStrategy {
    fn node_utility(&self, _p: &crate::tree::ExplicitTree, node: &usize) -> Q {
        self.continuation_utility(*node)
    }
}

impl ConditionalUtility<crate::stream::StreamProtocol> for crate::stream::ValuedLineStrategy {
    fn node_utility(&self, p: &crate::stream::StreamProtocol, node: &crate::stream::StreamNode) -> Q {
        p.conditional_line_utility(node, &self.coords, &self.valuation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run, RunConfig};
    use crate::menu::Valuation;
    use crate::num::{q, q_int, q_to_f64};
    use crate::tree::{random_tree, tree_best_response, ExplicitTree, RandomTreeSpec, TreeNode, TreePolicyStrategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn fair_chance_tree() -> ExplicitTree {
        let nodes = vec![
            TreeNode::Leaf { alloc_mask: 0b1, payment: q_zero() },
            TreeNode::Leaf { alloc_mask: 0, payment: q_zero() },
            TreeNode::Chance { weights: vec![q(1, 2), q(1, 2)], children: vec![0, 1] },
        ];
        ExplicitTree::new(nodes, 2).unwrap()
    }

    #[test]
    fn deterministic_protocol_only_initial_report() {
        let nodes = vec![
            TreeNode::Leaf { alloc_mask: 0b1, payment: q(1, 4) },
            TreeNode::Leaf { alloc_mask: 0, payment: q_zero() },
            TreeNode::Buyer { children: [0, 1] },
        ];
        let t = ExplicitTree::new(nodes, 2).unwrap();
        let v = Valuation::additive(vec![q_int(1)]);
        let w = ExPostWrapped::new(t.clone(), &q_pow2(-10), 2);
        let inner = TreePolicyStrategy::best_response(&t, &v);
        let mut s = HedgedStrategy::new(&w, inner);
        let tr = run(&w, &mut s, 1, &RunConfig::default()).unwrap();
        // payment untouched, and exactly the initial-report bits were added
        assert_eq!(tr.payment, q(1, 4));
        assert_eq!(tr.buyer_bits.len() as u64, w.width(0) as u64 + 1);
    }

    #[test]
    fn fair_node_hedges_to_half_exactly() {
        let t = fair_chance_tree();
        let v = Valuation::additive(vec![q_int(1)]);
        let w = ExPostWrapped::new(t.clone(), &q_pow2(-10), 2);
        for seed in 0..64 {
            let inner = TreePolicyStrategy::best_response(&t, &v);
            let mut s = HedgedStrategy::new(&w, inner);
            let tr = run(&w, &mut s, seed, &RunConfig::default()).unwrap();
            let ex_post = v.value(tr.alloc_mask) - &tr.payment;
            // utilities (1, 0) and Ū = 1/2: payments shift by ±1/2 and the
            // ex-post utility is exactly 1/2 on both branches
            assert_eq!(ex_post, q(1, 2), "seed {seed}");
        }
    }

    #[test]
    fn ex_post_band_and_payment_preservation_on_random_trees() {
        let spec = RandomTreeSpec {
            n_items: 2,
            max_depth: 6,
            chance_weight: 170,
            payment_cap: q_int(2),
            max_chance_nodes: 8,
        };
        let eps = q_pow2(-10);
        let mut rng = ChaCha12Rng::seed_from_u64(4242);
        let mut tested = 0;
        while tested < 8 {
            let t = random_tree(&spec, &mut rng);
            if t.count_chance() == 0 {
                continue;
            }
            tested += 1;
            let v = Valuation::additive(vec![q(3, 4), q(5, 4)]);
            let br = tree_best_response(&t, &v);
            let w = ExPostWrapped::new(t.clone(), &eps, 8);
            let mut pay_sum = q_zero();
            let trials = 400u64;
            for seed in 0..trials {
                let inner = TreePolicyStrategy::best_response(&t, &v);
                let mut s = HedgedStrategy::new(&w, inner);
                let tr = run(&w, &mut s, seed, &RunConfig::default()).unwrap();
                let ex_post = v.value(tr.alloc_mask) - &tr.payment;
                let drift = (ex_post - &br.value).abs();
                assert!(drift <= eps, "drift {} at seed {seed}", q_to_f64(&drift));
                pay_sum += &tr.payment;
            }
            let mean_pay = q_to_f64(&pay_sum) / trials as f64;
            let exact = q_to_f64(&br.revenue);
            assert!((mean_pay - exact).abs() < 0.4, "payment {mean_pay} vs {exact}");
        }
    }

    /// Expected wrapped utility of ANY policy equals its unwrapped value:
    /// the hedge has exactly zero net expected effect on payments.
    #[test]
    fn wrapping_preserves_every_strategy_value_exactly() {
        let spec = RandomTreeSpec {
            n_items: 2,
            max_depth: 4,
            chance_weight: 128,
            payment_cap: q_int(1),
            max_chance_nodes: 3,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let v = Valuation::additive(vec![q(1, 2), q_int(1)]);
        for _ in 0..20 {
            let t = random_tree(&spec, &mut rng);
            let w = ExPostWrapped::new(t.clone(), &q_pow2(-10), 4);
            // exact wrapped expected utility under honest hedging, any policy:
            // walk chance paths with exact reports
            fn walk(
                w: &ExPostWrapped<ExplicitTree>,
                t: &ExplicitTree,
                v: &Valuation,
                vals: &[Option<(Q, Q)>],
                policy: &[Option<bool>],
                id: usize,
                target: Q,
                offset: Q,
                chance_seen: u32,
            ) -> Q {
                match t.node(id) {
                    TreeNode::Leaf { alloc_mask, payment } => {
                        v.value(*alloc_mask) - (payment + offset)
                    }
                    TreeNode::Buyer { children } => {
                        let bit = policy[id].unwrap();
                        walk(w, t, v, vals, policy, children[bit as usize], target, offset, chance_seen)
                    }
                    TreeNode::Chance { weights, children } => {
                        let derived = ExPostWrapped::<ExplicitTree>::derived_child(weights);
                        let here = vals[id].as_ref().unwrap().0.clone();
                        let drift = &target - &here;
                        let round = chance_seen + 1;
                        let mut reports: Vec<Q> = Vec::new();
                        let mut sum = q_zero();
                        for (x, c) in children.iter().enumerate() {
                            if x == derived {
                                reports.push(q_zero()); // placeholder
                                continue;
                            }
                            let ax = vals[*c].as_ref().unwrap().0.clone();
                            let (_, decoded) = w.encode(&(ax + &drift), round);
                            sum += &weights[x] * &decoded;
                            reports.push(decoded);
                        }
                        reports[derived] = (&target - sum) / &weights[derived];
                        let mut total = q_zero();
                        for (x, c) in children.iter().enumerate() {
                            let sub = walk(
                                w, t, v, vals, policy, *c,
                                reports[x].clone(),
                                &offset + (&reports[x] - &target),
                                round,
                            );
                            total += &weights[x] * sub;
                        }
                        total
                    }
                }
            }
            let br = tree_best_response(&t, &v);
            // values under the best-response policy feed honest reports
            let u0 = br.node_values[t.root_id()].as_ref().unwrap().0.clone();
            let (_, target0) = w.encode(&u0, 0);
            let wrapped_value = walk(
                &w, &t, &v, &br.node_values, &br.policy, t.root_id(),
                target0, q_zero(), 0,
            );
            assert_eq!(wrapped_value, br.value, "hedge must be expectation-neutral");
        }
    }

    #[test]
    fn report_budget_formula() {
        let t = fair_chance_tree();
        let w = ExPostWrapped::new(t, &q_pow2(-10), 8);
        // width(i) = 1 + log2(cap) + eps_bits + i + next-power slack
        assert_eq!(w.width(0), ceil_log2(2 * 8 * 1024 + 1));
        assert!(w.report_bit_budget(3) >= 4 * w.width(0) as u64);
    }
}
