//! Hard prior families: weak combinatorial designs, near-equal-revenue code
//! vectors, the correlated unit-demand family with its full-revenue
//! protocol and cheap non-truthful implementation, and the XOS
//! independent-items family with its optimal protocol.

use num_traits::{Signed, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use thiserror::Error;

use crate::engine::{Allowed, Bit, BuyerStrategy, ChanceDist, NodeView, Protocol, RunError};
use crate::menu::{Prior, Valuation};
use crate::num::{ceil_log2, q, q_one, q_to_f64, q_zero, Q};
use crate::tree::{ExplicitTree, TreeNode};

#[derive(Debug, Error)]
pub enum HardError {
    #[error("could not draw a valid design within the retry budget (n={n}, count={count}); parameters too aggressive")]
    DesignFailure { n: usize, count: usize },
    #[error("design invariant violated: {0}")]
    DesignInvariant(String),
    #[error("parameter guard violated: {0}")]
    ParameterGuard(String),
    #[error("code family: {0}")]
    BadCodes(String),
}

/// Family of equal-size subsets with pairwise intersections bounded near
/// the random expectation ε²n.
#[derive(Clone, Debug, Serialize)]
pub struct WeakDesign {
    pub n: usize,
    pub eps1: crate::num::QNum,
    pub delta1: crate::num::QNum,
    pub sets: Vec<u64>,
}

impl WeakDesign {
    pub fn set_size(&self) -> usize {
        let s = &self.eps1.0 * q(self.n as i64, 1);
        s.floor().to_integer().to_usize().expect("small")
    }

    /// (1+δ₁)·ε₁²·n; intersections are integers, so the effective cap is
    /// its floor.
    pub fn intersection_bound(&self) -> Q {
        (q_one() + &self.delta1.0) * &self.eps1.0 * &self.eps1.0 * q(self.n as i64, 1)
    }

    pub fn max_intersection(&self) -> u32 {
        let mut m = 0;
        for a in 0..self.sets.len() {
            for b in a + 1..self.sets.len() {
                m = m.max((self.sets[a] & self.sets[b]).count_ones());
            }
        }
        m
    }

    /// Exhaustive post-generation verification of sizes and intersections.
    pub fn verify(&self) -> Result<(), HardError> {
        let size = self.set_size();
        for (i, s) in self.sets.iter().enumerate() {
            if s.count_ones() as usize != size {
                return Err(HardError::DesignInvariant(format!("set {i} has wrong size")));
            }
            if self.n < 64 && *s >= 1u64 << self.n {
                return Err(HardError::DesignInvariant(format!("set {i} out of range")));
            }
        }
        let bound = self.intersection_bound();
        for a in 0..self.sets.len() {
            for b in a + 1..self.sets.len() {
                if self.sets[a] == self.sets[b] {
                    return Err(HardError::DesignInvariant(format!("sets {a} and {b} equal")));
                }
                let inter = (self.sets[a] & self.sets[b]).count_ones();
                if q(inter as i64, 1) > bound {
                    return Err(HardError::DesignInvariant(format!(
                        "sets {a} and {b} intersect in {inter} > {}",
                        q_to_f64(&bound)
                    )));
                }
            }
        }
        Ok(())
    }
}

fn random_subset<R: Rng>(n: usize, size: usize, rng: &mut R) -> u64 {
    let mut items: Vec<usize> = (0..n).collect();
    for i in 0..size {
        let j = rng.random_range(i..n);
        items.swap(i, j);
    }
    items[..size].iter().fold(0u64, |m, i| m | 1 << i)
}

/// Rejection-sample a weak design and verify it exhaustively. The caller is
/// responsible for count ≤ 2^{δ₁²ε₁²n/6}; at desk scale that bound is far
/// below 2, so feasibility is instead certified by the verification pass,
/// with the retry budget sized from the Chernoff tail e^{−δ²ε²n/3}.
pub fn gen_weak_design(
    n: usize,
    eps1: Q,
    delta1: Q,
    count: usize,
    seed: u64,
) -> Result<WeakDesign, HardError> {
    assert!(n <= 64, "bitmask-backed designs support n <= 64");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut design = WeakDesign {
        n,
        eps1: crate::num::QNum(eps1),
        delta1: crate::num::QNum(delta1),
        sets: Vec::with_capacity(count),
    };
    let size = design.set_size();
    if size == 0 || size > n {
        return Err(HardError::ParameterGuard("ε₁n must be in [1, n]".into()));
    }
    let bound = design.intersection_bound();
    let cap = {
        let f = q_to_f64(&(&design.delta1.0 * &design.delta1.0 * &design.eps1.0 * &design.eps1.0));
        let pair_fail = (-f * n as f64 / 3.0).exp();
        let retry = 1.0 / (1.0 - (pair_fail * count as f64).min(0.995));
        200 + (50.0 * retry).ceil() as usize
    };
    for _ in 0..count {
        let mut ok = false;
        for _ in 0..cap {
            let candidate = random_subset(n, size, &mut rng);
            let fits = design.sets.iter().all(|s| {
                *s != candidate && q((s & candidate).count_ones() as i64, 1) <= bound
            });
            if fits {
                design.sets.push(candidate);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(HardError::DesignFailure { n, count });
        }
    }
    design.verify()?;
    Ok(design)
}

/// Discrete distribution on {ε^{ℓ−1}, …, ε, 1} with value·probability
/// constant across the support.
#[derive(Clone, Debug)]
pub struct EqualRevenueDist {
    pub ell: u32,
    pub eps2: Q,
}

impl EqualRevenueDist {
    pub fn new(ell: u32, eps2: Q) -> EqualRevenueDist {
        assert!(ell >= 1 && eps2 > q_zero() && eps2 < q_one());
        EqualRevenueDist { ell, eps2 }
    }

    /// Support values, ascending: index k holds ε^{ℓ−1−k}.
    pub fn values(&self) -> Vec<Q> {
        (0..self.ell).map(|k| pow_q(&self.eps2, (self.ell - 1 - k) as u32)).collect()
    }

    /// Probabilities aligned with `values`: Pr[value ε^{i−1}] ∝ ε^{ℓ−i}.
    pub fn probs(&self) -> Vec<Q> {
        let weights: Vec<Q> = (0..self.ell).map(|k| pow_q(&self.eps2, k)).collect();
        let z: Q = weights.iter().fold(q_zero(), |a, w| a + w);
        weights.into_iter().map(|w| w / &z).collect()
    }

    /// Exact cumulative-inversion sample of a value index.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u = q(rng.random_range(0..1u64 << 62) as i64, 1) / q(1i64 << 62, 1);
        let probs = self.probs();
        let mut acc = q_zero();
        for (k, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        self.ell as usize - 1
    }
}

fn pow_q(x: &Q, e: u32) -> Q {
    let mut out = q_one();
    for _ in 0..e {
        out *= x;
    }
    out
}

/// Distinct vectors with i.i.d. near-equal-revenue coordinates; entries are
/// value indices into the distribution's ascending support.
#[derive(Clone, Debug)]
pub struct CodeFamily {
    pub dist: EqualRevenueDist,
    pub n_coords: usize,
    pub vectors: Vec<Vec<u8>>,
}

pub fn sample_code_vectors(
    n_coords: usize,
    dist: EqualRevenueDist,
    count: usize,
    seed: u64,
) -> Result<CodeFamily, HardError> {
    let distinct_max = (dist.ell as u128).saturating_pow(n_coords.min(64) as u32);
    if (count as u128) > distinct_max {
        return Err(HardError::BadCodes(format!(
            "cannot draw {count} distinct vectors from a support of {distinct_max}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut vectors: Vec<Vec<u8>> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while vectors.len() < count {
        attempts += 1;
        if attempts > 1000 * count {
            return Err(HardError::BadCodes("rejection budget exhausted".into()));
        }
        let v: Vec<u8> = (0..n_coords).map(|_| dist.sample(&mut rng) as u8).collect();
        if !vectors.contains(&v) {
            vectors.push(v);
        }
    }
    Ok(CodeFamily { dist, n_coords, vectors })
}

/// Empirical-closeness spot check on the first m vectors: a coordinate is
/// good when every value's count is within η·p·m of p·m; the family passes
/// when at least a 1−η fraction of coordinates is good.
#[derive(Clone, Debug, Serialize)]
pub struct ClosenessReport {
    pub m: usize,
    pub good_coordinates: usize,
    pub n_coords: usize,
    pub pass: bool,
}

pub fn verify_code_closeness(family: &CodeFamily, m: usize, eta: &Q) -> ClosenessReport {
    let m = m.min(family.vectors.len());
    let probs = family.dist.probs();
    let mut good = 0usize;
    for j in 0..family.n_coords {
        let mut counts = vec![0u64; family.dist.ell as usize];
        for v in &family.vectors[..m] {
            counts[v[j] as usize] += 1;
        }
        let ok = probs.iter().enumerate().all(|(k, p)| {
            let expect = p * q(m as i64, 1);
            let dev = (q(counts[k] as i64, 1) - &expect).abs();
            dev <= eta * expect
        });
        if ok {
            good += 1;
        }
    }
    let need = (q_one() - eta) * q(family.n_coords as i64, 1);
    ClosenessReport {
        m,
        good_coordinates: good,
        n_coords: family.n_coords,
        pass: q(good as i64, 1) >= need,
    }
}

// --- unit-demand family ------------------------------------------------

/// One hard prior: uniform over types v^x(S) = c(x)·1{x∩S≠∅} for x in the
/// design.
#[derive(Clone, Debug)]
pub struct UdHardPrior {
    pub n_items: usize,
    pub sets: Vec<u64>,
    /// c(x) per design set, from the equal-revenue support.
    pub values: Vec<Q>,
    /// index of c(x) in the ascending support
    pub value_indices: Vec<u8>,
    pub support: Vec<Q>,
}

impl UdHardPrior {
    pub fn type_valuation(&self, idx: usize) -> Valuation {
        let x = self.sets[idx];
        let c = &self.values[idx];
        let vals = (0..self.n_items)
            .map(|i| if x >> i & 1 == 1 { c.clone() } else { q_zero() })
            .collect();
        Valuation::unit_demand(vals)
    }

    pub fn to_prior(&self) -> Prior {
        Prior::uniform((0..self.sets.len()).map(|i| self.type_valuation(i)).collect())
    }

    /// Full welfare = expected c(x) over the uniform type; the optimal
    /// protocol's revenue equals it.
    pub fn full_welfare(&self) -> Q {
        let total: Q = self.values.iter().fold(q_zero(), |a, v| a + v);
        total / q(self.sets.len() as i64, 1)
    }
}

/// One prior per code vector. The §-guards η < ε₂^ℓ and ε₁(1+δ₁) < ε₂^ℓ are
/// enforced here; they are what makes every deviation strictly losing.
pub fn build_unit_demand_family(
    design: &WeakDesign,
    codes: &CodeFamily,
    eta: &Q,
) -> Result<Vec<UdHardPrior>, HardError> {
    design.verify()?;
    if codes.n_coords != design.sets.len() {
        return Err(HardError::BadCodes(format!(
            "codes have {} coordinates for {} design sets",
            codes.n_coords,
            design.sets.len()
        )));
    }
    let eps_pow_ell = pow_q(&codes.dist.eps2, codes.dist.ell);
    let lhs = (q_one() + &design.delta1.0) * &design.eps1.0;
    if lhs >= eps_pow_ell {
        return Err(HardError::ParameterGuard(format!(
            "ε₁(1+δ₁) = {} must stay below ε₂^ℓ = {}",
            q_to_f64(&lhs),
            q_to_f64(&eps_pow_ell)
        )));
    }
    if eta >= &eps_pow_ell {
        return Err(HardError::ParameterGuard("η must stay below ε₂^ℓ".into()));
    }
    let support = codes.dist.values();
    Ok(codes
        .vectors
        .iter()
        .map(|code| UdHardPrior {
            n_items: design.n,
            sets: design.sets.clone(),
            values: code.iter().map(|k| support[*k as usize].clone()).collect(),
            value_indices: code.clone(),
            support: support.clone(),
        })
        .collect())
}

/// Full-revenue protocol: the buyer announces his set x bit by bit; if it
/// is in the design, Chance picks an item of x uniformly and charges c(x),
/// otherwise the run stops with nothing.
#[derive(Clone, Debug)]
pub struct UdOptimalProtocol {
    pub prior: UdHardPrior,
}

#[derive(Clone, Debug)]
pub enum UdOptNode {
    Sending { bit: u32, mask: u64 },
    Draw { set_idx: usize },
    LeafNothing,
    LeafItem { item: usize, set_idx: usize },
}

impl Protocol for UdOptimalProtocol {
    type Node = UdOptNode;

    fn root(&self) -> UdOptNode {
        UdOptNode::Sending { bit: 0, mask: 0 }
    }

    fn view(&self, node: &UdOptNode) -> NodeView {
        match node {
            UdOptNode::Sending { .. } => NodeView::Buyer { allowed: Allowed::Both },
            UdOptNode::Draw { set_idx } => {
                let k = self.prior.sets[*set_idx].count_ones() as i64;
                NodeView::Chance {
                    dist: ChanceDist::Weighted(vec![q(1, k); k as usize]),
                    reveal: true,
                }
            }
            UdOptNode::LeafNothing => NodeView::Leaf { alloc_mask: 0, payment: q_zero() },
            UdOptNode::LeafItem { item, set_idx } => NodeView::Leaf {
                alloc_mask: 1 << item,
                payment: self.prior.values[*set_idx].clone(),
            },
        }
    }

    fn buyer_child(&self, node: &UdOptNode, bit: Bit) -> Result<UdOptNode, RunError> {
        match node {
            UdOptNode::Sending { bit: pos, mask } => {
                let mask = mask | (bit as u64) << pos;
                let pos = pos + 1;
                if (pos as usize) < self.prior.n_items {
                    Ok(UdOptNode::Sending { bit: pos, mask })
                } else {
                    match self.prior.sets.iter().position(|s| *s == mask) {
                        Some(set_idx) => Ok(UdOptNode::Draw { set_idx }),
                        None => Ok(UdOptNode::LeafNothing),
                    }
                }
            }
            _ => Err(RunError::DisallowedBit { bit }),
        }
    }

    fn chance_child(&self, node: &UdOptNode, outcome: usize) -> UdOptNode {
        match node {
            UdOptNode::Draw { set_idx } => {
                let set = self.prior.sets[*set_idx];
                let item = (0..64).filter(|i| set >> i & 1 == 1).nth(outcome).expect("in range");
                UdOptNode::LeafItem { item, set_idx: *set_idx }
            }
            _ => unreachable!("chance_child on non-chance node"),
        }
    }
}

/// Fixed-message strategy: announce a chosen set mask.
pub struct SendMaskStrategy {
    mask: u64,
    pos: u32,
}

impl SendMaskStrategy {
    pub fn new(mask: u64) -> SendMaskStrategy {
        SendMaskStrategy { mask, pos: 0 }
    }
}

impl BuyerStrategy for SendMaskStrategy {
    fn next_bit(&mut self) -> Bit {
        let b = self.mask >> self.pos & 1 == 1;
        self.pos += 1;
        b
    }

    fn observe_forced(&mut self, _bit: Bit) {
        self.pos += 1;
    }
}

/// Exact expected utility for a type that owns set `true_idx` but announces
/// `sent`: the seller draws uniformly from the announced set, the buyer
/// values a drawn item at c(x) iff it lies in his own set.
pub fn ud_deviation_utility(prior: &UdHardPrior, true_idx: usize, sent: Option<usize>) -> Q {
    match sent {
        None => q_zero(),
        Some(s) => {
            let x = prior.sets[true_idx];
            let xp = prior.sets[s];
            let inter = (x & xp).count_ones() as i64;
            let size = xp.count_ones() as i64;
            q(inter, size) * &prior.values[true_idx] - &prior.values[s]
        }
    }
}

/// Closed-form deviation bound ε₁(1+δ₁)·c(x) − c(x′) from the design
/// property; every exact deviation utility must sit below it.
pub fn ud_deviation_bound(design_eps1: &Q, design_delta1: &Q, cx: &Q, cxp: &Q) -> Q {
    (q_one() + design_delta1) * design_eps1 * cx - cxp
}

/// O(log n)-bit non-truthful implementation: the buyer names an item and a
/// value index directly.
#[derive(Clone, Debug)]
pub struct UdNontruthfulProtocol {
    pub prior: UdHardPrior,
    pub item_bits: u32,
    pub value_bits: u32,
}

impl UdNontruthfulProtocol {
    pub fn new(prior: UdHardPrior) -> UdNontruthfulProtocol {
        UdNontruthfulProtocol {
            item_bits: ceil_log2(prior.n_items as u64),
            value_bits: ceil_log2(prior.support.len() as u64),
            prior,
        }
    }

    pub fn total_bits(&self) -> u32 {
        self.item_bits + self.value_bits
    }
}

#[derive(Clone, Debug)]
pub enum UdNtNode {
    Item { sent: u32, acc: u32 },
    Value { item: usize, sent: u32, acc: u32 },
    Leaf { item: usize, value_idx: usize },
}

fn prefix_allowed(limit: u32, width: u32, sent: u32, acc: u32) -> Allowed {
    let shift = width - sent - 1;
    let mut zero = false;
    let mut one = false;
    for idx in 0..limit {
        if idx >> (shift + 1) == acc {
            if idx >> shift & 1 == 1 {
                one = true;
            } else {
                zero = true;
            }
        }
    }
    match (zero, one) {
        (true, true) => Allowed::Both,
        (true, false) => Allowed::Only(false),
        (false, true) => Allowed::Only(true),
        (false, false) => unreachable!("prefix always extendable"),
    }
}

impl Protocol for UdNontruthfulProtocol {
    type Node = UdNtNode;

    fn root(&self) -> UdNtNode {
        UdNtNode::Item { sent: 0, acc: 0 }
    }

    fn view(&self, node: &UdNtNode) -> NodeView {
        match node {
            UdNtNode::Item { sent, acc } => NodeView::Buyer {
                allowed: prefix_allowed(self.prior.n_items as u32, self.item_bits, *sent, *acc),
            },
            UdNtNode::Value { sent, acc, .. } => NodeView::Buyer {
                allowed: prefix_allowed(self.prior.support.len() as u32, self.value_bits, *sent, *acc),
            },
            UdNtNode::Leaf { item, value_idx } => NodeView::Leaf {
                alloc_mask: 1 << item,
                payment: self.prior.support[*value_idx].clone(),
            },
        }
    }

    fn buyer_child(&self, node: &UdNtNode, bit: Bit) -> Result<UdNtNode, RunError> {
        Ok(match node {
            UdNtNode::Item { sent, acc } => {
                let acc = acc << 1 | bit as u32;
                let sent = sent + 1;
                if sent == self.item_bits {
                    UdNtNode::Value { item: acc as usize, sent: 0, acc: 0 }
                } else {
                    UdNtNode::Item { sent, acc }
                }
            }
            UdNtNode::Value { item, sent, acc } => {
                let acc = acc << 1 | bit as u32;
                let sent = sent + 1;
                if sent == self.value_bits {
                    UdNtNode::Leaf { item: *item, value_idx: acc as usize }
                } else {
                    UdNtNode::Value { item: *item, sent, acc }
                }
            }
            UdNtNode::Leaf { .. } => return Err(RunError::DisallowedBit { bit }),
        })
    }

    fn chance_child(&self, _node: &UdNtNode, _outcome: usize) -> UdNtNode {
        unreachable!("protocol has no chance nodes")
    }
}

/// Announce (item, value index) MSB-first.
pub struct AnnouncePairStrategy {
    bits: Vec<Bit>,
    pos: usize,
}

impl AnnouncePairStrategy {
    pub fn new(p: &UdNontruthfulProtocol, item: usize, value_idx: usize) -> AnnouncePairStrategy {
        let mut bits = Vec::new();
        for k in (0..p.item_bits).rev() {
            bits.push(item >> k & 1 == 1);
        }
        for k in (0..p.value_bits).rev() {
            bits.push(value_idx >> k & 1 == 1);
        }
        AnnouncePairStrategy { bits, pos: 0 }
    }
}

impl BuyerStrategy for AnnouncePairStrategy {
    fn next_bit(&mut self) -> Bit {
        let b = self.bits[self.pos];
        self.pos += 1;
        b
    }

    fn observe_forced(&mut self, _bit: Bit) {
        self.pos += 1;
    }
}

/// Exact outcome law of the non-truthful protocol when the type owning set
/// idx picks an item of x uniformly and announces it with the true value
/// index: identical to the optimal protocol's law, by enumeration.
pub fn ud_nontruthful_law(prior: &UdHardPrior, type_idx: usize) -> Vec<(u64, Q, Q)> {
    let x = prior.sets[type_idx];
    let k = x.count_ones() as i64;
    (0..64)
        .filter(|i| x >> i & 1 == 1)
        .map(|i| (1u64 << i, q(1, k), prior.values[type_idx].clone()))
        .collect()
}

/// Pruned explicit tree of the optimal protocol: buyer prefixes that cannot
/// reach any design set collapse to the zero leaf immediately. Revenue and
/// incentives are unchanged; only path lengths shrink.
pub fn ud_optimal_tree(prior: &UdHardPrior) -> ExplicitTree {
    fn build(prior: &UdHardPrior, depth: usize, mask: u64, nodes: &mut Vec<TreeNode>) -> usize {
        let prefix = if depth >= 64 { u64::MAX } else { (1u64 << depth) - 1 };
        let consistent = prior.sets.iter().any(|s| s & prefix == mask);
        if !consistent {
            nodes.push(TreeNode::Leaf { alloc_mask: 0, payment: q_zero() });
            return nodes.len() - 1;
        }
        if depth == prior.n_items {
            return match prior.sets.iter().position(|s| *s == mask) {
                None => {
                    nodes.push(TreeNode::Leaf { alloc_mask: 0, payment: q_zero() });
                    nodes.len() - 1
                }
                Some(idx) => {
                    let set = prior.sets[idx];
                    let k = set.count_ones() as usize;
                    let mut children = Vec::with_capacity(k);
                    for i in (0..64).filter(|i| set >> i & 1 == 1) {
                        nodes.push(TreeNode::Leaf {
                            alloc_mask: 1 << i,
                            payment: prior.values[idx].clone(),
                        });
                        children.push(nodes.len() - 1);
                    }
                    nodes.push(TreeNode::Chance { weights: vec![q(1, k as i64); k], children });
                    nodes.len() - 1
                }
            };
        }
        let c0 = build(prior, depth + 1, mask, nodes);
        let c1 = build(prior, depth + 1, mask | 1 << depth, nodes);
        nodes.push(TreeNode::Buyer { children: [c0, c1] });
        nodes.len() - 1
    }
    let mut nodes = Vec::new();
    let root = build(prior, 0, 0, &mut nodes);
    ExplicitTree::new(nodes, root).expect("well-formed tree")
}

// --- XOS independent-items family ---------------------------------------

#[derive(Clone, Debug)]
pub struct XosParams {
    /// Total items including the interaction item (the last index).
    pub n_items: usize,
    pub eps0: Q,
    pub delta0: Q,
    pub eps1: Q,
    pub delta1: Q,
    pub eta: Q,
    pub gamma: Q,
    /// number of clause sets b
    pub clause_count: usize,
    /// number of interaction patterns N
    pub pattern_count: usize,
    /// number of code vectors (priors) M
    pub code_count: usize,
}

/// One prior per code vector: uniform over interaction patterns y, the
/// pattern's own value v̄ ∈ {1/2, 1} scaling the interaction item.
#[derive(Clone, Debug)]
pub struct XosHardPrior {
    pub n_items: usize,
    pub gamma: Q,
    /// clause item sets over the first n−1 items
    pub clause_sets: Vec<u64>,
    /// per-item clause weight 1/((2−γ)ε₀(n−1))
    pub clause_weight: Q,
    /// interaction patterns over [b]
    pub patterns: Vec<u64>,
    /// v̄ per pattern for this prior's code vector
    pub values: Vec<Q>,
}

impl XosHardPrior {
    pub fn interaction_item(&self) -> usize {
        self.n_items - 1
    }

    pub fn payment(&self, pattern_idx: usize) -> Q {
        &self.values[pattern_idx] + q_one() / (q(2, 1) - &self.gamma)
    }

    pub fn type_valuation(&self, pattern_idx: usize) -> Valuation {
        let y = self.patterns[pattern_idx];
        let vbar = &self.values[pattern_idx];
        let clauses = self
            .clause_sets
            .iter()
            .enumerate()
            .map(|(t, set)| {
                let mut clause = vec![q_zero(); self.n_items];
                for (i, c) in clause.iter_mut().enumerate().take(self.n_items - 1) {
                    if set >> i & 1 == 1 {
                        *c = self.clause_weight.clone();
                    }
                }
                if y >> t & 1 == 1 {
                    clause[self.n_items - 1] = vbar.clone();
                }
                clause
            })
            .collect();
        Valuation::xos(clauses)
    }

    pub fn to_prior(&self) -> Prior {
        Prior::uniform((0..self.patterns.len()).map(|j| self.type_valuation(j)).collect())
    }

    pub fn full_welfare(&self) -> Q {
        let total: Q = (0..self.patterns.len()).fold(q_zero(), |a, j| a + self.payment(j));
        total / q(self.patterns.len() as i64, 1)
    }
}

pub struct XosFamily {
    pub params: XosParams,
    pub clause_design: WeakDesign,
    pub pattern_design: WeakDesign,
    pub priors: Vec<XosHardPrior>,
}

pub fn build_xos_family(params: &XosParams, seed: u64) -> Result<XosFamily, HardError> {
    let two_minus_gamma = q(2, 1) - &params.gamma;
    let guard_lhs = (q_one() + &params.delta1) * &params.eps1
        + (q_one() + &params.delta0) * &params.eps0;
    let guard_rhs = q_one() / &two_minus_gamma - q(1, 2);
    if guard_lhs >= guard_rhs {
        return Err(HardError::ParameterGuard(format!(
            "ε₁(1+δ₁)+ε₀(1+δ₀) = {} must stay below 1/(2−γ)−1/2 = {}",
            q_to_f64(&guard_lhs),
            q_to_f64(&guard_rhs)
        )));
    }
    let n_rest = params.n_items - 1;
    let clause_size = &params.eps0 * q(n_rest as i64, 1);
    if !clause_size.is_integer() {
        return Err(HardError::ParameterGuard(
            "ε₀(n−1) must be an integer so a full clause is worth exactly 1/(2−γ)".into(),
        ));
    }
    let clause_design = gen_weak_design(
        n_rest,
        params.eps0.clone(),
        params.delta0.clone(),
        params.clause_count,
        seed,
    )?;
    let pattern_design = gen_weak_design(
        params.clause_count,
        params.eps1.clone(),
        params.delta1.clone(),
        params.pattern_count,
        seed.wrapping_add(1),
    )?;
    let codes = sample_code_vectors(
        params.pattern_count,
        EqualRevenueDist::new(2, q(1, 2)),
        params.code_count,
        seed.wrapping_add(2),
    )?;
    let clause_weight = q_one() / (&two_minus_gamma * clause_size);
    let support = codes.dist.values();
    let priors = codes
        .vectors
        .iter()
        .map(|code| XosHardPrior {
            n_items: params.n_items,
            gamma: params.gamma.clone(),
            clause_sets: clause_design.sets.clone(),
            clause_weight: clause_weight.clone(),
            patterns: pattern_design.sets.clone(),
            values: code.iter().map(|k| support[*k as usize].clone()).collect(),
        })
        .collect();
    Ok(XosFamily { params: params.clone(), clause_design, pattern_design, priors })
}

/// Optimal protocol: the buyer announces his pattern y over [b]; Chance
/// picks a clause t with y_t = 1 uniformly, allocates that clause's items
/// plus the interaction item, and charges v̄ + 1/(2−γ).
#[derive(Clone, Debug)]
pub struct XosOptimalProtocol {
    pub prior: XosHardPrior,
}

#[derive(Clone, Debug)]
pub enum XosOptNode {
    Sending { bit: u32, mask: u64 },
    Draw { pattern_idx: usize },
    LeafNothing,
    LeafClause { clause: usize, pattern_idx: usize },
}

impl Protocol for XosOptimalProtocol {
    type Node = XosOptNode;

    fn root(&self) -> XosOptNode {
        XosOptNode::Sending { bit: 0, mask: 0 }
    }

    fn view(&self, node: &XosOptNode) -> NodeView {
        match node {
            XosOptNode::Sending { .. } => NodeView::Buyer { allowed: Allowed::Both },
            XosOptNode::Draw { pattern_idx } => {
                let k = self.prior.patterns[*pattern_idx].count_ones() as i64;
                NodeView::Chance {
                    dist: ChanceDist::Weighted(vec![q(1, k); k as usize]),
                    reveal: true,
                }
            }
            XosOptNode::LeafNothing => NodeView::Leaf { alloc_mask: 0, payment: q_zero() },
            XosOptNode::LeafClause { clause, pattern_idx } => NodeView::Leaf {
                alloc_mask: self.prior.clause_sets[*clause] | 1 << self.prior.interaction_item(),
                payment: self.prior.payment(*pattern_idx),
            },
        }
    }

    fn buyer_child(&self, node: &XosOptNode, bit: Bit) -> Result<XosOptNode, RunError> {
        match node {
            XosOptNode::Sending { bit: pos, mask } => {
                let mask = mask | (bit as u64) << pos;
                let pos = pos + 1;
                if (pos as usize) < self.prior.clause_sets.len() {
                    Ok(XosOptNode::Sending { bit: pos, mask })
                } else {
                    match self.prior.patterns.iter().position(|p| *p == mask) {
                        Some(pattern_idx) => Ok(XosOptNode::Draw { pattern_idx }),
                        None => Ok(XosOptNode::LeafNothing),
                    }
                }
            }
            _ => Err(RunError::DisallowedBit { bit }),
        }
    }

    fn chance_child(&self, node: &XosOptNode, outcome: usize) -> XosOptNode {
        match node {
            XosOptNode::Draw { pattern_idx } => {
                let y = self.prior.patterns[*pattern_idx];
                let clause =
                    (0..64).filter(|t| y >> t & 1 == 1).nth(outcome).expect("in range");
                XosOptNode::LeafClause { clause, pattern_idx: *pattern_idx }
            }
            _ => unreachable!("chance_child on non-chance node"),
        }
    }
}

/// Exact expected utility of announcing pattern `sent` when the true type is
/// `true_idx`, by direct evaluation of the XOS valuation on each possible
/// draw.
pub fn xos_deviation_utility(prior: &XosHardPrior, true_idx: usize, sent: Option<usize>) -> Q {
    match sent {
        None => q_zero(),
        Some(s) => {
            let v = prior.type_valuation(true_idx);
            let y = prior.patterns[s];
            let k = y.count_ones() as i64;
            let mut total = q_zero();
            for t in (0..64).filter(|t| y >> t & 1 == 1) {
                let mask = prior.clause_sets[t] | 1 << prior.interaction_item();
                total += v.value(mask);
            }
            total / q(k, 1) - prior.payment(s)
        }
    }
}

/// Closed-form deviation bound 1/2 − 1/(2−γ) + ε₁(1+δ₁) + ε₀(1+δ₀).
pub fn xos_deviation_bound(p: &XosParams) -> Q {
    q(1, 2) - q_one() / (q(2, 1) - &p.gamma)
        + (q_one() + &p.delta1) * &p.eps1
        + (q_one() + &p.delta0) * &p.eps0
}

// --- presets -------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct UdPreset {
    pub n: usize,
    pub eps1: Q,
    pub delta1: Q,
    pub ell: u32,
    pub eps2: Q,
    pub eta: Q,
    pub design_count: usize,
    pub code_count: usize,
}

/// Shipped small-n parameter sets; guards are re-verified at build time,
/// not assumed from the asymptotic statement.
pub fn ud_preset(n: usize) -> Option<UdPreset> {
    let base = UdPreset {
        n,
        eps1: q(1, 8),
        delta1: q(1, 2),
        ell: 2,
        eps2: q(1, 2),
        eta: q(1, 5),
        design_count: 6,
        code_count: 32,
    };
    match n {
        16 => Some(base),
        32 => Some(UdPreset { design_count: 8, ..base }),
        // n = 64 runs the stated tiny-ε parameters, where the closed-form
        // deviation bound is 0.11 − 0.5.
        64 => Some(UdPreset { eps1: q(1, 10), delta1: q(1, 10), design_count: 8, ..base }),
        _ => None,
    }
}

pub fn xos_preset() -> XosParams {
    XosParams {
        n_items: 51,
        eps0: q(1, 25),
        delta0: q(1, 10),
        eps1: q(1, 10),
        delta1: q(1, 10),
        eta: q(1, 5),
        gamma: q(3, 5),
        clause_count: 20,
        pattern_count: 8,
        code_count: 4,
    }
}

pub fn build_ud_preset(n: usize, seed: u64) -> Result<(WeakDesign, Vec<UdHardPrior>), HardError> {
    let p = ud_preset(n).ok_or_else(|| {
        HardError::ParameterGuard(format!("no unit-demand preset for n = {n}"))
    })?;
    let design = gen_weak_design(p.n, p.eps1.clone(), p.delta1.clone(), p.design_count, seed)?;
    let codes = sample_code_vectors(
        p.design_count,
        EqualRevenueDist::new(p.ell, p.eps2.clone()),
        p.code_count,
        seed.wrapping_add(17),
    )?;
    let priors = build_unit_demand_family(&design, &codes, &p.eta)?;
    Ok((design, priors))
}
