//! Generic runner for auction protocols: alternating Buyer and Chance nodes,
//! a lazily-drawn uniform threshold τ whose bits exist only once sampled,
//! transcript recording, and leaf outcomes.

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use thiserror::Error;

use crate::num::{q_one, q_pow2, q_to_f64, q_zero, Q};

pub type Bit = bool;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("step cap {0} exceeded; protocol did not terminate")]
    StepLimitExceeded(u64),
    #[error("buyer bit leaves no feasible menu line at round {round}, coordinate {coord}")]
    InfeasiblePrefix { round: u32, coord: usize },
    #[error("buyer sub-histogram not dominated by the current histogram")]
    HistogramMismatch,
    #[error("hedge report out of range at chance node {0}")]
    ReportOutOfRange(u32),
    #[error("buyer bit {bit} not allowed at this node")]
    DisallowedBit { bit: Bit },
    #[error("type oracle output violates region invariants: {0}")]
    OracleInconsistent(String),
}

/// What the buyer may send at a buyer node. `Only` bits are auto-filled by
/// the runner (redundant nodes): they count toward tree depth but not toward
/// buyer communication.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Allowed {
    Both,
    Only(Bit),
}

/// How a Chance node's outcome is resolved.
#[derive(Clone, Debug)]
pub enum ChanceDist {
    /// Bit `index` (0-based) of the shared uniform threshold τ. Outcomes 0/1.
    TauBit(u64),
    /// Whether τ < threshold, resolved by drawing τ bits until the prefix
    /// interval separates. Outcome 0: τ < t, outcome 1: τ > t.
    TauLess(Q),
    /// Position of τ relative to [lo, hi): 0 below, 1 inside, 2 above.
    TauRegion { lo: Q, hi: Q },
    /// Explicit distribution over k children, sampled by comparing a fresh
    /// lazy uniform against the exact cumulative boundaries.
    Weighted(Vec<Q>),
}

#[derive(Clone, Debug)]
pub enum NodeView {
    Buyer { allowed: Allowed },
    Chance { dist: ChanceDist, reveal: bool },
    Leaf { alloc_mask: u64, payment: Q },
}

/// A two-party auction protocol whose nodes may be generated on demand.
/// Implementations are immutable and shareable; one run is single-threaded
/// while distinct runs (distinct seeds) may execute in parallel.
pub trait Protocol {
    type Node: Clone;

    fn root(&self) -> Self::Node;
    fn view(&self, node: &Self::Node) -> NodeView;
    fn buyer_child(&self, node: &Self::Node, bit: Bit) -> Result<Self::Node, RunError>;
    fn chance_child(&self, node: &Self::Node, outcome: usize) -> Self::Node;

    /// Conditional outcome distribution of a Chance node given the path so
    /// far. The default is correct whenever τ bits are consumed at strictly
    /// increasing fresh indices; protocols that condition τ further (the
    /// threshold-dispatch ones) override it.
    fn chance_weights(&self, node: &Self::Node) -> Vec<Q> {
        match self.view(node) {
            NodeView::Chance { dist, .. } => match dist {
                ChanceDist::TauBit(_) => vec![crate::num::q_half(), crate::num::q_half()],
                ChanceDist::TauLess(t) => {
                    let rest = q_one() - &t;
                    vec![t, rest]
                }
                ChanceDist::TauRegion { lo, hi } => {
                    let mid = &hi - &lo;
                    let above = q_one() - &hi;
                    vec![lo, mid, above]
                }
                ChanceDist::Weighted(w) => w,
            },
            _ => panic!("chance_weights on a non-chance node"),
        }
    }
}

/// A deterministic buyer strategy, driven by the runner. It sees exactly the
/// protocol-visible history: its own bits, auto-filled bits, and revealed
/// Chance outcomes. Hidden Chance nodes produce no callback at all — the
/// buyer learns nothing from them, not even that they happened.
pub trait BuyerStrategy {
    fn next_bit(&mut self) -> Bit;
    fn observe_forced(&mut self, _bit: Bit) {}
    fn observe_chance(&mut self, _outcome: usize) {}
}

/// Lazily-drawn randomness for one run: the shared τ bit stream plus an
/// independent generator for fresh uniforms at weighted Chance nodes.
pub struct ChanceSource {
    tau_bits: Vec<bool>,
    tau_num: BigInt, // integer whose bits are the drawn τ prefix
    tau_rng: ChaCha12Rng,
    fresh_rng: ChaCha12Rng,
}

impl ChanceSource {
    pub fn new(seed: u64) -> ChanceSource {
        ChanceSource {
            tau_bits: Vec::new(),
            tau_num: BigInt::zero(),
            tau_rng: ChaCha12Rng::seed_from_u64(seed),
            fresh_rng: ChaCha12Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
        }
    }

    /// Bit k of τ (0-based). Idempotent: each bit is drawn at most once.
    pub fn tau_bit(&mut self, k: u64) -> bool {
        while self.tau_bits.len() <= k as usize {
            let b: bool = self.tau_rng.random();
            self.tau_bits.push(b);
            self.tau_num <<= 1;
            if b {
                self.tau_num += 1;
            }
        }
        self.tau_bits[k as usize]
    }

    pub fn tau_prefix_len(&self) -> u64 {
        self.tau_bits.len() as u64
    }

    /// Dyadic interval [lo, hi) known to contain τ.
    fn tau_interval(&self) -> (Q, Q) {
        let r = self.tau_bits.len() as i64;
        let lo = Q::new(self.tau_num.clone(), BigInt::one()) * q_pow2(-r);
        let hi = &lo + q_pow2(-r);
        (lo, hi)
    }

    /// Resolve τ < t, drawing bits until the prefix interval separates from
    /// t. Terminates with probability 1 for t in (0,1).
    pub fn tau_less(&mut self, t: &Q) -> bool {
        if t <= &q_zero() {
            return false;
        }
        if t >= &q_one() {
            return true;
        }
        loop {
            let (lo, hi) = self.tau_interval();
            if &hi <= t {
                return true;
            }
            if &lo >= t {
                return false;
            }
            let k = self.tau_bits.len() as u64;
            self.tau_bit(k);
        }
    }

    /// Resolve τ against [lo, hi): 0 below, 1 inside, 2 above.
    pub fn tau_region(&mut self, lo: &Q, hi: &Q) -> usize {
        loop {
            let (a, b) = self.tau_interval();
            if &b <= lo {
                return 0;
            }
            if &a >= lo && &b <= hi {
                return 1;
            }
            if &a >= hi {
                return 2;
            }
            let k = self.tau_bits.len() as u64;
            self.tau_bit(k);
        }
    }

    /// Sample an index from an explicit distribution with a fresh lazy
    /// uniform compared bit-by-bit against the exact cumulative boundaries.
    pub fn weighted(&mut self, weights: &[Q]) -> usize {
        debug_assert!(weights.iter().fold(q_zero(), |a, w| a + w) == q_one());
        let mut cum = Vec::with_capacity(weights.len() + 1);
        cum.push(q_zero());
        let mut acc = q_zero();
        for w in weights {
            debug_assert!(!w.is_negative());
            acc += w;
            cum.push(acc.clone());
        }
        let mut num = BigInt::zero();
        let mut r: i64 = 0;
        loop {
            let lo = Q::new(num.clone(), BigInt::one()) * q_pow2(-r);
            let hi = &lo + q_pow2(-r);
            for j in 0..weights.len() {
                if cum[j] <= lo && hi <= cum[j + 1] {
                    return j;
                }
            }
            let b: bool = self.fresh_rng.random();
            num <<= 1;
            if b {
                num += 1;
            }
            r += 1;
        }
    }

    pub fn resolve(&mut self, dist: &ChanceDist) -> usize {
        match dist {
            ChanceDist::TauBit(k) => self.tau_bit(*k) as usize,
            ChanceDist::TauLess(t) => {
                if self.tau_less(t) {
                    0
                } else {
                    1
                }
            }
            ChanceDist::TauRegion { lo, hi } => self.tau_region(lo, hi),
            ChanceDist::Weighted(w) => self.weighted(w),
        }
    }
}

/// One run's record: what was sent, what Chance drew, and the leaf reached.
#[derive(Clone, Debug, PartialEq)]
pub struct Transcript {
    pub seed: u64,
    /// Chance nodes resolved on the path.
    pub rounds: u64,
    /// Bits the buyer actively sent (auto-filled bits excluded).
    pub buyer_bits: Vec<Bit>,
    /// Auto-filled buyer bits; they count toward tree depth only.
    pub forced_bits: u64,
    /// Resolved Chance outcomes in path order.
    pub chance_outcomes: Vec<u32>,
    /// τ bits drawn by the end of the run.
    pub tau_prefix_used: u64,
    pub alloc_mask: u64,
    pub payment: Q,
}

impl Transcript {
    /// JSON-lines record, one object per run.
    pub fn to_json_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            seed: u64,
            rounds: u64,
            buyer_bits: &'a str,
            alloc_mask: u64,
            payment: f64,
        }
        let bits: String = self.buyer_bits.iter().map(|b| if *b { '1' } else { '0' }).collect();
        serde_json::to_string(&Line {
            seed: self.seed,
            rounds: self.rounds,
            buyer_bits: &bits,
            alloc_mask: self.alloc_mask,
            payment: q_to_f64(&self.payment),
        })
        .expect("serializable")
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RunConfig {
    /// Hard cap on visited nodes; exceeding it signals a non-terminating
    /// protocol bug rather than bad luck.
    pub step_cap: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { step_cap: 1_000_000 }
    }
}

/// Execute one run. Deterministic given (protocol, strategy, seed).
pub fn run<P: Protocol>(
    protocol: &P,
    strategy: &mut dyn BuyerStrategy,
    seed: u64,
    cfg: &RunConfig,
) -> Result<Transcript, RunError> {
    let mut source = ChanceSource::new(seed);
    let mut node = protocol.root();
    let mut t = Transcript {
        seed,
        rounds: 0,
        buyer_bits: Vec::new(),
        forced_bits: 0,
        chance_outcomes: Vec::new(),
        tau_prefix_used: 0,
        alloc_mask: 0,
        payment: q_zero(),
    };
    let mut steps: u64 = 0;
    loop {
        steps += 1;
        if steps > cfg.step_cap {
            return Err(RunError::StepLimitExceeded(cfg.step_cap));
        }
        match protocol.view(&node) {
            NodeView::Leaf { alloc_mask, payment } => {
                t.alloc_mask = alloc_mask;
                t.payment = payment;
                t.tau_prefix_used = source.tau_prefix_len();
                return Ok(t);
            }
            NodeView::Buyer { allowed } => {
                let bit = match allowed {
                    Allowed::Only(b) => {
                        t.forced_bits += 1;
                        strategy.observe_forced(b);
                        b
                    }
                    Allowed::Both => {
                        let b = strategy.next_bit();
                        t.buyer_bits.push(b);
                        b
                    }
                };
                node = protocol.buyer_child(&node, bit)?;
            }
            NodeView::Chance { dist, reveal } => {
                let outcome = source.resolve(&dist);
                t.rounds += 1;
                t.chance_outcomes.push(outcome as u32);
                if reveal {
                    strategy.observe_chance(outcome);
                }
                node = protocol.chance_child(&node, outcome);
            }
        }
    }
}

/// A protocol that is a single leaf; useful as a degenerate case.
pub struct LeafProtocol {
    pub alloc_mask: u64,
    pub payment: Q,
}

impl Protocol for LeafProtocol {
    type Node = ();

    fn root(&self) {}

    fn view(&self, _node: &()) -> NodeView {
        NodeView::Leaf { alloc_mask: self.alloc_mask, payment: self.payment.clone() }
    }

    fn buyer_child(&self, _node: &(), bit: Bit) -> Result<(), RunError> {
        Err(RunError::DisallowedBit { bit })
    }

    fn chance_child(&self, _node: &(), _outcome: usize) {}
}

/// Strategy that never gets asked anything (degenerate protocols) or always
/// answers zero.
pub struct ZeroStrategy;

impl BuyerStrategy for ZeroStrategy {
    fn next_bit(&mut self) -> Bit {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::q;

    #[test]
    fn single_leaf_run() {
        let p = LeafProtocol { alloc_mask: 0, payment: q_zero() };
        let t = run(&p, &mut ZeroStrategy, 7, &RunConfig::default()).unwrap();
        assert_eq!(t.rounds, 0);
        assert_eq!(t.alloc_mask, 0);
        assert_eq!(t.payment, q_zero());
        assert!(t.buyer_bits.is_empty());
    }

    #[test]
    fn tau_bits_idempotent_and_fair() {
        let mut s = ChanceSource::new(42);
        let b0 = s.tau_bit(0);
        let b5 = s.tau_bit(5);
        assert_eq!(s.tau_bit(0), b0);
        assert_eq!(s.tau_bit(5), b5);
        assert_eq!(s.tau_prefix_len(), 6);

        // Fairness of bit 0 across 10^5 independent streams, 3σ band.
        let trials = 100_000;
        let ones: u32 = (0..trials).map(|i| ChanceSource::new(i).tau_bit(0) as u32).sum();
        let mean = ones as f64 / trials as f64;
        let sigma = 0.5 / (trials as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn tau_less_matches_threshold_measure() {
        let t = q(3, 8);
        let trials = 100_000u64;
        let hits: u64 = (0..trials).map(|i| ChanceSource::new(i).tau_less(&t) as u64).sum();
        let mean = hits as f64 / trials as f64;
        let sigma = (0.375f64 * 0.625 / trials as f64).sqrt();
        assert!((mean - 0.375).abs() < 4.0 * sigma, "mean {mean}");
    }

    #[test]
    fn weighted_draw_exactness() {
        let w = vec![q(1, 3), q(1, 2), q(1, 6)];
        let trials = 60_000u64;
        let mut counts = [0u64; 3];
        for i in 0..trials {
            counts[ChanceSource::new(i).weighted(&w)] += 1;
        }
        for (j, exp) in [1.0 / 3.0, 0.5, 1.0 / 6.0].iter().enumerate() {
            let mean = counts[j] as f64 / trials as f64;
            let sigma = (exp * (1.0 - exp) / trials as f64).sqrt();
            assert!((mean - exp).abs() < 4.0 * sigma, "outcome {j}: {mean} vs {exp}");
        }
    }

    #[test]
    fn weighted_zero_weight_never_drawn() {
        let w = vec![q(1, 2), q(0, 1), q(1, 2)];
        for i in 0..2_000 {
            assert_ne!(ChanceSource::new(i).weighted(&w), 1);
        }
    }
}
