//! Streaming threshold compilers: a normalized menu becomes an interactive
//! protocol in which the buyer streams binary expansions of his chosen line's
//! probabilities, one bit per coordinate per round, and a lazily-drawn
//! uniform τ decides termination and the outcome. Covers the per-item
//! (additive) form and the interval-partition (B-bundle) form, plus exact
//! analytic oracles for allocation probabilities and expected round counts.

use num_traits::{Signed, Zero};
use thiserror::Error;

use crate::engine::{Allowed, Bit, BuyerStrategy, ChanceDist, NodeView, Protocol, RunError};
use crate::menu::{Allocation, Menu, NormalizedLine, NormalizedMenu, Valuation};
use crate::num::{is_dyadic, q_one, q_zero, CoordBits, Q};

/// Suggested depth when rejecting non-dyadic inputs; deep enough that a
/// truncated menu is indistinguishable from the original at f32-level
/// tolerances while keeping streams short.
pub const SUGGESTED_TRUNCATION_BITS: u64 = 24;

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("line {line}, coordinate {coord} is not dyadic; truncate the menu to {suggested} bits first")]
    NonDyadic { line: usize, coord: usize, suggested: u64 },
    #[error("streaming compiler supports at most 64 lines, menu has {0}")]
    TooManyLines(usize),
    #[error("streaming compiler needs item-probability lines; line {0} uses a bundle distribution")]
    ItemFormRequired(usize),
    #[error("line {line}: boundaries must be non-decreasing within [0,1]")]
    BadBoundaries { line: usize },
    #[error("menu has no lines")]
    EmptyMenu,
    #[error("coordinate {coord} of line {line} outside [0,1]")]
    CoordRange { line: usize, coord: usize },
    #[error("bundle menu: {0}")]
    BadBundleMenu(String),
}

/// How a terminated run's resolved coordinate signs map to a leaf.
#[derive(Clone, Debug)]
enum LeafRule {
    /// Coordinates are n item probabilities then the payment probability;
    /// item i is allocated iff its streamed value exceeds τ.
    PerItem { n_items: usize },
    /// Coordinates are B-1 cumulative interval boundaries then the payment
    /// probability; τ's interval picks the bundle.
    Intervals { bundles: Vec<u64> },
}

/// A compiled streaming protocol. Immutable and shareable.
#[derive(Debug)]
pub struct StreamProtocol {
    /// Per line, per coordinate canonical expansions.
    bits: Vec<Vec<CoordBits>>,
    /// Per line coordinate values (the exact outcome law).
    coords: Vec<Vec<Q>>,
    n_coords: usize,
    rule: LeafRule,
    cap: Q,
}

/// Protocol position: which round and coordinate is being streamed, which
/// lines remain feasible, and which coordinates have separated from τ.
#[derive(Clone, Debug)]
pub struct StreamNode {
    round: u32,
    coord: usize,
    feasible: u64,
    sent: Vec<Bit>,
    /// Some(sign) once the coordinate's prefix differs from τ's;
    /// sign = true means coordinate > τ.
    resolved: Vec<Option<bool>>,
}

impl StreamProtocol {
    pub fn n_lines(&self) -> usize {
        self.coords.len()
    }

    pub fn n_coords(&self) -> usize {
        self.n_coords
    }

    pub fn cap(&self) -> &Q {
        &self.cap
    }

    /// The exact per-coordinate outcome law of a line: the protocol allocates
    /// item i (or charges U) with exactly the streamed probability.
    pub fn line_coords(&self, line: usize) -> &[Q] {
        &self.coords[line]
    }

    fn line_bit(&self, line: usize, coord: usize, round: u32) -> Bit {
        self.bits[line][coord].bit(round as usize)
    }

    fn allowed_bits(&self, node: &StreamNode) -> (bool, bool) {
        let mut zero = false;
        let mut one = false;
        for line in 0..self.n_lines() {
            if node.feasible >> line & 1 == 1 {
                if self.line_bit(line, node.coord, node.round) {
                    one = true;
                } else {
                    zero = true;
                }
            }
        }
        (zero, one)
    }

    fn leaf(&self, node: &StreamNode) -> (u64, Q) {
        let sign = |i: usize| node.resolved[i].expect("all coordinates resolved at a leaf");
        match &self.rule {
            LeafRule::PerItem { n_items } => {
                let mut mask = 0u64;
                for i in 0..*n_items {
                    if sign(i) {
                        mask |= 1 << i;
                    }
                }
                let payment = if sign(*n_items) { self.cap.clone() } else { q_zero() };
                (mask, payment)
            }
            LeafRule::Intervals { bundles } => {
                let n_bound = bundles.len() - 1;
                let mut idx = n_bound;
                for j in 0..n_bound {
                    if sign(j) {
                        idx = j;
                        break;
                    }
                }
                let payment = if sign(self.n_coords - 1) { self.cap.clone() } else { q_zero() };
                (bundles[idx], payment)
            }
        }
    }

    /// Feasible line set after streaming the given round-major bit matrix;
    /// None if some bit empties the set.
    pub fn feasible_after(&self, sent: &[Bit]) -> Option<Vec<usize>> {
        let mut feasible: u64 =
            if self.n_lines() == 64 { u64::MAX } else { (1u64 << self.n_lines()) - 1 };
        for (pos, bit) in sent.iter().enumerate() {
            let round = (pos / self.n_coords) as u32;
            let coord = pos % self.n_coords;
            for line in 0..self.n_lines() {
                if feasible >> line & 1 == 1 && self.line_bit(line, coord, round) != *bit {
                    feasible &= !(1 << line);
                }
            }
            if feasible == 0 {
                return None;
            }
        }
        Some((0..self.n_lines()).filter(|l| feasible >> l & 1 == 1).collect())
    }

    /// Enumerate every jointly-feasible buyer-bit prefix of `depth` rounds,
    /// with the feasible line set that survives it. Every reachable prefix is
    /// some line's prefix, so the deviation space collapses onto the lines
    /// surviving each branch.
    pub fn feasible_prefixes(&self, depth: u32) -> Vec<(Vec<Bit>, Vec<usize>)> {
        let mut out = Vec::new();
        let all = if self.n_lines() == 64 { u64::MAX } else { (1u64 << self.n_lines()) - 1 };
        let mut sent: Vec<Bit> = Vec::new();
        self.enum_prefixes(depth, 0, 0, all, &mut sent, &mut out);
        out
    }

    fn enum_prefixes(
        &self,
        depth: u32,
        round: u32,
        coord: usize,
        feasible: u64,
        sent: &mut Vec<Bit>,
        out: &mut Vec<(Vec<Bit>, Vec<usize>)>,
    ) {
        if round == depth {
            let lines = (0..self.n_lines()).filter(|l| feasible >> l & 1 == 1).collect();
            out.push((sent.clone(), lines));
            return;
        }
        let (next_round, next_coord) =
            if coord + 1 == self.n_coords { (round + 1, 0) } else { (round, coord + 1) };
        for bit in [false, true] {
            let mut f = feasible;
            for line in 0..self.n_lines() {
                if f >> line & 1 == 1 && self.line_bit(line, coord, round) != bit {
                    f &= !(1 << line);
                }
            }
            if f == 0 {
                continue;
            }
            sent.push(bit);
            self.enum_prefixes(depth, next_round, next_coord, f, sent, out);
            sent.pop();
        }
    }
}

impl StreamProtocol {
    /// Dyadic interval known to contain τ at this node; None once every
    /// coordinate has separated (leaf states).
    pub fn tau_interval(&self, node: &StreamNode) -> Option<(Q, Q)> {
        let i = node.resolved.iter().position(|s| s.is_none())?;
        let mut lo = q_zero();
        for r in 0..node.round as usize {
            if node.sent[r * self.n_coords + i] {
                lo += crate::num::q_pow2(-(r as i64 + 1));
            }
        }
        let hi = &lo + crate::num::q_pow2(-(node.round as i64));
        Some((lo, hi))
    }

    /// Exact conditional utility of continuing to stream a fixed line from
    /// this node state: item i (or the payment lottery) wins with
    /// probability |[0, p_i) ∩ I| / |I| for the τ interval I the state
    /// pins down.
    pub fn conditional_line_utility(&self, node: &StreamNode, coords: &[Q], v: &Valuation) -> Q {
        let Some((lo, hi)) = self.tau_interval(node) else {
            if let NodeView::Leaf { alloc_mask, payment } = self.view(node) {
                return v.value(alloc_mask) - payment;
            }
            unreachable!("no τ interval only at leaves");
        };
        let width = &hi - &lo;
        let below = |p: &Q| -> Q { (p.clone().min(hi.clone()) - &lo).max(q_zero()) / &width };
        match &self.rule {
            LeafRule::PerItem { n_items } => {
                let values = match v {
                    Valuation::Additive { values } => values,
                    _ => panic!("per-item conditional utility needs an additive valuation"),
                };
                let mut u = q_zero();
                for (i, val) in values.iter().enumerate().take(*n_items) {
                    u += below(&coords[i]) * &val.0;
                }
                u - below(&coords[*n_items]) * &self.cap
            }
            LeafRule::Intervals { bundles } => {
                let mut u = q_zero();
                let mut prev = q_zero();
                for (b, mask) in bundles.iter().enumerate() {
                    let next = if b + 1 == bundles.len() { q_one() } else { coords[b].clone() };
                    let a = prev.clone().max(lo.clone());
                    let c = next.clone().min(hi.clone());
                    if a < c {
                        u += (c - a) / &width * v.value(*mask);
                    }
                    prev = next;
                }
                u - below(&coords[bundles.len() - 1]) * &self.cap
            }
        }
    }
}

/// Line-streaming strategy that also knows the buyer's valuation, so it can
/// price its own continuation for the hedging wrapper.
pub struct ValuedLineStrategy {
    pub inner: LineStreamStrategy,
    pub coords: Vec<Q>,
    pub valuation: Valuation,
}

impl ValuedLineStrategy {
    pub fn new(coords: Vec<Q>, valuation: Valuation) -> ValuedLineStrategy {
        ValuedLineStrategy { inner: LineStreamStrategy::new(&coords), coords, valuation }
    }
}

impl BuyerStrategy for ValuedLineStrategy {
    fn next_bit(&mut self) -> Bit {
        self.inner.next_bit()
    }

    fn observe_forced(&mut self, bit: Bit) {
        self.inner.observe_forced(bit);
    }
}

impl Protocol for StreamProtocol {
    type Node = StreamNode;

    fn root(&self) -> StreamNode {
        let all = if self.n_lines() == 64 { u64::MAX } else { (1u64 << self.n_lines()) - 1 };
        StreamNode {
            round: 0,
            coord: 0,
            feasible: all,
            sent: Vec::new(),
            resolved: vec![None; self.n_coords],
        }
    }

    fn view(&self, node: &StreamNode) -> NodeView {
        if node.resolved.iter().all(|r| r.is_some()) {
            let (alloc_mask, payment) = self.leaf(node);
            return NodeView::Leaf { alloc_mask, payment };
        }
        if node.coord < self.n_coords {
            let (zero, one) = self.allowed_bits(node);
            let allowed = match (zero, one) {
                (true, true) => Allowed::Both,
                (true, false) => Allowed::Only(false),
                (false, true) => Allowed::Only(true),
                (false, false) => unreachable!("feasible set is never empty"),
            };
            NodeView::Buyer { allowed }
        } else {
            NodeView::Chance { dist: ChanceDist::TauBit(node.round as u64), reveal: false }
        }
    }

    fn buyer_child(&self, node: &StreamNode, bit: Bit) -> Result<StreamNode, RunError> {
        let mut f = node.feasible;
        for line in 0..self.n_lines() {
            if f >> line & 1 == 1 && self.line_bit(line, node.coord, node.round) != bit {
                f &= !(1 << line);
            }
        }
        if f == 0 {
            return Err(RunError::InfeasiblePrefix { round: node.round, coord: node.coord });
        }
        let mut next = node.clone();
        next.feasible = f;
        next.sent.push(bit);
        next.coord += 1;
        Ok(next)
    }

    fn chance_child(&self, node: &StreamNode, outcome: usize) -> StreamNode {
        let tau_bit = outcome == 1;
        let mut next = node.clone();
        let base = node.round as usize * self.n_coords;
        for i in 0..self.n_coords {
            if next.resolved[i].is_none() {
                let sent = node.sent[base + i];
                if sent != tau_bit {
                    next.resolved[i] = Some(sent);
                }
            }
        }
        next.round += 1;
        next.coord = 0;
        next
    }
}

fn expansions_for(coords: &[Vec<Q>]) -> Result<Vec<Vec<CoordBits>>, CompileError> {
    coords
        .iter()
        .enumerate()
        .map(|(line, cs)| {
            cs.iter()
                .enumerate()
                .map(|(coord, p)| {
                    if p.is_negative() || p > &q_one() {
                        return Err(CompileError::CoordRange { line, coord });
                    }
                    if !is_dyadic(p) {
                        return Err(CompileError::NonDyadic {
                            line,
                            coord,
                            suggested: SUGGESTED_TRUNCATION_BITS,
                        });
                    }
                    Ok(CoordBits::from_dyadic(p).expect("checked dyadic in range"))
                })
                .collect()
        })
        .collect()
}

/// Compile a normalized item-probability menu into the bit-streaming
/// protocol: each round the buyer sends the next expansion bit of all n+1
/// coordinates, Chance draws the next τ bit, and the run ends once every
/// coordinate's prefix has separated from τ's. Redundant buyer bits are
/// auto-filled by the runner.
pub fn compile_additive(menu: &NormalizedMenu) -> Result<StreamProtocol, CompileError> {
    if menu.lines.is_empty() {
        return Err(CompileError::EmptyMenu);
    }
    if menu.lines.len() > 64 {
        return Err(CompileError::TooManyLines(menu.lines.len()));
    }
    let coords: Vec<Vec<Q>> = menu
        .lines
        .iter()
        .enumerate()
        .map(|(i, l)| l.coords().ok_or(CompileError::ItemFormRequired(i)))
        .collect::<Result<_, _>>()?;
    let bits = expansions_for(&coords)?;
    Ok(StreamProtocol {
        bits,
        coords,
        n_coords: menu.n_items + 1,
        rule: LeafRule::PerItem { n_items: menu.n_items },
        cap: menu.cap.clone(),
    })
}

/// A menu in interval form: a public ordered bundle list shared by all
/// lines; each line carries B-1 non-decreasing cumulative boundaries (the
/// b-th interval's width is the probability of bundle b) plus the payment
/// probability.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleMenu {
    pub n_items: usize,
    pub cap: Q,
    pub bundles: Vec<u64>,
    pub lines: Vec<BundleLine>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BundleLine {
    pub boundaries: Vec<Q>,
    pub pay_prob: Q,
}

impl BundleLine {
    /// Interval widths, i.e. the exact bundle allocation probabilities.
    pub fn widths(&self) -> Vec<Q> {
        let mut prev = q_zero();
        let mut out = Vec::with_capacity(self.boundaries.len() + 1);
        for b in &self.boundaries {
            out.push(b - &prev);
            prev = b.clone();
        }
        out.push(q_one() - prev);
        out
    }

    pub fn coords(&self) -> Vec<Q> {
        let mut c = self.boundaries.clone();
        c.push(self.pay_prob.clone());
        c
    }
}

impl BundleMenu {
    pub fn validate(&self) -> Result<(), CompileError> {
        if self.lines.is_empty() {
            return Err(CompileError::BadBundleMenu("no lines".into()));
        }
        if self.bundles.is_empty() {
            return Err(CompileError::BadBundleMenu("no bundles".into()));
        }
        for (i, l) in self.lines.iter().enumerate() {
            if l.boundaries.len() + 1 != self.bundles.len() {
                return Err(CompileError::BadBundleMenu(format!(
                    "line {i}: {} boundaries for {} bundles",
                    l.boundaries.len(),
                    self.bundles.len()
                )));
            }
            let mut prev = q_zero();
            for b in &l.boundaries {
                if b < &prev || b > &q_one() {
                    return Err(CompileError::BadBoundaries { line: i });
                }
                prev = b.clone();
            }
            if l.pay_prob.is_negative() || l.pay_prob > q_one() {
                return Err(CompileError::BadBoundaries { line: i });
            }
        }
        Ok(())
    }

    /// Interval form of a bundle-distribution menu. Every line must have an
    /// exact unit-mass bundle distribution.
    pub fn from_menu(menu: &Menu) -> Result<BundleMenu, CompileError> {
        let mut bundles: Vec<u64> = Vec::new();
        for line in &menu.lines {
            match &line.alloc {
                Allocation::Bundles { bundle_dist } => {
                    for mask in bundle_dist.keys() {
                        if !bundles.contains(mask) {
                            bundles.push(*mask);
                        }
                    }
                }
                Allocation::Items { item_probs } => {
                    // Only the zero line may appear in item form.
                    if item_probs.iter().any(|p| !p.0.is_zero()) {
                        return Err(CompileError::BadBundleMenu(
                            "item-probability lines other than the zero line cannot be converted".into(),
                        ));
                    }
                    if !bundles.contains(&0) {
                        bundles.push(0);
                    }
                }
            }
        }
        bundles.sort();
        let cap = menu.cap().clone();
        let lines = menu
            .lines
            .iter()
            .enumerate()
            .map(|(i, line)| {
                let mut widths = vec![q_zero(); bundles.len()];
                match &line.alloc {
                    Allocation::Bundles { bundle_dist } => {
                        for (mask, p) in bundle_dist {
                            let idx = bundles.binary_search(mask).expect("collected above");
                            widths[idx] = p.0.clone();
                        }
                    }
                    Allocation::Items { .. } => {
                        widths[bundles.binary_search(&0).expect("present")] = q_one();
                    }
                }
                let total: Q = widths.iter().fold(q_zero(), |a, w| a + w);
                if total != q_one() {
                    return Err(CompileError::BadBundleMenu(format!(
                        "line {i}: bundle distribution must sum to exactly 1 for interval form"
                    )));
                }
                let mut boundaries = Vec::with_capacity(bundles.len() - 1);
                let mut acc = q_zero();
                for w in widths.iter().take(bundles.len() - 1) {
                    acc += w;
                    boundaries.push(acc.clone());
                }
                Ok(BundleLine { boundaries, pay_prob: line.payment() / &cap })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let bm = BundleMenu { n_items: menu.n_items, cap, bundles, lines };
        bm.validate()?;
        Ok(bm)
    }

    /// The unit-demand interval form: bundles are the empty set plus each
    /// singleton, so B = n+1.
    pub fn unit_demand_bundles(n_items: usize) -> Vec<u64> {
        let mut b = vec![0u64];
        b.extend((0..n_items).map(|i| 1u64 << i));
        b
    }
}

/// Compile a bundle menu: the buyer streams B coordinates per round (B-1
/// boundaries, then the payment probability); the run ends once τ's interval
/// and the payment comparison are both determined.
pub fn compile_bundle(menu: &BundleMenu) -> Result<StreamProtocol, CompileError> {
    menu.validate()?;
    if menu.lines.len() > 64 {
        return Err(CompileError::TooManyLines(menu.lines.len()));
    }
    let coords: Vec<Vec<Q>> = menu.lines.iter().map(|l| l.coords()).collect();
    let bits = expansions_for(&coords)?;
    Ok(StreamProtocol {
        bits,
        coords,
        n_coords: menu.bundles.len(),
        rule: LeafRule::Intervals { bundles: menu.bundles.clone() },
        cap: menu.cap.clone(),
    })
}

/// Honest strategy: stream the canonical expansion of one line's
/// coordinates, round by round. Auto-filled bits always agree with it.
pub struct LineStreamStrategy {
    bits: Vec<CoordBits>,
    n_coords: usize,
    round: u32,
    coord: usize,
}

impl LineStreamStrategy {
    pub fn new(coords: &[Q]) -> LineStreamStrategy {
        let bits = coords
            .iter()
            .map(|p| CoordBits::from_dyadic(p).expect("dyadic coordinates"))
            .collect::<Vec<_>>();
        LineStreamStrategy { n_coords: bits.len(), bits, round: 0, coord: 0 }
    }

    pub fn for_line(p: &StreamProtocol, line: usize) -> LineStreamStrategy {
        LineStreamStrategy::new(p.line_coords(line))
    }

    fn advance(&mut self) {
        self.coord += 1;
        if self.coord == self.n_coords {
            self.coord = 0;
            self.round += 1;
        }
    }

    fn current_bit(&self) -> Bit {
        self.bits[self.coord].bit(self.round as usize)
    }
}

impl BuyerStrategy for LineStreamStrategy {
    fn next_bit(&mut self) -> Bit {
        let b = self.current_bit();
        self.advance();
        b
    }

    fn observe_forced(&mut self, bit: Bit) {
        debug_assert_eq!(bit, self.current_bit(), "forced bit contradicts the streamed line");
        self.advance();
    }

}

/// Best line index for an additive valuation against a normalized menu:
/// utility is Σ v_i p_i − U·pay_prob, ties to the lowest index.
pub fn best_line_additive(menu: &NormalizedMenu, v: &Valuation) -> Result<usize, crate::menu::MenuError> {
    let values = match v {
        Valuation::Additive { values } => values,
        _ => return Err(crate::menu::MenuError::FormMismatch),
    };
    let mut best = 0usize;
    let mut best_u: Option<Q> = None;
    for (i, line) in menu.lines.iter().enumerate() {
        let coords = line.coords().ok_or(crate::menu::MenuError::FormMismatch)?;
        if coords.len() != values.len() + 1 {
            return Err(crate::menu::MenuError::DimensionMismatch {
                menu_items: coords.len() - 1,
                valuation_items: values.len(),
            });
        }
        let mut u = q_zero();
        for (p, val) in coords.iter().zip(values) {
            u += p * &val.0;
        }
        u -= &coords[values.len()] * &menu.cap;
        if best_u.as_ref().is_none_or(|b| &u > b) {
            best_u = Some(u);
            best = i;
        }
    }
    Ok(best)
}

/// Exact utility of streaming a given line of a normalized menu.
pub fn line_utility_additive(menu: &NormalizedMenu, line: usize, v: &Valuation) -> Q {
    let values = match v {
        Valuation::Additive { values } => values,
        _ => panic!("additive valuation required"),
    };
    let coords = menu.lines[line].coords().expect("item form");
    let mut u = q_zero();
    for (p, val) in coords.iter().zip(values) {
        u += p * &val.0;
    }
    u - &coords[values.len()] * &menu.cap
}

/// Best line for a bundle menu under any valuation class, by exact expected
/// utility Σ_b width_b·v(bundle_b) − U·pay_prob.
pub fn best_line_bundle(menu: &BundleMenu, v: &Valuation) -> usize {
    let mut best = 0usize;
    let mut best_u: Option<Q> = None;
    for (i, _) in menu.lines.iter().enumerate() {
        let u = line_utility_bundle(menu, i, v);
        if best_u.as_ref().is_none_or(|b| &u > b) {
            best_u = Some(u);
            best = i;
        }
    }
    best
}

pub fn line_utility_bundle(menu: &BundleMenu, line: usize, v: &Valuation) -> Q {
    let l = &menu.lines[line];
    let mut u = q_zero();
    for (w, mask) in l.widths().iter().zip(&menu.bundles) {
        u += w * v.value(*mask);
    }
    u - &l.pay_prob * &menu.cap
}

/// Honest strategy for an additive valuation: stream the best-response line.
pub fn honest_strategy_additive(
    menu: &NormalizedMenu,
    v: &Valuation,
) -> Result<LineStreamStrategy, crate::menu::MenuError> {
    let idx = best_line_additive(menu, v)?;
    Ok(LineStreamStrategy::new(&menu.lines[idx].coords().expect("item form")))
}

/// Honest strategy for a bundle menu.
pub fn honest_strategy_bundle(menu: &BundleMenu, v: &Valuation) -> LineStreamStrategy {
    let idx = best_line_bundle(menu, v);
    LineStreamStrategy::new(&menu.lines[idx].coords())
}

/// The protocol's exactness claim, used as the oracle against Monte Carlo:
/// streaming a line allocates item i (and charges U) with exactly the line's
/// own probabilities.
pub fn exact_alloc_prob(line: &NormalizedLine) -> Option<Vec<Q>> {
    line.coords()
}

/// Exact expected number of Chance rounds when a line's coordinates are
/// streamed against τ.
pub fn exact_expected_rounds(coords: &[Q]) -> Q {
    crate::num::expected_rounds_exact(coords)
}

/// Truncate every probability of a normalized menu to `bits` binary digits
/// (toward zero), producing a dyadic menu the compilers accept.
pub fn truncate_normalized(menu: &NormalizedMenu, bits: u64) -> NormalizedMenu {
    let trunc = |p: &Q| -> Q {
        let scaled = p.numer() << (bits as usize);
        Q::new(scaled / p.denom(), num_bigint::BigInt::from(1) << (bits as usize))
    };
    NormalizedMenu {
        n_items: menu.n_items,
        cap: menu.cap.clone(),
        lines: menu
            .lines
            .iter()
            .map(|l| NormalizedLine {
                alloc: match &l.alloc {
                    Allocation::Items { item_probs } => Allocation::Items {
                        item_probs: item_probs.iter().map(|p| crate::num::QNum(trunc(&p.0))).collect(),
                    },
                    other => other.clone(),
                },
                pay_prob: trunc(&l.pay_prob),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run, RunConfig};
    use crate::menu::MenuLine;
    use crate::num::{q, q_int};
    use std::collections::BTreeMap;

    fn norm(n_items: usize, cap: Q, lines: Vec<(Vec<Q>, Q)>) -> NormalizedMenu {
        NormalizedMenu {
            n_items,
            cap,
            lines: lines
                .into_iter()
                .map(|(probs, pay_prob)| NormalizedLine {
                    alloc: Allocation::Items {
                        item_probs: probs.into_iter().map(crate::num::QNum).collect(),
                    },
                    pay_prob,
                })
                .collect(),
        }
    }

    #[test]
    fn zero_menu_is_fully_forced() {
        let menu = norm(1, q_int(1), vec![(vec![q_zero()], q_zero())]);
        let p = compile_additive(&menu).unwrap();
        let mut s = LineStreamStrategy::for_line(&p, 0);
        let t = run(&p, &mut s, 3, &RunConfig::default()).unwrap();
        assert!(t.buyer_bits.is_empty(), "single line: every bit is forced");
        assert_eq!(t.alloc_mask, 0);
        assert_eq!(t.payment, q_zero());
        assert!(t.forced_bits >= 2);
    }

    #[test]
    fn non_dyadic_rejected_with_suggestion() {
        let menu = norm(1, q_int(1), vec![(vec![q(2, 3)], q_zero())]);
        match compile_additive(&menu) {
            Err(CompileError::NonDyadic { suggested, .. }) => {
                assert_eq!(suggested, SUGGESTED_TRUNCATION_BITS)
            }
            other => panic!("expected NonDyadic, got {other:?}"),
        }
    }

    /// Exact leaf law of an honestly-streamed line up to a τ-prefix depth:
    /// walks both τ branches of the real protocol, so it is independent of
    /// the Monte Carlo path.
    fn leaf_law(p: &StreamProtocol, line: usize, depth: u32) -> (BTreeMap<(u64, String), Q>, Q) {
        fn go(
            p: &StreamProtocol,
            node: StreamNode,
            strat: &mut LineStreamStrategy,
            weight: Q,
            depth: u32,
            acc: &mut BTreeMap<(u64, String), Q>,
            alive: &mut Q,
        ) {
            match p.view(&node) {
                NodeView::Leaf { alloc_mask, payment } => {
                    *acc.entry((alloc_mask, crate::num::format_q(&payment))).or_insert_with(q_zero) +=
                        weight;
                }
                NodeView::Buyer { allowed } => {
                    let bit = match allowed {
                        Allowed::Only(b) => {
                            strat.observe_forced(b);
                            b
                        }
                        Allowed::Both => strat.next_bit(),
                    };
                    let child = p.buyer_child(&node, bit).unwrap();
                    go(p, child, strat, weight, depth, acc, alive);
                }
                NodeView::Chance { .. } => {
                    if depth == 0 {
                        *alive += weight;
                        return;
                    }
                    for outcome in 0..2 {
                        let mut s = strat.clone_state();
                        let child = p.chance_child(&node, outcome);
                        go(p, child, &mut s, &weight * q(1, 2), depth - 1, acc, alive);
                    }
                }
            }
        }
        let mut acc = BTreeMap::new();
        let mut alive = q_zero();
        let mut strat = LineStreamStrategy::for_line(p, line);
        go(p, p.root(), &mut strat, q_one(), depth, &mut acc, &mut alive);
        (acc, alive)
    }

    impl LineStreamStrategy {
        fn clone_state(&self) -> LineStreamStrategy {
            LineStreamStrategy {
                bits: self.bits.clone(),
                n_coords: self.n_coords,
                round: self.round,
                coord: self.coord,
            }
        }
    }

    // One item, payment probability 2/3 and allocation probability 1/3,
    // truncated to dyadic before compiling: after two rounds the run has
    // ended with (pay U, get item) w.p. 1/4, ended with nothing w.p. 1/4,
    // and continues w.p. 1/2.
    #[test]
    fn two_round_law_of_truncated_thirds() {
        let raw = norm(1, q_int(1), vec![(vec![q_zero()], q_zero()), (vec![q(1, 3)], q(2, 3))]);
        let menu = truncate_normalized(&raw, 20);
        let p = compile_additive(&menu).unwrap();
        let (law, alive) = leaf_law(&p, 1, 2);
        assert_eq!(alive, q(1, 2));
        assert_eq!(law.get(&(1, "1".into())), Some(&q(1, 4)));
        assert_eq!(law.get(&(0, "0".into())), Some(&q(1, 4)));
    }

    #[test]
    fn honest_bits_stream_the_expansion() {
        // alloc 1/2 = .10.., pay 1/4 = .01..: round 1 sends (1,0), round 2
        // sends (0,1), then zeros.
        let mut s = LineStreamStrategy::new(&[q(1, 2), q(1, 4)]);
        let mut bits = Vec::new();
        for _ in 0..3 {
            bits.push(s.next_bit());
            bits.push(s.next_bit());
        }
        assert_eq!(bits, vec![true, false, false, true, false, false]);
    }

    #[test]
    fn exact_rounds_examples() {
        assert_eq!(exact_expected_rounds(&[q(1, 2), q_zero()]), q_int(3));
        assert_eq!(exact_expected_rounds(&[q_zero()]), q_int(2));
    }

    #[test]
    fn single_item_half_mc_rate() {
        let menu = norm(
            1,
            q_int(1),
            vec![(vec![q_zero()], q_zero()), (vec![q(1, 2)], q_zero())],
        );
        let p = compile_additive(&menu).unwrap();
        let trials = 20_000u64;
        let mut hits = 0u64;
        let mut rounds = 0u64;
        for seed in 0..trials {
            let mut s = LineStreamStrategy::for_line(&p, 1);
            let t = run(&p, &mut s, seed, &RunConfig::default()).unwrap();
            hits += (t.alloc_mask & 1) as u64;
            rounds += t.rounds;
        }
        let mean = hits as f64 / trials as f64;
        let sigma = (0.25f64 / trials as f64).sqrt();
        assert!((mean - 0.5).abs() < 4.0 * sigma, "allocation rate {mean}");
        // coords {1/2, 0} have exact expected rounds 3.
        let mean_rounds = rounds as f64 / trials as f64;
        assert!((mean_rounds - 3.0).abs() < 0.1, "mean rounds {mean_rounds}");
    }

    #[test]
    fn bundle_two_intervals() {
        let bm = BundleMenu {
            n_items: 2,
            cap: q_int(1),
            bundles: vec![0b01, 0b10],
            lines: vec![BundleLine { boundaries: vec![q(1, 2)], pay_prob: q_zero() }],
        };
        let p = compile_bundle(&bm).unwrap();
        assert_eq!(exact_expected_rounds(&bm.lines[0].coords()), q_int(3));
        let trials = 20_000u64;
        let mut first = 0u64;
        for seed in 0..trials {
            let mut s = LineStreamStrategy::new(&bm.lines[0].coords());
            let t = run(&p, &mut s, seed, &RunConfig::default()).unwrap();
            assert!(t.alloc_mask == 0b01 || t.alloc_mask == 0b10);
            first += (t.alloc_mask == 0b01) as u64;
        }
        let mean = first as f64 / trials as f64;
        let sigma = (0.25f64 / trials as f64).sqrt();
        assert!((mean - 0.5).abs() < 4.0 * sigma);
    }

    #[test]
    fn bundle_single_bundle_resolves_payment_only() {
        let bm = BundleMenu {
            n_items: 1,
            cap: q_int(4),
            bundles: vec![0b1],
            lines: vec![BundleLine { boundaries: vec![], pay_prob: q_zero() }],
        };
        let p = compile_bundle(&bm).unwrap();
        let mut s = LineStreamStrategy::new(&bm.lines[0].coords());
        let t = run(&p, &mut s, 11, &RunConfig::default()).unwrap();
        assert_eq!(t.alloc_mask, 0b1);
        assert_eq!(t.payment, q_zero());
    }

    #[test]
    fn unit_demand_interval_form() {
        let menu = Menu::new(
            2,
            q_int(1),
            vec![
                MenuLine::zero(2),
                MenuLine::bundles(vec![(0, q(1, 4)), (1, q(1, 4)), (2, q(1, 2))], q(1, 8)),
            ],
        )
        .unwrap();
        let bm = BundleMenu::from_menu(&menu).unwrap();
        assert_eq!(bm.bundles, vec![0, 1, 2]);
        assert_eq!(bm.lines[1].widths(), vec![q(1, 4), q(1, 4), q(1, 2)]);
        assert_eq!(bm.lines[0].widths(), vec![q_one(), q_zero(), q_zero()]);
        compile_bundle(&bm).unwrap();
    }

    #[test]
    fn feasible_prefixes_collapse_to_lines() {
        let menu = norm(
            1,
            q_int(1),
            vec![
                (vec![q_zero()], q_zero()),
                (vec![q(1, 2)], q(1, 4)),
                (vec![q(3, 4)], q(1, 2)),
            ],
        );
        let p = compile_additive(&menu).unwrap();
        for (prefix, lines) in p.feasible_prefixes(4) {
            assert!(!lines.is_empty());
            assert_eq!(p.feasible_after(&prefix).unwrap(), lines);
        }
        // Every line survives along its own prefix.
        let prefixes = p.feasible_prefixes(4);
        for l in 0..3 {
            assert!(prefixes.iter().any(|(_, lines)| lines.contains(&l)));
        }
    }
}
