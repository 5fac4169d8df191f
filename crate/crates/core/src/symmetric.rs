//! Compiler for partition-symmetric unit-demand menus: stage 1 picks a menu
//! line and Chance draws a subset of the line's partition (or the no-item
//! residual); stage 2 repeatedly halves the surviving subset, the buyer
//! sending the histogram of allocation probabilities for the first half and
//! a fresh lazy uniform picking the side with exactly the mass ratio.

use std::collections::BTreeMap;

use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Allowed, Bit, BuyerStrategy, ChanceDist, NodeView, Protocol, RunError};
use crate::menu::Valuation;
use crate::num::{ceil_log2, q_one, q_to_f64, q_zero, QNum, Q};

#[derive(Debug, Error)]
pub enum SymError {
    #[error("delta must be a rational in (0,1)")]
    BadDelta,
    #[error("line {line}: partition must cover every item exactly once")]
    BadPartition { line: usize },
    #[error("line {line}, subset {subset}: histogram counts must sum to the subset size")]
    BadHistogram { line: usize, subset: usize },
    #[error("line {line}: grid index {index} out of range")]
    BadGridIndex { line: usize, index: usize },
    #[error("line {line}: total allocation mass exceeds 1")]
    MassExceedsOne { line: usize },
    #[error("menu must contain a zero line (no allocation mass, zero payment)")]
    NoZeroLine,
    #[error("menu needs at least one line")]
    Empty,
    #[error("at most 64 items supported")]
    TooManyItems,
}

/// Histogram over the probability grid: grid index -> item count.
pub type Histogram = BTreeMap<usize, u32>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymMenuLine {
    pub payment: QNum,
    pub partition: Vec<Vec<usize>>,
    #[serde(with = "hist_list")]
    pub histograms: Vec<Histogram>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymMenu {
    pub n_items: usize,
    #[serde(rename = "U")]
    pub cap: QNum,
    pub delta: QNum,
    pub lines: Vec<SymMenuLine>,
}

mod hist_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Histogram], ser: S) -> Result<S::Ok, S::Error> {
        let as_strings: Vec<BTreeMap<String, u32>> = v
            .iter()
            .map(|h| h.iter().map(|(k, c)| (k.to_string(), *c)).collect())
            .collect();
        as_strings.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<Histogram>, D::Error> {
        let raw: Vec<BTreeMap<String, u32>> = Vec::deserialize(de)?;
        raw.into_iter()
            .map(|h| {
                h.into_iter()
                    .map(|(k, c)| {
                        k.parse::<usize>()
                            .map(|k| (k, c))
                            .map_err(|_| serde::de::Error::custom(format!("bad grid index {k:?}")))
                    })
                    .collect()
            })
            .collect()
    }
}

/// The discrete probability grid {1, (1-δ), (1-δ)², ..., (1-δ)^G} ∪ {0};
/// the final index is the zero probability.
#[derive(Clone, Debug)]
pub struct ProbGrid {
    pub values: Vec<Q>,
}

impl ProbGrid {
    pub fn for_menu(delta: &Q, n_items: usize) -> ProbGrid {
        let d = q_to_f64(delta);
        let depth = if n_items <= 1 { 0 } else { (3.0 / d * (n_items as f64).ln()).floor() as usize };
        let base = q_one() - delta;
        let mut values = Vec::with_capacity(depth + 2);
        let mut cur = q_one();
        for _ in 0..=depth {
            values.push(cur.clone());
            cur *= &base;
        }
        values.push(q_zero());
        ProbGrid { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn zero_index(&self) -> usize {
        self.values.len() - 1
    }

    /// Total allocation mass of a dense count vector.
    pub fn mass(&self, counts: &[u32]) -> Q {
        let mut m = q_zero();
        for (g, c) in counts.iter().enumerate() {
            if *c > 0 {
                m += &self.values[g] * crate::num::q_int(*c as i64);
            }
        }
        m
    }
}

fn dense(h: &Histogram, grid_len: usize) -> Vec<u32> {
    let mut v = vec![0u32; grid_len];
    for (g, c) in h {
        v[*g] += c;
    }
    v
}

impl SymMenu {
    pub fn cap(&self) -> &Q {
        &self.cap.0
    }

    pub fn delta(&self) -> &Q {
        &self.delta.0
    }

    pub fn grid(&self) -> ProbGrid {
        ProbGrid::for_menu(self.delta(), self.n_items)
    }

    pub fn validate(&self) -> Result<(), SymError> {
        if self.lines.is_empty() {
            return Err(SymError::Empty);
        }
        if self.n_items > 64 {
            return Err(SymError::TooManyItems);
        }
        if self.delta.0 <= q_zero() || self.delta.0 >= q_one() {
            return Err(SymError::BadDelta);
        }
        let grid = self.grid();
        let mut has_zero_line = false;
        for (li, line) in self.lines.iter().enumerate() {
            let mut seen = vec![false; self.n_items];
            if line.partition.len() != line.histograms.len() {
                return Err(SymError::BadPartition { line: li });
            }
            for items in &line.partition {
                for &it in items {
                    if it >= self.n_items || seen[it] {
                        return Err(SymError::BadPartition { line: li });
                    }
                    seen[it] = true;
                }
            }
            if !seen.iter().all(|s| *s) {
                return Err(SymError::BadPartition { line: li });
            }
            let mut total_mass = q_zero();
            for (si, (items, hist)) in line.partition.iter().zip(&line.histograms).enumerate() {
                let mut count = 0u32;
                for (&g, &c) in hist {
                    if g >= grid.len() {
                        return Err(SymError::BadGridIndex { line: li, index: g });
                    }
                    count += c;
                }
                if count as usize != items.len() {
                    return Err(SymError::BadHistogram { line: li, subset: si });
                }
                total_mass += grid.mass(&dense(hist, grid.len()));
            }
            if total_mass > q_one() {
                return Err(SymError::MassExceedsOne { line: li });
            }
            if total_mass.is_zero() && line.payment.0.is_zero() {
                has_zero_line = true;
            }
        }
        if !has_zero_line {
            return Err(SymError::NoZeroLine);
        }
        Ok(())
    }

    /// Mass of each partition subset of a line, in order.
    pub fn subset_masses(&self, line: usize) -> Vec<Q> {
        let grid = self.grid();
        self.lines[line]
            .histograms
            .iter()
            .map(|h| grid.mass(&dense(h, grid.len())))
            .collect()
    }
}

/// Compiled two-stage protocol.
#[derive(Debug)]
pub struct SymProtocol {
    menu: SymMenu,
    grid: ProbGrid,
    line_bits: u32,
    count_bits: u32,
}

#[derive(Clone, Debug)]
pub enum SymNode {
    /// Stage-1 line choice, ⌈log₂ C⌉ bits MSB-first; impossible prefixes are
    /// auto-filled away.
    ChooseLine { sent: u32, prefix: u32 },
    /// Chance draws a partition subset with its mass, or the residual
    /// no-item branch.
    SubsetDraw { line: usize },
    /// Stage-2 halving state: ordered surviving items, their histogram, and
    /// the left-half histogram counts being streamed.
    Halving {
        line: usize,
        items: Vec<usize>,
        counts: Vec<u32>,
        sent_counts: Vec<u32>,
        cur_count: u32,
        cur_bits: u32,
    },
    LeafNoItem { line: usize },
    LeafItem { line: usize, item: usize },
}

/// First ⌈|T|/2⌉ items of the (ascending) surviving set.
fn left_half(items: &[usize]) -> usize {
    items.len().div_ceil(2)
}

impl SymProtocol {
    pub fn menu(&self) -> &SymMenu {
        &self.menu
    }

    pub fn grid(&self) -> &ProbGrid {
        &self.grid
    }

    pub fn count_bits(&self) -> u32 {
        self.count_bits
    }

    pub fn line_bits(&self) -> u32 {
        self.line_bits
    }

    fn subset_entry(&self, line: usize, idx: usize) -> SymNode {
        let items_src = &self.menu.lines[line].partition[idx];
        let mut items = items_src.clone();
        items.sort_unstable();
        let counts = dense(&self.menu.lines[line].histograms[idx], self.grid.len());
        if items.len() == 1 {
            return SymNode::LeafItem { line, item: items[0] };
        }
        SymNode::Halving { line, items, counts, sent_counts: Vec::new(), cur_count: 0, cur_bits: 0 }
    }
}

impl Protocol for SymProtocol {
    type Node = SymNode;

    fn root(&self) -> SymNode {
        if self.line_bits == 0 {
            SymNode::SubsetDraw { line: 0 }
        } else {
            SymNode::ChooseLine { sent: 0, prefix: 0 }
        }
    }

    fn view(&self, node: &SymNode) -> NodeView {
        match node {
            SymNode::ChooseLine { sent, prefix } => {
                let shift = self.line_bits - sent - 1;
                let c = self.menu.lines.len() as u32;
                let mut zero = false;
                let mut one = false;
                for idx in 0..c {
                    if idx >> (shift + 1) == *prefix {
                        if idx >> shift & 1 == 1 {
                            one = true;
                        } else {
                            zero = true;
                        }
                    }
                }
                let allowed = match (zero, one) {
                    (true, true) => Allowed::Both,
                    (true, false) => Allowed::Only(false),
                    (false, true) => Allowed::Only(true),
                    (false, false) => unreachable!("line prefix is always extendable"),
                };
                NodeView::Buyer { allowed }
            }
            SymNode::SubsetDraw { line } => {
                let mut weights = self.menu.subset_masses(*line);
                let used: Q = weights.iter().fold(q_zero(), |a, w| a + w);
                weights.push(q_one() - used);
                NodeView::Chance { dist: ChanceDist::Weighted(weights), reveal: true }
            }
            SymNode::Halving { .. } => {
                if let Some(done) = self.halving_chance(node) {
                    return done;
                }
                NodeView::Buyer { allowed: Allowed::Both }
            }
            SymNode::LeafNoItem { line } => NodeView::Leaf {
                alloc_mask: 0,
                payment: self.menu.lines[*line].payment.0.clone(),
            },
            SymNode::LeafItem { line, item } => NodeView::Leaf {
                alloc_mask: 1u64 << item,
                payment: self.menu.lines[*line].payment.0.clone(),
            },
        }
    }

    fn buyer_child(&self, node: &SymNode, bit: Bit) -> Result<SymNode, RunError> {
        match node {
            SymNode::ChooseLine { sent, prefix } => {
                let prefix = prefix << 1 | bit as u32;
                let sent = sent + 1;
                if sent == self.line_bits {
                    Ok(SymNode::SubsetDraw { line: prefix as usize })
                } else {
                    Ok(SymNode::ChooseLine { sent, prefix })
                }
            }
            SymNode::Halving { line, items, counts, sent_counts, cur_count, cur_bits } => {
                let mut cur_count = cur_count << 1 | bit as u32;
                let mut cur_bits = cur_bits + 1;
                let mut sent_counts = sent_counts.clone();
                if cur_bits == self.count_bits {
                    sent_counts.push(cur_count);
                    cur_count = 0;
                    cur_bits = 0;
                    if sent_counts.len() == self.grid.len() {
                        // Full left histogram received; it must be dominated
                        // by the current histogram and cover the half size.
                        let total: u32 = sent_counts.iter().sum();
                        if total as usize != left_half(items)
                            || sent_counts.iter().zip(counts).any(|(l, c)| l > c)
                        {
                            return Err(RunError::HistogramMismatch);
                        }
                    }
                }
                Ok(SymNode::Halving {
                    line: *line,
                    items: items.clone(),
                    counts: counts.clone(),
                    sent_counts,
                    cur_count,
                    cur_bits,
                })
            }
            _ => Err(RunError::DisallowedBit { bit }),
        }
    }

    fn chance_child(&self, node: &SymNode, outcome: usize) -> SymNode {
        match node {
            SymNode::SubsetDraw { line } => {
                if outcome == self.menu.lines[*line].partition.len() {
                    SymNode::LeafNoItem { line: *line }
                } else {
                    self.subset_entry(*line, outcome)
                }
            }
            SymNode::Halving { line, items, counts, sent_counts, .. } => {
                let half = left_half(items);
                let (next_items, next_counts): (Vec<usize>, Vec<u32>) = if outcome == 0 {
                    (items[..half].to_vec(), sent_counts.clone())
                } else {
                    (
                        items[half..].to_vec(),
                        counts.iter().zip(sent_counts).map(|(c, l)| c - l).collect(),
                    )
                };
                if next_items.len() == 1 {
                    SymNode::LeafItem { line: *line, item: next_items[0] }
                } else {
                    SymNode::Halving {
                        line: *line,
                        items: next_items,
                        counts: next_counts,
                        sent_counts: Vec::new(),
                        cur_count: 0,
                        cur_bits: 0,
                    }
                }
            }
            _ => unreachable!("chance_child on non-chance node"),
        }
    }
}

impl SymProtocol {
    /// Once the full left histogram has been streamed, the node becomes a
    /// Chance node recursing left with probability (left mass)/(total mass).
    fn halving_chance(&self, node: &SymNode) -> Option<NodeView> {
        if let SymNode::Halving { counts, sent_counts, .. } = node {
            if sent_counts.len() == self.grid.len() {
                let total = self.grid.mass(counts);
                let left = self.grid.mass(sent_counts);
                // total > 0: zero-mass branches are never recursed into.
                let p = left / &total;
                let rest = q_one() - &p;
                return Some(NodeView::Chance {
                    dist: ChanceDist::Weighted(vec![p, rest]),
                    reveal: true,
                });
            }
        }
        None
    }
}

pub fn compile_symmetric(menu: &SymMenu) -> Result<SymProtocol, SymError> {
    menu.validate()?;
    let grid = menu.grid();
    Ok(SymProtocol {
        line_bits: ceil_log2(menu.lines.len() as u64),
        count_bits: ceil_log2(menu.n_items as u64 + 1),
        grid,
        menu: menu.clone(),
    })
}

/// An assignment maps every item to a grid index; per subset its induced
/// histogram must equal the line's.
pub fn validate_assignment(
    menu: &SymMenu,
    line: usize,
    assignment: &BTreeMap<usize, usize>,
) -> Result<(), SymError> {
    let grid = menu.grid();
    let l = &menu.lines[line];
    for (si, (items, hist)) in l.partition.iter().zip(&l.histograms).enumerate() {
        let mut induced = vec![0u32; grid.len()];
        for it in items {
            let g = *assignment.get(it).ok_or(SymError::BadPartition { line })?;
            if g >= grid.len() {
                return Err(SymError::BadGridIndex { line, index: g });
            }
            induced[g] += 1;
        }
        if induced != dense(hist, grid.len()) {
            return Err(SymError::BadHistogram { line, subset: si });
        }
    }
    Ok(())
}

/// Honest strategy: choose a line, then at each halving step emit the
/// sub-histogram induced by a fixed item-to-probability assignment.
pub struct SymHonestStrategy {
    menu: SymMenu,
    grid_len: usize,
    line_bits: u32,
    count_bits: u32,
    line: usize,
    assignment: BTreeMap<usize, usize>,
    phase: SymPhase,
}

#[derive(Clone, Debug)]
enum SymPhase {
    Line { sent: u32 },
    AwaitSubset,
    Halving { items: Vec<usize>, queue: Vec<Bit>, pos: usize },
    Done,
}

impl SymHonestStrategy {
    pub fn new(
        protocol: &SymProtocol,
        line: usize,
        assignment: BTreeMap<usize, usize>,
    ) -> Result<SymHonestStrategy, SymError> {
        validate_assignment(protocol.menu(), line, &assignment)?;
        let phase = if protocol.line_bits() == 0 {
            SymPhase::AwaitSubset
        } else {
            SymPhase::Line { sent: 0 }
        };
        Ok(SymHonestStrategy {
            menu: protocol.menu().clone(),
            grid_len: protocol.grid().len(),
            line_bits: protocol.line_bits(),
            count_bits: protocol.count_bits(),
            line,
            assignment,
            phase,
        })
    }

    fn queue_left_histogram(&self, items: &[usize]) -> Vec<Bit> {
        let half = left_half(items);
        let mut counts = vec![0u32; self.grid_len];
        for it in &items[..half] {
            counts[self.assignment[it]] += 1;
        }
        let mut bits = Vec::with_capacity(self.grid_len * self.count_bits as usize);
        for c in counts {
            for k in (0..self.count_bits).rev() {
                bits.push(c >> k & 1 == 1);
            }
        }
        bits
    }

    fn enter_subset(&mut self, idx: usize) {
        let partition = &self.menu.lines[self.line].partition;
        if idx >= partition.len() {
            self.phase = SymPhase::Done;
            return;
        }
        let mut items = partition[idx].clone();
        items.sort_unstable();
        if items.len() <= 1 {
            self.phase = SymPhase::Done;
        } else {
            let queue = self.queue_left_histogram(&items);
            self.phase = SymPhase::Halving { items, queue, pos: 0 };
        }
    }

    fn step_bit(&mut self) -> Bit {
        match &mut self.phase {
            SymPhase::Line { sent } => {
                let shift = self.line_bits - *sent - 1;
                let bit = (self.line as u32) >> shift & 1 == 1;
                *sent += 1;
                if *sent == self.line_bits {
                    self.phase = SymPhase::AwaitSubset;
                }
                bit
            }
            SymPhase::Halving { queue, pos, .. } => {
                let bit = queue[*pos];
                *pos += 1;
                bit
            }
            _ => false,
        }
    }
}

impl BuyerStrategy for SymHonestStrategy {
    fn next_bit(&mut self) -> Bit {
        self.step_bit()
    }

    fn observe_forced(&mut self, _bit: Bit) {
        let _ = self.step_bit();
    }

    fn observe_chance(&mut self, outcome: usize) {
        match std::mem::replace(&mut self.phase, SymPhase::Done) {
            SymPhase::AwaitSubset => self.enter_subset(outcome),
            SymPhase::Halving { items, .. } => {
                let half = left_half(&items);
                let next: Vec<usize> =
                    if outcome == 0 { items[..half].to_vec() } else { items[half..].to_vec() };
                if next.len() <= 1 {
                    self.phase = SymPhase::Done;
                } else {
                    let queue = self.queue_left_histogram(&next);
                    self.phase = SymPhase::Halving { items: next, queue, pos: 0 };
                }
            }
            other => self.phase = other,
        }
    }
}

/// Exact utility of playing (line, assignment) against a unit-demand
/// valuation: each item is won with its assigned grid probability and the
/// line's payment is charged on every branch.
pub fn sym_utility(menu: &SymMenu, line: usize, assignment: &BTreeMap<usize, usize>, v: &Valuation) -> Q {
    let grid = menu.grid();
    let mut u = q_zero();
    for (item, g) in assignment {
        u += &grid.values[*g] * v.value(1u64 << item);
    }
    u - &menu.lines[line].payment.0
}

/// All distinct assignments realizing a line's histograms (small instances
/// only; the audit's exact deviation space).
pub fn enumerate_assignments(menu: &SymMenu, line: usize) -> Vec<BTreeMap<usize, usize>> {
    let grid_len = menu.grid().len();
    let l = &menu.lines[line];
    let mut per_subset: Vec<Vec<BTreeMap<usize, usize>>> = Vec::new();
    for (items, hist) in l.partition.iter().zip(&l.histograms) {
        let mut items = items.clone();
        items.sort_unstable();
        let counts = dense(hist, grid_len);
        let mut acc: Vec<(Vec<u32>, BTreeMap<usize, usize>)> = vec![(counts, BTreeMap::new())];
        for &it in &items {
            let mut next = Vec::new();
            for (remaining, partial) in &acc {
                for (g, c) in remaining.iter().enumerate() {
                    if *c > 0 {
                        let mut r = remaining.clone();
                        r[g] -= 1;
                        let mut p = partial.clone();
                        p.insert(it, g);
                        next.push((r, p));
                    }
                }
            }
            acc = next;
        }
        per_subset.push(acc.into_iter().map(|(_, a)| a).collect());
    }
    let mut out: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new()];
    for subset in per_subset {
        let mut next = Vec::with_capacity(out.len() * subset.len());
        for base in &out {
            for add in &subset {
                let mut m = base.clone();
                m.extend(add.iter().map(|(k, v)| (*k, *v)));
                next.push(m);
            }
        }
        out = next;
    }
    out.sort();
    out.dedup();
    out
}

/// Greedy best assignment for a line: highest probabilities on the most
/// valuable items within each subset.
pub fn best_assignment(menu: &SymMenu, line: usize, v: &Valuation) -> BTreeMap<usize, usize> {
    let grid = menu.grid();
    let l = &menu.lines[line];
    let mut out = BTreeMap::new();
    for (items, hist) in l.partition.iter().zip(&l.histograms) {
        let mut items: Vec<usize> = items.clone();
        items.sort_by(|a, b| v.value(1u64 << b).cmp(&v.value(1u64 << a)).then(a.cmp(b)));
        let counts = dense(hist, grid.len());
        let mut slots: Vec<usize> = Vec::new();
        for (g, c) in counts.iter().enumerate() {
            for _ in 0..*c {
                slots.push(g);
            }
        }
        // grid values are descending, so slots are already value-sorted
        for (it, g) in items.into_iter().zip(slots) {
            out.insert(it, g);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run, RunConfig};
    use crate::num::{q, q_int};

    fn hist(entries: &[(usize, u32)]) -> Histogram {
        entries.iter().copied().collect()
    }

    fn zero_line(n: usize, grid: &ProbGrid) -> SymMenuLine {
        SymMenuLine {
            payment: QNum(q_zero()),
            partition: vec![(0..n).collect()],
            histograms: vec![hist(&[(grid.zero_index(), n as u32)])],
        }
    }

    /// δ=1/2, n=4 menu with one real line: subset {0,1,2,3}, probabilities
    /// (1/2, 1/4, 1/8, 1/8) as grid powers, payment 1/4.
    fn small_menu() -> SymMenu {
        let delta = q(1, 2);
        let grid = ProbGrid::for_menu(&delta, 4);
        SymMenu {
            n_items: 4,
            cap: QNum(q_int(1)),
            delta: QNum(delta),
            lines: vec![
                zero_line(4, &grid),
                SymMenuLine {
                    payment: QNum(q(1, 4)),
                    partition: vec![vec![0, 1, 2, 3]],
                    histograms: vec![hist(&[(1, 1), (2, 1), (3, 2)])],
                },
            ],
        }
    }

    #[test]
    fn grid_shape() {
        let g = ProbGrid::for_menu(&q(1, 2), 4);
        assert_eq!(g.values[0], q_one());
        assert_eq!(g.values[1], q(1, 2));
        assert_eq!(*g.values.last().unwrap(), q_zero());
    }

    #[test]
    fn singleton_subset_needs_no_stage2_bits() {
        let delta = q(1, 2);
        let grid = ProbGrid::for_menu(&delta, 1);
        let menu = SymMenu {
            n_items: 1,
            cap: QNum(q_int(1)),
            delta: QNum(delta),
            lines: vec![
                zero_line(1, &grid),
                SymMenuLine {
                    payment: QNum(q(1, 2)),
                    partition: vec![vec![0]],
                    histograms: vec![hist(&[(0, 1)])],
                },
            ],
        };
        let p = compile_symmetric(&menu).unwrap();
        let assignment: BTreeMap<usize, usize> = [(0usize, 0usize)].into_iter().collect();
        let mut s = SymHonestStrategy::new(&p, 1, assignment).unwrap();
        let t = run(&p, &mut s, 5, &RunConfig::default()).unwrap();
        // One bit chooses the line; the subset draw is the only chance node;
        // the single item is allocated at price P.
        assert_eq!(t.buyer_bits.len(), 1);
        assert_eq!(t.alloc_mask, 0b1);
        assert_eq!(t.payment, q(1, 2));
    }

    #[test]
    fn histogram_conservation_at_each_split() {
        let menu = small_menu();
        let p = compile_symmetric(&menu).unwrap();
        let grid = p.grid();
        let counts = dense(&menu.lines[1].histograms[0], grid.len());
        // Any dominated left histogram of size 2: right = current − left.
        let node = p.subset_entry(1, 0);
        if let SymNode::Halving { items, counts: c0, .. } = &node {
            assert_eq!(items, &vec![0, 1, 2, 3]);
            assert_eq!(c0, &counts);
        } else {
            panic!("expected halving state");
        }
        // Stream counts [0,1,0,1,...]: left = {grid1:1, grid3:1}.
        let mut left = vec![0u32; grid.len()];
        left[1] = 1;
        left[3] = 1;
        let mut n = node;
        for (g, c) in left.iter().enumerate() {
            for k in (0..p.count_bits()).rev() {
                n = p.buyer_child(&n, c >> k & 1 == 1).unwrap();
            }
            let _ = g;
        }
        let right = p.chance_child(&n, 1);
        if let SymNode::Halving { counts: rc, items, .. } = right {
            let sum: Vec<u32> = rc.iter().zip(&left).map(|(r, l)| r + l).collect();
            assert_eq!(sum, counts, "left + right = parent histogram, exactly");
            assert_eq!(items, vec![2, 3]);
        } else {
            panic!("expected right halving state");
        }
    }

    #[test]
    fn undominated_histogram_is_rejected() {
        let menu = small_menu();
        let p = compile_symmetric(&menu).unwrap();
        let node = p.subset_entry(1, 0);
        // Claim two items at grid index 1 when only one exists.
        let grid_len = p.grid().len();
        let mut bad = vec![0u32; grid_len];
        bad[1] = 2;
        let mut n = node;
        let mut err = None;
        'outer: for c in bad {
            for k in (0..p.count_bits()).rev() {
                match p.buyer_child(&n, c >> k & 1 == 1) {
                    Ok(next) => n = next,
                    Err(e) => {
                        err = Some(e);
                        break 'outer;
                    }
                }
            }
        }
        assert!(matches!(err, Some(RunError::HistogramMismatch)));
    }

    #[test]
    fn conditional_rates_follow_masses() {
        // Conditional on the subset, item rates are p_j / Σ p_j.
        let menu = small_menu();
        let p = compile_symmetric(&menu).unwrap();
        let assignment: BTreeMap<usize, usize> =
            [(0, 1), (1, 2), (2, 3), (3, 3)].into_iter().collect();
        let trials = 40_000u64;
        let mut wins = [0u64; 4];
        let mut drew_subset = 0u64;
        for seed in 0..trials {
            let mut s = SymHonestStrategy::new(&p, 1, assignment.clone()).unwrap();
            let t = run(&p, &mut s, seed, &RunConfig::default()).unwrap();
            if t.alloc_mask != 0 {
                drew_subset += 1;
                wins[t.alloc_mask.trailing_zeros() as usize] += 1;
            }
            assert_eq!(t.payment, q(1, 4), "payment charged on every branch");
        }
        // Unconditional win rate of item j is its assigned probability.
        let probs = [0.5, 0.25, 0.125, 0.125];
        for j in 0..4 {
            let mean = wins[j] as f64 / trials as f64;
            let sigma = (probs[j] * (1.0 - probs[j]) / trials as f64).sqrt();
            assert!((mean - probs[j]).abs() < 4.0 * sigma, "item {j}: {mean} vs {}", probs[j]);
        }
        // Σ p_j = 1 for this line, so the subset is always drawn.
        assert_eq!(drew_subset, trials);
    }

    #[test]
    fn iteration_and_bit_budget() {
        let menu = small_menu();
        let p = compile_symmetric(&menu).unwrap();
        let assignment: BTreeMap<usize, usize> =
            [(0, 1), (1, 2), (2, 3), (3, 3)].into_iter().collect();
        let grid_len = p.grid().len();
        let per_iter = grid_len as u64 * p.count_bits() as u64;
        let max_iters = ceil_log2(menu.n_items as u64) as u64;
        for seed in 0..500 {
            let mut s = SymHonestStrategy::new(&p, 1, assignment.clone()).unwrap();
            let t = run(&p, &mut s, seed, &RunConfig::default()).unwrap();
            let stage2_bits = (t.buyer_bits.len() as u64 + t.forced_bits).saturating_sub(1);
            assert!(stage2_bits <= per_iter * max_iters, "stage-2 bits {stage2_bits}");
            // chance nodes: subset draw + at most ⌈log₂ n⌉ halvings
            assert!(t.rounds <= 1 + max_iters);
        }
    }

    #[test]
    fn point_mass_assignment_navigates_to_its_item() {
        let delta = q(1, 2);
        let grid = ProbGrid::for_menu(&delta, 2);
        let menu = SymMenu {
            n_items: 2,
            cap: QNum(q_int(1)),
            delta: QNum(delta),
            lines: vec![
                zero_line(2, &grid),
                SymMenuLine {
                    payment: QNum(q(1, 8)),
                    partition: vec![vec![0, 1]],
                    histograms: vec![hist(&[(0, 1), (grid.zero_index(), 1)])],
                },
            ],
        };
        let p = compile_symmetric(&menu).unwrap();
        for target in 0..2usize {
            let assignment: BTreeMap<usize, usize> = [
                (target, 0),
                (1 - target, p.grid().zero_index()),
            ]
            .into_iter()
            .collect();
            for seed in 0..50 {
                let mut s = SymHonestStrategy::new(&p, 1, assignment.clone()).unwrap();
                let t = run(&p, &mut s, seed, &RunConfig::default()).unwrap();
                assert_eq!(t.alloc_mask, 1u64 << target);
            }
        }
    }

    #[test]
    fn assignment_enumeration_counts() {
        let menu = small_menu();
        // histogram {g1:1, g2:1, g3:2} over 4 items: 4!/(1!1!2!) = 12.
        assert_eq!(enumerate_assignments(&menu, 1).len(), 12);
        let v = Valuation::unit_demand(vec![q_int(1), q(1, 2), q(1, 4), q(1, 8)]);
        let best = best_assignment(&menu, 1, &v);
        let bu = sym_utility(&menu, 1, &best, &v);
        for a in enumerate_assignments(&menu, 1) {
            assert!(sym_utility(&menu, 1, &a, &v) <= bu);
        }
    }

    #[test]
    fn json_roundtrip() {
        let menu = small_menu();
        let s = serde_json::to_string(&menu).unwrap();
        let back: SymMenu = serde_json::from_str(&s).unwrap();
        assert_eq!(menu, back);
        back.validate().unwrap();
    }
}
