//! Non-incentive-compatible implementation protocol: Chance reveals τ one
//! bit at a time, the buyer says continue/terminate after each, and on
//! termination announces the payment bit and the bundle index himself. The
//! outcome law under honest play matches the menu exactly, but early τ
//! knowledge invites profitable deviations.

use serde::Serialize;

use crate::engine::{Allowed, Bit, BuyerStrategy, ChanceDist, NodeView, Protocol, RunError};
use crate::num::{ceil_log2, q, q_one, q_zero, CoordBits, Q};
use crate::stream::BundleMenu;

/// Compiled reveal-then-announce protocol over a bundle menu.
#[derive(Debug)]
pub struct NonIcProtocol {
    menu: BundleMenu,
    bundle_bits: u32,
}

#[derive(Clone, Debug)]
pub enum NonIcNode {
    RevealTau { k: u64 },
    ContinueOrStop { k: u64 },
    AnnouncePay { k: u64 },
    AnnounceBundle { k: u64, pay: bool, sent: u32, prefix: u32 },
    Leaf { bundle: usize, pay: bool },
}

pub fn compile_nonic(menu: &BundleMenu) -> Result<NonIcProtocol, crate::stream::CompileError> {
    menu.validate()?;
    Ok(NonIcProtocol { bundle_bits: ceil_log2(menu.bundles.len() as u64), menu: menu.clone() })
}

impl NonIcProtocol {
    pub fn menu(&self) -> &BundleMenu {
        &self.menu
    }
}

impl Protocol for NonIcProtocol {
    type Node = NonIcNode;

    fn root(&self) -> NonIcNode {
        NonIcNode::RevealTau { k: 0 }
    }

    fn view(&self, node: &NonIcNode) -> NodeView {
        match node {
            NonIcNode::RevealTau { k } => {
                NodeView::Chance { dist: ChanceDist::TauBit(*k), reveal: true }
            }
            NonIcNode::ContinueOrStop { .. } | NonIcNode::AnnouncePay { .. } => {
                NodeView::Buyer { allowed: Allowed::Both }
            }
            NonIcNode::AnnounceBundle { sent, prefix, .. } => {
                // Announced index must address a real bundle.
                let shift = self.bundle_bits - sent - 1;
                let b = self.menu.bundles.len() as u32;
                let mut zero = false;
                let mut one = false;
                for idx in 0..b {
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
                    (false, false) => unreachable!("prefix always extendable"),
                };
                NodeView::Buyer { allowed }
            }
            NonIcNode::Leaf { bundle, pay } => NodeView::Leaf {
                alloc_mask: self.menu.bundles[*bundle],
                payment: if *pay { self.menu.cap.clone() } else { q_zero() },
            },
        }
    }

    fn buyer_child(&self, node: &NonIcNode, bit: Bit) -> Result<NonIcNode, RunError> {
        Ok(match node {
            NonIcNode::ContinueOrStop { k } => {
                if bit {
                    NonIcNode::AnnouncePay { k: *k }
                } else {
                    NonIcNode::RevealTau { k: *k }
                }
            }
            NonIcNode::AnnouncePay { k } => {
                if self.bundle_bits == 0 {
                    NonIcNode::Leaf { bundle: 0, pay: bit }
                } else {
                    NonIcNode::AnnounceBundle { k: *k, pay: bit, sent: 0, prefix: 0 }
                }
            }
            NonIcNode::AnnounceBundle { k, pay, sent, prefix } => {
                let prefix = prefix << 1 | bit as u32;
                let sent = sent + 1;
                if sent == self.bundle_bits {
                    NonIcNode::Leaf { bundle: prefix as usize, pay: *pay }
                } else {
                    NonIcNode::AnnounceBundle { k: *k, pay: *pay, sent, prefix }
                }
            }
            _ => return Err(RunError::DisallowedBit { bit }),
        })
    }

    fn chance_child(&self, node: &NonIcNode, _outcome: usize) -> NonIcNode {
        match node {
            NonIcNode::RevealTau { k } => NonIcNode::ContinueOrStop { k: k + 1 },
            _ => unreachable!("chance_child on non-chance node"),
        }
    }
}

/// Honest strategy for one menu line: terminate exactly when the revealed τ
/// prefix separates from every coordinate (payment probability and all
/// boundaries), then announce the true outcome.
pub struct NonIcHonestStrategy {
    coords: Vec<CoordBits>,
    /// Some(sign) per coordinate once separated; sign = coordinate > τ.
    signs: Vec<Option<bool>>,
    bundle_bits: u32,
    tau_seen: u32,
    announce: Vec<Bit>,
    announce_pos: usize,
}

impl NonIcHonestStrategy {
    pub fn new(protocol: &NonIcProtocol, line: usize) -> NonIcHonestStrategy {
        let coords: Vec<CoordBits> = protocol.menu.lines[line]
            .coords()
            .iter()
            .map(|c| CoordBits::from_dyadic(c).expect("dyadic menu"))
            .collect();
        NonIcHonestStrategy {
            signs: vec![None; coords.len()],
            coords,
            bundle_bits: protocol.bundle_bits,
            tau_seen: 0,
            announce: Vec::new(),
            announce_pos: 0,
        }
    }

    fn all_resolved(&self) -> bool {
        self.signs.iter().all(|s| s.is_some())
    }

    fn build_announcement(&mut self) {
        let n = self.coords.len();
        // Interval index: first boundary above τ, else the last interval.
        let n_bound = n - 1;
        let mut idx = n_bound;
        for j in 0..n_bound {
            if self.signs[j] == Some(true) {
                idx = j;
                break;
            }
        }
        let pay = self.signs[n - 1] == Some(true);
        self.announce.push(pay);
        for k in (0..self.bundle_bits).rev() {
            self.announce.push((idx >> k) & 1 == 1);
        }
    }
}

impl BuyerStrategy for NonIcHonestStrategy {
    fn next_bit(&mut self) -> Bit {
        if self.announce.is_empty() {
            // continue/terminate decision
            if self.all_resolved() {
                self.build_announcement();
                true
            } else {
                false
            }
        } else {
            let b = self.announce[self.announce_pos];
            self.announce_pos += 1;
            b
        }
    }

    fn observe_forced(&mut self, _bit: Bit) {
        if !self.announce.is_empty() {
            self.announce_pos += 1;
        }
    }

    fn observe_chance(&mut self, outcome: usize) {
        let t = outcome == 1;
        let k = self.tau_seen as usize;
        self.tau_seen += 1;
        for (i, c) in self.coords.iter().enumerate() {
            if self.signs[i].is_none() {
                let b = c.bit(k);
                if b != t {
                    self.signs[i] = Some(b);
                }
            }
        }
    }
}

/// Whether an announced outcome is possible for some menu line given the
/// revealed τ prefix. Inconsistent announcements are logged by audits, not
/// enforced by the protocol.
pub fn check_announcement(menu: &BundleMenu, tau_bits: &[Bit], bundle: usize, pay: bool) -> bool {
    let mut lo = q_zero();
    let mut width = q_one();
    for b in tau_bits {
        width /= q(2, 1);
        if *b {
            lo += &width;
        }
    }
    let hi = &lo + &width;
    for line in &menu.lines {
        let mut prev = q_zero();
        let widths = line.widths();
        let mut b_lo = q_zero();
        let mut b_hi = q_zero();
        for (i, w) in widths.iter().enumerate() {
            let next = &prev + w;
            if i == bundle {
                b_lo = prev.clone();
                b_hi = next.clone();
            }
            prev = next;
        }
        let (p_lo, p_hi) =
            if pay { (q_zero(), line.pay_prob.clone()) } else { (line.pay_prob.clone(), q_one()) };
        let a = b_lo.max(p_lo).max(lo.clone());
        let b = b_hi.min(p_hi).min(hi.clone());
        if a < b {
            return true;
        }
    }
    false
}

/// Exact conditional utilities for the single-item cheating example: menu
/// options (q, q²) at unit price, buyer value 4/3, after the first revealed
/// τ bit.
#[derive(Clone, Debug, Serialize)]
pub struct CheatReport {
    /// τ < 1/2 branch, honest option q=2/3: utility 4/9.
    pub honest_low: String,
    /// τ < 1/2 branch, reported option q'=1/2: utility 5/6.
    pub deviation_low: String,
    /// 5/6 − 4/9 = 7/18 > 0.
    pub gap_low: String,
    /// τ ≥ 1/2 branch utilities for the same pair.
    pub honest_high: String,
    pub deviation_high: String,
    pub deviation_improves_low: bool,
    pub honest_still_best_high: bool,
}

/// Conditional utility of option (alloc prob `qa`, pay prob `p`) for value
/// `v` given τ uniform on [lo, hi), at unit payment.
fn conditional_option_utility(v: &Q, qa: &Q, p: &Q, lo: &Q, hi: &Q) -> Q {
    let width = hi - lo;
    let alloc = (qa.clone().min(hi.clone()) - lo).max(q_zero()) / &width;
    let pay = (p.clone().min(hi.clone()) - lo).max(q_zero()) / &width;
    v * alloc - pay
}

pub fn demonstrate_cheat() -> CheatReport {
    let v = q(4, 3);
    let (q_honest, p_honest) = (q(2, 3), q(4, 9));
    let (q_dev, p_dev) = (q(1, 2), q(1, 4));
    let half = q(1, 2);
    let one = q_one();
    let honest_low = conditional_option_utility(&v, &q_honest, &p_honest, &q_zero(), &half);
    let dev_low = conditional_option_utility(&v, &q_dev, &p_dev, &q_zero(), &half);
    let honest_high = conditional_option_utility(&v, &q_honest, &p_honest, &half, &one);
    let dev_high = conditional_option_utility(&v, &q_dev, &p_dev, &half, &one);
    let gap = &dev_low - &honest_low;
    CheatReport {
        honest_low: crate::num::format_q(&honest_low),
        deviation_low: crate::num::format_q(&dev_low),
        gap_low: crate::num::format_q(&gap),
        honest_high: crate::num::format_q(&honest_high),
        deviation_high: crate::num::format_q(&dev_high),
        deviation_improves_low: gap > q_zero(),
        honest_still_best_high: honest_high >= dev_high,
    }
}

/// Exact values behind the report, for assertions.
pub fn cheat_values() -> (Q, Q, Q) {
    let v = q(4, 3);
    let half = q(1, 2);
    let honest = conditional_option_utility(&v, &q(2, 3), &q(4, 9), &q_zero(), &half);
    let dev = conditional_option_utility(&v, &q(1, 2), &q(1, 4), &q_zero(), &half);
    let gap = &dev - &honest;
    (honest, dev, gap)
}

/// Single-item menu over a dyadic grid of allocation probabilities, payment
/// probability q² truncated to `trunc_bits`; unit cap. Bundle 1 is the item.
pub fn cheat_example_menu(grid_log2: u32, trunc_bits: u64) -> BundleMenu {
    let steps = 1u64 << grid_log2;
    let lines = (0..=steps)
        .map(|i| {
            let qa = q(i as i64, steps as i64);
            let sq = &qa * &qa;
            let scaled = (sq.numer() << trunc_bits as usize) / sq.denom();
            let pay = Q::new(scaled, num_bigint::BigInt::from(1) << trunc_bits as usize);
            crate::stream::BundleLine { boundaries: vec![q_one() - qa], pay_prob: pay }
        })
        .collect();
    BundleMenu { n_items: 1, cap: q_one(), bundles: vec![0b0, 0b1], lines }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run, RunConfig};
    use crate::num::{q_int, q_to_f64};
    use crate::stream::BundleLine;

    #[test]
    fn cheat_report_exact_values() {
        let (honest, dev, gap) = cheat_values();
        assert_eq!(honest, q(4, 9));
        assert_eq!(dev, q(5, 6));
        assert_eq!(gap, q(7, 18));
        let r = demonstrate_cheat();
        assert!(r.deviation_improves_low);
        assert!(r.honest_still_best_high);
        assert_eq!(r.honest_high, "4/9");
        assert_eq!(r.deviation_high, "0");
    }

    #[test]
    fn zero_type_has_no_profitable_deviation() {
        // v = 0: the honest choice is q = 0 with utility 0; every option has
        // non-positive conditional utility in both branches.
        let v = q_zero();
        for (qa, p) in [(q(1, 2), q(1, 4)), (q(2, 3), q(4, 9)), (q_one(), q_one())] {
            let low = conditional_option_utility(&v, &qa, &p, &q_zero(), &q(1, 2));
            let high = conditional_option_utility(&v, &qa, &p, &q(1, 2), &q_one());
            assert!(low <= q_zero());
            assert!(high <= q_zero());
        }
    }

    #[test]
    fn single_bundle_stops_at_first_high_bit() {
        // B=1, pay_prob 0: honest terminates at τ's first 1 bit and
        // announces (no pay, bundle 0).
        let bm = BundleMenu {
            n_items: 1,
            cap: q_int(1),
            bundles: vec![0b1],
            lines: vec![BundleLine { boundaries: vec![], pay_prob: q_zero() }],
        };
        let p = compile_nonic(&bm).unwrap();
        for seed in 0..200 {
            let mut s = NonIcHonestStrategy::new(&p, 0);
            let t = run(&p, &mut s, seed, &RunConfig::default()).unwrap();
            assert_eq!(t.alloc_mask, 0b1);
            assert_eq!(t.payment, q_zero());
            // Terminate bit sequence: k−1 continues, one stop, one pay bit;
            // bundle bits are forced away (B = 1).
            let stops: usize = t.buyer_bits.iter().filter(|b| **b).count();
            assert_eq!(stops, 1, "exactly the terminate bit is set: {:?}", t.buyer_bits);
        }
    }

    #[test]
    fn honest_play_reproduces_menu_law() {
        let bm = BundleMenu {
            n_items: 2,
            cap: q_int(1),
            bundles: vec![0b00, 0b01, 0b10],
            lines: vec![BundleLine {
                boundaries: vec![q(1, 4), q(1, 2)],
                pay_prob: q(3, 16),
            }],
        };
        let p = compile_nonic(&bm).unwrap();
        let trials = 40_000u64;
        let mut counts = [0u64; 3];
        let mut pays = 0u64;
        for seed in 0..trials {
            let mut s = NonIcHonestStrategy::new(&p, 0);
            let t = run(&p, &mut s, seed, &RunConfig::default()).unwrap();
            let idx = bm.bundles.iter().position(|b| *b == t.alloc_mask).unwrap();
            counts[idx] += 1;
            pays += (t.payment == q_int(1)) as u64;
        }
        let widths = bm.lines[0].widths();
        for (i, w) in widths.iter().enumerate() {
            let exp = q_to_f64(w);
            let mean = counts[i] as f64 / trials as f64;
            let sigma = (exp * (1.0 - exp) / trials as f64).sqrt().max(1e-9);
            assert!((mean - exp).abs() < 4.0 * sigma, "bundle {i}: {mean} vs {exp}");
        }
        let pay_mean = pays as f64 / trials as f64;
        let pe = 3.0 / 16.0;
        let psig = (pe * (1.0 - pe) / trials as f64).sqrt();
        assert!((pay_mean - pe).abs() < 4.0 * psig);
    }

    #[test]
    fn total_bits_concentrate_logarithmically() {
        // B = 16 random dyadic menu: total bits per run are
        // 2·(τ reveals) − 1 + 1 + announcement, and expected reveals follow
        // the exact survival oracle.
        let mut boundaries = Vec::new();
        for i in 1..16i64 {
            boundaries.push(q(i, 16));
        }
        let bm = BundleMenu {
            n_items: 4,
            cap: q_int(1),
            bundles: (0..16u64).collect(),
            lines: vec![BundleLine { boundaries, pay_prob: q(5, 16) }],
        };
        let p = compile_nonic(&bm).unwrap();
        let exact_rounds = q_to_f64(&crate::stream::exact_expected_rounds(&bm.lines[0].coords()));
        let trials = 20_000u64;
        let mut total_bits = 0u64;
        let mut total_rounds = 0u64;
        for seed in 0..trials {
            let mut s = NonIcHonestStrategy::new(&p, 0);
            let t = run(&p, &mut s, seed, &RunConfig::default()).unwrap();
            total_bits += t.buyer_bits.len() as u64 + t.forced_bits + t.rounds;
            total_rounds += t.rounds;
        }
        let mean_rounds = total_rounds as f64 / trials as f64;
        assert!((mean_rounds - exact_rounds).abs() < 0.15, "{mean_rounds} vs {exact_rounds}");
        let mean_bits = total_bits as f64 / trials as f64;
        // 2·E[rounds] + 1 + log2(B) exactly, and E[rounds] ≤ 2·log2(B).
        let expect = 2.0 * exact_rounds + 1.0 + 4.0;
        assert!((mean_bits - expect).abs() < 0.3, "{mean_bits} vs {expect}");
        assert!(mean_bits <= 2.0 * (2.0 * 4.0) + 4.0 + 6.0);
    }

    #[test]
    fn announcement_consistency() {
        let bm = BundleMenu {
            n_items: 1,
            cap: q_int(1),
            bundles: vec![0b0, 0b1],
            lines: vec![BundleLine { boundaries: vec![q(1, 2)], pay_prob: q(1, 4) }],
        };
        // τ prefix "1" (τ ≥ 1/2): bundle 0 occupies [0, 1/2): impossible.
        assert!(!check_announcement(&bm, &[true], 0, false));
        // bundle 1 with no payment is fine (τ in [1/2, 1)).
        assert!(check_announcement(&bm, &[true], 1, false));
        // payment requires τ < 1/4: impossible after seeing τ ≥ 1/2.
        assert!(!check_announcement(&bm, &[true], 1, true));
        assert!(check_announcement(&bm, &[false], 0, true));
    }

    #[test]
    fn cheat_menu_builds_and_compiles() {
        let bm = cheat_example_menu(3, 20);
        assert_eq!(bm.lines.len(), 9);
        compile_nonic(&bm).unwrap();
    }
}
