//! Menus (direct-revelation mechanisms), valuation classes, exact utilities,
//! and the payment normalization into {0, U} lotteries.

use std::collections::BTreeMap;

use num_traits::{Signed, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::num::{format_q, q_one, q_zero, QNum, Q};

#[derive(Debug, Error)]
pub enum MenuError {
    #[error("payment {payment} on line {line} exceeds cap U={cap}")]
    PaymentExceedsCap { line: usize, payment: String, cap: String },
    #[error("item-probability menu line paired with a non-additive valuation; a bundle distribution is required")]
    FormMismatch,
    #[error("line {line}: {reason}")]
    InvalidLine { line: usize, reason: String },
    #[error("menu has no zero line (empty allocation, zero payment)")]
    MissingZeroLine,
    #[error("menu lines {a} and {b} are identical")]
    DuplicateLine { a: usize, b: usize },
    #[error("valuation invalid: {0}")]
    InvalidValuation(String),
    #[error("dimension mismatch: menu has {menu_items} items, valuation has {valuation_items}")]
    DimensionMismatch { menu_items: usize, valuation_items: usize },
}

/// Allocation side of a menu line: independent per-item probabilities, or an
/// explicit distribution over bundles (bitmask-keyed, item 0 = bit 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Allocation {
    Items { item_probs: Vec<QNum> },
    Bundles {
        #[serde(with = "mask_map")]
        bundle_dist: BTreeMap<u64, QNum>,
    },
}

/// Bundle masks as decimal-string JSON keys (flattened maps cannot carry
/// integer keys through serde).
mod mask_map {
    use super::*;

    pub fn serialize<S: Serializer>(m: &BTreeMap<u64, QNum>, ser: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = ser.serialize_map(Some(m.len()))?;
        for (k, v) in m {
            map.serialize_entry(&k.to_string(), v)?;
        }
        map.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<BTreeMap<u64, QNum>, D::Error> {
        let raw: BTreeMap<String, QNum> = BTreeMap::deserialize(de)?;
        raw.into_iter()
            .map(|(k, v)| {
                k.parse::<u64>()
                    .map(|k| (k, v))
                    .map_err(|_| serde::de::Error::custom(format!("bad bundle mask key {k:?}")))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MenuLine {
    #[serde(flatten)]
    pub alloc: Allocation,
    pub payment: QNum,
}

impl MenuLine {
    pub fn items(probs: Vec<Q>, payment: Q) -> MenuLine {
        MenuLine {
            alloc: Allocation::Items { item_probs: probs.into_iter().map(QNum).collect() },
            payment: QNum(payment),
        }
    }

    pub fn bundles(dist: Vec<(u64, Q)>, payment: Q) -> MenuLine {
        MenuLine {
            alloc: Allocation::Bundles {
                bundle_dist: dist.into_iter().map(|(m, p)| (m, QNum(p))).collect(),
            },
            payment: QNum(payment),
        }
    }

    pub fn zero(n_items: usize) -> MenuLine {
        MenuLine::items(vec![q_zero(); n_items], q_zero())
    }

    pub fn payment(&self) -> &Q {
        &self.payment.0
    }

    pub fn item_probs(&self) -> Option<Vec<Q>> {
        match &self.alloc {
            Allocation::Items { item_probs } => Some(item_probs.iter().map(|p| p.0.clone()).collect()),
            Allocation::Bundles { .. } => None,
        }
    }

    /// A line is the zero line iff it allocates nothing and charges nothing.
    pub fn is_zero(&self) -> bool {
        if !self.payment.0.is_zero() {
            return false;
        }
        match &self.alloc {
            Allocation::Items { item_probs } => item_probs.iter().all(|p| p.0.is_zero()),
            Allocation::Bundles { bundle_dist } => bundle_dist
                .iter()
                .all(|(mask, p)| *mask == 0 || p.0.is_zero()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Menu {
    pub n_items: usize,
    #[serde(rename = "U")]
    pub cap: QNum,
    pub lines: Vec<MenuLine>,
}

/// Bundle-distribution sums may carry float dust from JSON; anything beyond
/// this is a real modelling error.
const DIST_SUM_TOL_LOG2: i64 = -40; // 2^-40 < 1e-12

impl Menu {
    pub fn new(n_items: usize, cap: Q, lines: Vec<MenuLine>) -> Result<Menu, MenuError> {
        let menu = Menu { n_items, cap: QNum(cap), lines };
        menu.validate()?;
        Ok(menu)
    }

    pub fn cap(&self) -> &Q {
        &self.cap.0
    }

    pub fn validate(&self) -> Result<(), MenuError> {
        if self.n_items > 64 {
            return Err(MenuError::InvalidValuation("at most 64 items supported".into()));
        }
        let tol = crate::num::q_pow2(DIST_SUM_TOL_LOG2);
        for (i, line) in self.lines.iter().enumerate() {
            if line.payment.0.is_negative() {
                return Err(MenuError::InvalidLine { line: i, reason: "negative payment".into() });
            }
            if &line.payment.0 > self.cap() {
                return Err(MenuError::PaymentExceedsCap {
                    line: i,
                    payment: format_q(&line.payment.0),
                    cap: format_q(self.cap()),
                });
            }
            match &line.alloc {
                Allocation::Items { item_probs } => {
                    if item_probs.len() != self.n_items {
                        return Err(MenuError::InvalidLine {
                            line: i,
                            reason: format!("{} item probabilities, expected {}", item_probs.len(), self.n_items),
                        });
                    }
                    for p in item_probs {
                        if p.0.is_negative() || p.0 > q_one() {
                            return Err(MenuError::InvalidLine {
                                line: i,
                                reason: format!("item probability {} outside [0,1]", format_q(&p.0)),
                            });
                        }
                    }
                }
                Allocation::Bundles { bundle_dist } => {
                    let mut sum = q_zero();
                    for (mask, p) in bundle_dist {
                        if self.n_items < 64 && *mask >= (1u64 << self.n_items) {
                            return Err(MenuError::InvalidLine {
                                line: i,
                                reason: format!("bundle mask {mask} out of range"),
                            });
                        }
                        if p.0.is_negative() || p.0 > q_one() {
                            return Err(MenuError::InvalidLine {
                                line: i,
                                reason: "bundle probability outside [0,1]".into(),
                            });
                        }
                        sum += &p.0;
                    }
                    if (sum - q_one()).abs() > tol {
                        return Err(MenuError::InvalidLine {
                            line: i,
                            reason: "bundle distribution does not sum to 1".into(),
                        });
                    }
                }
            }
        }
        if !self.lines.iter().any(|l| l.is_zero()) {
            return Err(MenuError::MissingZeroLine);
        }
        for a in 0..self.lines.len() {
            for b in a + 1..self.lines.len() {
                if self.lines[a] == self.lines[b] {
                    return Err(MenuError::DuplicateLine { a, b });
                }
            }
        }
        Ok(())
    }
}

/// Buyer valuation over bundles of [n] items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum Valuation {
    Additive { values: Vec<QNum> },
    UnitDemand { values: Vec<QNum> },
    Xos { clauses: Vec<Vec<QNum>> },
}

impl Valuation {
    pub fn additive(values: Vec<Q>) -> Valuation {
        Valuation::Additive { values: values.into_iter().map(QNum).collect() }
    }

    pub fn unit_demand(values: Vec<Q>) -> Valuation {
        Valuation::UnitDemand { values: values.into_iter().map(QNum).collect() }
    }

    pub fn xos(clauses: Vec<Vec<Q>>) -> Valuation {
        Valuation::Xos {
            clauses: clauses.into_iter().map(|c| c.into_iter().map(QNum).collect()).collect(),
        }
    }

    pub fn n_items(&self) -> usize {
        match self {
            Valuation::Additive { values } | Valuation::UnitDemand { values } => values.len(),
            Valuation::Xos { clauses } => clauses.first().map_or(0, |c| c.len()),
        }
    }

    /// Unit-demand and XOS valuations are non-negative; additive item values
    /// may be negative.
    pub fn validate(&self, cap: &Q) -> Result<(), MenuError> {
        let check_cap = |v: &Q| -> Result<(), MenuError> {
            if v > cap {
                Err(MenuError::InvalidValuation(format!("item value {} exceeds U", format_q(v))))
            } else {
                Ok(())
            }
        };
        match self {
            Valuation::Additive { values } => {
                for v in values {
                    check_cap(&v.0)?;
                }
            }
            Valuation::UnitDemand { values } => {
                for v in values {
                    if v.0.is_negative() {
                        return Err(MenuError::InvalidValuation("negative unit-demand value".into()));
                    }
                    check_cap(&v.0)?;
                }
            }
            Valuation::Xos { clauses } => {
                if clauses.is_empty() {
                    return Err(MenuError::InvalidValuation("XOS needs at least one clause".into()));
                }
                let n = clauses[0].len();
                for c in clauses {
                    if c.len() != n {
                        return Err(MenuError::InvalidValuation("ragged XOS clause matrix".into()));
                    }
                    for v in c {
                        if v.0.is_negative() {
                            return Err(MenuError::InvalidValuation("negative XOS entry".into()));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Exact value of a bundle given as a bitmask.
    pub fn value(&self, mask: u64) -> Q {
        match self {
            Valuation::Additive { values } => {
                let mut total = q_zero();
                for (i, v) in values.iter().enumerate() {
                    if mask >> i & 1 == 1 {
                        total += &v.0;
                    }
                }
                total
            }
            Valuation::UnitDemand { values } => {
                let mut best = q_zero();
                for (i, v) in values.iter().enumerate() {
                    if mask >> i & 1 == 1 && v.0 > best {
                        best = v.0.clone();
                    }
                }
                best
            }
            Valuation::Xos { clauses } => {
                let mut best = q_zero();
                for clause in clauses {
                    let mut total = q_zero();
                    for (i, v) in clause.iter().enumerate() {
                        if mask >> i & 1 == 1 {
                            total += &v.0;
                        }
                    }
                    if total > best {
                        best = total;
                    }
                }
                best
            }
        }
    }
}

/// Expected utility of a menu line: expected value of the allocation minus
/// expected payment. Item-probability lines require an additive valuation;
/// non-additive classes need the bundle-distribution form for exactness.
pub fn utility(v: &Valuation, line: &MenuLine) -> Result<Q, MenuError> {
    let val = match &line.alloc {
        Allocation::Items { item_probs } => match v {
            Valuation::Additive { values } => {
                if values.len() != item_probs.len() {
                    return Err(MenuError::DimensionMismatch {
                        menu_items: item_probs.len(),
                        valuation_items: values.len(),
                    });
                }
                let mut total = q_zero();
                for (p, v) in item_probs.iter().zip(values) {
                    total += &p.0 * &v.0;
                }
                total
            }
            _ => return Err(MenuError::FormMismatch),
        },
        Allocation::Bundles { bundle_dist } => {
            let mut total = q_zero();
            for (mask, p) in bundle_dist {
                total += &p.0 * v.value(*mask);
            }
            total
        }
    };
    Ok(val - &line.payment.0)
}

/// Argmax-utility line index, ties broken by lowest index. The zero line
/// guarantees the winner's utility is >= 0.
pub fn best_response(v: &Valuation, menu: &Menu) -> Result<usize, MenuError> {
    assert!(!menu.lines.is_empty(), "menu nonempty");
    let mut best_idx = 0;
    let mut best_util: Option<Q> = None;
    for (i, line) in menu.lines.iter().enumerate() {
        let u = utility(v, line)?;
        if best_util.as_ref().is_none_or(|b| &u > b) {
            best_util = Some(u);
            best_idx = i;
        }
    }
    Ok(best_idx)
}

/// A menu whose payments have been rescaled into lotteries over {0, U}: a
/// line charges exactly U with probability `pay_prob` and zero otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedMenu {
    pub n_items: usize,
    pub cap: Q,
    pub lines: Vec<NormalizedLine>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedLine {
    pub alloc: Allocation,
    pub pay_prob: Q,
}

impl NormalizedLine {
    /// Coordinate vector for the additive streaming compiler: the n item
    /// probabilities followed by the payment probability.
    pub fn coords(&self) -> Option<Vec<Q>> {
        match &self.alloc {
            Allocation::Items { item_probs } => {
                let mut c: Vec<Q> = item_probs.iter().map(|p| p.0.clone()).collect();
                c.push(self.pay_prob.clone());
                Some(c)
            }
            Allocation::Bundles { .. } => None,
        }
    }
}

/// Rescale every payment P into a probability P/U of paying exactly U.
/// Expected payment per line is unchanged.
pub fn normalize_payments(menu: &Menu) -> Result<NormalizedMenu, MenuError> {
    menu.validate()?;
    let cap = menu.cap().clone();
    let lines = menu
        .lines
        .iter()
        .map(|line| NormalizedLine {
            alloc: line.alloc.clone(),
            pay_prob: line.payment() / &cap,
        })
        .collect();
    Ok(NormalizedMenu { n_items: menu.n_items, cap, lines })
}

/// A finite prior over buyer types.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub types: Vec<WeightedType>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedType {
    pub weight: QNum,
    pub valuation: Valuation,
}

impl Prior {
    pub fn uniform(valuations: Vec<Valuation>) -> Prior {
        let w = Q::new(1.into(), (valuations.len() as i64).into());
        Prior {
            types: valuations
                .into_iter()
                .map(|valuation| WeightedType { weight: QNum(w.clone()), valuation })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), MenuError> {
        let mut sum = q_zero();
        for t in &self.types {
            if t.weight.0.is_negative() {
                return Err(MenuError::InvalidValuation("negative prior weight".into()));
            }
            sum += &t.weight.0;
        }
        if sum != q_one() {
            return Err(MenuError::InvalidValuation("prior weights must sum to 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::{q, q_int};

    fn two_line_menu() -> Menu {
        Menu::new(
            1,
            q_int(1),
            vec![
                MenuLine::zero(1),
                MenuLine::items(vec![q_one()], q(1, 2)),
                MenuLine::items(vec![q(1, 2)], q(1, 10)),
            ],
        )
        .unwrap()
    }

    #[test]
    fn normalize_examples() {
        // Fixed-price example: P = 0.5535 against U = 1.
        let menu = Menu::new(
            1,
            q_int(1),
            vec![MenuLine::zero(1), MenuLine::items(vec![q_one()], q(5535, 10000))],
        )
        .unwrap();
        let norm = normalize_payments(&menu).unwrap();
        assert_eq!(norm.lines[1].pay_prob, q(5535, 10000));
        assert_eq!(norm.lines[0].pay_prob, q_zero());

        let menu2 = Menu::new(
            1,
            q_int(2),
            vec![MenuLine::zero(1), MenuLine::items(vec![q_one()], q(1, 5))],
        )
        .unwrap();
        let norm2 = normalize_payments(&menu2).unwrap();
        assert_eq!(norm2.lines[1].pay_prob, q(1, 10));
    }

    #[test]
    fn normalize_rejects_over_cap() {
        let menu = Menu {
            n_items: 1,
            cap: QNum(q_one()),
            lines: vec![MenuLine::zero(1), MenuLine::items(vec![q_one()], q_int(2))],
        };
        assert!(matches!(
            normalize_payments(&menu),
            Err(MenuError::PaymentExceedsCap { .. })
        ));
    }

    #[test]
    fn utility_examples() {
        let v = Valuation::additive(vec![q_int(1), q_int(1)]);
        let line = MenuLine::items(vec![q(1, 2), q(1, 2)], q(3, 10));
        assert_eq!(utility(&v, &line).unwrap(), q(7, 10));

        let zero = MenuLine::zero(2);
        assert_eq!(utility(&v, &zero).unwrap(), q_zero());

        let ud = Valuation::unit_demand(vec![q_int(1), q(1, 2)]);
        let lottery = MenuLine::bundles(vec![(0, q(1, 2)), (1, q(1, 2))], q(1, 4));
        assert_eq!(utility(&ud, &lottery).unwrap(), q(1, 4));
    }

    #[test]
    fn utility_form_mismatch() {
        let ud = Valuation::unit_demand(vec![q_int(1)]);
        let line = MenuLine::items(vec![q(1, 2)], q_zero());
        assert!(matches!(utility(&ud, &line), Err(MenuError::FormMismatch)));
    }

    #[test]
    fn best_response_examples() {
        let menu = two_line_menu();
        let v = Valuation::additive(vec![q_int(1)]);
        // utilities: 0, 1 - 0.5 = 0.5, 0.5 - 0.1 = 0.4
        assert_eq!(best_response(&v, &menu).unwrap(), 1);

        let zero_type = Valuation::additive(vec![q_zero()]);
        assert_eq!(best_response(&zero_type, &menu).unwrap(), 0);
    }

    #[test]
    fn best_response_tie_takes_lowest_index() {
        let menu = Menu::new(
            1,
            q_int(1),
            vec![
                MenuLine::zero(1),
                MenuLine::items(vec![q(1, 2)], q(1, 4)),
                MenuLine::items(vec![q(3, 4)], q(1, 2)),
            ],
        )
        .unwrap();
        // v = 1: utilities 0, 1/4, 1/4 — tie between lines 1 and 2.
        let v = Valuation::additive(vec![q_int(1)]);
        assert_eq!(best_response(&v, &menu).unwrap(), 1);
    }

    #[test]
    fn missing_zero_line_rejected() {
        let r = Menu::new(1, q_int(1), vec![MenuLine::items(vec![q(1, 2)], q(1, 4))]);
        assert!(matches!(r, Err(MenuError::MissingZeroLine)));
    }

    #[test]
    fn xos_value() {
        let v = Valuation::xos(vec![
            vec![q_int(1), q_zero(), q_int(1)],
            vec![q_zero(), q_int(2), q_zero()],
        ]);
        assert_eq!(v.value(0b101), q_int(2));
        assert_eq!(v.value(0b010), q_int(2));
        assert_eq!(v.value(0b111), q_int(2));
        assert_eq!(v.value(0), q_zero());
    }

    #[test]
    fn menu_json_roundtrip() {
        let menu = two_line_menu();
        let s = serde_json::to_string(&menu).unwrap();
        let back: Menu = serde_json::from_str(&s).unwrap();
        assert_eq!(menu, back);

        let parsed: Menu = serde_json::from_str(
            r#"{"n_items":1,"U":1.0,"lines":[
                {"item_probs":[0.0],"payment":0.0},
                {"bundle_dist":{"1":0.5,"0":0.5},"payment":0.25}
            ]}"#,
        )
        .unwrap();
        parsed.validate().unwrap();
    }
}
