//! auctionwire: compile direct-revelation auction menus into randomized
//! interactive protocols, run them under simulated buyer strategies, and
//! audit outcome equivalence, incentive compatibility, communication cost,
//! and revenue on hard prior families.

pub mod audit;
pub mod ddt;
pub mod engine;
pub mod expost;
pub mod hard;
pub mod menu;
pub mod nonic;
pub mod num;
pub mod stream;
pub mod symmetric;
pub mod tree;

pub use engine::{run, BuyerStrategy, Protocol, RunConfig, RunError, Transcript};
pub use menu::{best_response, normalize_payments, utility, Menu, MenuLine, Prior, Valuation};
pub use num::Q;
