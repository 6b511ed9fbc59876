//! Scenario configuration, read from a single JSON file.
//!
//! Every field has a default, so `{}` is a valid two-seller, two-buyer
//! scenario. Unknown fields are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::Fault;
use crate::broker::PriceTable;
use crate::crypto::Padding;
use crate::ledger::{AgentId, GasTariff, Role};
use crate::protocol::SensorType;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timeouts {
    /// Epochs after delivery before the broker settles without a score.
    pub score: u64,
    /// Epochs an invoice stays payable.
    pub payment: u64,
    /// Epochs after the match notice before a paid trade is refunded.
    pub delivery: u64,
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts {
            score: 5,
            payment: 10,
            delivery: 10,
        }
    }
}

/// Initial token balances minted at setup, per contract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Balances {
    pub seller: u64,
    pub buyer: u64,
    pub broker: u64,
    pub adversary: u64,
}

impl Default for Balances {
    fn default() -> Self {
        Balances {
            seller: 20,
            buyer: 10_000,
            broker: 10_000,
            adversary: 20,
        }
    }
}

/// How agent data descriptions are generated.
///
/// Seller `i` and buyer `i` form a pair: same sensor type, same region
/// cell (unique to the pair), buyer volume no larger than the seller's.
/// Surplus agents on either side get a region nobody else uses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketConfig {
    /// Pair `i` uses `sensor_types[i % len]`.
    pub sensor_types: Vec<SensorType>,
    /// Inclusive range for buyer volumes.
    pub buyer_volume: [u64; 2],
    /// Inclusive range for how much more the seller has than the buyer wants.
    pub seller_extra_volume: [u64; 2],
    /// Inclusive range for the length of the random part of region labels.
    pub region_len: [usize; 2],
}

impl Default for MarketConfig {
    fn default() -> Self {
        MarketConfig {
            sensor_types: vec![SensorType::Temperature, SensorType::Humidity],
            buyer_volume: [10, 40],
            seller_extra_volume: [0, 10],
            region_len: [6, 6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    /// `seller-<i>` or `buyer-<i>`.
    pub agent: String,
    pub fault: Fault,
    /// Which of the agent's trades (0-based) is affected.
    #[serde(default)]
    pub trade: u32,
}

impl FaultSpec {
    pub fn agent_id(&self) -> Result<AgentId, ConfigError> {
        parse_agent(&self.agent)
    }
}

pub fn parse_agent(s: &str) -> Result<AgentId, ConfigError> {
    let bad = || ConfigError::Invalid(format!("agent `{s}` is not seller-<n> or buyer-<n>"));
    let (role, idx) = s.split_once('-').ok_or_else(bad)?;
    let index = idx.parse().map_err(|_| bad())?;
    match role {
        "seller" => Ok(AgentId::seller(index)),
        "buyer" => Ok(AgentId::buyer(index)),
        _ => Err(bad()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub max_epochs: u64,
    pub n_sellers: u32,
    pub n_buyers: u32,
    pub trades_per_agent: u32,
    pub prices: PriceTable,
    pub padding: bool,
    pub buckets: Vec<usize>,
    pub batching: bool,
    pub gas: GasTariff,
    pub timeouts: Timeouts,
    pub seller_choice: bool,
    pub broker_per_sensor_type: bool,
    /// Epochs between a blob request and its availability.
    pub blob_latency: u64,
    pub balances: Balances,
    pub market: MarketConfig,
    pub faults: Vec<FaultSpec>,
    pub cert_validity: u64,
    pub issuer_seeds: Vec<u64>,
    /// Seed of the well-known broker key pair. Agents learn the public half
    /// from here; per-type brokers use consecutive seeds.
    pub broker_key_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            max_epochs: 200,
            n_sellers: 2,
            n_buyers: 2,
            trades_per_agent: 1,
            prices: PriceTable::default(),
            padding: true,
            buckets: vec![256, 1024, 4096, 64 * 1024],
            batching: true,
            gas: GasTariff::default(),
            timeouts: Timeouts::default(),
            seller_choice: false,
            broker_per_sensor_type: false,
            blob_latency: 0,
            balances: Balances::default(),
            market: MarketConfig::default(),
            faults: Vec::new(),
            cert_validity: 1_000,
            issuer_seeds: vec![101, 102, 103],
            broker_key_seed: 7,
        }
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn padding_policy(&self) -> Padding {
        if self.padding {
            Padding::buckets(self.buckets.clone()).expect("validated")
        } else {
            Padding::Off
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.max_epochs == 0 {
            return invalid("max_epochs must be positive".into());
        }
        if self.trades_per_agent == 0 && self.n_sellers + self.n_buyers > 0 {
            return invalid("trades_per_agent must be positive".into());
        }
        if let Some((t, _)) = self.prices.0.iter().find(|(_, p)| **p == 0) {
            return invalid(format!("price for {t} must be positive"));
        }
        if self.market.sensor_types.is_empty() {
            return invalid("market.sensor_types is empty".into());
        }
        for t in &self.market.sensor_types {
            if self.prices.basic_price(*t).is_none() {
                return invalid(format!("no price for traded type {t}"));
            }
        }
        let [lo, hi] = self.market.buyer_volume;
        if lo == 0 || lo > hi {
            return invalid(format!("buyer_volume [{lo}, {hi}] must be positive and ordered"));
        }
        let [lo, hi] = self.market.seller_extra_volume;
        if lo > hi {
            return invalid(format!("seller_extra_volume [{lo}, {hi}] is not ordered"));
        }
        let [lo, hi] = self.market.region_len;
        if lo == 0 || lo > hi || hi > 64 {
            return invalid(format!("region_len [{lo}, {hi}] must lie in 1..=64 and be ordered"));
        }
        if self.padding {
            Padding::buckets(self.buckets.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.issuer_seeds.is_empty() {
            return invalid("at least one certificate issuer is required".into());
        }
        if self.cert_validity == 0 {
            return invalid("cert_validity must be positive".into());
        }
        for f in &self.faults {
            let id = f.agent_id()?;
            let (count, wants_seller) = match id.role {
                Role::Seller => (self.n_sellers, true),
                Role::Buyer => (self.n_buyers, false),
                Role::Adversary => unreachable!("parse_agent never yields adversaries"),
            };
            if id.index >= count {
                return invalid(format!("fault targets {} but there are only {count}", f.agent));
            }
            if f.fault.applies_to_seller() != wants_seller {
                return invalid(format!("fault {:?} cannot target {}", f.fault, f.agent));
            }
            if f.trade >= self.trades_per_agent {
                return invalid(format!("fault on trade {} of {} which makes only {}", f.trade, f.agent, self.trades_per_agent));
            }
        }
        Ok(())
    }
}
