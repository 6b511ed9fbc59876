//! Cost and throughput accounting over a finished trace.
//!
//! An event belongs to a trade when it carries the trade id, or when it
//! carries no trade id but one of the trade's two sessions (the requests
//! sent before the broker matched them).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::TradeId;
use crate::trace::{EventType, TradeTrace};

/// L1 transactions of one happy-path trade: both step-2 forwards, the
/// invoice (4), payment (7), notice (8), delivery forward (12), relay (13),
/// score forward (17) and the settlement transfer (18).
pub const HAPPY_PATH_L1_TXS: u64 = 9;

/// Off-ledger requests of one happy-path trade: steps 1 (twice), 6, 11, 16.
pub const HAPPY_PATH_OFF_LEDGER: u64 = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("trade {0} never settled")]
    TradeIncomplete(u64),
    #[error("gas-to-price ratio undefined for a zero price")]
    ZeroPrice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeCost {
    pub trade: TradeId,
    pub l1_tx_count: u64,
    pub off_ledger_count: u64,
    pub gas_total: u64,
    pub price: u64,
    pub gas_to_price_ratio: f64,
}

pub fn gas_to_price_ratio(gas: u64, price: u64) -> Result<f64, MetricsError> {
    if price == 0 {
        return Err(MetricsError::ZeroPrice);
    }
    Ok(gas as f64 / price as f64)
}

struct TradeFacts {
    sessions: BTreeSet<String>,
    price: u64,
    settled_at: Option<u64>,
}

fn trade_facts(trace: &TradeTrace) -> BTreeMap<TradeId, TradeFacts> {
    let mut out: BTreeMap<TradeId, TradeFacts> = BTreeMap::new();
    for e in &trace.events {
        let Some(id) = e.trade else { continue };
        match e.event_type {
            EventType::TradeMatched => {
                let f = out.entry(id).or_insert(TradeFacts {
                    sessions: BTreeSet::new(),
                    price: 0,
                    settled_at: None,
                });
                f.sessions.extend(e.session.iter().chain(&e.counterparty).cloned());
                f.price = e.amount.unwrap_or(0);
            }
            EventType::TradeState if e.detail.as_deref() == Some("settled") => {
                if let Some(f) = out.get_mut(&id) {
                    f.settled_at.get_or_insert(e.epoch);
                }
            }
            _ => {}
        }
    }
    out
}

fn cost_of(trace: &TradeTrace, id: TradeId, facts: &TradeFacts) -> Result<TradeCost, MetricsError> {
    if facts.settled_at.is_none() {
        return Err(MetricsError::TradeIncomplete(id.0));
    }
    let mut cost = TradeCost {
        trade: id,
        l1_tx_count: 0,
        off_ledger_count: 0,
        gas_total: 0,
        price: facts.price,
        gas_to_price_ratio: 0.0,
    };
    for e in &trace.events {
        let mine = match e.trade {
            Some(t) => t == id,
            None => e.session.as_ref().is_some_and(|s| facts.sessions.contains(s)),
        };
        if !mine {
            continue;
        }
        cost.l1_tx_count += u64::from(e.l1_tx);
        cost.off_ledger_count += u64::from(e.event_type == EventType::OffLedgerRequest);
        cost.gas_total += e.gas;
    }
    cost.gas_to_price_ratio = gas_to_price_ratio(cost.gas_total, cost.price)?;
    Ok(cost)
}

pub fn account_trade(trace: &TradeTrace, id: TradeId) -> Result<TradeCost, MetricsError> {
    let facts = trade_facts(trace);
    let f = facts.get(&id).ok_or(MetricsError::TradeIncomplete(id.0))?;
    cost_of(trace, id, f)
}

/// Settled trades per epoch, counting epochs from 0 through the last
/// settlement.
pub fn throughput(trace: &TradeTrace) -> f64 {
    let facts = trade_facts(trace);
    let settled: Vec<u64> = facts.values().filter_map(|f| f.settled_at).collect();
    match settled.iter().max() {
        Some(last) => settled.len() as f64 / (last + 1) as f64,
        None => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub trades: usize,
    pub settled: usize,
    pub epochs: u64,
    pub trades_per_epoch: f64,
    pub l1_tx_total: u64,
    pub off_ledger_total: u64,
    pub gas_total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub trades: Vec<TradeCost>,
    /// Trades that never settled (expired or still open).
    pub incomplete: Vec<TradeId>,
    pub aggregate: Aggregate,
}

impl CostReport {
    pub fn from_trace(trace: &TradeTrace) -> Self {
        let facts = trade_facts(trace);
        let mut trades = Vec::new();
        let mut incomplete = Vec::new();
        for (id, f) in &facts {
            match cost_of(trace, *id, f) {
                Ok(c) => trades.push(c),
                Err(_) => incomplete.push(*id),
            }
        }
        let aggregate = Aggregate {
            trades: facts.len(),
            settled: trades.len(),
            epochs: trace.events.last().map_or(0, |e| e.epoch + 1),
            trades_per_epoch: throughput(trace),
            l1_tx_total: trace.l1_tx_count() as u64,
            off_ledger_total: trace.events_of(EventType::OffLedgerRequest).count() as u64,
            gas_total: trace.events.iter().map(|e| e.gas).sum(),
        };
        CostReport {
            trades,
            incomplete,
            aggregate,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Short human-readable summary.
    pub fn render(&self) -> String {
        let a = &self.aggregate;
        let mut s = format!(
            "trades {} (settled {}), epochs {}, {:.4} trades/epoch\nL1 txs {}, off-ledger requests {}, gas {}\n",
            a.trades, a.settled, a.epochs, a.trades_per_epoch, a.l1_tx_total, a.off_ledger_total, a.gas_total
        );
        for t in &self.trades {
            s.push_str(&format!(
                "  trade {:>3}: {} L1, {} off-ledger, gas {}, price {}, ratio {:.4}\n",
                t.trade.0, t.l1_tx_count, t.off_ledger_count, t.gas_total, t.price, t.gas_to_price_ratio
            ));
        }
        for id in &self.incomplete {
            s.push_str(&format!("  trade {:>3}: incomplete\n", id.0));
        }
        s
    }
}
