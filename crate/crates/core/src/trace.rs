//! Per-run event log.
//!
//! Every ledger interaction and every contract-level decision lands here as
//! one [`TraceEvent`]. Serialized as JSON lines, the log is byte-identical
//! across runs with the same scenario and seed.
//!
//! Some fields are simulator ground truth (`session`, `counterparty`,
//! `trade`, `step`) that no market participant could observe; the adversary
//! harness strips them when it builds an observer view.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::ledger::{AnchorTx, ChainBlock, ChainKind};
use crate::protocol::TradeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    OffLedgerRequest,
    OnLedgerRequest,
    CrossChainTransfer,
    Anchor,
    /// A contract passing a sealed message to its owner's wallet.
    ContractEvent,
    OrderAdmitted,
    OrderRejected,
    TradeMatched,
    TradeState,
    ScoreRecorded,
    AgentError,
    DataReceived,
    BlobPut,
    BlobGet,
}

impl EventType {
    pub fn is_l1(self) -> bool {
        matches!(
            self,
            EventType::OnLedgerRequest | EventType::CrossChainTransfer | EventType::Anchor
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub epoch: u64,
    pub event_type: EventType,
    pub chain: Option<String>,
    pub l1_tx: bool,
    pub gas: u64,
    pub payload_len: u64,
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amount: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterparty: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trade: Option<TradeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl TraceEvent {
    pub fn new(event_type: EventType) -> Self {
        TraceEvent {
            epoch: 0,
            event_type,
            chain: None,
            l1_tx: event_type.is_l1(),
            gas: 0,
            payload_len: 0,
            seq: 0,
            from: None,
            to: None,
            amount: None,
            step: None,
            session: None,
            counterparty: None,
            trade: None,
            detail: None,
        }
    }

    pub fn chain(mut self, chain: impl Into<String>) -> Self {
        self.chain = Some(chain.into());
        self
    }

    pub fn from(mut self, from: impl Into<String>) -> Self {
        self.from = Some(from.into());
        self
    }

    pub fn to(mut self, to: impl Into<String>) -> Self {
        self.to = Some(to.into());
        self
    }

    pub fn detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }

    pub fn amount(mut self, amount: u64) -> Self {
        self.amount = Some(amount);
        self
    }

    pub fn payload_len(mut self, len: usize) -> Self {
        self.payload_len = len as u64;
        self
    }

    pub fn tagged(mut self, prov: &Provenance) -> Self {
        self.step = prov.step.or(self.step);
        self.session = prov.session.clone().or(self.session);
        self.counterparty = prov.counterparty.clone().or(self.counterparty);
        self.trade = prov.trade.or(self.trade);
        self.detail = prov.note.clone().or(self.detail);
        self
    }
}

/// Simulator-side ground truth attached to every message and event.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Provenance {
    pub step: Option<u8>,
    pub session: Option<String>,
    pub counterparty: Option<String>,
    pub trade: Option<TradeId>,
    /// Free-form label copied into the event's `detail`.
    pub note: Option<String>,
}

impl Provenance {
    pub fn step(step: u8) -> Self {
        Provenance {
            step: Some(step),
            ..Default::default()
        }
    }

    pub fn with_step(&self, step: u8) -> Self {
        Provenance {
            step: Some(step),
            ..self.clone()
        }
    }

    pub fn with_session(mut self, session: impl Into<String>) -> Self {
        self.session = Some(session.into());
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

/// Everything a run leaves behind: the event log plus the chain blocks and
/// anchors the ledger produced.
#[derive(Debug, Clone, Default)]
pub struct TradeTrace {
    pub events: Vec<TraceEvent>,
    pub chains: BTreeMap<String, ChainKind>,
    pub blocks: BTreeMap<String, Vec<ChainBlock>>,
    pub anchors: Vec<AnchorTx>,
}

impl TradeTrace {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for ev in &self.events {
            serde_json::to_writer(&mut w, ev)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Parses an event log. Blocks and anchors are not part of the JSONL
    /// file and come back empty.
    pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Self> {
        let mut events = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ev: TraceEvent = serde_json::from_str(&line).map_err(|e| {
                io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
            })?;
            events.push(ev);
        }
        Ok(TradeTrace {
            events,
            ..Default::default()
        })
    }

    pub fn events_of(&self, kind: EventType) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.event_type == kind)
    }

    pub fn l1_tx_count(&self) -> usize {
        self.events.iter().filter(|e| e.l1_tx).count()
    }

    pub fn last_epoch(&self) -> u64 {
        self.events.last().map_or(0, |e| e.epoch)
    }
}
