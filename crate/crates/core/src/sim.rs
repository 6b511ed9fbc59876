//! The world: ledger, brokers, agents, blob store and the epoch scheduler.
//!
//! Each epoch runs, in order:
//! 1. delivery of everything submitted last epoch, in submission order;
//! 2. idle agents starting their next planned trade;
//! 3. buyers fetching blobs that became available;
//! 4. the replay adversary, if the scenario has one;
//! 5. broker timeouts, matching and the release of the broker outbox;
//! 6. block production, anchoring and the invariant checks.
//!
//! Agent contracts are not separate objects. Their logic is small enough to
//! live here: forward what the owner sends, store what arrives and pass it
//! up to the owner.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{synth_readings, AgentError, BuyerAgent, BuyerState, DeliveryOutcome, Fault, Outgoing, SellerAgent};
use crate::blobstore::BlobStore;
use crate::broker::{Broker, BrokerConfig, BrokerEvent, Outbound, OrderId, TransferKind};
use crate::ca::{CertificateAuthority, EnrollmentRequest, TrustedIssuers};
use crate::config::ScenarioConfig;
use crate::crypto::{KeyPair, Nonce, Padding, PublicKey};
use crate::ledger::{
    scoped_key, AgentId, ChainId, ChainKind, ContractAddr, Endpoint, Ledger, LedgerError, Message, OnLedgerRequest,
    Role, Transport, WriteTag,
};
use crate::privacy::{InsiderKnowledge, InsiderSession};
use crate::protocol::{decode, ContractCall, DataDescription, RegionCell, SensorType, TimeWindow, TradeId};
use crate::trace::{EventType, Provenance, TraceEvent, TradeTrace};

pub const SELLERS_CHAIN: &str = "sellers";
pub const BUYERS_CHAIN: &str = "buyers";
pub const BROKERS_CHAIN: &str = "brokers";

const SAMPLE_SIZE: usize = 8;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("invariant `{name}` violated: {detail}")]
    InvariantViolation { name: &'static str, detail: String },
}

impl From<LedgerError> for SimError {
    fn from(e: LedgerError) -> Self {
        SimError::Setup(e.to_string())
    }
}

fn violation(name: &'static str, detail: impl Into<String>) -> SimError {
    SimError::InvariantViolation {
        name,
        detail: detail.into(),
    }
}

/// Independent 64-bit seed for one component, derived from the scenario seed.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RunOutcome {
    /// Number of epochs executed.
    pub epochs: u64,
    /// False when the run hit `max_epochs` with work still outstanding.
    pub quiescent: bool,
}

/// Headline numbers of a finished run, written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub epochs: u64,
    pub quiescent: bool,
    pub trades: usize,
    pub settled: usize,
    pub expired: usize,
    pub l1_tx_count: u64,
    pub off_ledger_requests: u64,
    pub gas_burnt: u64,
    pub minted: u64,
    pub total_supply: u64,
    pub agent_errors: usize,
    pub rejected_orders: usize,
}

#[derive(Debug, Clone, Serialize)]
struct BrokerReputation {
    broker: String,
    rows: Vec<crate::broker::ReputationRow>,
}

#[derive(Debug, Clone)]
struct SessionInfo {
    agent: AgentId,
    index: u32,
    contract: ContractAddr,
}

/// Replays captured sell requests from a contract of its own.
#[derive(Debug)]
struct Adversary {
    contract: ContractAddr,
    /// (full state key to look for on the sellers' chain, broker to send to)
    targets: Vec<(Vec<u8>, ContractAddr)>,
}

pub struct Simulation {
    cfg: ScenarioConfig,
    ledger: Ledger,
    store: BlobStore,
    sellers_chain: ChainId,
    buyers_chain: ChainId,
    brokers: Vec<Broker>,
    sellers: Vec<SellerAgent>,
    buyers: Vec<BuyerAgent>,
    seller_plans: Vec<Vec<DataDescription>>,
    buyer_plans: Vec<Vec<DataDescription>>,
    exhausted: BTreeSet<AgentId>,
    world_faults: BTreeSet<(AgentId, u32, Fault)>,
    sessions: BTreeMap<String, SessionInfo>,
    session_trade: BTreeMap<String, TradeId>,
    trade_sessions: BTreeMap<TradeId, (String, String)>,
    order_sessions: BTreeMap<(usize, OrderId), String>,
    seen_keys: BTreeSet<PublicKey>,
    seen_nonces: BTreeSet<Nonce>,
    adversary: Option<Adversary>,
    mail_counters: BTreeMap<(ContractAddr, &'static str), u64>,
    checked_blocks: BTreeMap<ChainId, usize>,
    outcome: Option<RunOutcome>,
}

fn session_label(agent: AgentId, index: u32) -> String {
    format!("{agent}#{index}")
}

/// On-ledger step produced when a contract forwards an owner request.
fn forward_step(step: u8) -> u8 {
    match step {
        1 => 2,
        6 => 7,
        11 => 12,
        16 => 17,
        other => other,
    }
}

/// Owner-event step produced when a contract passes a broker message up.
fn owner_step(step: u8) -> u8 {
    match step {
        4 => 5,
        8 => 9,
        13 => 14,
        other => other,
    }
}

fn region_label<R: Rng>(rng: &mut R, len: usize, used: &mut BTreeSet<String>, index: usize) -> String {
    const HEX: &[u8] = b"0123456789abcdef";
    for _ in 0..64 {
        let body: String = (0..len).map(|_| HEX[rng.gen_range(0..16)] as char).collect();
        let label = format!("hx-{body}");
        if used.insert(label.clone()) {
            return label;
        }
    }
    // Short labels and many agents; fall back to an index suffix.
    let label = format!("hx-{index:x}");
    used.insert(label.clone());
    label
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, SimError> {
        cfg.validate().map_err(|e| SimError::Setup(e.to_string()))?;
        let padding = cfg.padding_policy();
        let mut ledger = Ledger::new(cfg.gas);
        let sellers_chain = ledger.add_chain(
            SELLERS_CHAIN,
            ChainKind::Permissionless,
            vec!["sellers-v0".into(), "sellers-v1".into()],
        )?;
        let buyers_chain = ledger.add_chain(
            BUYERS_CHAIN,
            ChainKind::Permissionless,
            vec!["buyers-v0".into(), "buyers-v1".into()],
        )?;
        let brokers_chain = ledger.add_chain(
            BROKERS_CHAIN,
            ChainKind::Consortium,
            vec!["consortium-v0".into(), "consortium-v1".into(), "consortium-v2".into()],
        )?;

        let mut ca = CertificateAuthority::from_seeds(&cfg.issuer_seeds);
        let trusted = TrustedIssuers::new(ca.issuer_keys());

        // One broker for everything, or one per traded sensor type.
        let mut broker_types: Vec<Option<SensorType>> = Vec::new();
        if cfg.broker_per_sensor_type {
            for t in &cfg.market.sensor_types {
                if !broker_types.contains(&Some(*t)) {
                    broker_types.push(Some(*t));
                }
            }
        } else {
            broker_types.push(None);
        }
        let mut brokers = Vec::new();
        for (i, served) in broker_types.iter().enumerate() {
            let addr = ledger.deploy(brokers_chain, None)?;
            ledger.mint(addr, cfg.balances.broker)?;
            let bcfg = BrokerConfig {
                prices: cfg.prices.clone(),
                padding: padding.clone(),
                score_timeout: cfg.timeouts.score,
                payment_timeout: cfg.timeouts.payment,
                delivery_timeout: cfg.timeouts.delivery,
                seller_choice: cfg.seller_choice,
                serves: served.map(|t| vec![t]),
            };
            let keys = KeyPair::from_seed(cfg.broker_key_seed + i as u64);
            let broker = Broker::new(addr, keys, trusted.clone(), bcfg, derive_seed(cfg.seed, "broker", i as u64))
                .with_trade_id_base((i as u64) << 32);
            brokers.push(broker);
        }
        let broker_for = |t: SensorType| -> (ContractAddr, PublicKey) {
            let b = brokers
                .iter()
                .find(|b| b.serves(t))
                .expect("validated: every traded type has a broker");
            (b.address(), b.public_key())
        };

        // Market layout.
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, "market", 0));
        let m = &cfg.market;
        let window = TimeWindow {
            start: 0,
            end: cfg.max_epochs,
        };
        let pairs = cfg.n_sellers.max(cfg.n_buyers) as usize;
        let mut used = BTreeSet::new();
        let mut seller_plans = Vec::new();
        let mut buyer_plans = Vec::new();
        let mut pair_types = Vec::new();
        let mut pair_regions = Vec::new();
        for i in 0..pairs {
            let t = m.sensor_types[i % m.sensor_types.len()];
            let len = rng.gen_range(m.region_len[0]..=m.region_len[1]);
            let region = region_label(&mut rng, len, &mut used, i);
            let paired = i < cfg.n_sellers as usize && i < cfg.n_buyers as usize;
            // Surplus buyers get a cell of their own so they never match.
            let buyer_region = if paired {
                region.clone()
            } else {
                region_label(&mut rng, len, &mut used, pairs + i)
            };
            let mut sp = Vec::new();
            let mut bp = Vec::new();
            for _ in 0..cfg.trades_per_agent {
                let bv = rng.gen_range(m.buyer_volume[0]..=m.buyer_volume[1]);
                let extra = rng.gen_range(m.seller_extra_volume[0]..=m.seller_extra_volume[1]);
                sp.push(DataDescription {
                    sensor_type: t,
                    region: RegionCell::new(region.clone()),
                    volume: bv + extra,
                    time_window: window,
                });
                bp.push(DataDescription {
                    sensor_type: t,
                    region: RegionCell::new(buyer_region.clone()),
                    volume: bv,
                    time_window: window,
                });
            }
            pair_types.push(t);
            pair_regions.push(region);
            if i < cfg.n_sellers as usize {
                seller_plans.push(sp);
            }
            if i < cfg.n_buyers as usize {
                buyer_plans.push(bp);
            }
        }

        let mut sellers = Vec::new();
        for i in 0..cfg.n_sellers {
            let id = AgentId::seller(i);
            let contract = ledger.deploy(sellers_chain, Some(id))?;
            ledger.mint(contract, cfg.balances.seller)?;
            let t = pair_types[i as usize];
            let mut erng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, "enroll", i as u64));
            let req = EnrollmentRequest {
                claimed_location: RegionCell::new(pair_regions[i as usize].clone()),
                sensor_type: t,
                sample_data: synth_readings(t, SAMPLE_SIZE, &mut erng),
                nonce: Nonce::random(&mut erng),
            };
            let issuer = i as usize % ca.issuer_count();
            let cert = ca
                .issue_certificate(issuer, &req, 0, cfg.cert_validity)
                .map_err(|e| SimError::Setup(format!("enrolling {id}: {e}")))?;
            sellers.push(SellerAgent::new(
                id,
                contract,
                broker_for(t),
                cert,
                padding.clone(),
                derive_seed(cfg.seed, "seller", i as u64),
            ));
        }
        let mut buyers = Vec::new();
        for i in 0..cfg.n_buyers {
            let id = AgentId::buyer(i);
            let contract = ledger.deploy(buyers_chain, Some(id))?;
            ledger.mint(contract, cfg.balances.buyer)?;
            buyers.push(BuyerAgent::new(
                id,
                contract,
                broker_for(pair_types[i as usize]),
                cfg.prices.clone(),
                padding.clone(),
                derive_seed(cfg.seed, "buyer", i as u64),
            ));
        }

        let mut world_faults = BTreeSet::new();
        let mut adversary = None;
        for f in &cfg.faults {
            let id = f.agent_id().map_err(|e| SimError::Setup(e.to_string()))?;
            match (f.fault, id.role) {
                (Fault::BogusKey, Role::Seller) => sellers[id.index as usize].add_fault(f.fault, f.trade),
                (Fault::SilentBuyer, Role::Buyer) => buyers[id.index as usize].add_fault(f.fault, f.trade),
                _ => {
                    world_faults.insert((id, f.trade, f.fault));
                }
            }
            if f.fault == Fault::ReplaySell && adversary.is_none() {
                let owner = AgentId {
                    role: Role::Adversary,
                    index: 0,
                };
                let contract = ledger.deploy(sellers_chain, Some(owner))?;
                ledger.mint(contract, cfg.balances.adversary)?;
                adversary = Some(Adversary {
                    contract,
                    targets: Vec::new(),
                });
            }
        }
        ledger.seal_supply();

        Ok(Simulation {
            store: BlobStore::new(cfg.blob_latency),
            cfg,
            ledger,
            sellers_chain,
            buyers_chain,
            brokers,
            sellers,
            buyers,
            seller_plans,
            buyer_plans,
            exhausted: BTreeSet::new(),
            world_faults,
            sessions: BTreeMap::new(),
            session_trade: BTreeMap::new(),
            trade_sessions: BTreeMap::new(),
            order_sessions: BTreeMap::new(),
            seen_keys: BTreeSet::new(),
            seen_nonces: BTreeSet::new(),
            adversary,
            mail_counters: BTreeMap::new(),
            checked_blocks: BTreeMap::new(),
            outcome: None,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn store(&self) -> &BlobStore {
        &self.store
    }

    pub fn brokers(&self) -> &[Broker] {
        &self.brokers
    }

    pub fn sellers(&self) -> &[SellerAgent] {
        &self.sellers
    }

    pub fn buyers(&self) -> &[BuyerAgent] {
        &self.buyers
    }

    pub fn outcome(&self) -> Option<RunOutcome> {
        self.outcome
    }

    /// Seller and buyer session labels of a trade.
    pub fn trade_sessions(&self, id: TradeId) -> Option<(&str, &str)> {
        self.trade_sessions.get(&id).map(|(s, b)| (s.as_str(), b.as_str()))
    }

    pub fn settled_trades(&self) -> usize {
        self.brokers
            .iter()
            .flat_map(|b| b.trades())
            .filter(|t| t.state == crate::broker::TradeState::Settled)
            .count()
    }

    pub fn summary(&self) -> RunSummary {
        let trades = || self.brokers.iter().flat_map(|b| b.trades());
        let count = |t: EventType| self.ledger.trace().iter().filter(|e| e.event_type == t).count();
        let outcome = self.outcome.unwrap_or(RunOutcome {
            epochs: self.ledger.epoch(),
            quiescent: false,
        });
        RunSummary {
            seed: self.cfg.seed,
            epochs: outcome.epochs,
            quiescent: outcome.quiescent,
            trades: trades().count(),
            settled: self.settled_trades(),
            expired: trades()
                .filter(|t| t.state == crate::broker::TradeState::Expired)
                .count(),
            l1_tx_count: self.ledger.l1_tx_count(),
            off_ledger_requests: self.ledger.counters().off_ledger_requests,
            gas_burnt: self.ledger.gas_sink(),
            minted: self.ledger.minted(),
            total_supply: self.ledger.total_supply(),
            agent_errors: count(EventType::AgentError),
            rejected_orders: count(EventType::OrderRejected),
        }
    }

    /// Every broker's reputation table, keyed by broker contract label.
    pub fn reputation_json(&self) -> String {
        let tables: Vec<BrokerReputation> = self
            .brokers
            .iter()
            .map(|b| BrokerReputation {
                broker: self.ledger.label(Endpoint::Contract(b.address())),
                rows: b.reputation().rows(),
            })
            .collect();
        serde_json::to_string_pretty(&tables).expect("rows serialize")
    }

    /// Runs epochs until quiescence or `max_epochs`.
    pub fn run(&mut self) -> Result<RunOutcome, SimError> {
        if let Some(o) = self.outcome {
            return Ok(o);
        }
        loop {
            let now = self.ledger.epoch();
            self.step_epoch()?;
            if self.is_quiescent() {
                self.check_final()?;
                return Ok(*self.outcome.insert(RunOutcome {
                    epochs: now + 1,
                    quiescent: true,
                }));
            }
            if now + 1 >= self.cfg.max_epochs {
                log::warn!("stopped at max_epochs {} with work outstanding", self.cfg.max_epochs);
                return Ok(*self.outcome.insert(RunOutcome {
                    epochs: now + 1,
                    quiescent: false,
                }));
            }
        }
    }

    pub fn step_epoch(&mut self) -> Result<(), SimError> {
        let now = self.ledger.epoch();
        for msg in self.ledger.take_deliverable() {
            self.deliver(msg, now);
        }
        self.start_sessions(now)?;
        self.poll_buyers(now);
        self.run_adversary();
        for i in 0..self.brokers.len() {
            self.brokers[i].end_epoch(now);
            self.flush_broker(i);
        }
        self.ledger.end_epoch()?;
        self.check_epoch()
    }

    pub fn is_quiescent(&self) -> bool {
        self.ledger.in_flight() == 0
            && !self.brokers.iter().any(Broker::has_pending_work)
            && !self.buyers.iter().any(|b| b.fetch_due().is_some())
            && self.adversary.as_ref().is_none_or(|a| a.targets.is_empty())
            && !(0..self.sellers.len()).any(|i| self.seller_can_start(i))
            && !(0..self.buyers.len()).any(|i| self.buyer_can_start(i))
    }

    fn seller_can_start(&self, i: usize) -> bool {
        let s = &self.sellers[i];
        s.is_idle() && s.sessions().len() < self.seller_plans[i].len() && !self.exhausted.contains(&s.id)
    }

    fn buyer_can_start(&self, i: usize) -> bool {
        let b = &self.buyers[i];
        b.is_idle() && b.sessions().len() < self.buyer_plans[i].len() && !self.exhausted.contains(&b.id)
    }

    /// Everything the run left behind, as an event log plus chain artifacts.
    pub fn trace(&self) -> TradeTrace {
        let mut trace = TradeTrace {
            events: self.ledger.trace().to_vec(),
            anchors: self.ledger.anchors().to_vec(),
            ..Default::default()
        };
        for id in self.ledger.chain_ids() {
            let name = self.ledger.chain_name(id).to_string();
            trace
                .chains
                .insert(name.clone(), self.ledger.chain_kind(id).expect("listed chain"));
            trace.blocks.insert(name, self.ledger.blocks(id).to_vec());
        }
        trace
    }

    /// What an insider agent knows about its own trades.
    pub fn insider(&self, agent: AgentId) -> Option<InsiderKnowledge> {
        let contract;
        let mut sessions = Vec::new();
        match agent.role {
            Role::Seller => {
                let s = self.sellers.get(agent.index as usize)?;
                contract = s.contract;
                for sess in s.sessions() {
                    let peer = sess.buyer();
                    sessions.push(InsiderSession {
                        session: session_label(agent, sess.index),
                        own_key: sess.public_key(),
                        own_nonce: sess.nonce,
                        peer_key: peer.map(|p| p.0),
                        peer_nonce: peer.map(|p| p.1),
                        epochs: Vec::new(),
                    });
                }
            }
            Role::Buyer => {
                let b = self.buyers.get(agent.index as usize)?;
                contract = b.contract;
                for sess in b.sessions() {
                    sessions.push(InsiderSession {
                        session: session_label(agent, sess.index),
                        own_key: sess.public_key(),
                        own_nonce: sess.nonce,
                        peer_key: None,
                        peer_nonce: None,
                        epochs: Vec::new(),
                    });
                }
            }
            Role::Adversary => return None,
        }
        for s in &mut sessions {
            s.epochs = self
                .ledger
                .trace()
                .iter()
                .filter(|e| e.session.as_deref() == Some(s.session.as_str()) && e.from.is_some())
                .map(|e| e.epoch)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
        }
        Some(InsiderKnowledge {
            agent: agent.to_string(),
            contract: self.ledger.label(Endpoint::Contract(contract)),
            sessions,
        })
    }

    // ----- delivery ---------------------------------------------------------

    fn deliver(&mut self, msg: Message, now: u64) {
        match (msg.transport, msg.to) {
            (Transport::OffLedger, Endpoint::Contract(c)) => self.contract_call(c, msg),
            (Transport::OnLedger, Endpoint::Contract(c)) => match self.broker_index(c) {
                Some(i) => self.broker_inbound(i, msg, now),
                None => self.contract_inbound(c, msg),
            },
            (Transport::OwnerEvent, Endpoint::Agent(a)) => self.agent_event(a, msg, now),
            (Transport::Credit, Endpoint::Contract(c)) => self.contract_credit(c, msg),
            (t, to) => log::warn!("dropping {t:?} message to {to:?}"),
        }
    }

    fn broker_index(&self, c: ContractAddr) -> Option<usize> {
        self.brokers.iter().position(|b| b.address() == c)
    }

    fn next_key(&mut self, c: ContractAddr, kind: &'static str) -> String {
        let n = self.mail_counters.entry((c, kind)).or_default();
        let key = format!("{kind}/{n}");
        *n += 1;
        key
    }

    fn session_prov(&self, label: &str, step: Option<u8>) -> Provenance {
        let trade = self.session_trade.get(label).copied();
        let counterparty = trade
            .and_then(|t| self.trade_sessions.get(&t))
            .map(|(s, b)| if s == label { b.clone() } else { s.clone() });
        Provenance {
            step,
            session: Some(label.to_string()),
            counterparty,
            trade,
            note: None,
        }
    }

    fn current_label(&self, agent: AgentId) -> Option<String> {
        let index = match agent.role {
            Role::Seller => self.sellers[agent.index as usize].current()?.index,
            Role::Buyer => self.buyers[agent.index as usize].current()?.index,
            Role::Adversary => return None,
        };
        Some(session_label(agent, index))
    }

    fn has_world_fault(&self, label: &str, fault: Fault) -> bool {
        self.sessions
            .get(label)
            .is_some_and(|s| self.world_faults.contains(&(s.agent, s.index, fault)))
    }

    /// Owner request arriving at an agent contract: store, then forward.
    fn contract_call(&mut self, c: ContractAddr, msg: Message) {
        let step = msg.prov.step.map(forward_step);
        let prov = match &msg.prov.session {
            Some(label) => self.session_prov(label, step),
            None => Provenance {
                step,
                ..msg.prov.clone()
            },
        };
        let Some(call) = decode::<ContractCall>(&msg.payload) else {
            self.record_error(Endpoint::Contract(c), &prov, "Malformed contract call".into());
            return;
        };
        let (to, payload, amount) = match call {
            ContractCall::Forward { to, payload } => (to, payload, 0),
            ContractCall::Pay { to, amount, memo } => (to, memo, amount),
        };
        let key = self.next_key(c, "out");
        self.ledger
            .write(c, key.as_bytes(), payload.clone(), WriteTag::SealedMessage)
            .expect("agent contract exists");
        if step == Some(2) {
            if let Some(label) = &prov.session {
                if self.has_world_fault(label, Fault::ReplaySell) {
                    if let Some(adv) = self.adversary.as_mut() {
                        adv.targets.push((scoped_key(c, key.as_bytes()), to));
                    }
                }
            }
        }
        let req = OnLedgerRequest {
            target: to,
            payload,
            carried_assets: amount,
        };
        if let Err(e) = self.ledger.submit_on_ledger(c, req, &prov) {
            self.record_error(Endpoint::Contract(c), &prov, e.to_string());
        }
    }

    /// Broker message arriving at an agent contract: store, then tell the owner.
    fn contract_inbound(&mut self, c: ContractAddr, msg: Message) {
        let key = self.next_key(c, "in");
        self.ledger
            .write(c, key.as_bytes(), msg.payload.clone(), WriteTag::SealedMessage)
            .expect("agent contract exists");
        let prov = Provenance {
            step: msg.prov.step.map(owner_step),
            ..msg.prov.clone()
        };
        if self.ledger.owner(c).is_some() {
            self.ledger
                .notify_owner(c, msg.payload, &prov)
                .expect("owned contract");
        }
    }

    fn contract_credit(&mut self, c: ContractAddr, msg: Message) {
        let balance = self.ledger.balance(c);
        self.ledger
            .write(c, b"credits", balance.to_le_bytes().to_vec(), WriteTag::Bookkeeping)
            .expect("contract exists");
        match self.ledger.owner(c) {
            Some(a) if a.role == Role::Seller => self.sellers[a.index as usize].on_credit(msg.amount),
            Some(a) if a.role == Role::Buyer => self.buyers[a.index as usize].on_refund(),
            _ => {}
        }
    }

    fn agent_event(&mut self, a: AgentId, msg: Message, now: u64) {
        let Some(label) = self.current_label(a) else {
            return;
        };
        let prov = self.session_prov(&label, msg.prov.step);
        match a.role {
            Role::Seller => {
                let seller = &mut self.sellers[a.index as usize];
                match seller.on_message(&msg.payload) {
                    Ok(Some(out)) => self.submit(a, &label, out),
                    Ok(None) => match seller.deliver(&mut self.store) {
                        Ok(out) => {
                            let blob_len = seller
                                .current()
                                .and_then(|s| s.blob)
                                .and_then(|addr| self.store.get(&addr).ok())
                                .map_or(0, <[u8]>::len);
                            let ev = TraceEvent::new(EventType::BlobPut)
                                .from(self.ledger.label(Endpoint::Agent(a)))
                                .payload_len(blob_len)
                                .tagged(&self.session_prov(&label, Some(10)));
                            self.ledger.record(ev);
                            self.submit(a, &label, out);
                        }
                        Err(e) => self.agent_error(a, &prov, e),
                    },
                    Err(e) => self.agent_error(a, &prov, e),
                }
            }
            Role::Buyer => {
                let contract = self.buyers[a.index as usize].contract;
                let balance = self.ledger.balance(contract);
                let gas = self.ledger.tariff().on_ledger;
                let latency = self.store.latency();
                let buyer = &mut self.buyers[a.index as usize];
                if buyer.state() == BuyerState::Paid {
                    if let Err(e) = buyer.accept_delivery(&msg.payload, now + latency) {
                        self.agent_error(a, &prov, e);
                    }
                } else {
                    match buyer.handle_invoice(&msg.payload, balance, gas) {
                        Ok(out) => self.submit(a, &label, out),
                        Err(e) => self.agent_error(a, &prov, e),
                    }
                }
            }
            Role::Adversary => {}
        }
    }

    fn submit(&mut self, a: AgentId, label: &str, out: Outgoing) {
        let prov = self.session_prov(label, Some(out.step));
        if let Err(e) = self.ledger.submit_off_ledger(a, out.request, &prov) {
            self.record_error(Endpoint::Agent(a), &prov, e.to_string());
        }
    }

    fn agent_error(&mut self, a: AgentId, prov: &Provenance, e: AgentError) {
        self.record_error(Endpoint::Agent(a), prov, format!("{e:?}"));
    }

    fn record_error(&mut self, at: Endpoint, prov: &Provenance, detail: String) {
        log::debug!("{}: {detail}", self.ledger.label(at));
        let ev = TraceEvent::new(EventType::AgentError)
            .from(self.ledger.label(at))
            .tagged(prov)
            .detail(detail);
        self.ledger.record(ev);
    }

    // ----- agents -----------------------------------------------------------

    fn register(&mut self, agent: AgentId, contract: ContractAddr, index: u32, key: PublicKey, nonce: Nonce) -> Result<String, SimError> {
        if !self.seen_keys.insert(key) {
            return Err(violation("key_freshness", format!("{agent} reused public key {}", key.to_hex())));
        }
        if !self.seen_nonces.insert(nonce) {
            return Err(violation("nonce_freshness", format!("{agent} reused nonce {}", nonce.to_hex())));
        }
        let label = session_label(agent, index);
        self.sessions.insert(label.clone(), SessionInfo { agent, index, contract });
        Ok(label)
    }

    fn start_sessions(&mut self, now: u64) -> Result<(), SimError> {
        for i in 0..self.sellers.len() {
            if !self.seller_can_start(i) {
                continue;
            }
            let seller = &mut self.sellers[i];
            let (id, contract) = (seller.id, seller.contract);
            let dd = self.seller_plans[i][seller.sessions().len()].clone();
            match seller.start_trade(dd, now) {
                Ok((out, start)) => {
                    let label = self.register(id, contract, start.session, start.public_key, start.nonce)?;
                    self.submit(id, &label, out);
                }
                Err(e) => {
                    self.exhausted.insert(id);
                    self.agent_error(id, &Provenance::step(1), e);
                }
            }
        }
        for i in 0..self.buyers.len() {
            if !self.buyer_can_start(i) {
                continue;
            }
            let (id, contract) = (self.buyers[i].id, self.buyers[i].contract);
            let balance = self.ledger.balance(contract);
            let buyer = &mut self.buyers[i];
            let dd = self.buyer_plans[i][buyer.sessions().len()].clone();
            match buyer.start_trade(dd, balance) {
                Ok((out, start)) => {
                    let label = self.register(id, contract, start.session, start.public_key, start.nonce)?;
                    self.submit(id, &label, out);
                }
                Err(e) => {
                    self.exhausted.insert(id);
                    self.agent_error(id, &Provenance::step(1), e);
                }
            }
        }
        Ok(())
    }

    fn poll_buyers(&mut self, now: u64) {
        for i in 0..self.buyers.len() {
            let id = self.buyers[i].id;
            let Some(label) = self.current_label(id) else {
                continue;
            };
            let Some(DeliveryOutcome::Scored { score, outgoing, error }) = self.buyers[i].poll(now, &self.store) else {
                continue;
            };
            let agent = self.ledger.label(Endpoint::Agent(id));
            let get = TraceEvent::new(EventType::BlobGet)
                .from(agent.clone())
                .tagged(&self.session_prov(&label, Some(15)));
            self.ledger.record(get);
            if let Some(e) = error {
                self.agent_error(id, &self.session_prov(&label, Some(15)), e);
            }
            let received = TraceEvent::new(EventType::DataReceived)
                .from(agent)
                .tagged(&self.session_prov(&label, Some(16)))
                .detail(format!("score {score}"));
            self.ledger.record(received);
            if let Some(out) = outgoing {
                self.submit(id, &label, out);
            }
        }
    }

    fn run_adversary(&mut self) {
        let Some(adv) = self.adversary.as_mut() else {
            return;
        };
        let blocks = self.ledger.blocks(self.sellers_chain);
        let mut found = Vec::new();
        adv.targets.retain(|(key, broker)| {
            let hit = blocks
                .iter()
                .flat_map(|b| b.mutations.iter())
                .find(|m| &m.key == key)
                .map(|m| m.value.clone());
            match hit {
                Some(v) => {
                    found.push((v, *broker));
                    false
                }
                None => true,
            }
        });
        let contract = adv.contract;
        for (payload, broker) in found {
            let prov = Provenance {
                step: Some(2),
                note: Some("replayed sell request".into()),
                ..Default::default()
            };
            let req = OnLedgerRequest {
                target: broker,
                payload,
                carried_assets: 0,
            };
            if let Err(e) = self.ledger.submit_on_ledger(contract, req, &prov) {
                self.record_error(Endpoint::Contract(contract), &prov, e.to_string());
            }
        }
    }

    // ----- brokers ----------------------------------------------------------

    fn broker_inbound(&mut self, i: usize, msg: Message, now: u64) {
        let Endpoint::Contract(origin) = msg.from else {
            return;
        };
        let res = self.brokers[i].handle_inbound(origin, &msg.payload, msg.amount, now);
        let events = self.brokers[i].drain_events();
        for ev in events {
            self.record_broker_event(i, ev, Some(&msg.prov));
        }
        if let Err(e) = res {
            let addr = self.brokers[i].address();
            let ev = TraceEvent::new(EventType::OrderRejected)
                .chain(BROKERS_CHAIN)
                .from(self.ledger.label(Endpoint::Contract(addr)))
                .tagged(&msg.prov)
                .detail(format!("{e:?}"));
            self.ledger.record(ev);
        }
    }

    fn record_broker_event(&mut self, i: usize, ev: BrokerEvent, inbound: Option<&Provenance>) {
        let broker = &self.brokers[i];
        let mut te = TraceEvent::new(ev.kind)
            .chain(BROKERS_CHAIN)
            .from(self.ledger.label(Endpoint::Contract(broker.address())))
            .detail(ev.detail.clone());
        te.trade = ev.trade;
        match ev.kind {
            EventType::OrderAdmitted => {
                let order = ev.order.expect("admissions name their order");
                if let Some(label) = inbound.and_then(|p| p.session.clone()) {
                    self.order_sessions.insert((i, order), label.clone());
                    if ev.detail == "sell" && self.has_world_fault(&label, Fault::StaleNonce) {
                        self.brokers[i].inject_stale_notice(order);
                    }
                    if ev.detail == "buy" && self.has_world_fault(&label, Fault::InflatedInvoice) {
                        self.brokers[i].inject_inflated_invoice(order);
                    }
                    te.session = Some(label);
                }
                te.step = Some(3);
            }
            EventType::TradeMatched => {
                let id = ev.trade.expect("matches name their trade");
                let t = broker.trade(id).expect("trade exists");
                let (sell, buy) = (broker.sell_order(t.sell).expect("order"), broker.buy_order(t.buy).expect("order"));
                te.from = Some(self.ledger.label(Endpoint::Contract(sell.origin)));
                te.to = Some(self.ledger.label(Endpoint::Contract(buy.origin)));
                te.amount = Some(t.price);
                te.step = Some(3);
                let s = self.order_sessions.get(&(i, t.sell)).cloned();
                let b = self.order_sessions.get(&(i, t.buy)).cloned();
                if let (Some(s), Some(b)) = (s, b) {
                    self.session_trade.insert(s.clone(), id);
                    self.session_trade.insert(b.clone(), id);
                    self.trade_sessions.insert(id, (s.clone(), b.clone()));
                    te.session = Some(s);
                    te.counterparty = Some(b);
                }
            }
            _ => {
                if let Some(order) = ev.order {
                    te.session = self.order_sessions.get(&(i, order)).cloned();
                } else if let Some((s, b)) = ev.trade.and_then(|t| self.trade_sessions.get(&t)) {
                    te.session = Some(s.clone());
                    te.counterparty = Some(b.clone());
                }
            }
        }
        self.ledger.record(te);
    }

    /// Provenance for a broker message or transfer heading to `to`.
    fn outbound_prov(&self, i: usize, to: ContractAddr, step: Option<u8>, trade: Option<TradeId>, order: Option<OrderId>) -> Provenance {
        let label = match trade.and_then(|t| self.trade_sessions.get(&t)) {
            Some((s, b)) => {
                if self.sessions.get(s).is_some_and(|x| x.contract == to) {
                    Some(s.clone())
                } else {
                    Some(b.clone())
                }
            }
            None => order.and_then(|o| self.order_sessions.get(&(i, o)).cloned()),
        };
        match label {
            Some(l) => Provenance {
                trade: trade.or(self.session_trade.get(&l).copied()),
                ..self.session_prov(&l, step)
            },
            None => Provenance {
                step,
                trade,
                ..Default::default()
            },
        }
    }

    fn flush_broker(&mut self, i: usize) {
        let events = self.brokers[i].drain_events();
        for ev in events {
            self.record_broker_event(i, ev, None);
        }
        let addr = self.brokers[i].address();
        for (key, value) in self.brokers[i].drain_state_writes() {
            self.ledger
                .write(addr, &key, value, WriteTag::SealedState)
                .expect("broker contract exists");
        }
        let batch = self.brokers[i].drain_outbox(self.cfg.batching);
        for ob in batch {
            let res = match ob {
                Outbound::Send {
                    to,
                    payload,
                    step,
                    trade,
                    order,
                } => {
                    let prov = self.outbound_prov(i, to, Some(step), trade, order);
                    let req = OnLedgerRequest {
                        target: to,
                        payload,
                        carried_assets: 0,
                    };
                    self.ledger.submit_on_ledger(addr, req, &prov).map(|_| ()).map_err(|e| (prov, e))
                }
                Outbound::Transfer {
                    to,
                    amount,
                    step,
                    trade,
                    kind,
                } => {
                    let note = match kind {
                        TransferKind::Settlement => "settlement",
                        TransferKind::Refund => "refund",
                    };
                    let prov = self.outbound_prov(i, to, step, trade, None).with_note(note);
                    self.ledger
                        .cross_chain_transfer(addr, to, amount, &prov)
                        .map(|_| ())
                        .map_err(|e| (prov, e))
                }
            };
            if let Err((prov, e)) = res {
                self.record_error(Endpoint::Contract(addr), &prov, e.to_string());
            }
        }
    }

    // ----- invariants -------------------------------------------------------

    fn check_epoch(&mut self) -> Result<(), SimError> {
        if self.ledger.total_supply() != self.ledger.minted() {
            return Err(violation(
                "conservation",
                format!("supply {} != minted {}", self.ledger.total_supply(), self.ledger.minted()),
            ));
        }
        let traced = self.ledger.trace().iter().filter(|e| e.l1_tx).count() as u64;
        if traced != self.ledger.l1_tx_count() {
            return Err(violation(
                "l1_count",
                format!("ledger counted {} L1 txs, trace has {traced}", self.ledger.l1_tx_count()),
            ));
        }
        let padding: Padding = self.cfg.padding_policy();
        let ids: Vec<ChainId> = self.ledger.chain_ids().collect();
        for id in ids {
            let blocks = self.ledger.blocks(id);
            let from = self.checked_blocks.get(&id).copied().unwrap_or(0);
            if padding.is_enabled() {
                for b in &blocks[from..] {
                    for m in b.mutations.iter().filter(|m| m.tag == WriteTag::SealedMessage) {
                        if !padding.admits(m.value.len()) {
                            return Err(violation(
                                "padding",
                                format!("{} mutation of {} bytes is not a bucket size", self.ledger.chain_name(id), m.value.len()),
                            ));
                        }
                    }
                }
            }
            self.checked_blocks.insert(id, blocks.len());
        }
        for b in &self.brokers {
            if self.ledger.balance(b.address()) < b.escrow() {
                return Err(violation(
                    "escrow_backed",
                    format!("broker holds {} but owes {}", self.ledger.balance(b.address()), b.escrow()),
                ));
            }
        }
        Ok(())
    }

    fn check_final(&self) -> Result<(), SimError> {
        for b in &self.brokers {
            if b.escrow() != 0 {
                return Err(violation("escrow_empty", format!("{} still in escrow at quiescence", b.escrow())));
            }
            if let Some(t) = b.trades().find(|t| !t.state.is_terminal()) {
                return Err(violation("trades_terminal", format!("trade {} stuck in {}", t.id.0, t.state)));
            }
        }
        Ok(())
    }

    /// Chain id of the sellers' and buyers' chains.
    pub fn public_chains(&self) -> (ChainId, ChainId) {
        (self.sellers_chain, self.buyers_chain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::SellerState;
    use crate::broker::TradeState;

    fn pairs(n: u32) -> ScenarioConfig {
        ScenarioConfig {
            n_sellers: n,
            n_buyers: n,
            ..Default::default()
        }
    }

    #[test]
    fn single_trade_settles_in_fifteen_epochs() {
        let mut sim = Simulation::new(pairs(1)).unwrap();
        let out = sim.run().unwrap();
        assert!(out.quiescent);
        assert_eq!(sim.settled_trades(), 1);
        let settle = sim
            .ledger()
            .trace()
            .iter()
            .find(|e| e.event_type == EventType::CrossChainTransfer && e.step == Some(18))
            .unwrap();
        assert_eq!(settle.epoch, 14);
        assert_eq!(sim.sellers()[0].state(), SellerState::Settled);
        assert_eq!(sim.buyers()[0].state(), BuyerState::Scored);
    }

    #[test]
    fn forward_and_owner_steps() {
        assert_eq!([1, 6, 11, 16].map(forward_step), [2, 7, 12, 17]);
        assert_eq!([4, 8, 13, 3].map(owner_step), [5, 9, 14, 3]);
    }

    #[test]
    fn derive_seed_separates_tags() {
        assert_ne!(derive_seed(1, "seller", 0), derive_seed(1, "buyer", 0));
        assert_ne!(derive_seed(1, "seller", 0), derive_seed(1, "seller", 1));
        assert_eq!(derive_seed(5, "x", 2), derive_seed(5, "x", 2));
    }

    #[test]
    fn surplus_agents_wait_without_blocking_quiescence() {
        let cfg = ScenarioConfig {
            n_sellers: 3,
            n_buyers: 1,
            ..Default::default()
        };
        let mut sim = Simulation::new(cfg).unwrap();
        assert!(sim.run().unwrap().quiescent);
        assert_eq!(sim.settled_trades(), 1);
        assert_eq!(sim.brokers()[0].open_orders(), (2, 0));
    }

    #[test]
    fn per_type_brokers_each_serve_their_type() {
        let cfg = ScenarioConfig {
            broker_per_sensor_type: true,
            ..pairs(4)
        };
        let mut sim = Simulation::new(cfg).unwrap();
        assert!(sim.run().unwrap().quiescent);
        assert_eq!(sim.brokers().len(), 2);
        for b in sim.brokers() {
            assert_eq!(b.trades().filter(|t| t.state == TradeState::Settled).count(), 2);
        }
    }

    #[test]
    fn sequential_trades_per_agent() {
        let cfg = ScenarioConfig {
            trades_per_agent: 3,
            ..pairs(2)
        };
        let mut sim = Simulation::new(cfg).unwrap();
        assert!(sim.run().unwrap().quiescent);
        assert_eq!(sim.settled_trades(), 6);
        for s in sim.sellers() {
            assert_eq!(s.sessions().len(), 3);
        }
    }

    #[test]
    fn seller_choice_trades_complete() {
        let cfg = ScenarioConfig {
            seller_choice: true,
            ..pairs(3)
        };
        let mut sim = Simulation::new(cfg).unwrap();
        assert!(sim.run().unwrap().quiescent);
        assert_eq!(sim.settled_trades(), 3);
    }

    #[test]
    fn blob_latency_delays_fetch() {
        let cfg = ScenarioConfig {
            blob_latency: 3,
            ..pairs(1)
        };
        let mut sim = Simulation::new(cfg).unwrap();
        sim.run().unwrap();
        let ev = |t| {
            sim.ledger()
                .trace()
                .iter()
                .find(|e| e.event_type == t)
                .map(|e| e.epoch)
                .unwrap()
        };
        assert_eq!(ev(EventType::BlobGet), 15);
    }

    #[test]
    fn insider_seller_knows_buyer_identity() {
        let mut sim = Simulation::new(pairs(1)).unwrap();
        sim.run().unwrap();
        let k = sim.insider(AgentId::seller(0)).unwrap();
        let buyer_session = &sim.buyers()[0].sessions()[0];
        assert_eq!(k.sessions[0].peer_key, Some(buyer_session.public_key()));
        assert_eq!(k.sessions[0].peer_nonce, Some(buyer_session.nonce));
        assert!(!k.sessions[0].epochs.is_empty());
        let kb = sim.insider(AgentId::buyer(0)).unwrap();
        assert_eq!(kb.sessions[0].peer_key, None);
    }
}
