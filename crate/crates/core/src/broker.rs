//! The broker contract on the consortium chain.
//!
//! Decrypts sell and buy requests, verifies certificates, matches orders,
//! prices and invoices trades, holds buyer payments in escrow, relays the
//! seller's sealed delivery to the buyer, keeps the reputation table and
//! settles with sellers.
//!
//! The broker never touches the ledger itself. Entry points queue outbound
//! work in an outbox that the scheduler drains once per epoch, optionally
//! as one shuffled batch.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ca::{CertError, TrustedIssuers};
use crate::crypto::{
    hybrid_decrypt, hybrid_encrypt, sym_encrypt, Ciphertext, KeyPair, Nonce, Padding, PublicKey,
    SymmetricKey,
};
use crate::ledger::ContractAddr;
use crate::protocol::{
    decode, encode, BrokerMessage, BuyRequest, DataDescription, InvalidDd, Invoice, MatchNotice,
    OfferOption, SellRequest, SellerMessage, SensorType, TradeId,
};
use crate::trace::EventType;

pub type OrderId = u64;

/// Highest score a buyer may report.
pub const MAX_SCORE: u8 = 100;
/// Reputation assumed for a seller nobody has scored yet.
pub const NEUTRAL_SCORE: u64 = 50;
/// Buyers offered to a seller per round when seller choice is on.
pub const MAX_OFFER_OPTIONS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PriceError {
    #[error("basic price and volume must both be positive")]
    InvalidInput,
    #[error("price overflows u64")]
    Overflow,
}

/// `basic_price × volume`, in base token units.
pub fn compute_price(basic_price: u64, volume: u64) -> Result<u64, PriceError> {
    if basic_price == 0 || volume == 0 {
        return Err(PriceError::InvalidInput);
    }
    basic_price.checked_mul(volume).ok_or(PriceError::Overflow)
}

/// Public per-type basic prices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceTable(pub BTreeMap<SensorType, u64>);

impl PriceTable {
    pub fn basic_price(&self, t: SensorType) -> Option<u64> {
        self.0.get(&t).copied()
    }

    pub fn price(&self, dd: &DataDescription) -> Result<u64, PriceError> {
        compute_price(
            self.basic_price(dd.sensor_type).unwrap_or(0),
            dd.volume,
        )
    }
}

impl Default for PriceTable {
    fn default() -> Self {
        PriceTable(
            [
                (SensorType::Temperature, 10),
                (SensorType::Humidity, 10),
                (SensorType::AirQuality, 20),
                (SensorType::Traffic, 15),
                (SensorType::Energy, 25),
                (SensorType::Generic, 10),
            ]
            .into_iter()
            .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TradeState {
    Matched,
    Invoiced,
    Paid,
    SellerNotified,
    Delivered,
    Scored,
    Settled,
    Expired,
}

impl TradeState {
    pub fn is_terminal(self) -> bool {
        matches!(self, TradeState::Settled | TradeState::Expired)
    }

    pub fn name(self) -> &'static str {
        match self {
            TradeState::Matched => "matched",
            TradeState::Invoiced => "invoiced",
            TradeState::Paid => "paid",
            TradeState::SellerNotified => "seller_notified",
            TradeState::Delivered => "delivered",
            TradeState::Scored => "scored",
            TradeState::Settled => "settled",
            TradeState::Expired => "expired",
        }
    }
}

impl fmt::Display for TradeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BrokerError {
    #[error("cannot decrypt request")]
    DecryptFailure,
    #[error("decrypted request is malformed")]
    Malformed,
    #[error("certificate invalid or from an untrusted issuer")]
    CertInvalid,
    #[error("certificate expired")]
    CertExpired,
    #[error("data description type {dd} does not match certificate type {cert}")]
    SensorTypeMismatch { dd: SensorType, cert: SensorType },
    #[error("data description region does not match the certified cell")]
    RegionMismatch,
    #[error("this broker does not serve {0} data")]
    SensorTypeNotServed(SensorType),
    #[error("nonce already used")]
    DuplicateOrder,
    #[error("invalid data description: {0}")]
    InvalidDd(#[from] InvalidDd),
    #[error("no trade {0}")]
    UnknownTrade(TradeId),
    #[error("no open trade for this nonce")]
    UnknownNonce,
    #[error("message for trade {0} came from the wrong contract")]
    WrongOrigin(TradeId),
    #[error("trade {trade} is {state}, cannot {op}")]
    StateError {
        trade: TradeId,
        state: TradeState,
        op: &'static str,
    },
    #[error("payment of {got} does not match price {expected}; refunding")]
    WrongAmount { expected: u64, got: u64 },
    #[error("score {0} outside [0, 100]")]
    ScoreOutOfRange(u8),
    #[error("pricing failed: {0}")]
    Price(#[from] PriceError),
    #[error("no pending offer for this seller")]
    NoOffer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SellOrder {
    pub id: OrderId,
    pub dd: DataDescription,
    pub seller_nonce: Nonce,
    pub seller_key: PublicKey,
    pub origin: ContractAddr,
    pub admitted_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuyOrder {
    pub id: OrderId,
    pub dd: DataDescription,
    pub buyer_nonce: Nonce,
    pub buyer_key: PublicKey,
    pub origin: ContractAddr,
    pub admitted_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trade {
    pub id: TradeId,
    pub sell: OrderId,
    pub buy: OrderId,
    pub price: u64,
    pub state: TradeState,
    pub state_since: u64,
    /// Amount currently held in escrow for this trade.
    pub escrowed: u64,
    pub score: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReputationEntry {
    pub seller_contract_id: ContractAddr,
    pub score_sum: u64,
    pub score_count: u64,
}

impl ReputationEntry {
    pub fn mean(&self) -> Option<f64> {
        (self.score_count > 0).then(|| self.score_sum as f64 / self.score_count as f64)
    }

    /// `(sum, count)` used for ranking; unscored sellers rank as neutral.
    fn ratio(entry: Option<&ReputationEntry>) -> (u64, u64) {
        match entry {
            Some(e) if e.score_count > 0 => (e.score_sum, e.score_count),
            _ => (NEUTRAL_SCORE, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReputationRow {
    pub seller_contract_id: ContractAddr,
    pub score_count: u64,
    pub mean: f64,
}

/// Per-seller score table.
#[derive(Debug, Clone, Default)]
pub struct Reputation {
    rows: BTreeMap<ContractAddr, ReputationEntry>,
}

impl Reputation {
    pub fn record(&mut self, seller: ContractAddr, score: u8) {
        let e = self.rows.entry(seller).or_insert(ReputationEntry {
            seller_contract_id: seller,
            score_sum: 0,
            score_count: 0,
        });
        e.score_sum += u64::from(score);
        e.score_count += 1;
    }

    pub fn get(&self, seller: &ContractAddr) -> Option<&ReputationEntry> {
        self.rows.get(seller)
    }

    /// Higher mean first. Exact comparison by cross-multiplication.
    pub fn compare(&self, a: &ContractAddr, b: &ContractAddr) -> Ordering {
        let (sa, ca) = ReputationEntry::ratio(self.rows.get(a));
        let (sb, cb) = ReputationEntry::ratio(self.rows.get(b));
        (u128::from(sb) * u128::from(ca)).cmp(&(u128::from(sa) * u128::from(cb)))
    }

    pub fn rows(&self) -> Vec<ReputationRow> {
        self.rows
            .values()
            .filter_map(|e| {
                Some(ReputationRow {
                    seller_contract_id: e.seller_contract_id,
                    score_count: e.score_count,
                    mean: e.mean()?,
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.rows()).expect("rows serialize")
    }
}

/// Whether a seller's collected data satisfies a buyer's requirement.
pub fn compatible(sell: &DataDescription, buy: &DataDescription) -> bool {
    sell.sensor_type == buy.sensor_type
        && (buy.region.is_wildcard() || sell.region == buy.region)
        && sell.volume >= buy.volume
        && sell.time_window.overlaps(&buy.time_window)
}

/// Greedy matching. Buyers are served in admission order; each takes the
/// best still-unmatched compatible seller, ranked by reputation (higher
/// first), then admission epoch, then order id. Returns `(buy, sell)` pairs.
pub fn greedy_match(
    sells: &[&SellOrder],
    buys: &[&BuyOrder],
    reputation: &Reputation,
) -> Vec<(OrderId, OrderId)> {
    let mut buys: Vec<&BuyOrder> = buys.to_vec();
    buys.sort_by_key(|b| (b.admitted_at, b.id));
    let mut used = BTreeSet::new();
    let mut out = Vec::new();
    for b in buys {
        let best = sells
            .iter()
            .filter(|s| !used.contains(&s.id) && compatible(&s.dd, &b.dd))
            .min_by(|x, y| seller_rank(x, y, reputation));
        if let Some(s) = best {
            used.insert(s.id);
            out.push((b.id, s.id));
        }
    }
    out
}

fn seller_rank(x: &SellOrder, y: &SellOrder, reputation: &Reputation) -> Ordering {
    reputation
        .compare(&x.origin, &y.origin)
        .then(x.admitted_at.cmp(&y.admitted_at))
        .then(x.id.cmp(&y.id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    Settlement,
    Refund,
}

/// Work the scheduler executes on the broker's behalf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outbound {
    /// On-ledger request carrying a sealed payload.
    Send {
        to: ContractAddr,
        payload: Vec<u8>,
        step: u8,
        trade: Option<TradeId>,
        order: Option<OrderId>,
    },
    /// Cross-chain asset transfer.
    Transfer {
        to: ContractAddr,
        amount: u64,
        step: Option<u8>,
        trade: Option<TradeId>,
        kind: TransferKind,
    },
}

/// Something worth logging that happened inside the contract.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokerEvent {
    pub kind: EventType,
    pub trade: Option<TradeId>,
    pub order: Option<OrderId>,
    pub detail: String,
}

/// Result of a successfully processed inbound message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Handled {
    SellAdmitted(OrderId),
    BuyAdmitted(OrderId),
    Paid(TradeId),
    Relayed(TradeId),
    Scored(TradeId),
    OfferAccepted(Option<TradeId>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BrokerConfig {
    pub prices: PriceTable,
    pub padding: Padding,
    pub score_timeout: u64,
    pub payment_timeout: u64,
    pub delivery_timeout: u64,
    pub seller_choice: bool,
    /// Sensor types this broker serves; `None` serves all.
    pub serves: Option<Vec<SensorType>>,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            prices: PriceTable::default(),
            padding: Padding::default(),
            score_timeout: 5,
            payment_timeout: 10,
            delivery_timeout: 10,
            seller_choice: false,
            serves: None,
        }
    }
}

/// Faults the scenario injects at the broker.
#[derive(Debug, Clone, Default)]
struct Faults {
    stale_notice: BTreeSet<OrderId>,
    inflated_invoice: BTreeSet<OrderId>,
}

#[derive(Debug, Clone)]
struct PendingOffer {
    buys: Vec<OrderId>,
    sent_at: u64,
}

#[derive(Debug)]
pub struct Broker {
    address: ContractAddr,
    keys: KeyPair,
    state_key: SymmetricKey,
    trusted: TrustedIssuers,
    cfg: BrokerConfig,
    rng: ChaCha20Rng,

    sells: BTreeMap<OrderId, SellOrder>,
    buys: BTreeMap<OrderId, BuyOrder>,
    open_sells: BTreeSet<OrderId>,
    open_buys: BTreeSet<OrderId>,
    seen_nonces: BTreeSet<Nonce>,
    next_order: OrderId,

    offers: BTreeMap<OrderId, PendingOffer>,
    reserved: BTreeSet<OrderId>,

    trades: BTreeMap<TradeId, Trade>,
    by_seller_nonce: BTreeMap<Nonce, TradeId>,
    by_buyer_nonce: BTreeMap<Nonce, TradeId>,
    next_trade: u64,

    reputation: Reputation,
    escrow: u64,
    faults: Faults,

    outbox: Vec<Outbound>,
    events: Vec<BrokerEvent>,
    state_writes: Vec<(Vec<u8>, Vec<u8>)>,
}

impl Broker {
    /// `keys` is the broker key pair whose public half agents know;
    /// `state_seed` derives the validator-held key that seals contract state.
    pub fn new(
        address: ContractAddr,
        keys: KeyPair,
        trusted: TrustedIssuers,
        cfg: BrokerConfig,
        rng_seed: u64,
    ) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
        let state_key = SymmetricKey::random(&mut rng);
        Broker {
            address,
            keys,
            state_key,
            trusted,
            cfg,
            rng,
            sells: BTreeMap::new(),
            buys: BTreeMap::new(),
            open_sells: BTreeSet::new(),
            open_buys: BTreeSet::new(),
            seen_nonces: BTreeSet::new(),
            next_order: 0,
            offers: BTreeMap::new(),
            reserved: BTreeSet::new(),
            trades: BTreeMap::new(),
            by_seller_nonce: BTreeMap::new(),
            by_buyer_nonce: BTreeMap::new(),
            next_trade: 0,
            reputation: Reputation::default(),
            escrow: 0,
            faults: Faults::default(),
            outbox: Vec::new(),
            events: Vec::new(),
            state_writes: Vec::new(),
        }
    }

    /// Start trade ids at `base`, so several brokers never share an id.
    pub fn with_trade_id_base(mut self, base: u64) -> Self {
        self.next_trade = base;
        self
    }

    pub fn address(&self) -> ContractAddr {
        self.address
    }

    pub fn public_key(&self) -> PublicKey {
        self.keys.public
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.cfg
    }

    pub fn serves(&self, t: SensorType) -> bool {
        self.cfg.serves.as_ref().is_none_or(|s| s.contains(&t))
    }

    pub fn reputation(&self) -> &Reputation {
        &self.reputation
    }

    pub fn escrow(&self) -> u64 {
        self.escrow
    }

    pub fn trade(&self, id: TradeId) -> Option<&Trade> {
        self.trades.get(&id)
    }

    pub fn trades(&self) -> impl Iterator<Item = &Trade> {
        self.trades.values()
    }

    pub fn sell_order(&self, id: OrderId) -> Option<&SellOrder> {
        self.sells.get(&id)
    }

    pub fn buy_order(&self, id: OrderId) -> Option<&BuyOrder> {
        self.buys.get(&id)
    }

    pub fn open_orders(&self) -> (usize, usize) {
        (self.open_sells.len(), self.open_buys.len())
    }

    /// Trades or offers that still need the broker to act (or time out).
    pub fn has_pending_work(&self) -> bool {
        !self.offers.is_empty() || self.trades.values().any(|t| !t.state.is_terminal())
    }

    pub fn inject_stale_notice(&mut self, sell: OrderId) {
        self.faults.stale_notice.insert(sell);
    }

    pub fn inject_inflated_invoice(&mut self, buy: OrderId) {
        self.faults.inflated_invoice.insert(buy);
    }

    pub fn drain_events(&mut self) -> Vec<BrokerEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn drain_state_writes(&mut self) -> Vec<(Vec<u8>, Vec<u8>)> {
        std::mem::take(&mut self.state_writes)
    }

    /// Everything queued this epoch. With `batching`, the whole outbox is
    /// released as one uniformly shuffled batch.
    pub fn drain_outbox(&mut self, batching: bool) -> Vec<Outbound> {
        let mut out = std::mem::take(&mut self.outbox);
        if batching {
            out.shuffle(&mut self.rng);
        }
        out
    }

    fn log(&mut self, kind: EventType, trade: Option<TradeId>, order: Option<OrderId>, detail: String) {
        self.events.push(BrokerEvent {
            kind,
            trade,
            order,
            detail,
        });
    }

    fn seal(&mut self, to: &PublicKey, m: &[u8]) -> Ciphertext {
        hybrid_encrypt(to, m, &self.cfg.padding, &mut self.rng)
            .expect("broker messages are far below the largest bucket")
    }

    fn persist(&mut self, id: TradeId) {
        let t = &self.trades[&id];
        let sealed = sym_encrypt(&self.state_key, &encode(t), &mut self.rng);
        self.state_writes
            .push((format!("trade/{}", id.0).into_bytes(), sealed));
    }

    fn set_state(&mut self, id: TradeId, state: TradeState, now: u64) {
        let t = self.trades.get_mut(&id).expect("caller checked trade");
        t.state = state;
        t.state_since = now;
        self.log(EventType::TradeState, Some(id), None, state.name().to_string());
        self.persist(id);
    }

    fn trade_in(&self, id: TradeId, allowed: &[TradeState], op: &'static str) -> Result<&Trade, BrokerError> {
        let t = self.trades.get(&id).ok_or(BrokerError::UnknownTrade(id))?;
        if allowed.contains(&t.state) {
            Ok(t)
        } else {
            Err(BrokerError::StateError {
                trade: id,
                state: t.state,
                op,
            })
        }
    }

    fn open(&self, c: &[u8]) -> Result<BrokerMessage, BrokerError> {
        let plain = hybrid_decrypt(self.keys.secret(), &Ciphertext::from_bytes(c.to_vec()))
            .map_err(|_| BrokerError::DecryptFailure)?;
        decode(&plain).ok_or(BrokerError::Malformed)
    }

    fn claim_nonce(&mut self, n: Nonce) -> Result<(), BrokerError> {
        if !self.seen_nonces.insert(n) {
            return Err(BrokerError::DuplicateOrder);
        }
        Ok(())
    }

    /// Step 3 for a sealed sell request.
    pub fn handle_sell_request(&mut self, c: &[u8], origin: ContractAddr, now: u64) -> Result<OrderId, BrokerError> {
        match self.open(c)? {
            BrokerMessage::Sell(req) => self.admit_sell(req, origin, now),
            _ => Err(BrokerError::Malformed),
        }
    }

    /// Step 3 for a sealed buy request.
    pub fn handle_buy_request(&mut self, c: &[u8], origin: ContractAddr, now: u64) -> Result<OrderId, BrokerError> {
        match self.open(c)? {
            BrokerMessage::Buy(req) => self.admit_buy(req, origin, now),
            _ => Err(BrokerError::Malformed),
        }
    }

    fn admit_sell(&mut self, req: SellRequest, origin: ContractAddr, now: u64) -> Result<OrderId, BrokerError> {
        req.dd.validate()?;
        if !self.serves(req.dd.sensor_type) {
            return Err(BrokerError::SensorTypeNotServed(req.dd.sensor_type));
        }
        self.trusted.check(&req.cert, now, None).map_err(|e| match e {
            CertError::Expired => BrokerError::CertExpired,
            CertError::Invalid | CertError::NonceMismatch => BrokerError::CertInvalid,
        })?;
        if req.cert.sensor_type != req.dd.sensor_type {
            return Err(BrokerError::SensorTypeMismatch {
                dd: req.dd.sensor_type,
                cert: req.cert.sensor_type,
            });
        }
        if req.cert.location_cell != req.dd.region {
            return Err(BrokerError::RegionMismatch);
        }
        self.claim_nonce(req.seller_nonce)?;
        let id = self.next_order;
        self.next_order += 1;
        self.sells.insert(
            id,
            SellOrder {
                id,
                dd: req.dd,
                seller_nonce: req.seller_nonce,
                seller_key: req.seller_key,
                origin,
                admitted_at: now,
            },
        );
        self.open_sells.insert(id);
        self.log(EventType::OrderAdmitted, None, Some(id), "sell".into());
        Ok(id)
    }

    fn admit_buy(&mut self, req: BuyRequest, origin: ContractAddr, now: u64) -> Result<OrderId, BrokerError> {
        req.dd.validate()?;
        if !self.serves(req.dd.sensor_type) {
            return Err(BrokerError::SensorTypeNotServed(req.dd.sensor_type));
        }
        self.claim_nonce(req.buyer_nonce)?;
        let id = self.next_order;
        self.next_order += 1;
        self.buys.insert(
            id,
            BuyOrder {
                id,
                dd: req.dd,
                buyer_nonce: req.buyer_nonce,
                buyer_key: req.buyer_key,
                origin,
                admitted_at: now,
            },
        );
        self.open_buys.insert(id);
        self.log(EventType::OrderAdmitted, None, Some(id), "buy".into());
        Ok(id)
    }

    /// Dispatches an on-ledger request delivered to the broker contract.
    pub fn handle_inbound(
        &mut self,
        origin: ContractAddr,
        payload: &[u8],
        amount: u64,
        now: u64,
    ) -> Result<Handled, BrokerError> {
        let msg = match self.open(payload) {
            Ok(m) => m,
            Err(e) => {
                if amount > 0 {
                    self.refund_stray(origin, amount);
                }
                return Err(e);
            }
        };
        match msg {
            BrokerMessage::Sell(req) => self.admit_sell(req, origin, now).map(Handled::SellAdmitted),
            BrokerMessage::Buy(req) => self.admit_buy(req, origin, now).map(Handled::BuyAdmitted),
            BrokerMessage::Payment { trade_id } => {
                let r = self
                    .trade_in(trade_id, &[TradeState::Invoiced], "accept payment")
                    .and_then(|t| {
                        if self.buys[&t.buy].origin == origin {
                            Ok(())
                        } else {
                            Err(BrokerError::WrongOrigin(trade_id))
                        }
                    });
                if let Err(e) = r {
                    self.refund_stray(origin, amount);
                    return Err(e);
                }
                self.handle_payment(trade_id, amount, now)?;
                self.notify_seller(trade_id, now)?;
                Ok(Handled::Paid(trade_id))
            }
            BrokerMessage::Delivery { seller_nonce, sealed } => {
                let id = *self
                    .by_seller_nonce
                    .get(&seller_nonce)
                    .ok_or(BrokerError::UnknownNonce)?;
                if self.sells[&self.trades[&id].sell].origin != origin {
                    return Err(BrokerError::WrongOrigin(id));
                }
                self.relay_delivery(id, sealed, now)?;
                Ok(Handled::Relayed(id))
            }
            BrokerMessage::Score { buyer_nonce, score } => {
                let id = *self
                    .by_buyer_nonce
                    .get(&buyer_nonce)
                    .ok_or(BrokerError::UnknownNonce)?;
                if self.buys[&self.trades[&id].buy].origin != origin {
                    return Err(BrokerError::WrongOrigin(id));
                }
                self.handle_score(id, score, now)?;
                if self.trades[&id].state == TradeState::Scored {
                    self.settle(id, now)?;
                }
                Ok(Handled::Scored(id))
            }
            BrokerMessage::OfferReply { seller_nonce, choice } => {
                self.handle_offer_reply(seller_nonce, choice, origin, now)
                    .map(Handled::OfferAccepted)
            }
        }
    }

    /// Payment that cannot be attributed to a payable trade goes straight back.
    fn refund_stray(&mut self, origin: ContractAddr, amount: u64) {
        if amount == 0 {
            return;
        }
        self.log(EventType::TradeState, None, None, format!("stray payment of {amount} refunded"));
        self.outbox.push(Outbound::Transfer {
            to: origin,
            amount,
            step: None,
            trade: None,
            kind: TransferKind::Refund,
        });
    }

    /// Matches open orders and creates trades. With seller choice on, sends
    /// offers instead and creates trades when sellers reply.
    pub fn match_orders(&mut self, now: u64) -> Vec<TradeId> {
        if self.cfg.seller_choice {
            self.send_offers(now);
            return Vec::new();
        }
        let sells: Vec<&SellOrder> = self.open_sells.iter().map(|id| &self.sells[id]).collect();
        let buys: Vec<&BuyOrder> = self
            .open_buys
            .iter()
            .filter(|id| !self.reserved.contains(id))
            .map(|id| &self.buys[id])
            .collect();
        let pairs = greedy_match(&sells, &buys, &self.reputation);
        let mut created = Vec::new();
        for (b, s) in pairs {
            match self.create_trade(s, b, now) {
                Ok(id) => created.push(id),
                Err(e) => self.log(EventType::OrderRejected, None, Some(b), e.to_string()),
            }
        }
        created
    }

    fn create_trade(&mut self, sell: OrderId, buy: OrderId, now: u64) -> Result<TradeId, BrokerError> {
        let price = self.cfg.prices.price(&self.buys[&buy].dd)?;
        self.open_sells.remove(&sell);
        self.open_buys.remove(&buy);
        let id = TradeId(self.next_trade);
        self.next_trade += 1;
        self.by_seller_nonce.insert(self.sells[&sell].seller_nonce, id);
        self.by_buyer_nonce.insert(self.buys[&buy].buyer_nonce, id);
        self.trades.insert(
            id,
            Trade {
                id,
                sell,
                buy,
                price,
                state: TradeState::Matched,
                state_since: now,
                escrowed: 0,
                score: None,
            },
        );
        self.log(
            EventType::TradeMatched,
            Some(id),
            Some(sell),
            format!("sell order {sell} with buy order {buy}, price {price}"),
        );
        self.persist(id);
        Ok(id)
    }

    fn send_offers(&mut self, now: u64) {
        let sells: Vec<OrderId> = self
            .open_sells
            .iter()
            .filter(|id| !self.offers.contains_key(id))
            .copied()
            .collect();
        for s in sells {
            let candidates: Vec<OrderId> = self
                .open_buys
                .iter()
                .filter(|b| !self.reserved.contains(b) && compatible(&self.sells[&s].dd, &self.buys[b].dd))
                .take(MAX_OFFER_OPTIONS)
                .copied()
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let mut options = Vec::with_capacity(candidates.len());
            for (i, b) in candidates.iter().enumerate() {
                let dd = self.buys[b].dd.clone();
                let Ok(price) = self.cfg.prices.price(&dd) else {
                    continue;
                };
                options.push(OfferOption {
                    index: i as u32,
                    dd,
                    price,
                });
            }
            self.reserved.extend(candidates.iter().copied());
            let order = &self.sells[&s];
            let (to, key) = (order.origin, order.seller_key);
            let msg = SellerMessage::Offer {
                seller_nonce: order.seller_nonce,
                options,
            };
            let sealed = self.seal(&key, &encode(&msg));
            self.outbox.push(Outbound::Send {
                to,
                payload: sealed.into_bytes(),
                step: 3,
                trade: None,
                order: Some(s),
            });
            self.offers.insert(
                s,
                PendingOffer {
                    buys: candidates,
                    sent_at: now,
                },
            );
            self.log(EventType::TradeState, None, Some(s), "offer sent".into());
        }
    }

    fn handle_offer_reply(
        &mut self,
        seller_nonce: Nonce,
        choice: Option<u32>,
        origin: ContractAddr,
        now: u64,
    ) -> Result<Option<TradeId>, BrokerError> {
        let sell = self
            .offers
            .keys()
            .copied()
            .find(|s| self.sells[s].seller_nonce == seller_nonce)
            .ok_or(BrokerError::NoOffer)?;
        if self.sells[&sell].origin != origin {
            return Err(BrokerError::NoOffer);
        }
        let offer = self.offers.remove(&sell).expect("found above");
        for b in &offer.buys {
            self.reserved.remove(b);
        }
        let chosen = choice.and_then(|i| offer.buys.get(i as usize).copied());
        match chosen {
            Some(b) if self.open_buys.contains(&b) => {
                let id = self.create_trade(sell, b, now)?;
                self.issue_invoice(id, now)?;
                Ok(Some(id))
            }
            _ => {
                self.open_sells.remove(&sell);
                self.log(EventType::OrderRejected, None, Some(sell), "seller declined all offers".into());
                Ok(None)
            }
        }
    }

    /// Step 4: invoice sealed to the buyer key, sent on-ledger to the buyer
    /// contract.
    pub fn issue_invoice(&mut self, id: TradeId, now: u64) -> Result<Ciphertext, BrokerError> {
        let t = self.trade_in(id, &[TradeState::Matched], "invoice")?;
        let buy = &self.buys[&t.buy];
        let (to, key) = (buy.origin, buy.buyer_key);
        let mut price = t.price;
        if self.faults.inflated_invoice.contains(&t.buy) {
            price += 1;
        }
        let invoice = Invoice {
            trade_id: id,
            price,
            pay_to: self.address,
        };
        let sealed = self.seal(&key, &encode(&invoice));
        self.outbox.push(Outbound::Send {
            to,
            payload: sealed.as_bytes().to_vec(),
            step: 4,
            trade: Some(id),
            order: None,
        });
        self.set_state(id, TradeState::Invoiced, now);
        Ok(sealed)
    }

    /// Step 7 arrival. A wrong amount is refunded minus the refund's gas
    /// and leaves the trade invoiced.
    pub fn handle_payment(&mut self, id: TradeId, amount: u64, now: u64) -> Result<(), BrokerError> {
        let t = self.trade_in(id, &[TradeState::Invoiced], "accept payment")?;
        let (price, origin) = (t.price, self.buys[&t.buy].origin);
        if amount != price {
            self.outbox.push(Outbound::Transfer {
                to: origin,
                amount,
                step: None,
                trade: Some(id),
                kind: TransferKind::Refund,
            });
            self.log(EventType::TradeState, Some(id), None, format!("wrong amount {amount}, refunded"));
            return Err(BrokerError::WrongAmount {
                expected: price,
                got: amount,
            });
        }
        self.escrow += amount;
        self.trades.get_mut(&id).expect("checked").escrowed = amount;
        self.set_state(id, TradeState::Paid, now);
        Ok(())
    }

    /// Step 8: `(KU_buyer, ID_b, ID_s)` sealed to the seller key.
    pub fn notify_seller(&mut self, id: TradeId, now: u64) -> Result<Ciphertext, BrokerError> {
        let t = self.trade_in(id, &[TradeState::Paid], "notify seller")?;
        let (sell, buy) = (&self.sells[&t.sell], &self.buys[&t.buy]);
        let mut seller_nonce = sell.seller_nonce;
        if self.faults.stale_notice.contains(&t.sell) {
            // An ID_s captured from another trade, or a random one if none.
            seller_nonce = self
                .sells
                .values()
                .map(|s| s.seller_nonce)
                .find(|n| *n != sell.seller_nonce)
                .unwrap_or_else(|| Nonce::random(&mut ChaCha20Rng::seed_from_u64(id.0)));
        }
        let notice = SellerMessage::Notice(MatchNotice {
            buyer_key: buy.buyer_key,
            buyer_nonce: buy.buyer_nonce,
            seller_nonce,
        });
        let (to, key) = (sell.origin, sell.seller_key);
        let sealed = self.seal(&key, &encode(&notice));
        self.outbox.push(Outbound::Send {
            to,
            payload: sealed.as_bytes().to_vec(),
            step: 8,
            trade: Some(id),
            order: None,
        });
        self.set_state(id, TradeState::SellerNotified, now);
        Ok(sealed)
    }

    /// Step 13: forwards the buyer-sealed delivery unmodified.
    pub fn relay_delivery(&mut self, id: TradeId, c: Ciphertext, now: u64) -> Result<(), BrokerError> {
        let t = self.trade_in(id, &[TradeState::SellerNotified], "relay delivery")?;
        let to = self.buys[&t.buy].origin;
        self.outbox.push(Outbound::Send {
            to,
            payload: c.into_bytes(),
            step: 13,
            trade: Some(id),
            order: None,
        });
        self.set_state(id, TradeState::Delivered, now);
        Ok(())
    }

    /// Step 18, first half: record the score. A score arriving after a
    /// timeout settlement still counts for reputation.
    pub fn handle_score(&mut self, id: TradeId, score: u8, now: u64) -> Result<(), BrokerError> {
        let t = self.trade_in(id, &[TradeState::Delivered, TradeState::Settled], "record score")?;
        if score > MAX_SCORE {
            return Err(BrokerError::ScoreOutOfRange(score));
        }
        if t.score.is_some() {
            return Err(BrokerError::StateError {
                trade: id,
                state: t.state,
                op: "record a second score",
            });
        }
        let seller = self.sells[&t.sell].origin;
        let delivered = t.state == TradeState::Delivered;
        self.reputation.record(seller, score);
        self.trades.get_mut(&id).expect("checked").score = Some(score);
        self.log(EventType::ScoreRecorded, Some(id), None, score.to_string());
        if delivered {
            self.set_state(id, TradeState::Scored, now);
        } else {
            self.persist(id);
        }
        Ok(())
    }

    /// Step 18, second half: pay the seller out of escrow.
    pub fn settle(&mut self, id: TradeId, now: u64) -> Result<(), BrokerError> {
        let t = self.trade_in(id, &[TradeState::Delivered, TradeState::Scored], "settle")?;
        let (to, amount) = (self.sells[&t.sell].origin, t.escrowed);
        self.outbox.push(Outbound::Transfer {
            to,
            amount,
            step: Some(18),
            trade: Some(id),
            kind: TransferKind::Settlement,
        });
        self.escrow -= amount;
        self.trades.get_mut(&id).expect("checked").escrowed = 0;
        self.set_state(id, TradeState::Settled, now);
        Ok(())
    }

    /// Timeouts, then matching and invoicing. Called once per epoch after
    /// all inbound messages were handled.
    pub fn end_epoch(&mut self, now: u64) -> Vec<TradeId> {
        let ids: Vec<TradeId> = self.trades.keys().copied().collect();
        for id in ids {
            let t = &self.trades[&id];
            let waited = now.saturating_sub(t.state_since);
            match t.state {
                TradeState::Delivered if waited >= self.cfg.score_timeout => {
                    self.log(EventType::TradeState, Some(id), None, "score timeout".into());
                    self.settle(id, now).expect("delivered trades settle");
                }
                TradeState::Invoiced if waited >= self.cfg.payment_timeout => {
                    self.set_state(id, TradeState::Expired, now);
                }
                TradeState::SellerNotified if waited >= self.cfg.delivery_timeout => {
                    let (to, amount) = (self.buys[&t.buy].origin, t.escrowed);
                    self.outbox.push(Outbound::Transfer {
                        to,
                        amount,
                        step: None,
                        trade: Some(id),
                        kind: TransferKind::Refund,
                    });
                    self.escrow -= amount;
                    self.trades.get_mut(&id).expect("exists").escrowed = 0;
                    self.set_state(id, TradeState::Expired, now);
                }
                _ => {}
            }
        }

        let stale: Vec<OrderId> = self
            .offers
            .iter()
            .filter(|(_, o)| now.saturating_sub(o.sent_at) >= self.cfg.payment_timeout)
            .map(|(s, _)| *s)
            .collect();
        for s in stale {
            let o = self.offers.remove(&s).expect("listed");
            for b in o.buys {
                self.reserved.remove(&b);
            }
            self.open_sells.remove(&s);
            self.log(EventType::OrderRejected, None, Some(s), "offer timed out".into());
        }

        let created = self.match_orders(now);
        for &id in &created {
            self.issue_invoice(id, now).expect("fresh trade is matched");
        }
        created
    }
}
