//! Seller and buyer wallets.
//!
//! Each agent owns one contract on its side's chain and talks to it only
//! with off-ledger requests. Everything the agent sends towards the broker
//! is sealed first; the contract just forwards it. A fresh key pair and
//! nonce is generated for every trade.
//!
//! Agents run their trades one after another: the next session starts
//! once the current one is finished or aborted.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blobstore::{BlobError, BlobStore, ContentAddress};
use crate::broker::PriceTable;
use crate::ca::Certificate;
use crate::crypto::{
    hybrid_decrypt, hybrid_encrypt, keygen, sym_decrypt, sym_encrypt, Ciphertext, KeyPair, Nonce,
    Padding, PublicKey, SymmetricKey,
};
use crate::ledger::{AgentId, ContractAddr, OffLedgerRequest};
use crate::protocol::{
    decode, encode, BrokerMessage, BuyRequest, ContractCall, DataDescription, Delivery, Invoice,
    MatchNotice, OfferOption, SellRequest, SellerMessage, SensorData, SensorType, TradeId,
};

/// Score for data that matches the buyer's description.
pub const GOOD_SCORE: u8 = 100;
/// Score for anything else, including data that cannot be decrypted.
pub const BAD_SCORE: u8 = 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AgentError {
    #[error("certificate expired; refusing to start a trade")]
    CertExpiredLocally,
    #[error("nonce in message does not match this trade")]
    NonceMismatch,
    #[error("cannot decrypt message")]
    DecryptFailure,
    #[error("message is malformed")]
    Malformed,
    #[error("invoice asks {invoiced}, public price is {expected}")]
    PriceMismatch { expected: u64, invoiced: u64 },
    #[error("balance {available} cannot cover {needed}")]
    InsufficientFunds { needed: u64, available: u64 },
    #[error("storage failure: {0}")]
    StorageFailure(#[from] BlobError),
    #[error("no trade in progress")]
    NoActiveTrade,
    #[error("unexpected message in state {0}")]
    UnexpectedMessage(&'static str),
    #[error("agent is busy with another trade")]
    Busy,
}

/// Scenario-level misbehaviour attached to one agent's trade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Buyer never sends a score (skips steps 16 and 17).
    SilentBuyer,
    /// Seller puts a wrong data key into the delivery.
    BogusKey,
    /// The seller's match notice carries an `ID_s` from another trade.
    StaleNonce,
    /// An adversary replays the seller's sell request ciphertext.
    ReplaySell,
    /// The broker invoices one unit above the public price.
    InflatedInvoice,
}

impl Fault {
    pub fn applies_to_seller(self) -> bool {
        matches!(self, Fault::BogusKey | Fault::StaleNonce | Fault::ReplaySell)
    }
}

/// Uniform readings inside the type's plausible range.
pub fn synth_readings<R: Rng>(t: SensorType, n: usize, rng: &mut R) -> Vec<f32> {
    let (lo, hi) = t.plausible_range();
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

/// 100 if the data has the wanted type and at least the wanted volume.
pub fn score_data(wanted: &DataDescription, data: Option<&SensorData>) -> u8 {
    match data {
        Some(d) if d.sensor_type == wanted.sensor_type && d.readings.len() as u64 >= wanted.volume => {
            GOOD_SCORE
        }
        _ => BAD_SCORE,
    }
}

/// A request for the agent's own contract, tagged with its protocol step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outgoing {
    pub step: u8,
    pub request: OffLedgerRequest,
}

/// Freshly generated per-trade identity, for the global freshness check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionStart {
    pub session: u32,
    pub public_key: PublicKey,
    pub nonce: Nonce,
}

fn forward(contract: ContractAddr, to: ContractAddr, sealed: Ciphertext) -> OffLedgerRequest {
    OffLedgerRequest {
        target: contract,
        payload: encode(&ContractCall::Forward {
            to,
            payload: sealed.into_bytes(),
        }),
    }
}

fn open<T: for<'de> Deserialize<'de>>(keys: &KeyPair, c: &[u8]) -> Result<T, AgentError> {
    let plain = hybrid_decrypt(keys.secret(), &Ciphertext::from_bytes(c.to_vec()))
        .map_err(|_| AgentError::DecryptFailure)?;
    decode(&plain).ok_or(AgentError::Malformed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SellerState {
    Idle,
    Requested,
    Notified,
    Stored,
    DeliverySent,
    Settled,
    Aborted,
}

impl SellerState {
    fn name(self) -> &'static str {
        match self {
            SellerState::Idle => "idle",
            SellerState::Requested => "requested",
            SellerState::Notified => "notified",
            SellerState::Stored => "stored",
            SellerState::DeliverySent => "delivery_sent",
            SellerState::Settled => "settled",
            SellerState::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SellerSession {
    pub index: u32,
    keys: KeyPair,
    pub nonce: Nonce,
    pub dd: DataDescription,
    pub data: SensorData,
    pub state: SellerState,
    buyer: Option<(PublicKey, Nonce)>,
    pub data_key: Option<SymmetricKey>,
    pub blob: Option<ContentAddress>,
    pub credited: u64,
}

impl SellerSession {
    pub fn public_key(&self) -> PublicKey {
        self.keys.public
    }

    pub fn buyer(&self) -> Option<(PublicKey, Nonce)> {
        self.buyer
    }
}

#[derive(Debug)]
pub struct SellerAgent {
    pub id: AgentId,
    pub contract: ContractAddr,
    broker: ContractAddr,
    broker_key: PublicKey,
    padding: Padding,
    cert: Certificate,
    faults: BTreeSet<(Fault, u32)>,
    rng: ChaCha20Rng,
    sessions: Vec<SellerSession>,
}

impl SellerAgent {
    pub fn new(
        id: AgentId,
        contract: ContractAddr,
        broker: (ContractAddr, PublicKey),
        cert: Certificate,
        padding: Padding,
        rng_seed: u64,
    ) -> Self {
        SellerAgent {
            id,
            contract,
            broker: broker.0,
            broker_key: broker.1,
            padding,
            cert,
            faults: BTreeSet::new(),
            rng: ChaCha20Rng::seed_from_u64(rng_seed),
            sessions: Vec::new(),
        }
    }

    pub fn add_fault(&mut self, fault: Fault, trade: u32) {
        self.faults.insert((fault, trade));
    }

    fn has_fault(&self, fault: Fault) -> bool {
        self.current()
            .is_some_and(|s| self.faults.contains(&(fault, s.index)))
    }

    pub fn certificate(&self) -> &Certificate {
        &self.cert
    }

    pub fn sessions(&self) -> &[SellerSession] {
        &self.sessions
    }

    pub fn current(&self) -> Option<&SellerSession> {
        self.sessions.last()
    }

    fn current_mut(&mut self) -> Result<&mut SellerSession, AgentError> {
        self.sessions.last_mut().ok_or(AgentError::NoActiveTrade)
    }

    pub fn state(&self) -> SellerState {
        self.current().map_or(SellerState::Idle, |s| s.state)
    }

    /// True when a new trade may begin.
    pub fn is_idle(&self) -> bool {
        matches!(
            self.state(),
            SellerState::Idle | SellerState::Settled | SellerState::Aborted
        )
    }

    /// Step 1, seller side.
    pub fn start_trade(&mut self, dd: DataDescription, now: u64) -> Result<(Outgoing, SessionStart), AgentError> {
        if !self.is_idle() {
            return Err(AgentError::Busy);
        }
        if self.cert.is_expired(now) {
            return Err(AgentError::CertExpiredLocally);
        }
        let keys = keygen(&mut self.rng);
        let nonce = Nonce::random(&mut self.rng);
        let readings = synth_readings(dd.sensor_type, dd.volume as usize, &mut self.rng);
        let req = BrokerMessage::Sell(SellRequest {
            dd: dd.clone(),
            cert: self.cert.clone(),
            seller_nonce: nonce,
            seller_key: keys.public,
        });
        let sealed = hybrid_encrypt(&self.broker_key, &encode(&req), &self.padding, &mut self.rng)
            .expect("sell request fits the default buckets");
        let index = self.sessions.len() as u32;
        let start = SessionStart {
            session: index,
            public_key: keys.public,
            nonce,
        };
        self.sessions.push(SellerSession {
            index,
            keys,
            nonce,
            data: SensorData {
                sensor_type: dd.sensor_type,
                readings,
            },
            dd,
            state: SellerState::Requested,
            buyer: None,
            data_key: None,
            blob: None,
            credited: 0,
        });
        Ok((
            Outgoing {
                step: 1,
                request: forward(self.contract, self.broker, sealed),
            },
            start,
        ))
    }

    /// Any sealed message the seller contract passed up.
    pub fn on_message(&mut self, c: &[u8]) -> Result<Option<Outgoing>, AgentError> {
        let s = self.current().ok_or(AgentError::NoActiveTrade)?;
        match open::<SellerMessage>(&s.keys, c)? {
            SellerMessage::Notice(n) => {
                self.accept_notice(n)?;
                Ok(None)
            }
            SellerMessage::Offer { seller_nonce, options } => self.choose_offer(seller_nonce, &options).map(Some),
        }
    }

    /// Step 10, first half: decrypt the notice and check `ID_s`.
    pub fn handle_notice(&mut self, c: &[u8]) -> Result<(), AgentError> {
        let s = self.current().ok_or(AgentError::NoActiveTrade)?;
        match open::<SellerMessage>(&s.keys, c)? {
            SellerMessage::Notice(n) => self.accept_notice(n),
            SellerMessage::Offer { .. } => Err(AgentError::UnexpectedMessage("requested")),
        }
    }

    fn accept_notice(&mut self, n: MatchNotice) -> Result<(), AgentError> {
        let s = self.current_mut()?;
        if s.state != SellerState::Requested {
            return Err(AgentError::UnexpectedMessage(s.state.name()));
        }
        if n.seller_nonce != s.nonce {
            s.state = SellerState::Aborted;
            return Err(AgentError::NonceMismatch);
        }
        s.buyer = Some((n.buyer_key, n.buyer_nonce));
        s.state = SellerState::Notified;
        Ok(())
    }

    /// Seller choice: take the option with the largest volume.
    fn choose_offer(&mut self, seller_nonce: Nonce, options: &[OfferOption]) -> Result<Outgoing, AgentError> {
        let s = self.current().ok_or(AgentError::NoActiveTrade)?;
        if s.state != SellerState::Requested {
            return Err(AgentError::UnexpectedMessage(s.state.name()));
        }
        if seller_nonce != s.nonce {
            return Err(AgentError::NonceMismatch);
        }
        let choice = options
            .iter()
            .filter(|o| o.dd.volume <= s.dd.volume)
            .max_by_key(|o| (o.dd.volume, std::cmp::Reverse(o.index)))
            .map(|o| o.index);
        let reply = BrokerMessage::OfferReply { seller_nonce, choice };
        let sealed = hybrid_encrypt(&self.broker_key, &encode(&reply), &self.padding, &mut self.rng)
            .expect("reply fits");
        Ok(Outgoing {
            step: 3,
            request: forward(self.contract, self.broker, sealed),
        })
    }

    /// Steps 10 and 11: encrypt the data under a fresh `K_s`, store it, and
    /// send `(ID_b, address, K_s)` sealed to the buyer, wrapped for the
    /// broker.
    pub fn deliver(&mut self, store: &mut BlobStore) -> Result<Outgoing, AgentError> {
        let bogus = self.has_fault(Fault::BogusKey);
        let (broker_key, contract, broker) = (self.broker_key, self.contract, self.broker);
        let padding = self.padding.clone();
        let mut rng = ChaCha20Rng::from_rng(&mut self.rng).expect("chacha reseed");
        let s = self.current_mut()?;
        if s.state != SellerState::Notified {
            return Err(AgentError::UnexpectedMessage(s.state.name()));
        }
        let (buyer_key, buyer_nonce) = s.buyer.expect("notified sessions know the buyer");
        let k = SymmetricKey::random(&mut rng);
        let blob = sym_encrypt(&k, &s.data.to_bytes(), &mut rng);
        let address = store.put(&blob)?;
        s.data_key = Some(k.clone());
        s.blob = Some(address);
        s.state = SellerState::Stored;

        let data_key = if bogus { SymmetricKey::random(&mut rng) } else { k };
        let delivery = Delivery {
            buyer_nonce,
            address,
            data_key,
        };
        let inner = hybrid_encrypt(&buyer_key, &encode(&delivery), &padding, &mut rng).expect("delivery fits");
        let outer = BrokerMessage::Delivery {
            seller_nonce: s.nonce,
            sealed: inner,
        };
        let sealed = hybrid_encrypt(&broker_key, &encode(&outer), &padding, &mut rng).expect("envelope fits");
        s.state = SellerState::DeliverySent;
        Ok(Outgoing {
            step: 11,
            request: forward(contract, broker, sealed),
        })
    }

    /// Settlement arrived at the seller contract.
    pub fn on_credit(&mut self, amount: u64) {
        if let Some(s) = self.sessions.last_mut() {
            s.credited += amount;
            if s.state == SellerState::DeliverySent {
                s.state = SellerState::Settled;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuyerState {
    Idle,
    Requested,
    Invoiced,
    Paid,
    Received,
    Scored,
    Aborted,
}

impl BuyerState {
    fn name(self) -> &'static str {
        match self {
            BuyerState::Idle => "idle",
            BuyerState::Requested => "requested",
            BuyerState::Invoiced => "invoiced",
            BuyerState::Paid => "paid",
            BuyerState::Received => "received",
            BuyerState::Scored => "scored",
            BuyerState::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuyerSession {
    pub index: u32,
    keys: KeyPair,
    pub nonce: Nonce,
    pub dd: DataDescription,
    pub state: BuyerState,
    pub trade: Option<TradeId>,
    pub paid: u64,
    pending: Option<(Delivery, u64)>,
    pub received: Option<Vec<u8>>,
    pub score: Option<u8>,
}

impl BuyerSession {
    pub fn public_key(&self) -> PublicKey {
        self.keys.public
    }
}

/// What a buyer did with a delivery.
#[derive(Debug, Clone, PartialEq)]
pub enum DeliveryOutcome {
    /// Data is not retrievable until the given epoch.
    Waiting(u64),
    /// Data fetched (or found undecryptable) and scored.
    Scored { score: u8, outgoing: Option<Outgoing>, error: Option<AgentError> },
}

#[derive(Debug)]
pub struct BuyerAgent {
    pub id: AgentId,
    pub contract: ContractAddr,
    broker: ContractAddr,
    broker_key: PublicKey,
    padding: Padding,
    prices: PriceTable,
    faults: BTreeSet<(Fault, u32)>,
    rng: ChaCha20Rng,
    sessions: Vec<BuyerSession>,
}

impl BuyerAgent {
    pub fn new(
        id: AgentId,
        contract: ContractAddr,
        broker: (ContractAddr, PublicKey),
        prices: PriceTable,
        padding: Padding,
        rng_seed: u64,
    ) -> Self {
        BuyerAgent {
            id,
            contract,
            broker: broker.0,
            broker_key: broker.1,
            padding,
            prices,
            faults: BTreeSet::new(),
            rng: ChaCha20Rng::seed_from_u64(rng_seed),
            sessions: Vec::new(),
        }
    }

    pub fn add_fault(&mut self, fault: Fault, trade: u32) {
        self.faults.insert((fault, trade));
    }

    pub fn sessions(&self) -> &[BuyerSession] {
        &self.sessions
    }

    pub fn current(&self) -> Option<&BuyerSession> {
        self.sessions.last()
    }

    fn current_mut(&mut self) -> Result<&mut BuyerSession, AgentError> {
        self.sessions.last_mut().ok_or(AgentError::NoActiveTrade)
    }

    pub fn state(&self) -> BuyerState {
        self.current().map_or(BuyerState::Idle, |s| s.state)
    }

    pub fn is_idle(&self) -> bool {
        matches!(
            self.state(),
            BuyerState::Idle | BuyerState::Scored | BuyerState::Aborted
        ) || (self.state() == BuyerState::Received && self.is_silent())
    }

    fn is_silent(&self) -> bool {
        self.current()
            .is_some_and(|s| self.faults.contains(&(Fault::SilentBuyer, s.index)))
    }

    /// Step 1, buyer side.
    pub fn start_trade(&mut self, dd: DataDescription, balance: u64) -> Result<(Outgoing, SessionStart), AgentError> {
        if !self.is_idle() {
            return Err(AgentError::Busy);
        }
        if balance == 0 {
            return Err(AgentError::InsufficientFunds {
                needed: 1,
                available: 0,
            });
        }
        let keys = keygen(&mut self.rng);
        let nonce = Nonce::random(&mut self.rng);
        let req = BrokerMessage::Buy(BuyRequest {
            dd: dd.clone(),
            buyer_nonce: nonce,
            buyer_key: keys.public,
        });
        let sealed = hybrid_encrypt(&self.broker_key, &encode(&req), &self.padding, &mut self.rng)
            .expect("buy request fits");
        let index = self.sessions.len() as u32;
        let start = SessionStart {
            session: index,
            public_key: keys.public,
            nonce,
        };
        self.sessions.push(BuyerSession {
            index,
            keys,
            nonce,
            dd,
            state: BuyerState::Requested,
            trade: None,
            paid: 0,
            pending: None,
            received: None,
            score: None,
        });
        Ok((
            Outgoing {
                step: 1,
                request: forward(self.contract, self.broker, sealed),
            },
            start,
        ))
    }

    /// Step 6: check the invoice against the public price table and, if it
    /// is right, tell the contract to pay.
    pub fn handle_invoice(&mut self, c: &[u8], balance: u64, gas: u64) -> Result<Outgoing, AgentError> {
        let s = self.current().ok_or(AgentError::NoActiveTrade)?;
        if s.state != BuyerState::Requested {
            return Err(AgentError::UnexpectedMessage(s.state.name()));
        }
        let invoice: Invoice = open(&s.keys, c)?;
        let expected = self.prices.price(&s.dd).map_err(|_| AgentError::Malformed)?;
        let s = self.current_mut()?;
        s.trade = Some(invoice.trade_id);
        s.state = BuyerState::Invoiced;
        if invoice.price != expected {
            s.state = BuyerState::Aborted;
            return Err(AgentError::PriceMismatch {
                expected,
                invoiced: invoice.price,
            });
        }
        if balance < expected + gas {
            s.state = BuyerState::Aborted;
            return Err(AgentError::InsufficientFunds {
                needed: expected + gas,
                available: balance,
            });
        }
        let memo = BrokerMessage::Payment {
            trade_id: invoice.trade_id,
        };
        let sealed = hybrid_encrypt(&self.broker_key, &encode(&memo), &self.padding, &mut self.rng)
            .expect("memo fits");
        let s = self.current_mut()?;
        s.paid = expected;
        s.state = BuyerState::Paid;
        Ok(Outgoing {
            step: 6,
            request: OffLedgerRequest {
                target: self.contract,
                payload: encode(&ContractCall::Pay {
                    to: invoice.pay_to,
                    amount: expected,
                    memo: sealed.into_bytes(),
                }),
            },
        })
    }

    /// Step 15, first half: open the delivery and note when the blob can be
    /// fetched.
    pub fn accept_delivery(&mut self, c: &[u8], ready_at: u64) -> Result<(), AgentError> {
        let s = self.current_mut()?;
        if s.state != BuyerState::Paid || s.pending.is_some() {
            return Err(AgentError::UnexpectedMessage(s.state.name()));
        }
        let delivery: Delivery = open(&s.keys, c)?;
        if delivery.buyer_nonce != s.nonce {
            s.state = BuyerState::Aborted;
            return Err(AgentError::NonceMismatch);
        }
        s.pending = Some((delivery, ready_at));
        Ok(())
    }

    /// Step 15, second half: fetch and decrypt the data.
    pub fn fetch(&mut self, store: &BlobStore) -> Result<Vec<u8>, AgentError> {
        let s = self.current_mut()?;
        let (delivery, _) = s.pending.take().ok_or(AgentError::UnexpectedMessage(s.state.name()))?;
        s.state = BuyerState::Received;
        let blob = store.get(&delivery.address)?;
        let plain = sym_decrypt(&delivery.data_key, blob).map_err(|_| AgentError::DecryptFailure)?;
        s.received = Some(plain.clone());
        Ok(plain)
    }

    /// Steps 14 and 15 in one go, for stores without latency.
    pub fn handle_delivery(&mut self, c: &[u8], store: &BlobStore) -> Result<Vec<u8>, AgentError> {
        self.accept_delivery(c, 0)?;
        self.fetch(store)
    }

    /// Epoch at which a pending blob becomes available.
    pub fn fetch_due(&self) -> Option<u64> {
        self.current().and_then(|s| s.pending.as_ref().map(|(_, at)| *at))
    }

    /// Fetch if due, then score.
    pub fn poll(&mut self, now: u64, store: &BlobStore) -> Option<DeliveryOutcome> {
        let due = self.fetch_due()?;
        if now < due {
            return Some(DeliveryOutcome::Waiting(due));
        }
        let (data, error) = match self.fetch(store) {
            Ok(bytes) => (SensorData::from_bytes(&bytes), None),
            Err(e) => (None, Some(e)),
        };
        let dd = self.current().expect("fetched").dd.clone();
        let score = score_data(&dd, data.as_ref());
        let outgoing = self.score(score).ok().flatten();
        Some(DeliveryOutcome::Scored {
            score,
            outgoing,
            error,
        })
    }

    /// Step 16. Returns `None` for a silent buyer.
    pub fn score(&mut self, score: u8) -> Result<Option<Outgoing>, AgentError> {
        let silent = self.is_silent();
        let s = self.current_mut()?;
        if s.state != BuyerState::Received {
            return Err(AgentError::UnexpectedMessage(s.state.name()));
        }
        s.score = Some(score);
        if silent {
            return Ok(None);
        }
        s.state = BuyerState::Scored;
        let msg = BrokerMessage::Score {
            buyer_nonce: s.nonce,
            score,
        };
        let sealed = hybrid_encrypt(&self.broker_key, &encode(&msg), &self.padding, &mut self.rng)
            .expect("score fits");
        Ok(Some(Outgoing {
            step: 16,
            request: forward(self.contract, self.broker, sealed),
        }))
    }

    /// A refund arrived; the trade is over for this buyer.
    pub fn on_refund(&mut self) {
        if let Some(s) = self.sessions.last_mut() {
            if matches!(s.state, BuyerState::Paid | BuyerState::Requested) {
                s.state = BuyerState::Aborted;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ca::{CertificateAuthority, EnrollmentRequest};
    use crate::ledger::ChainId;
    use crate::protocol::{RegionCell, TimeWindow};

    const BROKER: ContractAddr = ContractAddr {
        chain: ChainId(2),
        slot: 0,
    };

    fn dd(volume: u64) -> DataDescription {
        DataDescription {
            sensor_type: SensorType::AirQuality,
            region: RegionCell::new("hx-77"),
            volume,
            time_window: TimeWindow { start: 0, end: 50 },
        }
    }

    fn seller(validity: u64) -> (SellerAgent, KeyPair) {
        let mut ca = CertificateAuthority::from_seeds(&[3]);
        let cert = ca
            .issue_certificate(
                0,
                &EnrollmentRequest {
                    claimed_location: RegionCell::new("hx-77"),
                    sensor_type: SensorType::AirQuality,
                    sample_data: vec![10.0, 20.0],
                    nonce: Nonce([9; 16]),
                },
                0,
                validity,
            )
            .unwrap();
        let broker = KeyPair::from_seed(1);
        let agent = SellerAgent::new(
            AgentId::seller(0),
            ContractAddr { chain: ChainId(0), slot: 0 },
            (BROKER, broker.public),
            cert,
            Padding::default(),
            42,
        );
        (agent, broker)
    }

    fn buyer() -> (BuyerAgent, KeyPair) {
        let broker = KeyPair::from_seed(1);
        let agent = BuyerAgent::new(
            AgentId::buyer(0),
            ContractAddr { chain: ChainId(1), slot: 0 },
            (BROKER, broker.public),
            PriceTable::default(),
            Padding::default(),
            43,
        );
        (agent, broker)
    }

    fn unwrap_forward(req: &OffLedgerRequest) -> Vec<u8> {
        match decode::<ContractCall>(&req.payload).unwrap() {
            ContractCall::Forward { to, payload } => {
                assert_eq!(to, BROKER);
                payload
            }
            other => panic!("expected forward, got {other:?}"),
        }
    }

    fn notice_for(s: &SellerSession, buyer: &KeyPair, buyer_nonce: Nonce, seller_nonce: Nonce) -> Vec<u8> {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        hybrid_encrypt(
            &s.public_key(),
            &encode(&SellerMessage::Notice(MatchNotice {
                buyer_key: buyer.public,
                buyer_nonce,
                seller_nonce,
            })),
            &Padding::default(),
            &mut rng,
        )
        .unwrap()
        .into_bytes()
    }

    #[test]
    fn seller_keys_are_fresh_per_trade() {
        let (mut s, broker) = seller(100);
        let (out, a) = s.start_trade(dd(5), 0).unwrap();
        let sealed = unwrap_forward(&out.request);
        assert!(Padding::default().admits(sealed.len()));
        let msg: BrokerMessage = decode(&hybrid_decrypt(broker.secret(), &Ciphertext::from_bytes(sealed)).unwrap()).unwrap();
        assert!(matches!(msg, BrokerMessage::Sell(ref r) if r.seller_nonce == a.nonce && r.seller_key == a.public_key));
        assert_eq!(s.start_trade(dd(5), 0).unwrap_err(), AgentError::Busy);
        s.sessions.last_mut().unwrap().state = SellerState::Settled;
        let (_, b) = s.start_trade(dd(5), 1).unwrap();
        assert_ne!(a.public_key, b.public_key);
        assert_ne!(a.nonce, b.nonce);
    }

    #[test]
    fn expired_certificate_refused_locally() {
        let (mut s, _) = seller(10);
        assert_eq!(s.start_trade(dd(5), 10).unwrap_err(), AgentError::CertExpiredLocally);
        assert!(s.sessions().is_empty());
    }

    #[test]
    fn notice_nonce_checks() {
        let (mut s, _) = seller(100);
        let buyer_keys = KeyPair::from_seed(77);
        s.start_trade(dd(5), 0).unwrap();
        assert_eq!(s.handle_notice(&[7u8; 256]), Err(AgentError::DecryptFailure));
        let own = s.current().unwrap().nonce;
        let stale = notice_for(s.current().unwrap(), &buyer_keys, Nonce([1; 16]), Nonce([2; 16]));
        assert_eq!(s.handle_notice(&stale), Err(AgentError::NonceMismatch));
        assert_eq!(s.state(), SellerState::Aborted);

        s.start_trade(dd(5), 0).unwrap();
        let own2 = s.current().unwrap().nonce;
        assert_ne!(own, own2);
        // A notice carrying the previous trade's ID_s is rejected too.
        let replay = notice_for(s.current().unwrap(), &buyer_keys, Nonce([1; 16]), own);
        assert_eq!(s.handle_notice(&replay), Err(AgentError::NonceMismatch));
    }

    #[test]
    fn end_to_end_agent_exchange() {
        let (mut s, broker) = seller(100);
        let (mut b, _) = buyer();
        let mut store = BlobStore::default();
        s.start_trade(dd(12), 0).unwrap();
        b.start_trade(dd(10), 1_000).unwrap();
        let bs = b.current().unwrap().clone();
        let n = notice_for(s.current().unwrap(), &bs.keys, bs.nonce, s.current().unwrap().nonce);
        s.handle_notice(&n).unwrap();
        assert_eq!(s.current().unwrap().buyer(), Some((bs.public_key(), bs.nonce)));

        let out = s.deliver(&mut store).unwrap();
        assert_eq!(out.step, 11);
        let envelope = unwrap_forward(&out.request);
        let BrokerMessage::Delivery { sealed, .. } =
            decode(&hybrid_decrypt(broker.secret(), &Ciphertext::from_bytes(envelope)).unwrap()).unwrap()
        else {
            panic!()
        };
        // The inner message is exactly (ID_b, address, K_s).
        let inner: Delivery = decode(&hybrid_decrypt(bs.keys.secret(), &sealed).unwrap()).unwrap();
        let ss = s.current().unwrap();
        assert_eq!(inner.buyer_nonce, bs.nonce);
        assert_eq!(Some(inner.address), ss.blob);
        assert_eq!(Some(inner.data_key), ss.data_key);
        // Only ciphertext went to storage.
        let stored = store.get(&inner.address).unwrap();
        assert!(SensorData::from_bytes(stored).is_none());

        // Invoice, payment, delivery, score.
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let price = 20 * 10;
        let inv = hybrid_encrypt(
            &bs.public_key(),
            &encode(&Invoice { trade_id: TradeId(3), price, pay_to: BROKER }),
            &Padding::default(),
            &mut rng,
        )
        .unwrap();
        let pay = b.handle_invoice(inv.as_bytes(), 1_000, 1).unwrap();
        assert!(matches!(
            decode::<ContractCall>(&pay.request.payload).unwrap(),
            ContractCall::Pay { amount, to, .. } if amount == price && to == BROKER
        ));
        let data = b.handle_delivery(sealed.as_bytes(), &store).unwrap();
        assert_eq!(data, ss.data.to_bytes());
        let scored = b.score(score_data(&bs.dd, SensorData::from_bytes(&data).as_ref())).unwrap();
        assert!(scored.is_some());
        assert_eq!(b.current().unwrap().score, Some(GOOD_SCORE));
    }

    #[test]
    fn invoice_checks() {
        let (mut b, _) = buyer();
        b.start_trade(dd(10), 500).unwrap();
        let pk = b.current().unwrap().public_key();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut invoice = |price| {
            hybrid_encrypt(&pk, &encode(&Invoice { trade_id: TradeId(0), price, pay_to: BROKER }), &Padding::default(), &mut rng)
                .unwrap()
                .into_bytes()
        };
        // Oracle: 20 per unit for air quality, 10 units.
        let oracle = PriceTable::default().basic_price(SensorType::AirQuality).unwrap() * 10;
        let inflated = invoice(oracle + 1);
        let fair = invoice(oracle);
        assert_eq!(
            b.handle_invoice(&inflated, 500, 1),
            Err(AgentError::PriceMismatch { expected: oracle, invoiced: oracle + 1 })
        );

        let (mut b, _) = buyer();
        b.start_trade(dd(10), 500).unwrap();
        let fair_for_new = {
            let pk = b.current().unwrap().public_key();
            hybrid_encrypt(&pk, &encode(&Invoice { trade_id: TradeId(0), price: oracle, pay_to: BROKER }), &Padding::default(), &mut ChaCha20Rng::seed_from_u64(1))
                .unwrap()
                .into_bytes()
        };
        assert_eq!(
            b.handle_invoice(&fair_for_new, 150, 1),
            Err(AgentError::InsufficientFunds { needed: 201, available: 150 })
        );
        assert!(b.handle_invoice(&fair, 500, 1).is_err());
    }

    #[test]
    fn bogus_key_scores_zero_and_silent_buyer_stays_quiet() {
        let (mut s, _) = seller(100);
        s.add_fault(Fault::BogusKey, 0);
        let (mut b, _) = buyer();
        b.add_fault(Fault::SilentBuyer, 0);
        let mut store = BlobStore::default();
        s.start_trade(dd(10), 0).unwrap();
        b.start_trade(dd(10), 1).unwrap();
        let bs = b.current().unwrap().clone();
        let n = notice_for(s.current().unwrap(), &bs.keys, bs.nonce, s.current().unwrap().nonce);
        s.handle_notice(&n).unwrap();
        b.sessions.last_mut().unwrap().state = BuyerState::Paid;
        s.deliver(&mut store).unwrap();
        // Rebuild the inner delivery the way the broker would see it.
        let inner = {
            let ss = s.current().unwrap();
            assert!(ss.data_key.is_some());
            let mut rng = ChaCha20Rng::seed_from_u64(3);
            hybrid_encrypt(
                &bs.public_key(),
                &encode(&Delivery { buyer_nonce: bs.nonce, address: ss.blob.unwrap(), data_key: SymmetricKey([0xAB; 32]) }),
                &Padding::default(),
                &mut rng,
            )
            .unwrap()
        };
        b.accept_delivery(inner.as_bytes(), 0).unwrap();
        match b.poll(0, &store).unwrap() {
            DeliveryOutcome::Scored { score, outgoing, error } => {
                assert_eq!(score, BAD_SCORE);
                assert!(outgoing.is_none(), "silent buyer must not score");
                assert_eq!(error, Some(AgentError::DecryptFailure));
            }
            other => panic!("{other:?}"),
        }
        assert!(b.is_idle());
    }

    #[test]
    fn delivery_with_wrong_buyer_nonce() {
        let (mut b, _) = buyer();
        b.start_trade(dd(10), 1).unwrap();
        b.sessions.last_mut().unwrap().state = BuyerState::Paid;
        let pk = b.current().unwrap().public_key();
        let c = hybrid_encrypt(
            &pk,
            &encode(&Delivery { buyer_nonce: Nonce([0; 16]), address: ContentAddress([0; 32]), data_key: SymmetricKey([0; 32]) }),
            &Padding::default(),
            &mut ChaCha20Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(b.accept_delivery(c.as_bytes(), 0), Err(AgentError::NonceMismatch));
    }

    #[test]
    fn scoring_rule_oracle() {
        let want = dd(10);
        let mk = |t, n| SensorData { sensor_type: t, readings: vec![1.0; n] };
        assert_eq!(score_data(&want, Some(&mk(SensorType::AirQuality, 10))), 100);
        assert_eq!(score_data(&want, Some(&mk(SensorType::AirQuality, 9))), 0);
        assert_eq!(score_data(&want, Some(&mk(SensorType::Traffic, 10))), 0);
        assert_eq!(score_data(&want, None), 0);
    }

    #[test]
    fn synthetic_data_is_plausible() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for t in SensorType::ALL {
            let r = synth_readings(t, 200, &mut rng);
            assert!(crate::ca::plausible(t, &r).is_ok());
        }
    }
}
