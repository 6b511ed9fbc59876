//! Simulated L1 DAG ledger with L2 smart-contract chains on top.
//!
//! Time advances in epochs. Anything submitted during epoch `e` is
//! delivered at the start of epoch `e + 1`. At the end of every epoch each
//! chain turns its pending contract writes into a block of key/value
//! mutations and anchors a digest of its state on L1.
//!
//! L1 transactions are on-ledger requests, cross-chain transfers and
//! anchors. Off-ledger requests are wallet-to-chain API calls and never
//! touch L1. UTXOs are collapsed into per-contract account balances.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trace::{EventType, Provenance, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChainId(pub u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainKind {
    Permissionless,
    Consortium,
}

/// A smart contract: its chain plus a slot on that chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContractAddr {
    pub chain: ChainId,
    pub slot: u32,
}

impl fmt::Display for ContractAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.chain.0, self.slot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Seller,
    Buyer,
    Adversary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgentId {
    pub role: Role,
    pub index: u32,
}

impl AgentId {
    pub fn seller(index: u32) -> Self {
        AgentId {
            role: Role::Seller,
            index,
        }
    }

    pub fn buyer(index: u32) -> Self {
        AgentId {
            role: Role::Buyer,
            index,
        }
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let role = match self.role {
            Role::Seller => "seller",
            Role::Buyer => "buyer",
            Role::Adversary => "adversary",
        };
        write!(f, "{role}-{}", self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Agent(AgentId),
    Contract(ContractAddr),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteTag {
    /// A hybrid ciphertext sealed to some party's public key.
    SealedMessage,
    /// Contract state sealed under a validator-held symmetric key.
    SealedState,
    /// Counters and other non-sensitive bookkeeping.
    Bookkeeping,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mutation {
    pub key: Vec<u8>,
    pub value: Vec<u8>,
    pub tag: WriteTag,
}

/// An L2 block: height, epoch and key/value mutations. No transactions,
/// no senders or receivers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainBlock {
    pub height: u64,
    pub epoch: u64,
    pub mutations: Vec<Mutation>,
}

/// Digest of a chain's state posted to L1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorTx {
    pub chain: ChainId,
    pub state_commitment: [u8; 32],
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OnLedgerRequest {
    pub target: ContractAddr,
    pub payload: Vec<u8>,
    pub carried_assets: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffLedgerRequest {
    pub target: ContractAddr,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct L1TxId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Receipt {
    pub seq: u64,
    pub deliver_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    OffLedger,
    OnLedger,
    /// Contract to owner wallet.
    OwnerEvent,
    /// Funds arrived through a cross-chain transfer.
    Credit,
}

/// A message waiting in, or delivered from, the epoch queue.
#[derive(Debug, Clone)]
pub struct Message {
    pub seq: u64,
    pub from: Endpoint,
    pub to: Endpoint,
    pub payload: Vec<u8>,
    pub amount: u64,
    pub transport: Transport,
    pub submitted: u64,
    pub prov: Provenance,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("unknown chain {0:?}")]
    UnknownChain(ChainId),
    #[error("unknown contract {0}")]
    UnknownContract(ContractAddr),
    #[error("{account} holds {available}, needs {needed}")]
    InsufficientBalance {
        account: String,
        needed: u64,
        available: u64,
    },
    #[error("a scenario has exactly one consortium chain")]
    SecondConsortium,
    #[error("consortium validators overlap market participants")]
    ValidatorOverlap,
    #[error("token supply is sealed; minting is only allowed during setup")]
    SupplySealed,
    #[error("chain {0:?} has no block for the current epoch")]
    NoBlockThisEpoch(ChainId),
    #[error("chain {0:?} already anchored this epoch")]
    AlreadyAnchored(ChainId),
}

/// Flat gas amounts, in base token units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GasTariff {
    pub off_ledger: u64,
    pub on_ledger: u64,
}

impl Default for GasTariff {
    fn default() -> Self {
        GasTariff {
            off_ledger: 0,
            on_ledger: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerCounters {
    pub on_ledger_requests: u64,
    pub transfers: u64,
    pub anchors: u64,
    pub off_ledger_requests: u64,
}

impl LedgerCounters {
    pub fn l1_txs(&self) -> u64 {
        self.on_ledger_requests + self.transfers + self.anchors
    }
}

#[derive(Debug)]
struct Chain {
    name: String,
    kind: ChainKind,
    validators: Vec<String>,
    next_slot: u32,
    state: BTreeMap<Vec<u8>, Vec<u8>>,
    pending: BTreeMap<Vec<u8>, (Vec<u8>, WriteTag)>,
    blocks: Vec<ChainBlock>,
    last_anchor_epoch: Option<u64>,
}

#[derive(Debug, Clone)]
struct ContractInfo {
    owner: Option<AgentId>,
}

#[derive(Debug)]
pub struct Ledger {
    epoch: u64,
    tariff: GasTariff,
    chains: Vec<Chain>,
    contracts: BTreeMap<ContractAddr, ContractInfo>,
    accounts: BTreeMap<ContractAddr, u64>,
    minted: u64,
    sealed: bool,
    gas_sink: u64,
    counters: LedgerCounters,
    anchors: Vec<AnchorTx>,
    queue: VecDeque<Message>,
    next_msg: u64,
    trace: Vec<TraceEvent>,
}

impl Ledger {
    pub fn new(tariff: GasTariff) -> Self {
        Ledger {
            epoch: 0,
            tariff,
            chains: Vec::new(),
            contracts: BTreeMap::new(),
            accounts: BTreeMap::new(),
            minted: 0,
            sealed: false,
            gas_sink: 0,
            counters: LedgerCounters::default(),
            anchors: Vec::new(),
            queue: VecDeque::new(),
            next_msg: 0,
            trace: Vec::new(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn tariff(&self) -> GasTariff {
        self.tariff
    }

    pub fn add_chain(
        &mut self,
        name: &str,
        kind: ChainKind,
        validators: Vec<String>,
    ) -> Result<ChainId, LedgerError> {
        if kind == ChainKind::Consortium {
            if self.chains.iter().any(|c| c.kind == ChainKind::Consortium) {
                return Err(LedgerError::SecondConsortium);
            }
            let public: Vec<&String> = self
                .chains
                .iter()
                .flat_map(|c| c.validators.iter())
                .collect();
            if validators.iter().any(|v| public.contains(&v)) {
                return Err(LedgerError::ValidatorOverlap);
            }
        } else if let Some(consortium) = self.chains.iter().find(|c| c.kind == ChainKind::Consortium) {
            if validators.iter().any(|v| consortium.validators.contains(v)) {
                return Err(LedgerError::ValidatorOverlap);
            }
        }
        let id = ChainId(self.chains.len() as u16);
        self.chains.push(Chain {
            name: name.to_string(),
            kind,
            validators,
            next_slot: 0,
            state: BTreeMap::new(),
            pending: BTreeMap::new(),
            blocks: Vec::new(),
            last_anchor_epoch: None,
        });
        Ok(id)
    }

    fn chain(&self, id: ChainId) -> Result<&Chain, LedgerError> {
        self.chains.get(id.0 as usize).ok_or(LedgerError::UnknownChain(id))
    }

    fn chain_mut(&mut self, id: ChainId) -> Result<&mut Chain, LedgerError> {
        self.chains
            .get_mut(id.0 as usize)
            .ok_or(LedgerError::UnknownChain(id))
    }

    pub fn chain_ids(&self) -> impl Iterator<Item = ChainId> + '_ {
        (0..self.chains.len()).map(|i| ChainId(i as u16))
    }

    pub fn chain_name(&self, id: ChainId) -> &str {
        self.chains
            .get(id.0 as usize)
            .map_or("unknown", |c| c.name.as_str())
    }

    pub fn chain_kind(&self, id: ChainId) -> Option<ChainKind> {
        self.chains.get(id.0 as usize).map(|c| c.kind)
    }

    pub fn validators(&self, id: ChainId) -> &[String] {
        self.chains
            .get(id.0 as usize)
            .map_or(&[], |c| c.validators.as_slice())
    }

    pub fn deploy(&mut self, chain: ChainId, owner: Option<AgentId>) -> Result<ContractAddr, LedgerError> {
        let c = self.chain_mut(chain)?;
        let addr = ContractAddr {
            chain,
            slot: c.next_slot,
        };
        c.next_slot += 1;
        self.contracts.insert(addr, ContractInfo { owner });
        self.accounts.insert(addr, 0);
        Ok(addr)
    }

    pub fn owner(&self, addr: ContractAddr) -> Option<AgentId> {
        self.contracts.get(&addr).and_then(|c| c.owner)
    }

    fn ensure_contract(&self, addr: ContractAddr) -> Result<(), LedgerError> {
        self.chain(addr.chain)?;
        if self.contracts.contains_key(&addr) {
            Ok(())
        } else {
            Err(LedgerError::UnknownContract(addr))
        }
    }

    /// Human-readable label, `chain-name/slot` or `agent/seller-3`.
    pub fn label(&self, ep: Endpoint) -> String {
        match ep {
            Endpoint::Agent(a) => format!("agent/{a}"),
            Endpoint::Contract(c) => format!("{}/{}", self.chain_name(c.chain), c.slot),
        }
    }

    pub fn mint(&mut self, addr: ContractAddr, amount: u64) -> Result<(), LedgerError> {
        if self.sealed {
            return Err(LedgerError::SupplySealed);
        }
        self.ensure_contract(addr)?;
        *self.accounts.entry(addr).or_default() += amount;
        self.minted += amount;
        Ok(())
    }

    /// Ends scenario setup; after this the token supply is fixed.
    pub fn seal_supply(&mut self) {
        self.sealed = true;
    }

    pub fn balance(&self, addr: ContractAddr) -> u64 {
        self.accounts.get(&addr).copied().unwrap_or(0)
    }

    pub fn minted(&self) -> u64 {
        self.minted
    }

    pub fn gas_sink(&self) -> u64 {
        self.gas_sink
    }

    /// Sum of all balances plus burnt gas. Equals `minted()` at all times.
    pub fn total_supply(&self) -> u64 {
        self.accounts.values().sum::<u64>() + self.gas_sink
    }

    pub fn counters(&self) -> LedgerCounters {
        self.counters
    }

    pub fn l1_tx_count(&self) -> u64 {
        self.counters.l1_txs()
    }

    fn debit(&mut self, addr: ContractAddr, amount: u64) -> Result<(), LedgerError> {
        let available = self.balance(addr);
        if available < amount {
            return Err(LedgerError::InsufficientBalance {
                account: self.label(Endpoint::Contract(addr)),
                needed: amount,
                available,
            });
        }
        *self.accounts.get_mut(&addr).expect("checked contract") -= amount;
        Ok(())
    }

    fn credit(&mut self, addr: ContractAddr, amount: u64) {
        *self.accounts.entry(addr).or_default() += amount;
    }

    fn enqueue(
        &mut self,
        from: Endpoint,
        to: Endpoint,
        payload: Vec<u8>,
        amount: u64,
        transport: Transport,
        prov: &Provenance,
    ) -> Receipt {
        let seq = self.next_msg;
        self.next_msg += 1;
        self.queue.push_back(Message {
            seq,
            from,
            to,
            payload,
            amount,
            transport,
            submitted: self.epoch,
            prov: prov.clone(),
        });
        Receipt {
            seq,
            deliver_at: self.epoch + 1,
        }
    }

    /// Appends an event, stamping epoch and sequence number.
    pub fn record(&mut self, mut ev: TraceEvent) {
        ev.epoch = self.epoch;
        ev.seq = self.trace.len() as u64;
        self.trace.push(ev);
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    /// Wallet-to-chain API call. No L1 transaction; gas (if any) is charged
    /// to the target contract's account.
    pub fn submit_off_ledger(
        &mut self,
        from: AgentId,
        req: OffLedgerRequest,
        prov: &Provenance,
    ) -> Result<Receipt, LedgerError> {
        self.ensure_contract(req.target)?;
        let gas = self.tariff.off_ledger;
        self.debit(req.target, gas)?;
        self.gas_sink += gas;
        self.counters.off_ledger_requests += 1;
        let ev = TraceEvent::new(EventType::OffLedgerRequest)
            .chain(self.chain_name(req.target.chain))
            .from(self.label(Endpoint::Agent(from)))
            .to(self.label(Endpoint::Contract(req.target)))
            .payload_len(req.payload.len())
            .tagged(prov);
        self.record(TraceEvent { gas, ..ev });
        Ok(self.enqueue(
            Endpoint::Agent(from),
            Endpoint::Contract(req.target),
            req.payload,
            0,
            Transport::OffLedger,
            prov,
        ))
    }

    /// Contract call wrapped into an L1 transaction. Carried assets move
    /// atomically with the transaction; the payload arrives next epoch.
    pub fn submit_on_ledger(
        &mut self,
        from: ContractAddr,
        req: OnLedgerRequest,
        prov: &Provenance,
    ) -> Result<L1TxId, LedgerError> {
        self.ensure_contract(from)?;
        self.ensure_contract(req.target)?;
        let gas = self.tariff.on_ledger;
        self.debit(from, req.carried_assets + gas)?;
        self.credit(req.target, req.carried_assets);
        self.gas_sink += gas;
        self.counters.on_ledger_requests += 1;
        let tx = L1TxId(self.counters.l1_txs());
        let mut ev = TraceEvent::new(EventType::OnLedgerRequest)
            .chain(self.chain_name(req.target.chain))
            .from(self.label(Endpoint::Contract(from)))
            .to(self.label(Endpoint::Contract(req.target)))
            .payload_len(req.payload.len())
            .tagged(prov);
        ev.gas = gas;
        if req.carried_assets > 0 {
            ev.amount = Some(req.carried_assets);
        }
        self.record(ev);
        self.enqueue(
            Endpoint::Contract(from),
            Endpoint::Contract(req.target),
            req.payload,
            req.carried_assets,
            Transport::OnLedger,
            prov,
        );
        Ok(tx)
    }

    /// L1 asset transfer between contracts on any chains. A zero amount is
    /// still a transaction.
    pub fn cross_chain_transfer(
        &mut self,
        from: ContractAddr,
        to: ContractAddr,
        amount: u64,
        prov: &Provenance,
    ) -> Result<L1TxId, LedgerError> {
        self.ensure_contract(from)?;
        self.ensure_contract(to)?;
        let gas = self.tariff.on_ledger;
        self.debit(from, amount + gas)?;
        self.credit(to, amount);
        self.gas_sink += gas;
        self.counters.transfers += 1;
        let tx = L1TxId(self.counters.l1_txs());
        let mut ev = TraceEvent::new(EventType::CrossChainTransfer)
            .chain(self.chain_name(to.chain))
            .from(self.label(Endpoint::Contract(from)))
            .to(self.label(Endpoint::Contract(to)))
            .amount(amount)
            .tagged(prov);
        ev.gas = gas;
        self.record(ev);
        self.enqueue(
            Endpoint::Contract(from),
            Endpoint::Contract(to),
            Vec::new(),
            amount,
            Transport::Credit,
            prov,
        );
        Ok(tx)
    }

    /// A contract handing a message to its owner's wallet. Free, off L1.
    pub fn notify_owner(
        &mut self,
        contract: ContractAddr,
        payload: Vec<u8>,
        prov: &Provenance,
    ) -> Result<Receipt, LedgerError> {
        self.ensure_contract(contract)?;
        let owner = self
            .owner(contract)
            .ok_or(LedgerError::UnknownContract(contract))?;
        let ev = TraceEvent::new(EventType::ContractEvent)
            .chain(self.chain_name(contract.chain))
            .from(self.label(Endpoint::Contract(contract)))
            .to(self.label(Endpoint::Agent(owner)))
            .payload_len(payload.len())
            .tagged(prov);
        self.record(ev);
        Ok(self.enqueue(
            Endpoint::Contract(contract),
            Endpoint::Agent(owner),
            payload,
            0,
            Transport::OwnerEvent,
            prov,
        ))
    }

    /// Messages due for delivery this epoch, in submission order.
    pub fn take_deliverable(&mut self) -> Vec<Message> {
        let mut out = Vec::new();
        while self
            .queue
            .front()
            .is_some_and(|m| m.submitted < self.epoch)
        {
            out.push(self.queue.pop_front().expect("front checked"));
        }
        out
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }

    /// Stages a contract state write for the next block. Keys are scoped
    /// to the contract, so a contract can only touch its own state.
    pub fn write(
        &mut self,
        contract: ContractAddr,
        key: &[u8],
        value: Vec<u8>,
        tag: WriteTag,
    ) -> Result<(), LedgerError> {
        self.ensure_contract(contract)?;
        let full = scoped_key(contract, key);
        self.chain_mut(contract.chain)?
            .pending
            .insert(full, (value, tag));
        Ok(())
    }

    /// Committed state of the contract's own key.
    pub fn read(&self, contract: ContractAddr, key: &[u8]) -> Option<&[u8]> {
        let chain = self.chain(contract.chain).ok()?;
        chain
            .state
            .get(&scoped_key(contract, key))
            .map(Vec::as_slice)
    }

    pub fn produce_block(&mut self, chain: ChainId) -> Result<&ChainBlock, LedgerError> {
        let epoch = self.epoch;
        let c = self.chain_mut(chain)?;
        let pending = std::mem::take(&mut c.pending);
        let mut mutations = Vec::with_capacity(pending.len());
        for (key, (value, tag)) in pending {
            c.state.insert(key.clone(), value.clone());
            mutations.push(Mutation { key, value, tag });
        }
        let height = c.blocks.last().map_or(0, |b| b.height + 1);
        c.blocks.push(ChainBlock {
            height,
            epoch,
            mutations,
        });
        Ok(c.blocks.last().expect("just pushed"))
    }

    pub fn anchor_chain(&mut self, chain: ChainId) -> Result<AnchorTx, LedgerError> {
        let epoch = self.epoch;
        let c = self.chain(chain)?;
        if c.blocks.last().map(|b| b.epoch) != Some(epoch) {
            return Err(LedgerError::NoBlockThisEpoch(chain));
        }
        if c.last_anchor_epoch == Some(epoch) {
            return Err(LedgerError::AlreadyAnchored(chain));
        }
        let height = c.blocks.last().map_or(0, |b| b.height);
        let anchor = AnchorTx {
            chain,
            state_commitment: state_commitment(chain, height, &c.state),
            epoch,
        };
        let name = c.name.clone();
        self.chain_mut(chain)?.last_anchor_epoch = Some(epoch);
        self.anchors.push(anchor.clone());
        self.counters.anchors += 1;
        self.record(TraceEvent::new(EventType::Anchor).chain(name).payload_len(32));
        Ok(anchor)
    }

    /// Closes the current epoch: one block and one anchor per chain.
    pub fn end_epoch(&mut self) -> Result<(), LedgerError> {
        let ids: Vec<ChainId> = self.chain_ids().collect();
        for id in &ids {
            self.produce_block(*id)?;
        }
        for id in ids {
            self.anchor_chain(id)?;
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn blocks(&self, chain: ChainId) -> &[ChainBlock] {
        self.chain(chain).map_or(&[], |c| c.blocks.as_slice())
    }

    pub fn anchors(&self) -> &[AnchorTx] {
        &self.anchors
    }

    /// What an outsider querying a chain's validators gets back: the
    /// anchored commitments, never the mutations.
    pub fn query_validators(&self, chain: ChainId) -> Vec<AnchorTx> {
        self.anchors
            .iter()
            .filter(|a| a.chain == chain)
            .cloned()
            .collect()
    }
}

/// Key under which `contract`'s state entry `key` is stored on its chain.
pub fn scoped_key(contract: ContractAddr, key: &[u8]) -> Vec<u8> {
    let mut full = format!("{}:", contract.slot).into_bytes();
    full.extend_from_slice(key);
    full
}

fn state_commitment(chain: ChainId, height: u64, state: &BTreeMap<Vec<u8>, Vec<u8>>) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"datamarket/anchor/v1");
    h.update(chain.0.to_be_bytes());
    h.update(height.to_be_bytes());
    for (k, v) in state {
        h.update((k.len() as u64).to_be_bytes());
        h.update(k);
        h.update((v.len() as u64).to_be_bytes());
        h.update(v);
    }
    h.finalize().into()
}
