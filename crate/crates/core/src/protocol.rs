//! Data descriptions and the plaintext payloads carried inside the
//! protocol's encrypted messages.
//!
//! | message                 | sealed to  | fields                                  |
//! |-------------------------|------------|-----------------------------------------|
//! | sell request (step 1)   | broker     | DD, certificate, `ID_s`, `KU_seller`    |
//! | buy request (step 1)    | broker     | DD, `ID_b`, `KU_buyer`                  |
//! | invoice (step 4)        | buyer      | trade id, price, pay-to contract        |
//! | payment memo (step 7)   | broker     | trade id                                |
//! | match notice (step 8)   | seller     | `KU_buyer`, `ID_b`, `ID_s`              |
//! | delivery (step 11)      | buyer      | `ID_b`, storage address, `K_s`          |
//! | delivery envelope (11)  | broker     | `ID_s`, sealed delivery                 |
//! | score (step 16)         | broker     | `ID_b`, score                           |
//!
//! All payloads are bincode-encoded before sealing.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blobstore::ContentAddress;
use crate::ca::Certificate;
use crate::crypto::{Ciphertext, Nonce, PublicKey, SymmetricKey};
use crate::ledger::ContractAddr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorType {
    Temperature,
    Humidity,
    AirQuality,
    Traffic,
    Energy,
    Generic,
}

impl SensorType {
    pub const ALL: [SensorType; 6] = [
        SensorType::Temperature,
        SensorType::Humidity,
        SensorType::AirQuality,
        SensorType::Traffic,
        SensorType::Energy,
        SensorType::Generic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SensorType::Temperature => "temperature",
            SensorType::Humidity => "humidity",
            SensorType::AirQuality => "air_quality",
            SensorType::Traffic => "traffic",
            SensorType::Energy => "energy",
            SensorType::Generic => "generic",
        }
    }

    /// Plausible reading range, inclusive. Stands in for the issuers'
    /// data-authenticity checks.
    pub fn plausible_range(self) -> (f32, f32) {
        match self {
            SensorType::Temperature => (-40.0, 60.0),
            SensorType::Humidity => (0.0, 100.0),
            SensorType::AirQuality => (0.0, 500.0),
            SensorType::Traffic => (0.0, 10_000.0),
            SensorType::Energy => (0.0, 100_000.0),
            SensorType::Generic => (-1.0e6, 1.0e6),
        }
    }
}

impl fmt::Display for SensorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Opaque coarse location label (a hex-grid cell name, say). Never a
/// coordinate. Buyers may use [`RegionCell::WILDCARD`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegionCell(pub String);

impl RegionCell {
    pub const WILDCARD: &'static str = "*";

    pub fn new(label: impl Into<String>) -> Self {
        RegionCell(label.into())
    }

    pub fn wildcard() -> Self {
        RegionCell(Self::WILDCARD.to_string())
    }

    pub fn is_wildcard(&self) -> bool {
        self.0 == Self::WILDCARD
    }
}

impl fmt::Display for RegionCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Half-open epoch interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: u64,
    pub end: u64,
}

impl TimeWindow {
    pub fn overlaps(&self, other: &TimeWindow) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvalidDd {
    #[error("volume must be positive")]
    ZeroVolume,
    #[error("time window [{start}, {end}) is empty or inverted")]
    BadWindow { start: u64, end: u64 },
    #[error("region label is empty")]
    EmptyRegion,
}

/// Description of collected or required sensor data.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataDescription {
    pub sensor_type: SensorType,
    pub region: RegionCell,
    /// Data units: one unit is one sensor reading.
    pub volume: u64,
    pub time_window: TimeWindow,
}

impl DataDescription {
    pub fn validate(&self) -> Result<(), InvalidDd> {
        if self.volume == 0 {
            return Err(InvalidDd::ZeroVolume);
        }
        if self.time_window.start >= self.time_window.end {
            return Err(InvalidDd::BadWindow {
                start: self.time_window.start,
                end: self.time_window.end,
            });
        }
        if self.region.0.is_empty() {
            return Err(InvalidDd::EmptyRegion);
        }
        Ok(())
    }
}

/// Broker-assigned trade identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TradeId(pub u64);

impl fmt::Display for TradeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SellRequest {
    pub dd: DataDescription,
    pub cert: Certificate,
    pub seller_nonce: Nonce,
    pub seller_key: PublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuyRequest {
    pub dd: DataDescription,
    pub buyer_nonce: Nonce,
    pub buyer_key: PublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invoice {
    pub trade_id: TradeId,
    pub price: u64,
    pub pay_to: ContractAddr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchNotice {
    pub buyer_key: PublicKey,
    pub buyer_nonce: Nonce,
    pub seller_nonce: Nonce,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub buyer_nonce: Nonce,
    pub address: ContentAddress,
    pub data_key: SymmetricKey,
}

/// One buyer a seller may pick when seller choice is enabled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OfferOption {
    pub index: u32,
    pub dd: DataDescription,
    pub price: u64,
}

/// Everything the broker contract can receive, sealed to the broker key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BrokerMessage {
    Sell(SellRequest),
    Buy(BuyRequest),
    Payment { trade_id: TradeId },
    Delivery { seller_nonce: Nonce, sealed: Ciphertext },
    Score { buyer_nonce: Nonce, score: u8 },
    OfferReply { seller_nonce: Nonce, choice: Option<u32> },
}

/// Messages the broker seals to a seller's per-trade key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SellerMessage {
    Notice(MatchNotice),
    Offer { seller_nonce: Nonce, options: Vec<OfferOption> },
}

/// Instruction an agent sends off-ledger to its own contract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContractCall {
    /// Store the sealed payload and forward it on-ledger to `to`.
    Forward { to: ContractAddr, payload: Vec<u8> },
    /// Pay `amount` to `to` with an on-ledger request carrying `memo`.
    Pay {
        to: ContractAddr,
        amount: u64,
        memo: Vec<u8>,
    },
}

/// Header prepended to synthetic sensor data blobs.
pub const SENSOR_MAGIC: &[u8; 4] = b"SDAT";

/// Serialized sensor readings: magic, type tag, count, then little-endian
/// `f32` readings.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorData {
    pub sensor_type: SensorType,
    pub readings: Vec<f32>,
}

impl SensorData {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 4 * self.readings.len());
        out.extend_from_slice(SENSOR_MAGIC);
        out.push(self.sensor_type as u8);
        out.extend_from_slice(&(self.readings.len() as u64).to_le_bytes());
        for r in &self.readings {
            out.extend_from_slice(&r.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < 13 || &bytes[..4] != SENSOR_MAGIC {
            return None;
        }
        let sensor_type = *SensorType::ALL.get(bytes[4] as usize)?;
        let count = u64::from_le_bytes(bytes[5..13].try_into().ok()?) as usize;
        let body = &bytes[13..];
        if body.len() != count.checked_mul(4)? {
            return None;
        }
        let readings = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Some(SensorData {
            sensor_type,
            readings,
        })
    }
}

const DECODE_LIMIT: u64 = 16 << 20;

fn codec() -> impl bincode::Options {
    use bincode::Options;
    bincode::DefaultOptions::new()
        .with_fixint_encoding()
        .with_limit(DECODE_LIMIT)
}

/// Canonical byte encoding of a protocol payload.
pub fn encode<T: Serialize>(value: &T) -> Vec<u8> {
    use bincode::Options;
    codec().serialize(value).expect("protocol types always serialize")
}

/// Strict decode: trailing bytes and oversized lengths are rejected.
pub fn decode<'a, T: Deserialize<'a>>(bytes: &'a [u8]) -> Option<T> {
    use bincode::Options;
    codec().deserialize(bytes).ok()
}
