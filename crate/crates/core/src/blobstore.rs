//! Content-addressed blob storage, standing in for IPFS or Swarm as the
//! indirection layer between sellers and buyers.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BlobError {
    #[error("refusing to store an empty blob")]
    EmptyBlob,
    #[error("no blob stored at {0}")]
    NotFound(ContentAddress),
}

/// SHA-256 digest of a stored blob.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContentAddress(pub [u8; 32]);

impl ContentAddress {
    pub fn of(blob: &[u8]) -> Self {
        ContentAddress(Sha256::digest(blob).into())
    }
}

impl fmt::Display for ContentAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blob:{}", hex::encode(&self.0[..8]))
    }
}

impl fmt::Debug for ContentAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Append-only map from digest to blob. Blobs live for the whole run.
#[derive(Debug, Default, Clone)]
pub struct BlobStore {
    blobs: BTreeMap<ContentAddress, Vec<u8>>,
    /// Epochs between a `get` request and the data being available.
    latency: u64,
}

impl BlobStore {
    pub fn new(latency: u64) -> Self {
        BlobStore {
            blobs: BTreeMap::new(),
            latency,
        }
    }

    pub fn latency(&self) -> u64 {
        self.latency
    }

    pub fn put(&mut self, blob: &[u8]) -> Result<ContentAddress, BlobError> {
        if blob.is_empty() {
            return Err(BlobError::EmptyBlob);
        }
        let addr = ContentAddress::of(blob);
        self.blobs.entry(addr).or_insert_with(|| blob.to_vec());
        Ok(addr)
    }

    pub fn get(&self, addr: &ContentAddress) -> Result<&[u8], BlobError> {
        self.blobs
            .get(addr)
            .map(Vec::as_slice)
            .ok_or(BlobError::NotFound(*addr))
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ContentAddress, &[u8])> {
        self.blobs.iter().map(|(a, b)| (a, b.as_slice()))
    }
}
