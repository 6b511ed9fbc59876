//! Decentralized certificate authority.
//!
//! A set of certificate issuers (CIs) shares one seen-nonce registry. A
//! seller enrolls with a coarse location cell, its sensor type, a small
//! sample of readings and a fresh nonce; the CI range-checks the sample and
//! signs a certificate with an expiry. The broker trusts any key in a
//! configured issuer set.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{sign, verify, Nonce, Signature, SigningKey, VerifyingKey};
use crate::protocol::{encode, RegionCell, SensorType};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaError {
    #[error("sample reading {value} is outside the plausible {sensor_type} range")]
    ImplausibleSample { sensor_type: SensorType, value: f32 },
    #[error("enrollment sample is empty")]
    EmptySample,
    #[error("enrollment nonce was already used")]
    DuplicateNonce,
    #[error("validity must be at least one epoch")]
    InvalidValidity,
    #[error("no issuer with index {0}")]
    UnknownIssuer(usize),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum CertError {
    #[error("certificate signature invalid or issuer untrusted")]
    Invalid,
    #[error("certificate expired")]
    Expired,
    #[error("certificate nonce does not match")]
    NonceMismatch,
}

/// What a seller sends to a CI. Deliberately carries no identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollmentRequest {
    pub claimed_location: RegionCell,
    pub sensor_type: SensorType,
    pub sample_data: Vec<f32>,
    pub nonce: Nonce,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Certificate {
    pub location_cell: RegionCell,
    pub sensor_type: SensorType,
    pub issued_at: u64,
    pub expires_at: u64,
    pub seller_nonce: Nonce,
    pub issuer: VerifyingKey,
    pub issuer_sig: Signature,
}

#[derive(Serialize)]
struct SignedFields<'a> {
    location_cell: &'a RegionCell,
    sensor_type: SensorType,
    issued_at: u64,
    expires_at: u64,
    seller_nonce: &'a Nonce,
    issuer: &'a VerifyingKey,
}

impl Certificate {
    fn signed_bytes(&self) -> Vec<u8> {
        encode(&SignedFields {
            location_cell: &self.location_cell,
            sensor_type: self.sensor_type,
            issued_at: self.issued_at,
            expires_at: self.expires_at,
            seller_nonce: &self.seller_nonce,
            issuer: &self.issuer,
        })
    }

    pub fn is_expired(&self, now: u64) -> bool {
        now >= self.expires_at
    }
}

/// Range check standing in for the issuers' data-authenticity analysis.
pub fn plausible(sensor_type: SensorType, sample: &[f32]) -> Result<(), CaError> {
    if sample.is_empty() {
        return Err(CaError::EmptySample);
    }
    let (lo, hi) = sensor_type.plausible_range();
    match sample.iter().find(|v| !(lo..=hi).contains(*v)) {
        Some(&value) => Err(CaError::ImplausibleSample { sensor_type, value }),
        None => Ok(()),
    }
}

#[derive(Debug)]
pub struct CertificateAuthority {
    issuers: Vec<SigningKey>,
    seen_nonces: BTreeSet<Nonce>,
}

impl CertificateAuthority {
    pub fn new(issuers: Vec<SigningKey>) -> Self {
        CertificateAuthority {
            issuers,
            seen_nonces: BTreeSet::new(),
        }
    }

    pub fn from_seeds(seeds: &[u64]) -> Self {
        Self::new(seeds.iter().map(|&s| SigningKey::from_seed(s)).collect())
    }

    pub fn issuer_keys(&self) -> Vec<VerifyingKey> {
        self.issuers.iter().map(SigningKey::verifying_key).collect()
    }

    pub fn issuer_count(&self) -> usize {
        self.issuers.len()
    }

    pub fn issue_certificate(
        &mut self,
        issuer: usize,
        req: &EnrollmentRequest,
        now: u64,
        validity: u64,
    ) -> Result<Certificate, CaError> {
        let key = self.issuers.get(issuer).ok_or(CaError::UnknownIssuer(issuer))?;
        if validity == 0 {
            return Err(CaError::InvalidValidity);
        }
        plausible(req.sensor_type, &req.sample_data)?;
        if self.seen_nonces.contains(&req.nonce) {
            return Err(CaError::DuplicateNonce);
        }
        self.seen_nonces.insert(req.nonce);

        let mut cert = Certificate {
            location_cell: req.claimed_location.clone(),
            sensor_type: req.sensor_type,
            issued_at: now,
            expires_at: now + validity,
            seller_nonce: req.nonce,
            issuer: key.verifying_key(),
            issuer_sig: Signature([0; 64]),
        };
        cert.issuer_sig = sign(key, &cert.signed_bytes());
        Ok(cert)
    }
}

/// The set of issuer keys a verifier accepts.
#[derive(Debug, Clone, Default)]
pub struct TrustedIssuers {
    keys: BTreeSet<VerifyingKey>,
}

impl TrustedIssuers {
    pub fn new(keys: impl IntoIterator<Item = VerifyingKey>) -> Self {
        TrustedIssuers {
            keys: keys.into_iter().collect(),
        }
    }

    pub fn check(
        &self,
        cert: &Certificate,
        now: u64,
        expected_nonce: Option<&Nonce>,
    ) -> Result<(), CertError> {
        if !self.keys.contains(&cert.issuer)
            || !verify(&cert.issuer, &cert.signed_bytes(), &cert.issuer_sig)
            || cert.expires_at <= cert.issued_at
        {
            return Err(CertError::Invalid);
        }
        if cert.is_expired(now) {
            return Err(CertError::Expired);
        }
        if let Some(n) = expected_nonce {
            if *n != cert.seller_nonce {
                return Err(CertError::NonceMismatch);
            }
        }
        Ok(())
    }

    pub fn verify_certificate(&self, cert: &Certificate, now: u64, expected_nonce: Option<&Nonce>) -> bool {
        self.check(cert, now, expected_nonce).is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::decode;
    use proptest::prelude::*;

    fn enrollment(nonce: u8, sample: Vec<f32>) -> EnrollmentRequest {
        EnrollmentRequest {
            claimed_location: RegionCell::new("hx-1f"),
            sensor_type: SensorType::Temperature,
            sample_data: sample,
            nonce: Nonce([nonce; 16]),
        }
    }

    fn setup() -> (CertificateAuthority, TrustedIssuers) {
        let ca = CertificateAuthority::from_seeds(&[100, 101, 102]);
        let trusted = TrustedIssuers::new(ca.issuer_keys());
        (ca, trusted)
    }

    #[test]
    fn plausibility_oracle() {
        // Direct range check against the published table.
        let (lo, hi) = SensorType::Temperature.plausible_range();
        assert_eq!((lo, hi), (-40.0, 60.0));
        let sample = vec![-40.0, 0.0, 21.5, 60.0];
        assert!(sample.iter().all(|v| *v >= lo && *v <= hi));
        assert!(plausible(SensorType::Temperature, &sample).is_ok());
        assert!(plausible(SensorType::Temperature, &[f32::NAN]).is_err());
    }

    #[test]
    fn issue_and_verify() {
        let (mut ca, trusted) = setup();
        let cert = ca
            .issue_certificate(1, &enrollment(1, vec![-40.0, 12.0, 60.0]), 10, 50)
            .unwrap();
        assert_eq!(cert.expires_at, 60);
        assert_eq!(cert.seller_nonce, Nonce([1; 16]));
        assert!(trusted.verify_certificate(&cert, 10, None));
        assert!(trusted.verify_certificate(&cert, 59, Some(&Nonce([1; 16]))));
        assert_eq!(trusted.check(&cert, 60, None), Err(CertError::Expired));
        assert_eq!(
            trusted.check(&cert, 20, Some(&Nonce([2; 16]))),
            Err(CertError::NonceMismatch)
        );
    }

    #[test]
    fn implausible_sample_rejected() {
        let (mut ca, _) = setup();
        let err = ca
            .issue_certificate(0, &enrollment(1, vec![20.0, 5000.0]), 0, 10)
            .unwrap_err();
        assert!(matches!(err, CaError::ImplausibleSample { value, .. } if value == 5000.0));
        assert_eq!(
            ca.issue_certificate(0, &enrollment(1, vec![]), 0, 10),
            Err(CaError::EmptySample)
        );
    }

    #[test]
    fn nonce_replay_across_issuers() {
        let (mut ca, _) = setup();
        ca.issue_certificate(0, &enrollment(4, vec![1.0]), 0, 10).unwrap();
        assert_eq!(
            ca.issue_certificate(2, &enrollment(4, vec![1.0]), 0, 10),
            Err(CaError::DuplicateNonce)
        );
    }

    #[test]
    fn untrusted_issuer_and_mutated_signature() {
        let (mut ca, _) = setup();
        let cert = ca.issue_certificate(0, &enrollment(5, vec![1.0]), 0, 10).unwrap();
        let only_second = TrustedIssuers::new([ca.issuer_keys()[1]]);
        assert_eq!(only_second.check(&cert, 0, None), Err(CertError::Invalid));

        let trusted = TrustedIssuers::new(ca.issuer_keys());
        let mut forged = cert.clone();
        forged.issuer_sig.0[3] ^= 0x10;
        assert!(!trusted.verify_certificate(&forged, 0, None));
        let mut moved = cert;
        moved.location_cell = RegionCell::new("hx-20");
        assert!(!trusted.verify_certificate(&moved, 0, None));
    }

    #[test]
    fn zero_validity_rejected() {
        let (mut ca, _) = setup();
        assert_eq!(
            ca.issue_certificate(0, &enrollment(6, vec![1.0]), 0, 0),
            Err(CaError::InvalidValidity)
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn never_valid_after_expiry(now in 0u64..1000, validity in 1u64..500, later in 0u64..1000) {
            let (mut ca, trusted) = setup();
            let cert = ca.issue_certificate(0, &enrollment(7, vec![1.0]), now, validity).unwrap();
            let t = now + later;
            prop_assert_eq!(trusted.verify_certificate(&cert, t, None), t < now + validity);
        }

        #[test]
        fn any_bit_flip_invalidates(bit in any::<prop::sample::Index>()) {
            let (mut ca, trusted) = setup();
            let cert = ca.issue_certificate(0, &enrollment(8, vec![1.0]), 3, 100).unwrap();
            let mut bytes = encode(&cert);
            let i = bit.index(bytes.len() * 8);
            bytes[i / 8] ^= 1 << (i % 8);
            // A mutation may also stop it parsing as a certificate at all.
            if let Some(mutated) = decode::<Certificate>(&bytes) {
                prop_assert!(!trusted.verify_certificate(&mutated, 3, None));
            }
        }
    }
}
